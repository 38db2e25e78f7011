//! Acceptance suite. Prints one PASS/FAIL line per criterion. Failures are
//! fatal (nonzero exit) only with `ACCEPTANCE_STRICT=1`, so a known
//! failing criterion does not hide the rest of `cargo test`. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test -p unlearn-lab --test acceptance -- 2 3`.
//!
//! Trained base/target models are cached on disk (keyed by a hash of the
//! seed plan) under `$ACCEPTANCE_CACHE`, or `acceptance/` in cargo's
//! per-target temp dir. Delete the cache for a cold run.

use std::any::Any;
use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use unlearn_lab::analysis::{
    analyze, average_ranks, cka, cka_profile, coreset_select, forgetting_scores, ppr, spearman, trajectory,
};
use unlearn_lab::attack::{evaluate, p1_direct, p3_finetune, AttackConfig, RecoveryReport};
use unlearn_lab::corpus::{examples, Corpus, CorpusSplit, QaPair, RelationalGraph};
use unlearn_lab::lm::{example_nll_on_tape, LmModel};
use unlearn_lab::pipeline::{build_corpus, split_for, train_models, utility_set, ExperimentConfig, SeedPlan};
use unlearn_lab::tensor::{finite_diff_coords, ParamStore, Tape, Tensor};
use unlearn_lab::unlearn::{
    dpo_unlearn_loss, klr_value, npo_loss, rau_anchor, relabel, run_unlearn, task_vector_edit, whp_distribution,
    MethodSpec, RelabelStrategy, UnlearnOutput,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

// ---------------------------------------------------------------------------
// shared state

type Memo = Mutex<HashMap<String, Arc<dyn Any + Send + Sync>>>;

fn memo<T: Send + Sync + 'static>(key: &str, make: impl FnOnce() -> T) -> Arc<T> {
    static MEMO: OnceLock<Memo> = OnceLock::new();
    let m = MEMO.get_or_init(Default::default);
    if let Some(v) = m.lock().unwrap().get(key) {
        return v.clone().downcast::<T>().expect("memo type");
    }
    // computed outside the lock so `make` may itself memoize
    let v = Arc::new(make());
    m.lock().unwrap().insert(key.to_string(), v.clone());
    v
}

fn cache_root() -> PathBuf {
    std::env::var_os("ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    train_secs: f64,
}

struct Desk {
    cfg: ExperimentConfig,
    plan: SeedPlan,
    corpus: Corpus,
    split: CorpusSplit,
    base: LmModel,
    target: LmModel,
    train_secs: f64,
    cached: bool,
}

impl Desk {
    fn u1_set(&self) -> Vec<QaPair> {
        utility_set(&self.split.retain)
    }

    fn spec(&self, name: &str) -> MethodSpec {
        let m = self.cfg.method(name).unwrap_or_else(|e| panic!("{e}"));
        self.cfg.method_for_seed(m, self.plan.seed)
    }

    fn split_at(&self, kf: f64) -> CorpusSplit {
        let plan = SeedPlan { known_fraction: kf, ..self.plan.clone() };
        split_for(&plan, &self.corpus).unwrap()
    }
}

fn l8_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.n_layers = 8;
    cfg
}

fn desk_cfg(layers: usize) -> ExperimentConfig {
    match layers {
        4 => ExperimentConfig::default(),
        8 => l8_config(),
        _ => unreachable!(),
    }
}

/// Corpus, split and trained models of one seed, trained at most once per
/// cache directory.
fn desk(layers: usize, seed: u64) -> Arc<Desk> {
    memo(&format!("desk/{layers}/{seed}"), || {
        let cfg = desk_cfg(layers);
        let plan = cfg.plan(seed);
        let corpus = build_corpus(&plan).unwrap();
        let split = split_for(&plan, &corpus).unwrap();
        let key = {
            let stages = (&plan.corpus, &plan.model, &plan.base_train, &plan.target_train);
            hex::encode(Sha256::digest(serde_json::to_vec(&stages).unwrap()))
        };
        let dir = cache_root().join(&key[..16]);
        let (bp, tp, mp) = (dir.join("base.ckpt"), dir.join("target.ckpt"), dir.join("meta.json"));
        if let (Ok(base), Ok(target), Ok(meta)) = (LmModel::load(&bp), LmModel::load(&tp), fs::read(&mp)) {
            let meta: TrainMeta = serde_json::from_slice(&meta).unwrap();
            eprintln!("  [L={layers} seed {seed}] cached models from {}", dir.display());
            return Desk { cfg, plan, corpus, split, base, target, train_secs: meta.train_secs, cached: true };
        }
        eprintln!("  [L={layers} seed {seed}] training base and target models");
        let t = Instant::now();
        let m = train_models(&plan, &corpus).unwrap();
        let train_secs = t.elapsed().as_secs_f64();
        eprintln!("  [L={layers} seed {seed}] trained in {train_secs:.0}s");
        fs::create_dir_all(&dir).unwrap();
        m.base.save(&bp).unwrap();
        m.target.save(&tp).unwrap();
        fs::write(&mp, serde_json::to_vec(&TrainMeta { train_secs }).unwrap()).unwrap();
        Desk { cfg, plan, corpus, split, base: m.base, target: m.target, train_secs, cached: false }
    })
}

/// Unlearning run of a configured method on the known set at `kf`.
fn unlearned(layers: usize, seed: u64, kf: f64, name: &str) -> Arc<UnlearnOutput> {
    memo(&format!("unlearn/{layers}/{seed}/{kf}/{name}"), || {
        let d = desk(layers, seed);
        let split = d.split_at(kf);
        run_unlearn(&d.target, &d.spec(name), &split.known, &split.retain, Some(&d.base)).unwrap()
    })
}

fn with_spec(layers: usize, seed: u64, key: &str, spec: MethodSpec, known: &[QaPair]) -> Arc<UnlearnOutput> {
    memo(&format!("unlearn/{layers}/{seed}/{key}"), || {
        let d = desk(layers, seed);
        run_unlearn(&d.target, &spec, known, &d.split.retain, Some(&d.base)).unwrap()
    })
}

fn report(seed: u64, name: &str) -> Arc<RecoveryReport> {
    memo(&format!("report/{seed}/{name}"), || {
        let d = desk(4, seed);
        let out = unlearned(4, seed, d.plan.known_fraction, name);
        evaluate(name, &out.model, &d.split, &d.u1_set(), &d.plan.attack).unwrap()
    })
}

const SEEDS: [u64; 3] = [0, 1, 2];

// ---------------------------------------------------------------------------
// 1: gradients

/// Relative error `|a − f| / max(|a|, |f|, FLOOR)`. The floor keeps
/// coordinates whose true partial is at the level of finite-difference
/// roundoff (about 1e-9 here) from dominating the maximum.
const REL_FLOOR: f64 = 1e-4;

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::default();
    let plan = cfg.plan(0);
    let model = LmModel::init(&plan.model).unwrap();
    let corpus = build_corpus(&plan).unwrap();
    let batch = examples(&[corpus.forget[0].clone(), corpus.retain[0].clone()]);
    let ps: ParamStore<f64> = model.params().cast();
    let n = ps.numel();
    if n > 1_000_000 {
        return Err(format!("desk model has {n} parameters"));
    }
    let loss = |p: &ParamStore<f64>, track: bool| {
        let mut tape = Tape::with_params(p, track);
        let mut terms = Vec::new();
        for ex in &batch {
            terms.push(example_nll_on_tape(&mut tape, model.config(), model.layout(), ex).unwrap().0);
        }
        let total = tape.add(terms[0], terms[1]);
        let v = tape.scalar(total);
        (v, track.then(|| tape.param_grads(&tape.backward(total).unwrap())))
    };
    let grad = loss(&ps, true).1.unwrap();
    let g = grad.values();
    // per tensor: five random coordinates plus the largest partial
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut coords = Vec::new();
    for i in 0..ps.num_tensors() {
        let (off, len) = (ps.offset(i), ps.tensor(i).len());
        coords.extend((0..5).map(|_| off + rng.gen_range(0..len)));
        let top = (off..off + len).max_by(|a, b| g[*a].abs().total_cmp(&g[*b].abs())).unwrap();
        coords.push(top);
    }
    coords.sort_unstable();
    coords.dedup();
    let fd = finite_diff_coords(|p| loss(p, false).0, &ps, 1e-5, &coords);
    let (mut worst, mut at) = (0.0f64, 0);
    for (c, f) in coords.iter().zip(&fd) {
        let a = g[*c];
        let e = (a - f).abs() / a.abs().max(f.abs()).max(REL_FLOOR);
        if e > worst || e.is_nan() {
            worst = e;
            at = *c;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-4 && secs < 300.0,
        format!("{} params, {} coords over {} tensors, max rel err {worst:.2e} at {at}, {secs:.1}s", n, coords.len(), ps.num_tensors()),
    )
}

// ---------------------------------------------------------------------------
// 2: oracles

type Edge = (usize, usize, f64);

/// Dense PPR: iterate `x ← (1−d)·r + d·Pᵀx` with an explicit transition
/// matrix whose dangling rows are the restart vector.
fn ppr_dense(n: usize, edges: &[Edge], pers: &[usize], d: f64) -> Vec<f64> {
    let mut w = vec![vec![0.0; n]; n];
    for &(a, b, x) in edges {
        w[a][b] += x;
        w[b][a] += x;
    }
    let mut r = vec![0.0; n];
    for &p in pers {
        r[p] = 1.0;
    }
    let z: f64 = r.iter().sum();
    r.iter_mut().for_each(|v| *v /= z);
    let p: Vec<Vec<f64>> = w
        .iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                r.clone()
            } else {
                row.iter().map(|v| v / s).collect()
            }
        })
        .collect();
    let mut x = r.clone();
    for _ in 0..1_000_000 {
        let next: Vec<f64> = (0..n).map(|j| (1.0 - d) * r[j] + d * (0..n).map(|i| p[i][j] * x[i]).sum::<f64>()).collect();
        let delta: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    x
}

fn hsic_cka(x: &[f64], y: &[f64], n: usize, p: usize, q: usize) -> f64 {
    let gram = |m: &[f64], k: usize| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| (0..k).map(|c| m[i * k + c] * m[j * k + c]).sum()).collect()).collect()
    };
    let center = |g: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let h = |i: usize, j: usize| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
        let hg: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| h(i, k) * g[k][j]).sum()).collect()).collect();
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| hg[i][k] * h(k, j)).sum()).collect()).collect()
    };
    let hsic = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 { (0..n).map(|i| (0..n).map(|j| a[i][j] * b[i][j]).sum::<f64>()).sum() };
    let k = center(gram(x, p));
    let l = center(gram(y, q));
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Rank as 1 + #smaller + (#equal − 1)/2.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let lt = x.iter().filter(|u| *u < v).count() as f64;
            let eq = x.iter().filter(|u| *u == v).count() as f64;
            1.0 + lt + (eq - 1.0) / 2.0
        })
        .collect()
}

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn c2_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut graphs: Vec<(usize, Vec<Edge>)> = Vec::new();
    // every edge subset on up to 5 nodes, then random graphs on 6..=8
    for n in 1..=5usize {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        for mask in 0u32..(1 << pairs.len()) {
            let e = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &(a, b))| (a, b, rng.gen_range(0.1..3.0)))
                .collect();
            graphs.push((n, e));
        }
    }
    for _ in 0..600 {
        let n = rng.gen_range(6..=8);
        let density = rng.gen_range(0.0..0.8);
        let mut e = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.gen_bool(density) {
                    e.push((a, b, rng.gen_range(0.1..3.0)));
                }
            }
        }
        graphs.push((n, e));
    }
    let mut ppr_err = 0.0f64;
    let mut ppr_cases = 0;
    for (n, edges) in &graphs {
        let g = RelationalGraph::new((0..*n).map(|i| format!("n{i}")).collect(), edges.clone()).unwrap();
        let k = rng.gen_range(1..=*n);
        let mut pers: Vec<usize> = (0..*n).collect();
        pers.shuffle(&mut rng);
        pers.truncate(k);
        for d in [0.5, 0.85] {
            let got = ppr(&g, &pers, d, 1e-14).unwrap();
            let want = ppr_dense(*n, edges, &pers, d);
            for (a, b) in got.iter().zip(&want) {
                ppr_err = ppr_err.max((a - b).abs());
            }
            ppr_cases += 1;
        }
    }

    let mut cka_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(3..=16);
        let (p, q) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let x: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut y: Vec<f64> = (0..n * q).map(|_| rng.gen_range(-2.0..2.0)).collect();
        if rng.gen_bool(0.3) && q >= p {
            // partially aligned pairs push CKA away from its null value
            for i in 0..n {
                for c in 0..p {
                    y[i * q + c] += 3.0 * x[i * p + c];
                }
            }
        }
        let got = cka(&Tensor::new(vec![n, p], x.clone()).unwrap(), &Tensor::new(vec![n, q], y.clone()).unwrap()).unwrap();
        cka_err = cka_err.max((got - hsic_cka(&x, &y, n, p, q)).abs());
    }

    let mut rank_mismatch = 0;
    let mut rho_err = 0.0f64;
    for i in 0..200 {
        let n = rng.gen_range(3..=30);
        // half the vectors draw from a few levels so ties are common
        let draw = |rng: &mut ChaCha8Rng| if i % 2 == 0 { rng.gen_range(-1.0..1.0) } else { rng.gen_range(0..4) as f64 };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let (rx, ry) = (brute_ranks(&x), brute_ranks(&y));
        if average_ranks(&x) != rx || average_ranks(&y) != ry {
            rank_mismatch += 1;
        }
        let want = brute_pearson(&rx, &ry);
        match spearman(&x, &y) {
            Ok(r) => rho_err = rho_err.max((r - want).abs()),
            // constant rank vectors: the oracle is NaN as well
            Err(_) if want.is_nan() => {}
            Err(e) => return Err(format!("spearman failed on a non-degenerate vector: {e}")),
        }
    }
    check(
        ppr_err <= 1e-8 && cka_err <= 1e-10 && rank_mismatch == 0 && rho_err <= 1e-12,
        format!(
            "PPR max err {ppr_err:.1e} over {ppr_cases} cases on {} graphs; CKA max err {cka_err:.1e} on 200 pairs; \
             ranks mismatched on {rank_mismatch}/200, rho max err {rho_err:.1e}",
            graphs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3: method identities

fn next_token_probs(model: &LmModel, ctx: &[u32]) -> Vec<f64> {
    let out = model.forward(ctx).unwrap();
    let v = model.config().vocab_size;
    let row: Vec<f64> = out.logits.values()[(ctx.len() - 1) * v..ctx.len() * v].iter().map(|z| *z as f64).collect();
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row.iter().map(|x| (x - m).exp() / z).collect()
}

fn c3_identities() -> Outcome {
    let d = desk(4, 0);
    let known = &d.split.known;
    let batch = examples(&known[..8]);
    let beta = d.spec("NPO").hyper.beta;
    let mut fails: Vec<String> = Vec::new();
    let mut notes: Vec<String> = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64, tol: f64, fails: &mut Vec<String>| {
        let e = (got - want).abs();
        notes.push(format!("{name} err {e:.1e}"));
        if e.is_nan() || e > tol {
            fails.push(format!("{name}: {got} vs {want}"));
        }
    };

    expect("NPO", npo_loss(&d.target, &d.target, &batch, beta).unwrap(), 2.0 / beta * 2f64.ln(), 1e-6, &mut fails);
    let idk = examples(&relabel(RelabelStrategy::IDK, &known[..8], 0).unwrap());
    let pairs: Vec<_> = idk.into_iter().zip(batch.iter().cloned()).collect();
    expect("DPO", dpo_unlearn_loss(&d.target, &d.target, &pairs, beta).unwrap(), 2f64.ln(), 1e-6, &mut fails);

    let tv = task_vector_edit(&d.target, &d.base, 0.0).unwrap();
    let tv_bits = tv.params().flatten().iter().zip(d.target.params().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !tv_bits {
        fails.push("task vector λ=0 changed parameters".into());
    }

    let mut tv_max = 0.0f64;
    for q in known.iter().take(10) {
        let ex = q.example();
        for end in ex.target_start..ex.tokens.len() {
            let pt = next_token_probs(&d.target, &ex.tokens[..end]);
            let pr = next_token_probs(&d.base, &ex.tokens[..end]);
            let (pw, _) = whp_distribution(&pt, &pr, 0.0);
            tv_max = tv_max.max(0.5 * pw.iter().zip(&pt).map(|(a, b)| (a - b).abs()).sum::<f64>());
        }
    }
    expect("WHP TV", tv_max, 0.0, 1e-6, &mut fails);

    let l0 = d.spec("RAU").hyper.rau_start_layer;
    let w = vec![1.0; d.base.num_layers() + 1 - l0];
    expect("RAU anchor", rau_anchor(&d.base, &d.base, &batch, l0, &w).unwrap(), 0.0, 1e-6, &mut fails);
    expect("KLR", klr_value(&d.target, &d.target, &examples(&d.split.retain[..8])).unwrap(), 0.0, 1e-6, &mut fails);

    let forget = d.split.forget();
    let att0 = AttackConfig { ft_epochs: 0, ..d.plan.attack.clone() };
    let p3 = p3_finetune(&d.target, &forget, &d.split, &att0).unwrap().including;
    let p1 = p1_direct(&d.target, &forget, att0.max_new_tokens).unwrap();
    if p3 != p1 {
        fails.push(format!("p3(epochs=0) {p3} != p1 {p1}"));
    }
    notes.push(format!("task vector bit-identical {tv_bits}, p3(0) {p3} = p1 {p1}"));
    if fails.is_empty() {
        Ok(notes.join(", "))
    } else {
        Err(fails.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 4..10: desk pipeline

fn c4_memorization() -> Outcome {
    let mut ok = true;
    let mut rows = Vec::new();
    for s in SEEDS {
        let d = desk(4, s);
        let forget = d.split.forget();
        let m = d.plan.attack.max_new_tokens;
        let (pt, pb) = (p1_direct(&d.target, &forget, m).unwrap(), p1_direct(&d.base, &forget, m).unwrap());
        ok &= pt >= 0.9 && pb <= 0.02 && d.train_secs <= 1800.0;
        rows.push(format!(
            "seed {s}: target {} retrain {} train {:.0}s{}",
            pct(pt),
            pct(pb),
            d.train_secs,
            if d.cached { " (cached)" } else { "" }
        ));
    }
    check(ok, rows.join("; "))
}

fn c5_shallow_gap() -> Outcome {
    let ga: Vec<_> = SEEDS.iter().map(|s| report(*s, "GA")).collect();
    let rmu: Vec<_> = SEEDS.iter().map(|s| report(*s, "RMU")).collect();
    let avg = |rs: &[Arc<RecoveryReport>], f: fn(&RecoveryReport) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
    let (k, u) = (avg(&ga, |r| r.p1_known), avg(&ga, |r| r.p1_unknown));
    let (gg, gr) = (avg(&ga, RecoveryReport::depth_gap), avg(&rmu, RecoveryReport::depth_gap));
    let d = desk(4, 0);
    let att = &d.plan.attack;
    check(
        k <= 0.05 && u <= 0.05 && gg >= 0.25 && gr < gg,
        format!(
            "GA P1 known {} unknown {}, P3 {} / {}, gap {:.1} pts; RMU gap {:.1} pts (|D|={}, {} epochs)",
            pct(k),
            pct(u),
            pct(avg(&ga, |r| r.p3_known)),
            pct(avg(&ga, |r| r.p3_unknown)),
            100.0 * gg,
            100.0 * gr,
            att.ft_size,
            att.ft_epochs
        ),
    )
}

fn c6_ripple() -> Outcome {
    let mut ok = true;
    let mut rows = Vec::new();
    for name in ["GA", "NPO"] {
        for kf in [0.2, 0.5] {
            let mut diffs = Vec::new();
            for s in SEEDS {
                let d = desk(4, s);
                let split = d.split_at(kf);
                let out = unlearned(4, s, kf, name);
                let m = d.plan.attack.max_new_tokens;
                let k = p1_direct(&out.model, &split.known, m).unwrap();
                let u = p1_direct(&out.model, &split.unknown, m).unwrap();
                diffs.push((k, u));
            }
            let (k, u) = (mean(&diffs.iter().map(|x| x.0).collect::<Vec<_>>()), mean(&diffs.iter().map(|x| x.1).collect::<Vec<_>>()));
            ok &= (k - u).abs() <= 0.05;
            rows.push(format!("{name}@{kf}: P1 known {} unknown {}", pct(k), pct(u)));
        }
    }
    check(ok, rows.join("; "))
}

fn c7_associations() -> Outcome {
    let mut g = Vec::new();
    let mut r = Vec::new();
    let mut gr = Vec::new();
    for s in SEEDS {
        let d = desk(4, s);
        let out = unlearned(4, s, d.plan.known_fraction, "GA");
        let mask = d.cfg.grad_mask_from_layer.map(|l| unlearn_lab::unlearn::layers_from_mask(d.target.params(), l));
        let path = trajectory(&d.target, &out);
        let b = analyze("GA", &d.target, &out.model, &path, &d.split, &d.corpus.graph, mask.as_ref()).unwrap();
        g.push(b.grad_vs_fs.pearson);
        r.push(b.repr_last_vs_fs.pearson);
        // constant graph scores carry no association at all
        gr.push(b.graph_vs_fs.map_or(0.0, |c| c.pearson));
    }
    let (g, r, gr) = (mean(&g), mean(&r), mean(&gr));
    check(
        g >= 0.3 && (-0.2..=0.2).contains(&gr) && gr < r && r < g,
        format!("Pearson vs FS: grad {g:+.3}, repr@last {r:+.3}, graph {gr:+.3}"),
    )
}

fn c8_coreset() -> Outcome {
    let mut core = (Vec::new(), Vec::new());
    let mut rand = (Vec::new(), Vec::new());
    for s in SEEDS {
        let d = desk(4, s);
        let forget = d.split.forget();
        let mask = d.cfg.grad_mask_from_layer.map(|l| unlearn_lab::unlearn::layers_from_mask(d.target.params(), l));
        let cs = coreset_select(&d.target, &forget, d.cfg.coreset_percent, mask.as_ref()).unwrap();
        let chosen: Vec<QaPair> = forget.iter().filter(|q| cs.ids.contains(&q.id)).cloned().collect();
        let mut shuffled = forget.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(0xc0de ^ s));
        let random = shuffled[..chosen.len()].to_vec();
        let spec = d.spec("GA");
        for (key, subset, acc) in [("coreset", chosen, &mut core), ("random", random, &mut rand)] {
            let out = with_spec(4, s, &format!("GA-{key}"), spec.clone(), &subset);
            let p3 = p3_finetune(&out.model, &forget, &d.split, &d.plan.attack).unwrap().excluding;
            let fs = forgetting_scores(&d.target, &out.model, &forget).unwrap();
            acc.0.push(p3);
            acc.1.push(mean(&fs.iter().map(|f| f.fs).collect::<Vec<_>>()));
        }
    }
    let (cp, cf, rp, rf) = (mean(&core.0), mean(&core.1), mean(&rand.0), mean(&rand.1));
    check(
        cp <= rp + 0.05 && cf > rf,
        format!("core-set P3 {} mean FS {cf:.2}; random P3 {} mean FS {rf:.2}", pct(cp), pct(rp)),
    )
}

fn c9_rau_depth() -> Outcome {
    let cfg = l8_config();
    let l = cfg.model.n_layers;
    let depths = [2, l / 2 + 1, l];
    let mut p3 = vec![Vec::new(); depths.len()];
    let mut u1 = vec![Vec::new(); depths.len()];
    let mut u1_target = Vec::new();
    for s in SEEDS {
        let d = desk(8, s);
        let u1_set = d.u1_set();
        let att = &d.plan.attack;
        u1_target.push(unlearn_lab::attack::u1_utility(&d.target, &u1_set, att.max_new_tokens).unwrap());
        for (i, l0) in depths.iter().enumerate() {
            let mut spec = d.spec("RAU");
            spec.hyper.rau_start_layer = *l0;
            let out = with_spec(8, s, &format!("RAU-l{l0}"), spec, &d.split.known);
            let r = evaluate("RAU", &out.model, &d.split, &u1_set, att).unwrap();
            p3[i].push((r.p3_known + r.p3_unknown) / 2.0);
            u1[i].push(r.u1_rouge);
        }
    }
    let p3: Vec<f64> = p3.iter().map(|v| mean(v)).collect();
    let u1: Vec<f64> = u1.iter().map(|v| mean(v)).collect();
    let ut = mean(&u1_target);
    let rel = (u1[1] - ut).abs() / ut;
    let rows: Vec<String> = depths.iter().enumerate().map(|(i, l0)| format!("l0={l0}: P3 {} U1 {:.1}", pct(p3[i]), u1[i])).collect();
    check(
        p3[1] < p3[0] && p3[1] < p3[2] && rel <= 0.2,
        format!("{}; target U1 {ut:.1} (l0={} off by {:.1}%)", rows.join(", "), depths[1], 100.0 * rel),
    )
}

fn c10_cka() -> Outcome {
    let mut ok = true;
    let mut rows = Vec::new();
    for s in SEEDS {
        let d = desk(4, s);
        let probe: Vec<Vec<u32>> = d.split.forget().iter().map(|q| q.example().tokens).collect();
        let top = (0.75 * d.target.num_layers() as f64).ceil() as usize;
        let mut parts = Vec::new();
        for name in ["RL", "IDK"] {
            let out = unlearned(4, s, d.plan.known_fraction, name);
            let c = cka_profile(&d.target, &out.model, &probe).unwrap();
            let low = c[..=top].iter().cloned().fold(f64::MAX, f64::min);
            ok &= low >= 0.95;
            parts.push(format!("{name} min CKA on 0..={top} {low:.4}"));
        }
        let out = unlearned(4, s, d.plan.known_fraction, "RMU");
        let c = cka_profile(&d.target, &out.model, &probe).unwrap();
        let argmin = (0..c.len()).min_by(|a, b| c[*a].total_cmp(&c[*b])).unwrap();
        let layer = d.spec("RMU").hyper.rmu_layer;
        ok &= argmin >= layer;
        parts.push(format!("RMU argmin {argmin} (layer {layer}, CKA {:.4})", c[argmin]));
        rows.push(format!("seed {s}: {}", parts.join(", ")));
    }
    check(ok, rows.join("; "))
}

// ---------------------------------------------------------------------------

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient correctness", c1_gradients),
    (2, "oracle equivalence", c2_oracles),
    (3, "method identities", c3_identities),
    (4, "memorization precondition", c4_memorization),
    (5, "shallow-forgetting gap", c5_shallow_gap),
    (6, "ripple effect", c6_ripple),
    (7, "association ordering", c7_associations),
    (8, "core-set effectiveness", c8_coreset),
    (9, "RAU depth sweep", c9_rau_depth),
    (10, "CKA localization", c10_cka),
];

fn main() {
    // libtest flags such as --nocapture may be forwarded; only numbers select
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let start = Instant::now();
    let mut failed = 0;
    println!("acceptance: cache at {}", cache_root().display());
    for (n, name, run) in CRITERIA {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS criterion {n} ({name}): {d} [{secs:.0}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d} [{secs:.0}s]");
            }
        }
    }
    println!("acceptance: {failed} failed, total {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
