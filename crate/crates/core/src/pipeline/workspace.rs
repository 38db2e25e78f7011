use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use super::{build_corpus, split_for, train_models, utility_set, ExperimentConfig};
use crate::analysis::{analyze, cka_profile, coreset_select, trajectory, AnalysisBundle, CoreSet};
use crate::attack::{evaluate, AttackConfig, RecoveryReport};
use crate::corpus::{load_corpus, save_corpus, Corpus, CorpusSplit, QaPair};
use crate::error::{Error, Result};
use crate::lm::LmModel;
use crate::tensor::write_atomic;
use crate::unlearn::{layers_from_mask, run_unlearn, MethodSpec, UnlearnOutput};

/// One written artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub seed: Option<u64>,
    pub written_unix: u64,
}

/// Index of every artifact of an experiment, keyed by path relative to the
/// experiment directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

/// A recovery report with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_digest: String,
    pub seed: u64,
    pub label: String,
    pub method: Option<MethodSpec>,
    pub attack: AttackConfig,
    pub report: RecoveryReport,
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Per-label aggregate across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
}

/// Groups reports by label and aggregates each metric.
pub fn aggregate(reports: &[ReportFile]) -> Vec<Aggregate> {
    let mut by: BTreeMap<&str, Vec<&ReportFile>> = BTreeMap::new();
    for r in reports {
        by.entry(r.label.as_str()).or_default().push(r);
    }
    by.into_iter()
        .map(|(label, rs)| {
            let metric = |f: &dyn Fn(&RecoveryReport) -> f64| MeanStd::of(&rs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
            let mut metrics = BTreeMap::new();
            metrics.insert("p1_known".into(), metric(&|r| r.p1_known));
            metrics.insert("p1_unknown".into(), metric(&|r| r.p1_unknown));
            metrics.insert("p2_known".into(), metric(&|r| r.p2_known));
            metrics.insert("p2_unknown".into(), metric(&|r| r.p2_unknown));
            metrics.insert("p3_known".into(), metric(&|r| r.p3_known));
            metrics.insert("p3_unknown".into(), metric(&|r| r.p3_unknown));
            metrics.insert("u1".into(), metric(&|r| r.u1_rouge));
            metrics.insert("gap".into(), metric(&|r| r.depth_gap()));
            Aggregate { label: label.to_string(), seeds: rs.iter().map(|r| r.seed).collect(), metrics }
        })
        .collect()
}

const TABLE_COLUMNS: [&str; 8] = ["p1_known", "p1_unknown", "p2_known", "p2_unknown", "p3_known", "p3_unknown", "gap", "u1"];

/// Table in the report layout: rates in percent as `mean ± std`.
pub fn aggregate_csv(aggs: &[Aggregate]) -> String {
    let mut s = String::from("method,n_seeds");
    for c in TABLE_COLUMNS {
        s.push_str(&format!(",{c}"));
    }
    s.push('\n');
    for a in aggs {
        s.push_str(&format!("{},{}", a.label, a.seeds.len()));
        for c in TABLE_COLUMNS {
            let m = a.metrics[c];
            let k = if c == "u1" { 1.0 } else { 100.0 };
            s.push_str(&format!(",{:.2} ± {:.2}", k * m.mean, k * m.std));
        }
        s.push('\n');
    }
    s
}

/// On-disk experiment directory `<root>/<digest prefix>/`.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub digest: String,
    pub dir: PathBuf,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn stamp_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".digest");
    PathBuf::from(s)
}

impl Workspace {
    /// Opens (creating if needed) the directory for `cfg` under `root`.
    pub fn open(cfg: ExperimentConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        let digest = cfg.digest()?;
        let dir = root.join(&digest[..16]);
        fs::create_dir_all(&dir)?;
        let ws = Workspace { cfg, digest, dir };
        let cfg_path = ws.dir.join("config.toml");
        let text = ws.cfg.to_toml()?;
        match fs::read_to_string(&cfg_path) {
            Ok(old) if ExperimentConfig::from_toml(&old)?.digest()? != ws.digest => {
                return Err(Error::Artifact { path: cfg_path, reason: "config digest differs".into() })
            }
            Ok(_) => {}
            Err(_) => write_atomic(&cfg_path, text.as_bytes())?,
        }
        Ok(ws)
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("seed-{seed}"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn record(&self, path: &Path, stage: &str, seed: Option<u64>) -> Result<()> {
        write_atomic(&stamp_path(path), self.digest.as_bytes())?;
        let mp = self.dir.join("manifest.json");
        let mut m: RunManifest = match fs::read(&mp) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(_) => RunManifest { config_digest: self.digest.clone(), ..Default::default() },
        };
        m.artifacts.insert(self.rel(path), ManifestEntry { stage: stage.into(), seed, written_unix: now() });
        write_atomic(&mp, &serde_json::to_vec_pretty(&m)?)
    }

    fn write(&self, path: &Path, bytes: &[u8], stage: &str, seed: Option<u64>) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        write_atomic(path, bytes)?;
        self.record(path, stage, seed)
    }

    /// Fails unless `path` exists and was written under this config.
    pub fn require(&self, path: &Path) -> Result<()> {
        let missing = |reason: &str| Error::Artifact { path: path.to_path_buf(), reason: reason.into() };
        if !path.exists() {
            return Err(missing("not found; run the upstream stage first"));
        }
        match fs::read_to_string(stamp_path(path)) {
            Ok(d) if d == self.digest => Ok(()),
            Ok(_) => Err(missing("written under a different config digest")),
            Err(_) => Err(missing("no digest stamp")),
        }
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        Ok(serde_json::from_slice(&fs::read(self.dir.join("manifest.json"))?)?)
    }

    /// Every manifest entry exists and carries this config's digest.
    pub fn verify_manifest(&self) -> Result<RunManifest> {
        let m = self.manifest()?;
        if m.config_digest != self.digest {
            return Err(Error::Artifact { path: self.dir.join("manifest.json"), reason: "digest mismatch".into() });
        }
        for rel in m.artifacts.keys() {
            self.require(&self.dir.join(rel))?;
        }
        Ok(m)
    }

    fn corpus_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("corpus")
    }

    pub fn synth(&self, seed: u64) -> Result<Corpus> {
        let c = build_corpus(&self.cfg.plan(seed))?;
        let dir = self.corpus_dir(seed);
        save_corpus(&dir, &c)?;
        for f in ["records.jsonl", "forget.jsonl", "retain.jsonl", "graph.tsv"] {
            self.record(&dir.join(f), "synth", Some(seed))?;
        }
        let split = split_for(&self.cfg.plan(seed), &c)?;
        let ids = serde_json::json!({
            "known": split.known.iter().map(|q| q.id).collect::<Vec<_>>(),
            "unknown": split.unknown.iter().map(|q| q.id).collect::<Vec<_>>(),
        });
        self.write(&self.seed_dir(seed).join("split.json"), &serde_json::to_vec_pretty(&ids)?, "synth", Some(seed))?;
        info!("seed {seed}: corpus with {} forget / {} retain pairs", c.forget.len(), c.retain.len());
        Ok(c)
    }

    pub fn corpus(&self, seed: u64) -> Result<Corpus> {
        let dir = self.corpus_dir(seed);
        for f in ["records.jsonl", "forget.jsonl", "retain.jsonl", "graph.tsv"] {
            self.require(&dir.join(f))?;
        }
        let c = load_corpus(&dir)?;
        if c != build_corpus(&self.cfg.plan(seed))? {
            return Err(Error::Artifact { path: dir, reason: "corpus differs from its config".into() });
        }
        Ok(c)
    }

    pub fn split(&self, seed: u64) -> Result<CorpusSplit> {
        self.require(&self.seed_dir(seed).join("split.json"))?;
        split_for(&self.cfg.plan(seed), &self.corpus(seed)?)
    }

    fn model_path(&self, seed: u64, label: &str) -> PathBuf {
        self.seed_dir(seed).join("models").join(format!("{label}.ckpt"))
    }

    pub fn train(&self, seed: u64) -> Result<()> {
        let c = self.corpus(seed)?;
        let t = train_models(&self.cfg.plan(seed), &c)?;
        for (label, m, log) in [("base", &t.base, &t.base_log), ("target", &t.target, &t.target_log)] {
            let p = self.model_path(seed, label);
            fs::create_dir_all(p.parent().expect("has parent"))?;
            m.save(&p)?;
            self.record(&p, "train", Some(seed))?;
            let lp = self.seed_dir(seed).join("logs").join(format!("{label}.csv"));
            self.write(&lp, log.to_csv().as_bytes(), "train", Some(seed))?;
        }
        Ok(())
    }

    /// `target`, `base` / `retrain`, or an unlearned model's name.
    pub fn model(&self, seed: u64, label: &str) -> Result<LmModel> {
        let label = if label == "retrain" { "base" } else { label };
        let p = self.model_path(seed, label);
        self.require(&p)?;
        LmModel::load(&p)
    }

    fn unlearn_output(&self, seed: u64, name: &str, on_coreset: bool) -> Result<(String, UnlearnOutput)> {
        let nm = self.cfg.method(name)?;
        let spec = self.cfg.method_for_seed(nm, seed);
        let split = self.split(seed)?;
        let target = self.model(seed, "target")?;
        let base = self.model(seed, "base")?;
        let (known, label): (Vec<QaPair>, String) = if on_coreset {
            let cs = self.load_coreset(seed)?;
            (split.forget().into_iter().filter(|q| cs.ids.contains(&q.id)).collect(), format!("{name}-coreset"))
        } else {
            (split.known.clone(), name.to_string())
        };
        Ok((label, run_unlearn(&target, &spec, &known, &split.retain, Some(&base))?))
    }

    /// Runs a configured method on the known split, or on the core-set when
    /// `on_coreset` (saved as `<name>-coreset`).
    pub fn unlearn(&self, seed: u64, name: &str, on_coreset: bool) -> Result<String> {
        let (label, out) = self.unlearn_output(seed, name, on_coreset)?;
        let p = self.model_path(seed, &label);
        out.model.save(&p)?;
        self.record(&p, "unlearn", Some(seed))?;
        let lp = self.seed_dir(seed).join("logs").join(format!("{label}.csv"));
        self.write(&lp, out.log.to_csv().as_bytes(), "unlearn", Some(seed))?;
        Ok(label)
    }

    fn spec_of(&self, label: &str, seed: u64) -> Option<MethodSpec> {
        let name = label.strip_suffix("-coreset").unwrap_or(label);
        self.cfg.method(name).ok().map(|m| self.cfg.method_for_seed(m, seed))
    }

    pub fn attack(&self, seed: u64, label: &str) -> Result<RecoveryReport> {
        let model = self.model(seed, label)?;
        let split = self.split(seed)?;
        let plan = self.cfg.plan(seed);
        let r = evaluate(label, &model, &split, &utility_set(&split.retain), &plan.attack)?;
        let file = ReportFile {
            config_digest: self.digest.clone(),
            seed,
            label: label.to_string(),
            method: self.spec_of(label, seed),
            attack: plan.attack,
            report: r.clone(),
        };
        let p = self.seed_dir(seed).join("reports").join(format!("{label}.json"));
        self.write(&p, &serde_json::to_vec_pretty(&file)?, "attack", Some(seed))?;
        Ok(r)
    }

    pub fn analyze(&self, seed: u64, label: &str) -> Result<AnalysisBundle> {
        let target = self.model(seed, "target")?;
        let model = self.model(seed, label)?;
        let split = self.split(seed)?;
        let corpus = self.corpus(seed)?;
        let mask = self.cfg.grad_mask_from_layer.map(|l| layers_from_mask(target.params(), l));
        // The trajectory is replayed deterministically and must end at the
        // saved model.
        let replay = match self.cfg.method(label.strip_suffix("-coreset").unwrap_or(label)) {
            Ok(m) => {
                let (_, out) = self.unlearn_output(seed, &m.label(), label.ends_with("-coreset"))?;
                if out.model.digest() != model.digest() {
                    return Err(Error::Artifact {
                        path: self.model_path(seed, label),
                        reason: "saved model differs from the replayed unlearning run".into(),
                    });
                }
                Some(out)
            }
            Err(_) => None,
        };
        let path = match &replay {
            Some(out) => trajectory(&target, out),
            None => vec![&target, &model],
        };
        let mut b = analyze(label, &target, &model, &path, &split, &corpus.graph, mask.as_ref())?;
        let probe: Vec<Vec<u32>> = split.forget().iter().map(|q| q.example().tokens).collect();
        b.cka = Some(cka_profile(&target, &model, &probe)?);
        let dir = self.seed_dir(seed).join("analysis");
        self.write(&dir.join(format!("{label}.json")), &serde_json::to_vec_pretty(&b)?, "analyze", Some(seed))?;
        self.write(&dir.join(format!("{label}.samples.csv")), b.samples_csv().as_bytes(), "analyze", Some(seed))?;
        if let Some(c) = b.cka_csv() {
            self.write(&dir.join(format!("{label}.cka.csv")), c.as_bytes(), "analyze", Some(seed))?;
        }
        Ok(b)
    }

    pub fn coreset(&self, seed: u64) -> Result<CoreSet> {
        let target = self.model(seed, "target")?;
        let split = self.split(seed)?;
        let mask = self.cfg.grad_mask_from_layer.map(|l| layers_from_mask(target.params(), l));
        let cs = coreset_select(&target, &split.forget(), self.cfg.coreset_percent, mask.as_ref())?;
        self.write(&self.seed_dir(seed).join("coreset.json"), &serde_json::to_vec_pretty(&cs)?, "coreset", Some(seed))?;
        Ok(cs)
    }

    fn load_coreset(&self, seed: u64) -> Result<CoreSet> {
        let p = self.seed_dir(seed).join("coreset.json");
        self.require(&p)?;
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    /// Aggregates every per-seed report into `report/table.{csv,json}` and
    /// concatenates per-sample analysis tables into point clouds.
    pub fn report(&self) -> Result<Vec<Aggregate>> {
        let mut files = Vec::new();
        let mut points: BTreeMap<String, String> = BTreeMap::new();
        for &seed in &self.cfg.seeds {
            let rdir = self.seed_dir(seed).join("reports");
            for p in sorted_files(&rdir, ".json")? {
                self.require(&p)?;
                let f: ReportFile = serde_json::from_slice(&fs::read(&p)?)?;
                if f.config_digest != self.digest {
                    return Err(Error::Artifact { path: p, reason: "report digest mismatch".into() });
                }
                files.push(f);
            }
            for p in sorted_files(&self.seed_dir(seed).join("analysis"), ".samples.csv")? {
                self.require(&p)?;
                let name = p.file_name().unwrap().to_string_lossy().trim_end_matches(".samples.csv").to_string();
                let text = fs::read_to_string(&p)?;
                let out = points.entry(name).or_insert_with(|| "seed,id,fs,as_grad,as_repr_last,as_graph\n".into());
                for line in text.lines().skip(1) {
                    out.push_str(&format!("{seed},{line}\n"));
                }
            }
        }
        if files.is_empty() {
            return Err(Error::Artifact { path: self.dir.clone(), reason: "no reports; run attack first".into() });
        }
        let aggs = aggregate(&files);
        let dir = self.dir.join("report");
        self.write(&dir.join("table.csv"), aggregate_csv(&aggs).as_bytes(), "report", None)?;
        let rows: Vec<String> = files.iter().map(|f| format!("{},{}", f.seed, f.report.csv_row())).collect();
        let per_seed = format!("seed,{}\n{}\n", RecoveryReport::CSV_HEADER, rows.join("\n"));
        self.write(&dir.join("per_seed.csv"), per_seed.as_bytes(), "report", None)?;
        self.write(&dir.join("table.json"), &serde_json::to_vec_pretty(&aggs)?, "report", None)?;
        for (name, csv) in points {
            self.write(&dir.join(format!("points_{name}.csv")), csv.as_bytes(), "report", None)?;
        }
        Ok(aggs)
    }
}

fn sorted_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    v.sort();
    Ok(v)
}
