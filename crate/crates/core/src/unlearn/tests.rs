use proptest::prelude::*;

use super::*;
use crate::corpus::{synth_corpus, CorpusParams, Origin};
use crate::lm::ModelConfig;
use crate::tokenizer::{BOS, EOS, VOCAB_SIZE};

fn tiny(layers: usize, seed: u64) -> LmModel {
    let cfg = ModelConfig { d_model: 16, n_layers: layers, n_heads: 2, max_seq_len: 96, seed, ..Default::default() };
    LmModel::init(&cfg).unwrap()
}

fn uniform(layers: usize) -> LmModel {
    let m = tiny(layers, 3);
    let mut p = m.params().clone();
    let i = p.index_of("head.weight").unwrap();
    p.tensor_mut(i).values_mut().fill(0.0);
    m.with_params(p).unwrap()
}

fn small_corpus() -> (Vec<QaPair>, Vec<QaPair>) {
    let c = synth_corpus(&CorpusParams { seed: 5, n_persons: 8, n_forget: 12, n_retain: 16, graph_density: 0.2 }).unwrap();
    (c.forget, c.retain)
}

fn ex(prefix: &[u32], target: &[u32]) -> Example {
    Example::new(prefix, target)
}

#[test]
fn ga_on_uniform_model_is_log_inverse_vocab() {
    let m = uniform(2);
    let v = ga_loss(&m, &[ex(&[BOS, 65], &[66])]).unwrap();
    assert!((v - (1.0 / VOCAB_SIZE as f64).ln()).abs() < 1e-5, "{v}");
}

#[test]
fn ga_gradient_is_negated_nll_gradient() {
    let m = tiny(2, 1);
    let e = ex(&[BOS, 10, 11, 12], &[13, 14, EOS]);
    let mut t1 = Tape::with_params(m.params(), true);
    let (lp, _) = logprob_on_tape(&mut t1, &m, &e).unwrap();
    let g1 = t1.param_grads(&t1.backward(lp).unwrap());
    let mut t2 = Tape::with_params(m.params(), true);
    let (nll, _) = crate::lm::example_nll_on_tape(&mut t2, m.config(), m.layout(), &e).unwrap();
    let g2 = t2.param_grads(&t2.backward(nll).unwrap());
    for (a, b) in g1.values().iter().zip(g2.values()) {
        assert_eq!(*a, -*b);
    }
}

#[test]
fn npo_identities() {
    let m = tiny(2, 2);
    let other = tiny(2, 9);
    let batch = [ex(&[BOS, 1, 2], &[3, 4]), ex(&[BOS, 7], &[8, EOS])];
    for beta in [0.1, 1.0, 4.0] {
        let v = npo_loss(&m, &m, &batch, beta).unwrap();
        assert!((v - 2.0 / beta * 2f64.ln()).abs() < 1e-9 * (1.0 + v), "beta {beta}: {v}");
    }
    // two-token oracle: r = lp_model − lp_target
    let e = ex(&[BOS, 5], &[6, 7]);
    let r = seq_lp(&m, &e) - seq_lp(&other, &e);
    let beta = 0.5;
    let want = -2.0 / beta * (1.0 / (1.0 + (beta * r).exp())).ln();
    let got = npo_loss(&m, &other, &[e], beta).unwrap();
    assert!((got - want).abs() < 1e-6 * (1.0 + want.abs()), "{got} vs {want}");
    assert!(npo_loss(&m, &m, &batch, 0.0).is_err());
}

fn seq_lp(m: &LmModel, e: &Example) -> f64 {
    crate::lm::seq_logprob(m, e.prefix(), e.target()).unwrap()
}

#[test]
fn npo_limit_vanishes_as_model_forgets() {
    let mut tape: Tape<'_, f32> = Tape::new();
    let lp = tape.leaf(crate::tensor::Tensor::scalar(-200.0f32));
    let v = npo_term(&mut tape, lp, -1.0, 1.0);
    assert!(tape.scalar(v).abs() < 1e-6);
}

#[test]
fn dpo_identities() {
    let m = tiny(2, 4);
    let other = tiny(2, 11);
    let pos = ex(&[BOS, 1], &[73, 32, 100, EOS]);
    let neg = ex(&[BOS, 1], &[48, 49, EOS]);
    let v = dpo_unlearn_loss(&m, &m, &[(pos.clone(), neg.clone())], 0.3).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-9, "{v}");
    let beta = 0.3;
    let mgn = (seq_lp(&m, &pos) - seq_lp(&other, &pos)) - (seq_lp(&m, &neg) - seq_lp(&other, &neg));
    let want = (1.0 + (-beta * mgn).exp()).ln();
    let got = dpo_unlearn_loss(&m, &other, &[(pos, neg)], beta).unwrap();
    assert!((got - want).abs() < 1e-6 * (1.0 + want), "{got} vs {want}");

    let mut tape: Tape<'_, f32> = Tape::new();
    let a = tape.leaf(crate::tensor::Tensor::scalar(-1.0f32));
    let b = tape.leaf(crate::tensor::Tensor::scalar(-300.0f32));
    let v = dpo_term(&mut tape, a, b, -1.0, -1.0, 1.0);
    assert!(tape.scalar(v).abs() < 1e-6);
}

#[test]
fn rmu_zero_when_control_vector_is_mean_hidden() {
    let m = tiny(3, 6);
    let e = ex(&[BOS, 20, 21, 22], &[23, 24, EOS]);
    let layer = 2;
    let mean = mean_rows(&answer_hidden(&m, &e).unwrap()[layer]);
    let v = rmu_loss(&m, &m, &[e.clone()], &[], &mean, 1.0, 0.0, layer).unwrap();
    assert!(v.abs() < 1e-10, "{v}");
    // frozen == model: retain term vanishes, alpha irrelevant
    let u = control_vector(16, 0);
    let a = rmu_loss(&m, &m, &[e.clone()], &[e.clone()], &u, 5.0, 0.0, layer).unwrap();
    let b = rmu_loss(&m, &m, &[e.clone()], &[e.clone()], &u, 5.0, 3.0, layer).unwrap();
    assert!((a - b).abs() < 1e-9);
    assert!(rmu_loss(&m, &m, &[e], &[], &u, 5.0, 0.0, 4).is_err());
    let n: f64 = u.iter().map(|x| (*x as f64).powi(2)).sum();
    assert!((n - 1.0).abs() < 1e-6);
}

#[test]
fn rau_anchor_zero_at_base_and_retain_only_when_unlearn_off() {
    let m = tiny(3, 7);
    let base = tiny(3, 8);
    let f = [ex(&[BOS, 1, 2], &[3, EOS])];
    let r = [ex(&[BOS, 9], &[10, 11, EOS])];
    assert_eq!(rau_anchor(&m, &m, &f, 2, &[1.0, 1.0]).unwrap(), 0.0);
    assert!(rau_anchor(&m, &base, &f, 2, &[1.0, 1.0]).unwrap() > 0.0);
    let v = rau_loss(&m, &base, &f, &r, 2, &[1.0, 1.0], 0.0, 1.0).unwrap();
    assert!((v - retain_nll(&m, &r).unwrap()).abs() < 1e-12);
}

#[test]
fn klr_zero_at_target_and_positive_elsewhere() {
    let m = tiny(2, 12);
    let batch = [ex(&[BOS, 30, 31], &[32, 33, EOS]), ex(&[BOS, 40], &[41, EOS])];
    assert_eq!(klr_value(&m, &m, &batch).unwrap(), 0.0);
    assert!(klr_value(&tiny(2, 13), &m, &batch).unwrap() > 0.0);
}

#[test]
fn gdr_matches_independent_retain_nll() {
    let m = tiny(2, 14);
    let batch = [ex(&[BOS, 1], &[2, 3, EOS]), ex(&[BOS, 4, 5], &[6, EOS])];
    let mut s = 0.0;
    let mut n = 0;
    for e in &batch {
        s -= seq_lp(&m, e);
        n += e.num_targets();
    }
    let want = s / n as f64;
    let spec = MethodSpec::new(Method::GA).with_regularizer(Regularizer::Gdr);
    let got = regularize(0.25, &spec, &m, &m, &batch).unwrap();
    assert!((got - 0.25 - want).abs() < 1e-9, "{got} vs {want}");
    let klr = MethodSpec::new(Method::GA).with_regularizer(Regularizer::Klr);
    assert_eq!(regularize(0.25, &klr, &m, &m, &batch).unwrap(), 0.25);
    let bad = MethodSpec::new(Method::RL).with_regularizer(Regularizer::Klr);
    assert!(regularize(0.25, &bad, &m, &m, &batch).is_err());
}

#[test]
fn question_rows_get_no_logit_gradient() {
    let m = tiny(2, 15);
    let e = ex(&[BOS, 1, 2, 3, 4], &[5, 6, EOS]);
    let mut tape = Tape::with_params(m.params(), true);
    let (lp, fv) = logprob_on_tape(&mut tape, &m, &e).unwrap();
    let grads = tape.backward(lp).unwrap();
    let g = grads.get(fv.logits).expect("logits gradient");
    let v = VOCAB_SIZE;
    for r in 0..e.target_start - 1 {
        assert!(g[r * v..(r + 1) * v].iter().all(|x| *x == 0.0), "row {r}");
    }
    assert!(g[(e.target_start - 1) * v..].iter().any(|x| *x != 0.0));
}

#[test]
fn task_vector_identities() {
    let t = tiny(2, 16);
    let r = tiny(2, 17);
    let same = task_vector_edit(&t, &r, 0.0).unwrap();
    assert_eq!(same.params(), t.params());
    let ident = task_vector_edit(&t, &t, 2.5).unwrap();
    assert_eq!(ident.params(), t.params());
    let e = task_vector_edit(&t, &r, 1.0).unwrap();
    let (a, b, c) = (t.params().flatten(), r.params().flatten(), e.params().flatten());
    for k in (0..a.len()).step_by(97) {
        assert!((c[k] - (2.0 * a[k] - b[k])).abs() < 1e-6);
    }
    assert!(task_vector_edit(&t, &r, -1.0).is_err());
    assert!(task_vector_edit(&t, &tiny(3, 0), 1.0).is_err());
}

#[test]
fn relabel_properties() {
    let (forget, _) = small_corpus();
    let idk = relabel(RelabelStrategy::IDK, &forget, 1).unwrap();
    for (a, b) in idk.iter().zip(&forget) {
        assert!(IDK_PHRASES.contains(&a.answer_text().as_str()));
        assert_eq!(a.question, b.question);
    }
    let rm = relabel(RelabelStrategy::RM, &forget, 2).unwrap();
    let mut orig: Vec<_> = forget.iter().map(|q| q.answer.clone()).collect();
    let mut perm: Vec<_> = rm.iter().map(|q| q.answer.clone()).collect();
    for (a, b) in rm.iter().zip(&forget) {
        assert_ne!(a.id, usize::MAX);
        assert_eq!(a.id, b.id);
    }
    // derangement by position: no pair keeps the answer drawn from itself
    let rm_idx = relabel(RelabelStrategy::RM, &forget, 2).unwrap();
    assert_eq!(rm, rm_idx);
    orig.sort();
    perm.sort();
    assert_eq!(orig, perm);
    let rl1 = relabel(RelabelStrategy::RL, &forget, 3).unwrap();
    let rl2 = relabel(RelabelStrategy::RL, &forget, 3).unwrap();
    assert_eq!(rl1, rl2);
    for (a, b) in rl1.iter().zip(&forget) {
        assert_ne!(a.answer, b.answer);
        assert_eq!(a.answer.len(), b.answer.len());
    }
    assert!(relabel(RelabelStrategy::RM, &forget[..1], 0).is_err());
    assert!(relabel(RelabelStrategy::IDK, &[], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_mapping_has_no_fixed_point(n in 2usize..40, seed in any::<u64>()) {
        let set: Vec<QaPair> = (0..n)
            .map(|i| QaPair::new(i, "P Q", "email", &format!("v{i:04}"), Origin::Forget))
            .collect();
        let out = relabel(RelabelStrategy::RM, &set, seed).unwrap();
        for (a, b) in out.iter().zip(&set) {
            prop_assert_ne!(&a.answer, &b.answer);
        }
    }

    #[test]
    fn whp_distribution_sums_to_one(
        raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..12),
        alpha in 0.0f64..=1.0,
    ) {
        let zt: f64 = raw.iter().map(|x| x.0).sum::<f64>() + 1e-9;
        let zr: f64 = raw.iter().map(|x| x.1).sum::<f64>() + 1e-9;
        let pt: Vec<f64> = raw.iter().map(|x| (x.0 + 1e-9 / raw.len() as f64) / zt).collect();
        let pr: Vec<f64> = raw.iter().map(|x| (x.1 + 1e-9 / raw.len() as f64) / zr).collect();
        let (p, _) = whp_distribution(&pt, &pr, alpha);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
    }
}

#[test]
fn whp_reduces_to_target() {
    let pt = [0.5, 0.3, 0.2];
    let pr = [0.1, 0.1, 0.8];
    let (p, fb) = whp_distribution(&pt, &pr, 0.0);
    assert!(!fb);
    assert!(p.iter().zip(&pt).all(|(a, b)| (a - b).abs() < 1e-15));
    let (p, _) = whp_distribution(&pt, &pt, 0.7);
    assert!(p.iter().zip(&pt).all(|(a, b)| (a - b).abs() < 1e-15));
    // every coordinate clamped: falls back
    let (p, fb) = whp_distribution(&[0.0, 1.0], &[1.0, 1.0], 1.0);
    let _ = p;
    assert!(!fb);
    let (p, fb) = whp_distribution(&[0.5, 0.5], &[1.5, 1.5], 1.0);
    assert!(fb);
    assert_eq!(p, vec![0.5, 0.5]);
}

#[test]
fn whp_labels_deterministic_and_bounded() {
    let (forget, _) = small_corpus();
    let t = tiny(2, 18);
    let r = tiny(2, 19);
    let (a, _) = whp_labels(&t, &r, &forget[..4], 0.5, 7).unwrap();
    let (b, _) = whp_labels(&t, &r, &forget[..4], 0.5, 7).unwrap();
    assert_eq!(a, b);
    for (x, q) in a.iter().zip(&forget) {
        assert!(x.answer.len() <= q.answer.len());
    }
    assert!(whp_labels(&t, &r, &forget[..1], 1.5, 0).is_err());
}

#[test]
fn layer_mask_selects_upper_blocks() {
    let m = tiny(4, 0);
    let mask = layers_from_mask(m.params(), 3);
    for (i, name) in m.params().names().iter().enumerate() {
        let want = name.starts_with("blocks.02.") || name.starts_with("blocks.03.");
        assert_eq!(mask.contains(i), want, "{name}");
    }
}

#[test]
fn retain_split_is_fixed_partition() {
    let (_, retain) = small_corpus();
    let (a, b) = retain_split(&retain, 0.25);
    assert_eq!(a.len(), 4);
    assert_eq!(a.len() + b.len(), retain.len());
    assert!(a.iter().all(|q| !b.contains(q)));
    assert_eq!(retain_split(&retain, 0.25), (a, b));
}

fn fast(method: Method) -> MethodSpec {
    let mut s = MethodSpec::new(method);
    s.hyper.epochs = 1;
    s.hyper.batch_size = 4;
    s.hyper.lr = 1e-3;
    s.hyper.reinforce_epochs = 1;
    s.hyper.rmu_layer = 1;
    s.hyper.rau_start_layer = 1;
    s
}

#[test]
fn run_unlearn_zero_epochs_is_identity_for_every_method() {
    let (forget, retain) = small_corpus();
    let t = tiny(2, 20);
    for m in Method::ALL {
        let mut s = fast(m);
        s.hyper.epochs = 0;
        if m == Method::TaskVector {
            s.hyper.lambda = 0.0;
        }
        let out = run_unlearn(&t, &s, &forget[..4], &retain, Some(&t)).unwrap();
        assert_eq!(out.model.digest(), t.digest(), "{}", m.name());
    }
}

#[test]
fn run_unlearn_is_deterministic_and_moves_params() {
    let (forget, retain) = small_corpus();
    let t = tiny(2, 21);
    let base = tiny(2, 22);
    for m in Method::ALL {
        let reg = if m.is_training_pipeline() && m != Method::TaskVector { Regularizer::Gdr } else { Regularizer::None };
        let s = fast(m).with_regularizer(reg);
        let a = run_unlearn(&t, &s, &forget[..4], &retain, Some(&base)).unwrap();
        let b = run_unlearn(&t, &s, &forget[..4], &retain, Some(&base)).unwrap();
        assert_eq!(a.model.digest(), b.model.digest(), "{}", s.label());
        assert_ne!(a.model.digest(), t.digest(), "{}", s.label());
        assert!(a.model.params().all_finite());
    }
}

#[test]
fn klr_runs_with_training_methods() {
    let (forget, retain) = small_corpus();
    let t = tiny(2, 23);
    let s = fast(Method::NPO).with_regularizer(Regularizer::Klr);
    let out = run_unlearn(&t, &s, &forget[..4], &retain, None).unwrap();
    assert!(out.log.steps.iter().all(|s| s.3.is_finite()));
}

#[test]
fn run_unlearn_rejects_bad_specs() {
    let (forget, retain) = small_corpus();
    let t = tiny(2, 24);
    for m in [Method::RL, Method::RM, Method::IDK, Method::WHP] {
        let s = fast(m).with_regularizer(Regularizer::Klr);
        assert!(matches!(run_unlearn(&t, &s, &forget, &retain, None), Err(Error::Config(_))));
    }
    let s = fast(Method::TaskVector).with_regularizer(Regularizer::Gdr);
    assert!(run_unlearn(&t, &s, &forget, &retain, None).is_err());
    assert!(run_unlearn(&t, &fast(Method::RAU), &forget, &retain, None).is_err());
    let mut s = fast(Method::RMU);
    s.hyper.rmu_layer = 3;
    assert!(run_unlearn(&t, &s, &forget, &retain, None).is_err());
    let mut s = fast(Method::RAU);
    s.hyper.rau_weights = Some(vec![1.0]);
    assert!(run_unlearn(&t, &s, &forget, &retain, Some(&t)).is_err());
    assert!(run_unlearn(&t, &fast(Method::GA), &[], &retain, None).is_err());
}

#[test]
fn frozen_blocks_untouched_by_representation_methods() {
    let (forget, retain) = small_corpus();
    let t = tiny(3, 25);
    let mut s = fast(Method::RMU);
    s.hyper.rmu_layer = 2;
    let out = run_unlearn(&t, &s, &forget[..4], &retain, None).unwrap();
    let mask = layers_from_mask(t.params(), 2);
    let mut moved = false;
    for i in 0..t.params().num_tensors() {
        let same = out.model.params().tensor(i) == t.params().tensor(i);
        if !mask.contains(i) {
            assert!(same, "{}", t.params().names()[i]);
        }
        moved |= !same && t.params().names()[i].starts_with("blocks.01.");
    }
    assert!(moved);
}

#[test]
fn spec_serde_round_trip() {
    let s = MethodSpec::new(Method::TaskVector);
    let j = serde_json::to_string(&s).unwrap();
    assert!(j.contains("\"task_vector\""));
    assert_eq!(serde_json::from_str::<MethodSpec>(&j).unwrap(), s);
    assert_eq!(fast(Method::GA).with_regularizer(Regularizer::Gdr).label(), "GA_GDR");
}
