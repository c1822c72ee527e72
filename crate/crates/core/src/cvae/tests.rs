// Oracles index by position on purpose, mirroring the formulas term by term.
#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;

use super::*;
use crate::autodiff::grad_check;
use crate::dataset::{build_samples, gen_synthetic_world, BuildOptions, WorldKind};

const H: usize = 3;
const CLASSES: usize = 3;

fn tiny(modes: usize, seed: u64) -> CvaeModel {
    CvaeModel::new(ModelConfig::tiny(H, CLASSES, modes, seed)).unwrap()
}

fn condition(seed: u64) -> Condition {
    let mut r = XorShift64::new(seed);
    let plan: Vec<f64> = (0..2 * 64).map(|_| r.below(2) as f64).collect();
    let labels: Vec<u8> = (0..64).map(|_| r.below(CLASSES) as u8).collect();
    Condition {
        plan: Tensor::new(vec![2, 8, 8], plan).unwrap(),
        scene: SceneInput::Labels(labels.into()),
    }
}

fn target(seed: u64) -> Trajectory {
    let mut r = XorShift64::new(seed ^ 0x5eed);
    let mut p = [0.0, 0.0];
    (0..H)
        .map(|_| {
            p[0] += r.uniform(1.0, 4.0);
            p[1] += r.uniform(-1.0, 1.0);
            p
        })
        .collect()
}

/// Overwrite every parameter with uniform noise of the given scale.
fn scramble(model: &mut CvaeModel, seed: u64, scale: f64) {
    let mut r = XorShift64::new(seed);
    let store = model.store_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = r.uniform(-scale, scale);
        }
    }
}

fn set_param(model: &mut CvaeModel, name: &str, f: impl Fn(usize) -> f64) {
    let store = model.store_mut();
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in store.value_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn zero_params(model: &mut CvaeModel, prefix: &str) {
    let store = model.store_mut();
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    assert!(!ids.is_empty());
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

fn assert_normalized(d: &CategoricalDist) {
    let s: f64 = d.probs().iter().sum();
    assert!((s - 1.0).abs() <= 1e-9, "sum {s}");
}

// Scalar Gaussian log-density, written out independently of the tape.
fn log_normal(y: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((y - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn seq_log_likelihood(s: &GaussianSeq, y: &[[f64; 2]]) -> f64 {
    let mut ll = 0.0;
    for h in 0..y.len() {
        for d in 0..2 {
            ll += log_normal(y[h][d], s.mu[h][d], s.sigma[h][d]);
        }
    }
    ll
}

#[test]
fn zero_input_gives_zero_embedding() {
    // fresh models have zero biases, so a zero input stays zero through every layer
    let model = tiny(3, 1);
    let cond = Condition {
        plan: Tensor::zeros(&[2, 8, 8]),
        scene: SceneInput::Dense(Tensor::zeros(&[CLASSES, 8, 8])),
    };
    let m = model.encode_condition(&cond).unwrap();
    assert_eq!(m.len(), model.config().embed_dim);
    assert!(m.iter().all(|&v| v == 0.0));
}

#[test]
fn labels_and_dense_one_hot_agree() {
    let model = tiny(3, 2);
    let cond = condition(5);
    let SceneInput::Labels(labels) = &cond.scene else { unreachable!() };
    let mut dense = vec![0.0; CLASSES * 64];
    for (i, &l) in labels.iter().enumerate() {
        dense[l as usize * 64 + i] = 1.0;
    }
    let cond_dense = Condition {
        plan: cond.plan.clone(),
        scene: SceneInput::Dense(Tensor::new(vec![CLASSES, 8, 8], dense).unwrap()),
    };
    let a = model.encode_condition(&cond).unwrap();
    let b = model.encode_condition(&cond_dense).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn standard_embedding_shape_and_determinism() {
    let world = gen_synthetic_world(0, WorldKind::Straight);
    let t = &world.tracks[0];
    let samples = build_samples("s", &t.track, &world.map, &world.graph, &t.route, &BuildOptions::new(10, 3.0).with_stride(60)).unwrap();
    let cond = Condition::from_record(&samples[0].record);
    let a = CvaeModel::new(ModelConfig::standard(10, 6, 12, 4)).unwrap();
    let b = CvaeModel::new(ModelConfig::standard(10, 6, 12, 4)).unwrap();
    let ma = a.encode_condition(&cond).unwrap();
    assert_eq!(ma.len(), 128);
    assert_eq!(ma, b.encode_condition(&cond).unwrap());
    assert!(ma.iter().any(|&v| v != 0.0));
}

#[test]
fn wrong_raster_sizes_are_rejected() {
    let model = tiny(3, 1);
    let bad_plan = Condition {
        plan: Tensor::zeros(&[2, 9, 8]),
        scene: SceneInput::Labels(vec![0u8; 64].into()),
    };
    assert!(matches!(model.encode_condition(&bad_plan), Err(CvaeError::ShapeMismatch(_))));
    let bad_scene = Condition {
        plan: Tensor::zeros(&[2, 8, 8]),
        scene: SceneInput::Labels(vec![0u8; 63].into()),
    };
    assert!(matches!(model.encode_condition(&bad_scene), Err(CvaeError::ShapeMismatch(_))));
    let short = vec![[1.0, 0.0]; H - 1];
    assert!(matches!(model.loss(&condition(1), &short), Err(CvaeError::ShapeMismatch(_))));
}

#[test]
fn prior_with_zero_head_is_uniform() {
    let mut model = tiny(12, 3);
    zero_params(&mut model, "prior.");
    let d = model.prior(&condition(2)).unwrap();
    for &l in &d.log_probs {
        assert!((l + 12f64.ln()).abs() <= 1e-12);
    }
}

#[test]
fn prior_is_shift_invariant() {
    let mut model = tiny(12, 3);
    scramble(&mut model, 9, 0.5);
    let cond = condition(4);
    let before = model.prior(&cond).unwrap();
    assert_normalized(&before);
    let id = model.store().id("prior.b").unwrap();
    for v in model.store_mut().value_mut(id).data_mut() {
        *v += 3.75;
    }
    let after = model.prior(&cond).unwrap();
    assert_eq!(before.argmax(), after.argmax());
    for (a, b) in before.log_probs.iter().zip(&after.log_probs) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn recognition_normalizes_and_sees_order() {
    let mut model = tiny(12, 5);
    scramble(&mut model, 11, 0.5);
    let cond = condition(6);
    let y = target(6);
    let q = model.recognition(&cond, &y).unwrap();
    assert_normalized(&q);
    let rev: Trajectory = y.iter().rev().copied().collect();
    let qr = model.recognition(&cond, &rev).unwrap();
    let diff: f64 = q.log_probs.iter().zip(&qr.log_probs).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6, "reversing the target left q unchanged");

    zero_params(&mut model, "recog.");
    let u = model.recognition(&cond, &y).unwrap();
    for &l in &u.log_probs {
        assert!((l + 12f64.ln()).abs() <= 1e-12);
    }
}

#[test]
fn decode_shape_sigma_bounds_and_bad_mode() {
    let mut model = tiny(4, 7);
    scramble(&mut model, 3, 0.5);
    let cond = condition(8);
    let s = model.decode(&cond, 2).unwrap();
    assert_eq!(s.mu.len(), H);
    assert_eq!(s.sigma.len(), H);
    for sig in s.sigma.iter().flatten() {
        assert!((1e-3..=10.0).contains(sig));
    }
    assert!(matches!(model.decode(&cond, 4), Err(CvaeError::BadMode { z: 4, modes: 4 })));

    // push the log-sigma outputs far past both bounds
    for (bias, want) in [(50.0, 10.0), (-50.0, 1e-3)] {
        set_param(&mut model, "dec.head.b", |i| if i >= 2 { bias } else { 0.0 });
        let s = model.decode(&cond, 0).unwrap();
        // exp(ln(bound)) may land one ulp inside the bound
        for &v in s.sigma.iter().flatten() {
            assert!((1e-3..=10.0).contains(&v) && (v - want).abs() <= 1e-15 * want, "{v}");
        }
    }
}

#[test]
fn mode_one_hot_reaches_the_decoder() {
    let mut model = tiny(4, 7);
    scramble(&mut model, 13, 0.5);
    let cond = condition(9);
    let mut g = Graph::new();
    let m = model.encode(&mut g, model.store(), &cond).unwrap();
    let onehot = g.variable(Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap());
    let steps = model.decode_graph(&mut g, model.store(), m, onehot).unwrap();
    let last = steps.last().unwrap().0;
    let out = g.reduce_sum(last, None).unwrap();
    let grads = g.backward(out).unwrap();
    let d = grads.wrt(onehot).unwrap();
    assert!(d.data().iter().any(|v| v.abs() > 1e-9), "{:?}", d.data());
}

#[test]
fn kl_vanishes_when_q_equals_p() {
    let mut g = Graph::new();
    let logits = [0.3, -1.2, 2.0];
    let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
    let lp: Vec<f64> = logits.iter().map(|v| v - lse).collect();
    let log_q = g.constant(Tensor::new(vec![1, 3], lp.clone()).unwrap());
    let log_p = g.constant(Tensor::new(vec![1, 3], lp).unwrap());
    let y = vec![[1.0, 2.0], [3.0, -1.0]];
    let steps: Vec<(Var, Var)> = y
        .iter()
        .map(|p| {
            let mu = g.constant(Tensor::new(vec![3, 2], [p[0] + 0.5, p[1], p[0], p[1], p[0], p[1] - 1.0].to_vec()).unwrap());
            let ls = g.constant(Tensor::full(&[3, 2], 0.1));
            (mu, ls)
        })
        .collect();
    let v = assemble_loss(&mut g, log_q, log_p, &steps, &y).unwrap();
    assert_eq!(g.value(v.kl).item(), 0.0);
}

#[test]
fn perfect_decoder_at_sigma_min_closed_form() {
    let sigma_min: f64 = 1e-3;
    let y: Vec<[f64; 2]> = (0..10).map(|i| [2.0 * i as f64, 0.3 * i as f64]).collect();
    let mut g = Graph::new();
    let modes = 4;
    let log_q = g.constant(Tensor::new(vec![1, modes], vec![0.1f64.ln(), 0.2f64.ln(), 0.3f64.ln(), 0.4f64.ln()]).unwrap());
    let log_p = g.constant(Tensor::full(&[1, modes], -(modes as f64).ln()));
    let steps: Vec<(Var, Var)> = y
        .iter()
        .map(|p| {
            let mu = g.constant(Tensor::new(vec![modes, 2], (0..modes).flat_map(|_| *p).collect()).unwrap());
            let ls = g.constant(Tensor::full(&[modes, 2], sigma_min.ln()));
            (mu, ls)
        })
        .collect();
    let v = assemble_loss(&mut g, log_q, log_p, &steps, &y).unwrap();
    let want = -2.0 * 10.0 * (1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma_min)).ln();
    assert_eq!(g.value(v.mse).item(), 0.0);
    assert!((g.value(v.nll).item() - want).abs() <= 1e-9 * want.abs());
}

/// The loss recomputed from the model's distributions with plain loops.
fn mirror_loss(model: &CvaeModel, cond: &Condition, y: &[[f64; 2]]) -> LossParts {
    let q = model.recognition(cond, y).unwrap().log_probs;
    let p = model.prior(cond).unwrap().log_probs;
    let comps = model.infer_full(cond).unwrap();
    let (mut nll, mut kl, mut mse) = (0.0, 0.0, 0.0);
    for z in 0..q.len() {
        let w = q[z].exp();
        let s = &comps[z].1;
        nll -= w * seq_log_likelihood(s, y);
        kl += w * (q[z] - p[z]);
        let mut se = 0.0;
        for h in 0..y.len() {
            se += (y[h][0] - s.mu[h][0]).powi(2) + (y[h][1] - s.mu[h][1]).powi(2);
        }
        mse += w * se / y.len() as f64;
    }
    LossParts {
        total: nll + kl + mse,
        nll,
        kl,
        mse,
    }
}

#[test]
fn loss_matches_scalar_mirror() {
    for seed in 0..8 {
        let mut model = tiny(5, seed);
        scramble(&mut model, seed + 100, 0.4);
        let cond = condition(seed);
        let y = target(seed);
        let got = model.loss(&cond, &y).unwrap();
        let want = mirror_loss(&model, &cond, &y);
        for (a, b) in [(got.total, want.total), (got.nll, want.nll), (got.kl, want.kl), (got.mse, want.mse)] {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn single_mode_reduces_to_plain_likelihood() {
    let mut model = tiny(1, 4);
    scramble(&mut model, 21, 0.4);
    let cond = condition(3);
    let y = target(3);
    let s = model.decode(&cond, 0).unwrap();
    let lm = model.log_marginal(&cond, &y).unwrap();
    assert!((lm - seq_log_likelihood(&s, &y)).abs() <= 1e-9 * (1.0 + lm.abs()));
    let l = model.loss(&cond, &y).unwrap();
    assert_eq!(l.kl, 0.0);
    assert_eq!(l.total, l.nll + l.mse);
    assert!((l.nll + lm).abs() <= 1e-9 * (1.0 + lm.abs()));
}

#[test]
fn elbo_bounds_the_log_marginal() {
    for seed in 0..20 {
        let mut model = tiny(6, seed);
        scramble(&mut model, seed * 7 + 1, 0.3 + 0.1 * (seed % 5) as f64);
        let cond = condition(seed + 40);
        let y = target(seed + 40);
        let l = model.loss(&cond, &y).unwrap();
        let lm = model.log_marginal(&cond, &y).unwrap();
        assert!(l.kl >= -1e-12);
        assert!(lm - (-(l.nll + l.kl)) >= -1e-9, "seed {seed}: {lm} < {}", -(l.nll + l.kl));
    }
}

/// Relabel modes: new mode `k` is old mode `perm[k]`.
fn permute_modes(model: &mut CvaeModel, perm: &[usize]) {
    let cfg = model.config().clone();
    let z = cfg.num_modes;
    let store = model.store_mut();
    let permute_cols = |t: &mut Tensor| {
        let cols = *t.shape().last().unwrap();
        let old = t.data().to_vec();
        for (r, row) in t.data_mut().chunks_mut(cols).enumerate() {
            for k in 0..z {
                row[k] = old[r * cols + perm[k]];
            }
        }
    };
    for name in ["prior.w", "prior.b", "recog.head.w", "recog.head.b"] {
        let id = store.id(name).unwrap();
        permute_cols(store.value_mut(id));
    }
    // rows embed_dim.. of the decoder's initial-state weights take the one-hot
    let id = store.id("dec.init.w").unwrap();
    let t = store.value_mut(id);
    let cols = t.shape()[1];
    let old = t.data().to_vec();
    for k in 0..z {
        let (dst, src) = (cfg.embed_dim + k, cfg.embed_dim + perm[k]);
        t.data_mut()[dst * cols..(dst + 1) * cols].copy_from_slice(&old[src * cols..(src + 1) * cols]);
    }
}

#[test]
fn log_marginal_is_invariant_to_mode_relabeling() {
    let mut model = tiny(5, 8);
    scramble(&mut model, 77, 0.4);
    let cond = condition(12);
    let y = target(12);
    let before = model.log_marginal(&cond, &y).unwrap();
    let loss_before = model.loss(&cond, &y).unwrap();
    let comps = model.infer_full(&cond).unwrap();
    let perm = [3, 0, 4, 1, 2];
    permute_modes(&mut model, &perm);
    let after = model.log_marginal(&cond, &y).unwrap();
    assert!((before - after).abs() <= 1e-12 * (1.0 + before.abs()));
    let loss_after = model.loss(&cond, &y).unwrap();
    assert!((loss_before.total - loss_after.total).abs() <= 1e-12 * (1.0 + loss_before.total.abs()));
    let permuted = model.infer_full(&cond).unwrap();
    for k in 0..5 {
        assert!((permuted[k].0 - comps[perm[k]].0).abs() <= 1e-15);
        assert_eq!(permuted[k].1, comps[perm[k]].1);
    }
}

fn set_prior(model: &mut CvaeModel, logits: &[f64]) {
    zero_params(model, "prior.w");
    set_param(model, "prior.b", |i| logits[i]);
}

#[test]
fn infer_map_follows_the_prior_argmax() {
    let mut model = tiny(12, 10);
    scramble(&mut model, 5, 0.4);
    let cond = condition(13);
    let rest = (0.1f64 / 11.0).ln();
    let logits: Vec<f64> = (0..12).map(|k| if k == 7 { 0.9f64.ln() } else { rest }).collect();
    set_prior(&mut model, &logits);
    let p = model.prior(&cond).unwrap().probs();
    assert!((p[7] - 0.9).abs() <= 1e-12);
    assert_eq!(model.infer_map(&cond).unwrap(), model.decode(&cond, 7).unwrap().mu);

    let mut tie = vec![0.0; 12];
    tie[3] = 1.5;
    tie[5] = 1.5;
    set_prior(&mut model, &tie);
    assert_eq!(model.prior(&cond).unwrap().argmax(), 3);
    assert_eq!(model.infer_map(&cond).unwrap(), model.decode(&cond, 3).unwrap().mu);
    assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
}

#[test]
fn infer_full_weights_and_mixture_mean() {
    let mut model = tiny(6, 14);
    scramble(&mut model, 15, 0.5);
    let cond = condition(16);
    let comps = model.infer_full(&cond).unwrap();
    assert_eq!(comps.len(), 6);
    let total: f64 = comps.iter().map(|c| c.0).sum();
    assert!((total - 1.0).abs() <= 1e-9);
    let zstar = model.prior(&cond).unwrap().argmax();
    assert_eq!(comps[zstar].1.mu, model.infer_map(&cond).unwrap());

    let prior = model.prior(&cond).unwrap().probs();
    for h in 0..H {
        let mut direct = [0.0; 2];
        for (z, w) in prior.iter().enumerate() {
            let mu = model.decode(&cond, z).unwrap().mu[h];
            direct[0] += w * mu[0];
            direct[1] += w * mu[1];
        }
        let mix: [f64; 2] = [0, 1].map(|d| comps.iter().map(|(w, s)| w * s.mu[h][d]).sum());
        for d in 0..2 {
            assert!((mix[d] - direct[d]).abs() <= 1e-12 * (1.0 + direct[d].abs()));
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut model = tiny(3, 17);
    scramble(&mut model, 18, 0.5);
    let cond = condition(19);
    let y = target(19);
    let worst = grad_check(model.store(), 1e-6, |g, s| {
        model.loss_graph(g, s, &cond, &y).map(|v| v.total).map_err(|e| match e {
            CvaeError::Autodiff(a) => a,
            other => panic!("{other}"),
        })
    })
    .unwrap();
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn checkpoint_round_trip() {
    let mut model = tiny(4, 20);
    scramble(&mut model, 21, 0.5);
    let cond = condition(22);
    let y = target(22);
    let data = vec![(cond.clone(), y.clone()), (condition(23), target(23))];
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 1,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &cfg, |_, _| StepControl::Continue).unwrap();
    assert_eq!(model.store().step(), 4);

    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model).unwrap();
    let loaded = read_checkpoint(&bytes[..]).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&mut again, &loaded).unwrap();
    assert_eq!(bytes, again);
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.store().step(), 4);
    assert_eq!(loaded.loss(&cond, &y).unwrap(), model.loss(&cond, &y).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap().loss(&cond, &y).unwrap(), model.loss(&cond, &y).unwrap());

    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let r = read_checkpoint(&bytes[..cut]);
        assert!(matches!(r, Err(CvaeError::BadMagic | CvaeError::Io(_))), "cut {cut}");
    }
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(read_checkpoint(&wrong[..]), Err(CvaeError::BadMagic)));
    let mut wrong = bytes.clone();
    wrong[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        read_checkpoint(&wrong[..]),
        Err(CvaeError::VersionMismatch { found: 7, expected: 1 })
    ));

    let mut extra = model.clone();
    extra.store_mut().add_zeros("extra", &[2]).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &extra).unwrap();
    assert!(matches!(read_checkpoint(&buf[..]), Err(CvaeError::ConfigMismatch(_))));
}

#[test]
fn training_is_deterministic_and_learns() {
    let data: Vec<_> = (0..6).map(|i| (condition(30 + i), target(30 + i))).collect();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 4,
        lr: 3e-3,
        seed: 5,
        max_steps: None,
        schedule: LrSchedule::Constant,
    };
    let run = || {
        let mut model = tiny(3, 31);
        let mut steps = Vec::new();
        let logs = train(&mut model, &data, &cfg, |_, s| {
            steps.push(s.loss.total);
            StepControl::Continue
        })
        .unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model).unwrap();
        (logs, steps, bytes)
    };
    let (a, sa, ba) = run();
    let (b, sb, bb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(ba, bb);
    assert_eq!(a.len(), 30);
    assert_eq!(a.last().unwrap().step, 60);
    assert!(a.last().unwrap().loss.total < a[0].loss.total);
}

#[test]
fn training_stops_early_and_at_max_steps() {
    let data: Vec<_> = (0..5).map(|i| (condition(50 + i), target(50 + i))).collect();
    let mut model = tiny(3, 1);
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 2,
        max_steps: Some(7),
        ..TrainConfig::default()
    };
    let logs = train(&mut model, &data, &cfg, |_, _| StepControl::Continue).unwrap();
    assert_eq!(model.store().step(), 7);
    assert_eq!(logs.last().unwrap().step, 7);
    assert!(logs.windows(2).all(|w| w[0].step < w[1].step));

    let mut model = tiny(3, 1);
    let logs = train(&mut model, &data, &cfg, |_, s| {
        if s.step == 4 {
            StepControl::Stop
        } else {
            StepControl::Continue
        }
    })
    .unwrap();
    assert_eq!(model.store().step(), 4);
    assert_eq!(logs.len(), 2);

    assert!(train(&mut model, &[], &cfg, |_, _| StepControl::Continue).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kl_nonnegative_and_distributions_normalized(seed in 0u64..10_000, scale in 0.05..1.5f64) {
        let mut model = tiny(5, seed);
        scramble(&mut model, seed ^ 0xabc, scale);
        let cond = condition(seed);
        let y = target(seed);
        let l = model.loss(&cond, &y).unwrap();
        prop_assert!(l.kl >= -1e-12);
        prop_assert!(l.mse >= 0.0);
        assert_normalized(&model.prior(&cond).unwrap());
        assert_normalized(&model.recognition(&cond, &y).unwrap());
        let lm = model.log_marginal(&cond, &y).unwrap();
        prop_assert!(lm + l.nll + l.kl >= -1e-9);
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let s = LrSchedule::Cosine { steps: 100, floor: 0.1 };
    assert_eq!(LrSchedule::Constant.rate(2e-3, 12345), 2e-3);
    assert_eq!(s.rate(1.0, 0), 1.0);
    assert!((s.rate(1.0, 50) - 0.55).abs() <= 1e-15);
    assert!((s.rate(1.0, 100) - 0.1).abs() <= 1e-15);
    assert_eq!(s.rate(1.0, 100), s.rate(1.0, 5000));
    assert!(s.rate(1.0, 30) > s.rate(1.0, 31));
}
