use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xflab_core::model::{CheckpointContainer, ModelConfig, TransformerModel, Variant};
use xflab_core::optim::{
    adamw_step, clip_grad_norm, lr_at, muon_lite_step, newton_schulz, AdamWParams, OptimConfig, Optimizer, ParamKind,
};
use xflab_core::tensor::{Gradients, Tensor};
use xflab_core::Error;

fn hyper(lr: f64, decay: f64) -> AdamWParams {
    AdamWParams {
        lr,
        betas: (0.9, 0.95),
        eps: 1e-8,
        decay,
        cautious: false,
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn adamw_zero_grad_without_decay_is_a_no_op() {
    let mut p = random(&[3, 3], 1);
    let before = p.clone();
    let (mut m, mut v) = (Tensor::zeros(&[3, 3]), Tensor::zeros(&[3, 3]));
    adamw_step(&mut p, &Tensor::zeros(&[3, 3]), &mut m, &mut v, 1, &hyper(0.1, 0.0)).unwrap();
    assert_eq!(p.data(), before.data());
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut p = Tensor::<f64>::full(&[1], 1.0);
    let (mut m, mut v) = (Tensor::<f64>::zeros(&[1]), Tensor::<f64>::zeros(&[1]));
    adamw_step(&mut p, &Tensor::full(&[1], 1.0), &mut m, &mut v, 1, &hyper(0.1, 0.0)).unwrap();
    // Bias-corrected m̂ = v̂ = 1, so the step is lr / (1 + eps).
    let expect = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((p.data()[0] - expect).abs() < 1e-15);
    assert!((p.data()[0] - 0.9).abs() < 1e-6);
    assert!((m.data()[0] - 0.1).abs() < 1e-15);
    assert!((v.data()[0] - 0.05).abs() < 1e-15);
}

#[test]
fn adamw_matches_hand_recurrence_over_several_steps() {
    let grads = [0.3, -1.2, 0.7, 0.0, 2.5];
    let mut p = Tensor::<f64>::full(&[1], 0.4);
    let (mut m, mut v) = (Tensor::zeros(&[1]), Tensor::zeros(&[1]));
    let (mut x, mut mm, mut vv) = (0.4f64, 0.0f64, 0.0f64);
    for (i, g) in grads.iter().enumerate() {
        let t = i as i32 + 1;
        adamw_step(&mut p, &Tensor::full(&[1], *g), &mut m, &mut v, t as u64, &hyper(0.01, 0.1)).unwrap();
        mm = 0.9 * mm + 0.1 * g;
        vv = 0.95 * vv + 0.05 * g * g;
        let dir = (mm / (1.0 - 0.9f64.powi(t))) / ((vv / (1.0 - 0.95f64.powi(t))).sqrt() + 1e-8);
        x = x - 0.01 * 0.1 * x - 0.01 * dir;
    }
    assert!((p.data()[0] - x).abs() < 1e-14);
}

#[test]
fn decay_only_shrinks_by_lr_times_decay() {
    let mut p = Tensor::<f64>::full(&[2, 2], 2.0);
    let (mut m, mut v) = (Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]));
    for step in 1..=3 {
        adamw_step(&mut p, &Tensor::zeros(&[2, 2]), &mut m, &mut v, step, &hyper(0.1, 0.5)).unwrap();
    }
    assert!(p.data().iter().all(|&x| (x - 2.0 * 0.95f64.powi(3)).abs() < 1e-15));
}

#[test]
fn cautious_decay_skips_opposing_coordinates() {
    let mut h = hyper(0.1, 0.5);
    h.cautious = true;
    // p > 0 with a negative gradient: the update pushes p up, decay would pull it down.
    let mut p = Tensor::<f64>::new(vec![2], vec![1.0, 1.0]).unwrap();
    let g = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
    let (mut m, mut v) = (Tensor::zeros(&[2]), Tensor::zeros(&[2]));
    adamw_step(&mut p, &g, &mut m, &mut v, 1, &h).unwrap();
    let step = 0.1 / (1.0 + 1e-8);
    assert!((p.data()[0] - (1.0 + step)).abs() < 1e-15);
    assert!((p.data()[1] - (1.0 - 0.05 - step)).abs() < 1e-15);
}

#[test]
fn adamw_rejects_state_shape_mismatch() {
    let mut p = Tensor::<f64>::zeros(&[2]);
    let (mut m, mut v) = (Tensor::zeros(&[3]), Tensor::zeros(&[2]));
    assert!(adamw_step(&mut p, &Tensor::zeros(&[2]), &mut m, &mut v, 1, &hyper(0.1, 0.0)).is_err());
}

fn grads_with_norm(norm: f64) -> Gradients<f64> {
    let mut g = Gradients::default();
    g.insert(0, Tensor::new(vec![2], vec![0.6 * norm, 0.0]).unwrap());
    g.insert(3, Tensor::new(vec![1], vec![0.8 * norm]).unwrap());
    g
}

#[test]
fn clipping_examples() {
    let mut g = grads_with_norm(10.0);
    let r = clip_grad_norm(&mut g, 1.0).unwrap();
    assert!((r.norm - 10.0).abs() < 1e-12 && (r.scale - 0.1).abs() < 1e-15);
    assert!((g.global_norm() - 1.0).abs() < 1e-12);

    let mut g = grads_with_norm(0.5);
    let r = clip_grad_norm(&mut g, 1.0).unwrap();
    assert_eq!(r.scale, 1.0);
    assert_eq!(g.get(0).unwrap().data(), &[0.3, 0.0]);
}

#[test]
fn non_finite_gradient_norm_aborts() {
    let mut g = grads_with_norm(1.0);
    g.insert(5, Tensor::new(vec![1], vec![f64::NAN]).unwrap());
    assert!(matches!(clip_grad_norm(&mut g, 1.0), Err(Error::NumericFault { .. })));
}

proptest! {
    #[test]
    fn clipped_norm_is_min_of_norm_and_limit(values in prop::collection::vec(-50.0f64..50.0, 1..20), limit in 0.01f64..10.0) {
        let mut g = Gradients::default();
        let n = values.len();
        g.insert(0, Tensor::new(vec![n], values).unwrap());
        let before = g.global_norm();
        clip_grad_norm(&mut g, limit).unwrap();
        prop_assert!((g.global_norm() - before.min(limit)).abs() < 1e-6);
    }
}

fn singular_values(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    DMatrix::from_row_slice(rows, cols, x).singular_values().iter().copied().collect()
}

#[test]
fn orthogonal_momentum_gives_unit_singular_values() {
    let q = DMatrix::from_row_slice(6, 6, random(&[6, 6], 2).data()).qr().q();
    let flat: Vec<f64> = q.transpose().iter().copied().collect();
    let out = newton_schulz(&flat, 6, 6, 5);
    for s in singular_values(&out, 6, 6) {
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn newton_schulz_pulls_generic_spectra_toward_one() {
    for (rows, cols, seed) in [(8, 8, 3), (4, 10, 4), (12, 5, 5)] {
        let x = random(&[rows, cols], seed);
        let out = newton_schulz(x.data(), rows, cols, 5);
        let before = singular_values(x.data(), rows, cols);
        let after = singular_values(&out, rows, cols);
        let spread = |s: &[f64]| s.iter().cloned().fold(0.0, f64::max) / s.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread(&after) < spread(&before), "{rows}x{cols}");
        assert!(after.iter().all(|&s| s > 0.0 && s < 1.5), "{after:?}");
    }
}

#[test]
fn muon_zero_grad_and_momentum_is_a_no_op() {
    let mut p = random(&[4, 3], 6);
    let before = p.clone();
    let mut mom = Tensor::zeros(&[4, 3]);
    muon_lite_step(&mut p, &Tensor::zeros(&[4, 3]), &mut mom, 0.02, 0.95, 0.0).unwrap();
    assert_eq!(p.data(), before.data());
}

#[test]
fn muon_update_ignores_gradient_scale() {
    let g = random(&[5, 4], 7);
    let g10 = Tensor::from_fn(&[5, 4], |i| 10.0 * g.data()[i]);
    let run = |grad: &Tensor<f64>| {
        let mut p = Tensor::<f64>::zeros(&[5, 4]);
        let mut mom = Tensor::zeros(&[5, 4]);
        muon_lite_step(&mut p, grad, &mut mom, 1.0, 0.95, 0.0).unwrap();
        p
    };
    let (a, b) = (run(&g), run(&g10));
    assert!(a.max_abs_diff(&b) < 1e-9);
}

#[test]
fn muon_refuses_non_matrices() {
    let mut p = Tensor::<f64>::zeros(&[4]);
    let mut mom = Tensor::zeros(&[4]);
    assert!(matches!(
        muon_lite_step(&mut p, &Tensor::zeros(&[4]), &mut mom, 0.02, 0.95, 0.0),
        Err(Error::Contract(_))
    ));
}

fn schedule(warmup: u64, warmdown: u64, total: u64) -> OptimConfig {
    let mut c = OptimConfig::new(total);
    c.warmup_steps = warmup;
    c.warmdown_steps = warmdown;
    c
}

#[test]
fn schedule_examples() {
    let c = schedule(1000, 7630, 38_147);
    assert_eq!(lr_at(500, &c), 0.5);
    assert_eq!(lr_at(0, &c), 0.0);
    assert_eq!(lr_at(1000, &c), 1.0);
    assert_eq!(lr_at(20_000, &c), 1.0);
    assert_eq!(lr_at(38_147 - 7630, &c), 1.0);
    assert_eq!(lr_at(38_147 - 3815, &c), 3815.0 / 7630.0);
    assert_eq!(lr_at(38_147, &c), 0.0);
    assert!(schedule(10, 10, 15).validate().is_err());
}

proptest! {
    #[test]
    fn schedule_stays_in_unit_interval(warmup in 0u64..50, warmdown in 0u64..50, extra in 0u64..50, step in 0u64..200) {
        let c = schedule(warmup, warmdown, warmup + warmdown + extra);
        let v = lr_at(step, &c);
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

fn toy() -> TransformerModel<f64> {
    let mut m = TransformerModel::build(ModelConfig::preset(Variant::Exoformer, 2, 16, 2, 32, 8).with_mix(|m| m.dynamic = true), 1)
        .unwrap();
    m.perturb(2, 0.05);
    m
}

#[test]
fn parameter_partition_is_total_and_decay_follows_it() {
    let mut model = toy();
    let before = model.clone();
    let mut cfg = OptimConfig::new(10);
    cfg.weight_decay = 0.5;
    cfg.adamw_lr = 0.1;
    let mut opt = Optimizer::new(cfg, &model).unwrap();
    opt.step(&mut model, &mut Gradients::default()).unwrap();
    for (a, b) in before.params().iter().zip(model.params()) {
        let kind = ParamKind::of(&a.name, a.tensor.shape());
        let is_weight = a.name.ends_with(".weight") || a.name.contains(".w");
        assert_eq!(kind == ParamKind::Matrix, is_weight, "{}", a.name);
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            match kind {
                ParamKind::Matrix => assert!((y - 0.95 * x).abs() < 1e-15, "{}", a.name),
                ParamKind::Vector => assert_eq!(x, y, "{}", a.name),
            }
        }
    }
}

#[test]
fn muon_covers_hidden_matrices_only() {
    let model = toy();
    let mut cfg = OptimConfig::new(10);
    cfg.muon_enabled = true;
    let opt = Optimizer::new(cfg, &model).unwrap();
    let mut c = CheckpointContainer::new();
    opt.save_into(&mut c, &model).unwrap();
    let muon: Vec<&str> = c.names().filter_map(|n| n.strip_prefix("optim.muon.m.")).collect();
    assert!(muon.contains(&"layer1.attn.wq"));
    assert!(muon.contains(&"anchor.q.weight"));
    assert!(!muon.contains(&"embed.weight"));
    assert!(!muon.contains(&"lm_head.weight"));
    assert!(!muon.iter().any(|n| n.contains("gain") || n.contains("lambda") || n.ends_with(".b")));
}

#[test]
fn optimizer_state_round_trips_through_container() {
    for muon in [false, true] {
        let mut model = toy();
        let mut cfg = OptimConfig::new(10);
        cfg.muon_enabled = muon;
        cfg.weight_decay = 0.01;
        let mut opt = Optimizer::new(cfg, &model).unwrap();
        let batch = vec![((0..8).collect::<Vec<_>>(), (1..9).collect::<Vec<_>>())];
        for _ in 0..3 {
            let (_, mut g) = model.loss_and_grads(&batch).unwrap();
            opt.step(&mut model, &mut g).unwrap();
        }
        let mut c = model.to_container().unwrap();
        opt.save_into(&mut c, &model).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = CheckpointContainer::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let restored_model = TransformerModel::<f64>::from_container(&back).unwrap();
        let restored = Optimizer::load_from(&back, &restored_model).unwrap();
        assert!(restored.state_eq(&opt), "muon={muon}");
        assert_eq!(restored.step_count(), 3);
    }
}

#[test]
fn training_decreases_loss_on_a_memorizable_corpus() {
    let corpus: Vec<usize> = b"abcabdabcabe".iter().cycle().take(256).map(|&b| b as usize).collect();
    let cfg = ModelConfig::preset(Variant::Gated, 2, 16, 2, 257, 16);
    let mut model = TransformerModel::<f64>::build(cfg, 3).unwrap();
    let mut opt = Optimizer::new(
        OptimConfig {
            adamw_lr: 1e-2,
            ..OptimConfig::new(200)
        },
        &model,
    )
    .unwrap();
    let batch: Vec<(Vec<usize>, Vec<usize>)> = (0..4)
        .map(|i| (corpus[i * 17..i * 17 + 16].to_vec(), corpus[i * 17 + 1..i * 17 + 17].to_vec()))
        .collect();
    let initial = model.loss(&batch).unwrap().total;
    for _ in 0..200 {
        let (_, mut g) = model.loss_and_grads(&batch).unwrap();
        opt.step(&mut model, &mut g).unwrap();
    }
    let fin = model.loss(&batch).unwrap().total;
    assert!(fin < initial, "{initial} -> {fin}");
}
