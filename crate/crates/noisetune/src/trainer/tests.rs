use super::*;
use crate::dataset::{encode, DatasetRecord};
use crate::model::ModelConfig;
use crate::noise::NoiseConfig;
use crate::objective::LossConfig;

fn tiny_model(layers: usize, lora_rank: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: 8,
        num_heads: 2,
        vocab_size: 256,
        max_seq_len: 64,
        lora_rank,
        lora_alpha: 16.0,
        lora_dropout: 0.05,
    }
}

fn toy_samples(n: usize) -> Vec<EncodedSample> {
    (0..n)
        .map(|i| {
            encode(&DatasetRecord {
                prompt: format!("p{i}"),
                response: format!("r{i}"),
            })
        })
        .collect()
}

fn small_train(objective: ObjectiveKind) -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Full,
        objective,
        learning_rate: 1e-3,
        batch_size: 2,
        grad_accum: 2,
        clip_norm: 1.0,
        epochs: 1,
        max_steps: 10,
        k_layers: 1,
        snr_passes: 1,
        snr_batches: 1,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    }
}

fn noise(sigma: f64) -> NoiseConfig {
    NoiseConfig {
        sigma_base: sigma,
        ..NoiseConfig::default()
    }
}

fn param_snapshot(t: &Trainer) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = t
        .model
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.to_f64_vec()))
        .collect();
    out.push(("noise.alpha".into(), t.noise_state.alpha.to_f64_vec()));
    out
}

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
    assert_eq!(cosine_lr(100, 100, 0.1), 0.0);
    assert_eq!(cosine_lr(150, 100, 0.1), 0.0, "clamped past the end");
    assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for s in 0..=20 {
        let lr = cosine_lr(s, 20, 0.1);
        assert!(lr < prev, "cosine schedule must decrease");
        prev = lr;
    }
}

#[test]
fn adamw_first_steps_match_hand_oracle() {
    let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.1);
    let mut data = vec![2.0];
    let mut slot = AdamMoments {
        m: vec![0.0],
        v: vec![0.0],
    };
    adamw_update_vec(&mut data, &[0.5], &mut slot, 1, lr, b1, b2, eps, wd);
    // t = 1: m_hat = g, v_hat = g^2, so the Adam term is g / (|g| + eps).
    let expected1 = 2.0 - lr * (0.5 / (0.5 + eps) + wd * 2.0);
    assert!((data[0] - expected1).abs() < 1e-15, "{} vs {expected1}", data[0]);

    // Second step with a different gradient, oracle written out longhand.
    adamw_update_vec(&mut data, &[-0.25], &mut slot, 2, lr, b1, b2, eps, wd);
    let m = 0.9 * (0.1 * 0.5) + 0.1 * (-0.25);
    let v = 0.999 * (0.001 * 0.25) + 0.001 * 0.0625;
    let m_hat = m / (1.0 - 0.9f64.powi(2));
    let v_hat = v / (1.0 - 0.999f64.powi(2));
    let expected2 = expected1 - lr * (m_hat / (v_hat.sqrt() + eps) + wd * expected1);
    assert!((data[0] - expected2).abs() < 1e-14, "{} vs {expected2}", data[0]);
}

#[test]
fn adamw_weight_decay_is_decoupled() {
    // Zero gradient: the moments stay zero and only decay moves the weight.
    let (lr, wd) = (0.1, 0.1);
    let mut data = vec![2.0, -3.0];
    let mut slot = AdamMoments {
        m: vec![0.0; 2],
        v: vec![0.0; 2],
    };
    adamw_update_vec(&mut data, &[0.0, 0.0], &mut slot, 1, lr, 0.9, 0.999, 1e-8, wd);
    assert_eq!(data[0], 2.0 - lr * (wd * 2.0));
    assert_eq!(data[1], -3.0 - lr * (wd * -3.0));
    assert_eq!(slot.m, vec![0.0; 2]);
    assert_eq!(slot.v, vec![0.0; 2]);
}

fn grad_fixture() -> Tensor {
    // d(0.5 * sum(x^2))/dx = x, so the gradient is [3, 4] with norm 5.
    let x = Tensor::param(vec![3.0, 4.0], &[2]).unwrap();
    x.mul(&x).unwrap().sum_all().scale(0.5).backward().unwrap();
    x
}

#[test]
fn clip_scales_gradients_to_max_norm() {
    let x = grad_fixture();
    let params = vec![("x".to_string(), &x)];
    let norm = clip_global_norm(&params, 1.0);
    assert!((norm - 5.0).abs() < 1e-12);
    let g = x.grad().unwrap();
    assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
}

#[test]
fn clip_leaves_small_gradients_untouched() {
    let x = grad_fixture();
    let params = vec![("x".to_string(), &x)];
    assert!((clip_global_norm(&params, 10.0) - 5.0).abs() < 1e-12);
    assert_eq!(x.grad().unwrap(), vec![3.0, 4.0], "no rescaling below the cap");

    let y = grad_fixture();
    let params = vec![("y".to_string(), &y)];
    assert!((clip_global_norm(&params, 0.0) - 5.0).abs() < 1e-12);
    assert_eq!(y.grad().unwrap(), vec![3.0, 4.0], "0 disables clipping");
}

#[test]
fn finite_guard_reports_position() {
    assert!(assert_finite_losses(3, 1, &[("l_ce", 0.25)]).is_ok());
    let err = assert_finite_losses(3, 1, &[("l_final", f64::NAN)]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("l_final") && msg.contains("step 3"), "{msg}");
    assert!(matches!(
        assert_finite_losses(0, 0, &[("l_soft", f64::INFINITY)]),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn metrics_row_matches_csv_header() {
    let row = MetricsRow {
        step: 7,
        lr: 1e-4,
        l_ce: 5.5,
        l_soft: 0.25,
        l_consistency: 0.125,
        l_final: 2.9,
        grad_norm: 0.75,
        selected_layers: "0|2|3".into(),
        sigma_base: 0.01,
        eta_mode: "variance".into(),
    };
    let line = row.to_csv();
    assert_eq!(
        line.split(',').count(),
        MetricsRow::CSV_HEADER.split(',').count()
    );
    let fields: Vec<&str> = line.split(',').collect();
    assert_eq!(fields[0], "7");
    assert_eq!(fields[7], "0|2|3");
    assert_eq!(fields[9], "variance");
}

#[test]
fn hybrid_training_is_deterministic_across_trainers() {
    let samples = toy_samples(6);
    let run = || {
        let mut t = Trainer::new(
            tiny_model(2, 0),
            noise(0.05),
            LossConfig::default(),
            small_train(ObjectiveKind::Hybrid),
            11,
        )
        .unwrap();
        let summary = t.train(&samples, None).unwrap();
        (summary, param_snapshot(&t))
    };
    let (sum_a, params_a) = run();
    let (sum_b, params_b) = run();
    assert_eq!(sum_a.history, sum_b.history, "telemetry must be bitwise equal");
    assert_eq!(params_a, params_b, "weights must be bitwise equal");
    assert_eq!(sum_a.final_step, 2, "6 samples / bs 2 / accum 2 -> 2 groups");
    for row in &sum_a.history {
        assert!(row.l_soft > 0.0, "soft loss should be live under noise");
        assert!(row.grad_norm.is_finite() && row.grad_norm > 0.0);
        assert!(!row.selected_layers.is_empty(), "auto-profile must have run");
        assert_eq!(row.eta_mode, "variance");
    }
}

#[test]
fn plain_ce_objective_has_no_noise_terms() {
    let samples = toy_samples(4);
    let mut t = Trainer::new(
        tiny_model(2, 0),
        noise(0.05),
        LossConfig::default(),
        small_train(ObjectiveKind::PlainCe),
        11,
    )
    .unwrap();
    let summary = t.train(&samples, None).unwrap();
    assert!(t.selected_layers.is_empty(), "no profiling for the baseline");
    for row in &summary.history {
        assert_eq!(row.l_soft, 0.0);
        assert_eq!(row.l_consistency, 0.0);
        assert_eq!(row.l_final, row.l_ce, "plain objective is CE exactly");
        assert_eq!(row.selected_layers, "");
    }
}

#[test]
fn grad_accum_averages_micro_batches() {
    // Two micro-batches of the same sample averaged together must match one
    // step on that sample alone: g/2 + g/2 == g exactly in binary floating
    // point, so the resulting weights are bitwise identical.
    let record = DatasetRecord {
        prompt: "ab".into(),
        response: "cd".into(),
    };
    let one = vec![encode(&record)];
    let two = vec![encode(&record), encode(&record)];

    let mut cfg = small_train(ObjectiveKind::PlainCe);
    cfg.batch_size = 1;
    cfg.grad_accum = 2;
    cfg.max_steps = 1;
    let mut t_two = Trainer::new(tiny_model(2, 0), noise(0.0), LossConfig::default(), cfg, 5).unwrap();
    t_two.train(&two, None).unwrap();

    let mut cfg1 = small_train(ObjectiveKind::PlainCe);
    cfg1.batch_size = 1;
    cfg1.grad_accum = 1;
    cfg1.max_steps = 1;
    let mut t_one = Trainer::new(tiny_model(2, 0), noise(0.0), LossConfig::default(), cfg1, 5).unwrap();
    t_one.train(&one, None).unwrap();

    assert_eq!(param_snapshot(&t_two), param_snapshot(&t_one));
}

#[test]
fn peft_freezes_base_and_moves_adapters() {
    let samples = toy_samples(4);
    let mut cfg = small_train(ObjectiveKind::Hybrid);
    cfg.mode = TrainMode::Peft;
    cfg.grad_accum = 1;
    cfg.max_steps = 2;
    let mut t = Trainer::new(tiny_model(2, 2), noise(0.1), LossConfig::default(), cfg, 13).unwrap();

    let trainable: Vec<String> = t.trainable().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        trainable.len(),
        2 * 4 + 1,
        "peft trains 4 adapter mats per layer plus the noise scale"
    );
    assert!(trainable.iter().all(|n| n.contains("lora") || n == "noise.alpha"));

    let before = param_snapshot(&t);
    t.train(&samples, None).unwrap();
    let after = param_snapshot(&t);

    let mut lora_moved = false;
    for ((name, b), (_, a)) in before.iter().zip(&after) {
        if name.contains("lora") || name == "noise.alpha" {
            lora_moved |= name.contains("lora") && a != b;
        } else {
            assert_eq!(a, b, "base parameter {name} must stay frozen");
        }
    }
    assert!(lora_moved, "some adapter weight must change");
    let alpha = t.noise_state.alpha.item().unwrap();
    assert_ne!(alpha, 1.0, "the noise scale is trainable");
}

#[test]
fn full_mode_updates_base_weights() {
    let samples = toy_samples(4);
    let mut cfg = small_train(ObjectiveKind::PlainCe);
    cfg.grad_accum = 1;
    cfg.max_steps = 1;
    let mut t = Trainer::new(tiny_model(2, 0), noise(0.0), LossConfig::default(), cfg, 13).unwrap();
    let before = t.model.tok_embed.to_f64_vec();
    t.train(&samples, None).unwrap();
    assert_ne!(t.model.tok_embed.to_f64_vec(), before);
}

#[test]
fn profile_selects_k_layers_deterministically() {
    let samples = toy_samples(4);
    let mut cfg = small_train(ObjectiveKind::Hybrid);
    cfg.k_layers = 2;
    cfg.snr_passes = 2;
    let build = || {
        Trainer::new(tiny_model(3, 0), noise(0.02), LossConfig::default(), cfg.clone(), 17).unwrap()
    };
    let mut t1 = build();
    let report1 = t1.profile(&samples).unwrap();
    let mut t2 = build();
    let report2 = t2.profile(&samples).unwrap();

    assert_eq!(report1.rows.len(), 3);
    for (r1, r2) in report1.rows.iter().zip(&report2.rows) {
        assert_eq!(r1.snr, r2.snr, "profiling must be deterministic");
        assert!(r1.snr.is_finite() && r1.snr > 0.0);
    }
    assert_eq!(t1.selected_layers, t2.selected_layers);
    assert_eq!(t1.selected_layers.len(), 2);
    assert!(t1.selected_layers.iter().all(|&l| l < 3));

    let mut bad = cfg.clone();
    bad.k_layers = 5;
    let mut t3 = Trainer::new(tiny_model(3, 0), noise(0.02), LossConfig::default(), bad, 17).unwrap();
    assert!(matches!(t3.profile(&samples), Err(Error::Config(_))));
}

#[test]
fn profile_works_in_logits_eta_mode() {
    let samples = toy_samples(4);
    let mut nc = noise(0.02);
    nc.eta_mode = EtaMode::Logits;
    let mut cfg = small_train(ObjectiveKind::Hybrid);
    cfg.k_layers = 1;
    let mut t = Trainer::new(tiny_model(2, 0), nc, LossConfig::default(), cfg, 19).unwrap();
    t.profile(&samples).unwrap();
    assert_eq!(t.selected_layers.len(), 1);
}

#[test]
fn checkpoint_resume_replays_the_exact_tail() {
    let samples = toy_samples(8);
    let mut cfg = small_train(ObjectiveKind::Hybrid);
    cfg.epochs = 3; // 8 samples / bs 2 / accum 2 -> 2 groups per epoch, 6 total
    cfg.checkpoint_interval = 3;
    let dir = tempfile::tempdir().unwrap();

    let mut full = Trainer::new(
        tiny_model(2, 0),
        noise(0.05),
        LossConfig::default(),
        cfg.clone(),
        21,
    )
    .unwrap();
    let summary = full.train(&samples, Some(dir.path())).unwrap();
    assert_eq!(summary.final_step, 6);
    assert!(dir.path().join("checkpoint-3.ntck").exists());
    assert!(dir.path().join("checkpoint-6.ntck").exists());
    assert!(dir.path().join("checkpoint-final.ntck").exists());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "header plus six steps");
    assert!(csv.lines().next().unwrap().starts_with("step,lr,"));

    let ck = Checkpoint::load(&dir.path().join("checkpoint-3.ntck")).unwrap();
    let mut resumed = Trainer::new(
        tiny_model(2, 0),
        noise(0.05),
        LossConfig::default(),
        cfg.clone(),
        21,
    )
    .unwrap();
    resumed.load_checkpoint(&ck).unwrap();
    assert_eq!(resumed.step, 3);
    assert!(!resumed.selected_layers.is_empty(), "selection restored");

    let tail = resumed.train(&samples, None).unwrap();
    assert_eq!(tail.history.len(), 3);
    assert_eq!(
        tail.history[..],
        summary.history[3..],
        "resumed telemetry must match the uninterrupted run bitwise"
    );
    assert_eq!(param_snapshot(&resumed), param_snapshot(&full));
}

#[test]
fn checkpoint_guards_seed_and_shapes() {
    let samples = toy_samples(4);
    let mut cfg = small_train(ObjectiveKind::PlainCe);
    cfg.grad_accum = 1;
    cfg.max_steps = 1;
    let mut t = Trainer::new(tiny_model(2, 0), noise(0.0), LossConfig::default(), cfg.clone(), 3).unwrap();
    t.train(&samples, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.ntck");
    t.save_checkpoint(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.step, 1);

    let mut wrong_seed =
        Trainer::new(tiny_model(2, 0), noise(0.0), LossConfig::default(), cfg.clone(), 4).unwrap();
    assert!(matches!(wrong_seed.load_checkpoint(&ck), Err(Error::Config(_))));

    let mut wider = tiny_model(2, 0);
    wider.hidden_dim = 16;
    let mut wrong_shape =
        Trainer::new(wider, noise(0.0), LossConfig::default(), cfg, 3).unwrap();
    assert!(matches!(wrong_shape.load_checkpoint(&ck), Err(Error::Config(_))));
}

#[test]
fn exact_match_evaluation_is_deterministic_and_bounded() {
    let records: Vec<DatasetRecord> = (0..2)
        .map(|i| DatasetRecord {
            prompt: format!("p{i}"),
            response: format!("r{i}"),
        })
        .collect();
    let cfg = small_train(ObjectiveKind::PlainCe);
    let t = Trainer::new(tiny_model(2, 0), noise(0.0), LossConfig::default(), cfg, 23).unwrap();
    let a = t.evaluate_exact_match(&records, 8).unwrap();
    let b = t.evaluate_exact_match(&records, 8).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));
    assert!(matches!(
        t.evaluate_exact_match(&[], 8),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn invalid_configurations_are_rejected() {
    let ok = small_train(ObjectiveKind::Hybrid);

    let mut c = ok.clone();
    c.learning_rate = 0.0;
    assert!(c.validate().is_err());

    let mut c = ok.clone();
    c.epochs = 0;
    assert!(c.validate().is_err());

    let mut c = ok.clone();
    c.beta1 = 1.0;
    assert!(c.validate().is_err());

    let mut c = ok.clone();
    c.k_layers = 0;
    assert!(c.validate().is_err());

    let mut c = ok.clone();
    c.clip_norm = f64::NAN;
    assert!(c.validate().is_err());

    // Peft with no adapters has nothing to train.
    let mut peft = ok;
    peft.mode = TrainMode::Peft;
    assert!(matches!(
        Trainer::new(tiny_model(2, 0), noise(0.0), LossConfig::default(), peft, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn empty_sets_are_rejected() {
    let mut t = Trainer::new(
        tiny_model(2, 0),
        noise(0.0),
        LossConfig::default(),
        small_train(ObjectiveKind::PlainCe),
        1,
    )
    .unwrap();
    assert!(matches!(t.train(&[], None), Err(Error::Degenerate(_))));
    assert!(matches!(t.profile(&[]), Err(Error::Degenerate(_))));
}
