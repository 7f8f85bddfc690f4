use super::*;
use crate::synthgen::{generate_dataset, make_task, Month, Profile};

fn vocab() -> Vocabulary {
    Vocabulary::new(P10Config::default()).unwrap()
}

fn arch(encoder_layers: usize) -> ArchConfig {
    ArchConfig {
        encoder_layers,
        decoder_layers: 1,
        heads: 2,
        head_dim: 4,
        embed_dim: 8,
        mlp_dim: 16,
        max_encoder_len: 24,
        max_decoder_len: 8,
        vocab_size: vocab().size(),
        seed: 3,
    }
}

fn data(n: usize, seed: u64) -> RegressionDataset {
    let mut t = make_task(1, Month::Jun, Profile::LowNoise, seed).unwrap();
    t.noise_sigma = 0.0;
    generate_dataset(&t, n, seed).unwrap()
}

fn cfg(max_steps: u64) -> TrainConfig {
    TrainConfig { batch_size: 4, warmup_steps: 5, max_steps, eval_every: 5, max_eval_examples: 8, ..Default::default() }
}

#[test]
fn schedule_endpoints() {
    let c = TrainConfig { base_lr: 0.1, warmup_steps: 1000, ..Default::default() };
    assert_eq!(lr_schedule(0, &c), 0.0);
    assert_eq!(lr_schedule(500, &c), 0.05);
    assert_eq!(lr_schedule(1000, &c), 0.1);
    assert!((lr_schedule(4000, &c) - 0.05).abs() < 1e-15);
    let flat = TrainConfig { warmup_steps: 0, base_lr: 0.3, ..Default::default() };
    assert_eq!(lr_schedule(0, &flat), 0.3);
    assert_eq!(lr_schedule(77, &flat), 0.3);
}

#[test]
fn cyclic_schedule_decays_within_cycle() {
    let c = TrainConfig {
        base_lr: 1.0,
        warmup_steps: 100,
        schedule: Schedule::Cyclic { decay_factor: 0.5, steps_per_decay: 200, steps_per_cycle: 1000 },
        ..Default::default()
    };
    let inv = |s: u64| (100.0 / s as f64).sqrt();
    assert_eq!(lr_schedule(50, &c), 0.5);
    assert_eq!(lr_schedule(100, &c), 1.0);
    assert_eq!(lr_schedule(350, &c), inv(350) * 0.5);
    assert_eq!(lr_schedule(1099, &c), inv(1099) * 0.5f64.powi(4));
    assert_eq!(lr_schedule(1100, &c), inv(1100));
    let bad = TrainConfig {
        schedule: Schedule::Cyclic { decay_factor: 0.5, steps_per_decay: 0, steps_per_cycle: 10 },
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn example_layout() {
    let v = vocab();
    let ex = encode_example("cell: cell_a\nmore", 72.5, &v, 4).unwrap();
    assert_eq!(ex.enc, b"cell".iter().map(|&b| b as TokenId).collect::<Vec<_>>());
    let y = v.encode_p10(&encode_y(72.5, v.p10()).unwrap());
    assert_eq!(ex.dec_in[0], BOS);
    assert_eq!(&ex.dec_in[1..], &y[..]);
    assert_eq!(&ex.targets[..y.len()], &y[..]);
    assert_eq!(*ex.targets.last().unwrap(), EOS);
    assert!(encode_example("x", f64::NAN, &v, 4).is_err());
}

#[test]
fn unencodable_label_is_a_dataset_error() {
    let mut d = data(20, 1);
    d.records[0].y = 1e300;
    let err = pretrain(&[d], &arch(1), &cfg(2), &vocab()).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)), "{err}");
}

#[test]
fn zero_steps_returns_init() {
    let run = pretrain(&[data(20, 1)], &arch(1), &cfg(0), &vocab()).unwrap();
    assert_eq!(run.checkpoints.len(), 1);
    assert_eq!(run.best, 0);
    assert_eq!(run.checkpoints[0].params, init_model(&arch(1)).unwrap());
    assert_eq!(run.checkpoints[0].step, 0);
}

#[test]
fn runs_are_deterministic() {
    let d = [data(40, 2)];
    let a = pretrain(&d, &arch(1), &cfg(12), &vocab()).unwrap();
    let b = pretrain(&d, &arch(1), &cfg(12), &vocab()).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.log, b.log);
    let steps: Vec<u64> = a.checkpoints.iter().map(|c| c.step).collect();
    assert_eq!(steps, vec![0, 5, 10, 12]);
}

#[test]
fn training_reduces_validation_loss() {
    let d = [data(200, 4)];
    let c = TrainConfig {
        batch_size: 16,
        base_lr: 5e-3,
        warmup_steps: 20,
        max_steps: 300,
        eval_every: 100,
        max_eval_examples: 20,
        ..Default::default()
    };
    for enc in [1, 0] {
        let run = pretrain(&d, &arch(enc), &c, &vocab()).unwrap();
        let first = run.checkpoints[0].val_loss.unwrap();
        let last = run.last_checkpoint().val_loss.unwrap();
        assert!(last < 0.6 * first, "{enc}E: {first} -> {last}");
    }
}

#[test]
fn best_checkpoint_has_minimum_loss() {
    let run = pretrain(&[data(40, 5)], &arch(1), &cfg(20), &vocab()).unwrap();
    let best = run.best_checkpoint().val_loss.unwrap();
    assert!(run.checkpoints.iter().all(|c| c.val_loss.unwrap() >= best));
    assert_eq!(run.min_val_loss(), best);
}

#[test]
fn early_stopping_halts_after_patience() {
    // lr too large to improve anything after the first evaluation
    let c = TrainConfig { base_lr: 5.0, warmup_steps: 0, early_stop_patience: 2, ..cfg(200) };
    let run = pretrain(&[data(40, 6)], &arch(1), &c, &vocab()).unwrap();
    let last = run.last_checkpoint();
    assert!(last.step < 200, "stopped at {}", last.step);
    assert_eq!(last.stale_evals, 2);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let run = pretrain(&[data(40, 7)], &arch(1), &cfg(7), &vocab()).unwrap();
    let ck = run.last_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(ck, &path).unwrap();
    assert_eq!(&load_checkpoint(&path).unwrap(), ck);
    // overwrite in place
    save_checkpoint(&run.checkpoints[0], &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), run.checkpoints[0]);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn bumped_version_is_rejected() {
    let run = pretrain(&[data(20, 8)], &arch(1), &cfg(0), &vocab()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&run.checkpoints[0], &path).unwrap();
    let m = path.join("manifest");
    let text = std::fs::read_to_string(&m).unwrap();
    std::fs::write(&m, text.replace("format_version = 1", "format_version = 2")).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Version { found: 2, expected: 1 }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupt_and_mismatched_files_are_rejected() {
    let run = pretrain(&[data(20, 9)], &arch(1), &cfg(0), &vocab()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&run.checkpoints[0], &path).unwrap();
    let t = path.join("tensors.bin");
    let mut bytes = std::fs::read(&t).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    std::fs::write(&t, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));

    save_checkpoint(&run.checkpoints[0], &path).unwrap();
    let m = path.join("manifest");
    let text = std::fs::read_to_string(&m).unwrap();
    std::fs::write(&m, text.replace("mlp_dim = 16", "mlp_dim = 17")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Compatibility(_))));
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let d = [data(40, 10)];
    let full = pretrain(&d, &arch(1), &cfg(15), &vocab()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck5");
    save_checkpoint(&full.checkpoints[1], &path).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    assert_eq!(restored.step, 5);
    let rest = resume(&restored, &d, &cfg(15), &vocab(), &mut |_, _| Ok(())).unwrap();
    assert_eq!(rest.checkpoints[..], full.checkpoints[2..]);
}

#[test]
fn observer_sees_every_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let mut seen = Vec::new();
    let run = pretrain_observed(&[data(40, 11)], &arch(1), &cfg(10), &vocab(), &mut |ck, rows| {
        seen.push(ck.step);
        append_log(&log, rows)
    })
    .unwrap();
    assert_eq!(seen, vec![0, 5, 10]);
    let rows = read_log(&log).unwrap();
    assert_eq!(rows, run.log);
    assert!(rows.windows(2).all(|w| w[0].step <= w[1].step));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("step,split,loss,lr\n0,val,"));
}

#[test]
fn finetune_zero_epochs_is_identity() {
    let run = pretrain(&[data(20, 12)], &arch(1), &cfg(5), &vocab()).unwrap();
    let ck = run.last_checkpoint();
    let f = FinetuneConfig { max_epochs: 0, ..Default::default() };
    assert_eq!(&finetune(ck, &data(20, 13), &f, &vocab()).unwrap(), ck);
    let f = FinetuneConfig { examples: 0, ..Default::default() };
    assert_eq!(&finetune(ck, &data(20, 13), &f, &vocab()).unwrap(), ck);
}

#[test]
fn tiny_finetune_fills_batch_by_repetition() {
    let run = pretrain(&[data(20, 14)], &arch(1), &cfg(5), &vocab()).unwrap();
    let f = FinetuneConfig { examples: 4, max_epochs: 3, learning_rate: 1e-3, ..Default::default() };
    let r = finetune_logged(run.last_checkpoint(), &data(40, 15), &f, &vocab()).unwrap();
    assert!(r.epochs_run >= 1);
    // one batch of 32 per epoch
    assert!(r.best.step <= run.last_checkpoint().step + 3);
    assert!(r.best.val_loss.unwrap() <= r.log[0].loss);
}

#[test]
fn finetune_restores_optimizer_state() {
    let run = pretrain(&[data(20, 16)], &arch(1), &cfg(5), &vocab()).unwrap();
    let ck = run.last_checkpoint();
    let f = FinetuneConfig { examples: 8, max_epochs: 1, learning_rate: 1e-2, batch_size: 8, ..Default::default() };
    let r = finetune_logged(ck, &data(40, 17), &f, &vocab()).unwrap();
    assert_eq!(r.epochs_run, 1);
    // one update continuing Adam's count, not a fresh optimizer
    assert_eq!(r.last.optimizer.t, ck.optimizer.t + 1);
    assert_eq!(r.last.step, ck.step + 1);
    let mut expect = ck.optimizer.clone();
    let mut params = ck.params.data.clone();
    let ft = data(40, 17);
    let recs: Vec<&Record> = ft.split(Split::Train).into_iter().take(8).collect();
    let exs = encode_records(&recs, &vocab(), 24).unwrap();
    let mut order: Vec<usize> = (0..8).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(f.seed));
    let (_, g) = ck.params.net().loss_and_grad(&batch_of(order.iter().map(|&i| &exs[i]))).unwrap();
    expect.update(&mut params, g, 1e-2, f.grad_clip);
    assert_eq!(r.last.optimizer, expect);
    assert_eq!(r.last.params.data, params);
}

#[test]
fn finetune_rejects_incompatible_checkpoint() {
    let run = pretrain(&[data(20, 18)], &arch(1), &cfg(0), &vocab()).unwrap();
    let other = Vocabulary::new(P10Config::new(3, -10, 10).unwrap()).unwrap();
    let err = finetune(run.last_checkpoint(), &data(20, 19), &FinetuneConfig::default(), &other).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)), "{err}");
}

#[test]
fn repeated_example_has_single_example_gradient() {
    let p = init_model(&arch(1)).unwrap();
    let v = vocab();
    let ex = encode_example("cell: cell_b\n'2024", 1234.0, &v, 24).unwrap();
    let one = batch_of([&ex]);
    let many = batch_of(std::iter::repeat_n(&ex, 32));
    let (l1, g1) = p.net().loss_and_grad(&one).unwrap();
    let (l2, g2) = p.net().loss_and_grad(&many).unwrap();
    assert!((l1 - l2).abs() <= 1e-6 * l1.abs());
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn adam_update_matches_closed_form_first_step() {
    let mut st = AdamState::new(3);
    let mut p = vec![1.0f32, -2.0, 0.5];
    st.update(&mut p, vec![0.5, -4.0, 0.0], 0.1, 0.0);
    // first bias-corrected step moves each nonzero-gradient coordinate by lr
    assert!((p[0] - 0.9).abs() < 1e-6);
    assert!((p[1] + 1.9).abs() < 1e-6);
    assert_eq!(p[2], 0.5);
    let mut st = AdamState::new(2);
    let mut q = vec![0.0f32; 2];
    st.update(&mut q, vec![3.0, 4.0], 1.0, 1.0);
    assert!((st.m[0] - 0.1 * 0.6).abs() < 1e-7 && (st.m[1] - 0.1 * 0.8).abs() < 1e-7);
}
