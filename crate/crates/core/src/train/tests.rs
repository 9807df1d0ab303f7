use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::data::{crop_patch, normalize_case, synth_case, Case, PhantomConfig};
use crate::error::Error;
use crate::model::{sample_modality_mask, FusionKind, ModalityMask, Network, NetworkConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[test]
fn poly_lr_examples() {
    assert_eq!(poly_lr(0, 100, 1e-4, 0.9).unwrap(), 1e-4);
    assert_eq!(poly_lr(100, 100, 1e-4, 0.9).unwrap(), 0.0);
    let half = poly_lr(50, 100, 1e-4, 0.9).unwrap();
    assert_eq!(half, 1e-4 * (0.9 * 0.5f64.ln()).exp());
    assert!((half - 5.359e-5).abs() < 1e-8);
    assert!(matches!(poly_lr(101, 100, 1e-4, 0.9), Err(Error::Contract(_))));
}

fn scalar_store(w: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.register("w", Tensor::scalar(w)).unwrap();
    store
}

#[test]
fn adam_single_step_hand_example() {
    let mut store = scalar_store(1.0);
    let mut adam = Adam::new(&store);
    // f(w) = w², so the gradient at 1 is 2.
    store.iter_mut().next().unwrap().grad = Tensor::scalar(2.0);
    adam.step(&mut store, 0.1).unwrap();
    let m_hat = (0.1 * 2.0) / (1.0 - 0.9);
    let v_hat = (0.001 * 4.0) / (1.0 - 0.999);
    let expected = 1.0 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
    let w = store.iter().next().unwrap().1.value.item();
    assert!((w - expected).abs() <= 1e-9, "{w} vs {expected}");
    assert!((w - 0.9).abs() <= 1e-9);
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut store = scalar_store(0.37);
    let mut adam = Adam::new(&store);
    for k in 1..=3 {
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(adam.step_count(), k);
        assert_eq!(store.iter().next().unwrap().1.value.item(), 0.37);
    }
}

#[test]
fn adam_rejects_non_finite_gradients_untouched() {
    let mut store = scalar_store(1.0);
    store.register("bad.weight", Tensor::scalar(2.0)).unwrap();
    let mut adam = Adam::new(&store);
    for (i, p) in store.iter_mut().enumerate() {
        p.grad = Tensor::scalar(if i == 1 { f64::NAN } else { 1.0 });
    }
    let err = adam.step(&mut store, 0.1).unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("bad.weight")), "{err}");
    assert_eq!(adam.step_count(), 0);
    assert_eq!(store.iter().next().unwrap().1.value.item(), 1.0);
}

#[test]
fn adam_runs_are_deterministic() {
    let run = || {
        let mut store = ParamStore::new();
        store.register("a", Tensor::from_fn([5], |i| i as f32 * 0.3)).unwrap();
        let mut adam = Adam::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            for p in store.iter_mut() {
                p.grad = Tensor::from_fn([5], |_| rng.random_range(-1.0..1.0));
            }
            adam.step(&mut store, 0.01).unwrap();
        }
        let bits: Vec<u32> = store.iter().next().unwrap().1.value.data().iter().map(|v| v.to_bits()).collect();
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn config_round_trip_and_rejections() {
    let dir = Path::new("/data");
    let text = "# desk run\nlearning_rate = 0.002 # tuned\nmax_epoch = 7\nseed = 3\n\ntrain_manifest = train/manifest.txt\nfusion = average\ndisentangle = false\npatch = 16\n";
    let c = TrainConfig::parse(text, dir).unwrap();
    assert_eq!(c.learning_rate, 0.002);
    assert_eq!(c.max_epoch, 7);
    assert_eq!(c.train_manifest, dir.join("train/manifest.txt"));
    assert_eq!(c.network.fusion, FusionKind::Average);
    assert!(!c.network.disentangle);
    assert_eq!(TrainConfig::parse(&c.to_text(), Path::new("/elsewhere")).unwrap(), c);

    for bad in [
        "learnin_rate = 1",
        "seed = 1\nseed = 2",
        "batch_size = 2",
        "max_epoch = 0",
        "patch = 20",
        "lambda = -1",
        "just text",
        "seed = x",
    ] {
        assert!(matches!(TrainConfig::parse(bad, dir), Err(Error::Config(_))), "{bad}");
    }
}

fn tiny_cases(count: usize, seed: u64) -> Vec<Case> {
    let cfg = PhantomConfig::with_edge(24);
    (0..count).map(|i| synth_case(&cfg, seed + i as u64).unwrap()).collect()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        max_epoch: 1,
        network: NetworkConfig::tiny(),
        ..TrainConfig::default()
    }
}

fn forward_bits(net: &Network<f32>, inputs: &[Tensor<f32>]) -> Vec<u32> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, inputs, &ModalityMask::parse("T1,T2", 4).unwrap(), None).unwrap();
    let mut bits: Vec<u32> = tape.value(out.logits).data().iter().map(|v| v.to_bits()).collect();
    for r in &out.reconstructions {
        bits.extend(tape.value(*r).data().iter().map(|v| v.to_bits()));
    }
    bits
}

fn trained_tiny() -> Trainer {
    let cases = tiny_cases(2, 0);
    let mut trainer = Trainer::new(tiny_train_config(), &cases).unwrap();
    trainer.run_epoch(0, |_| {}).unwrap();
    trainer
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let trainer = trained_tiny();
    let ckpt = trainer.checkpoint(0);
    let bytes = ckpt.encode();
    assert_eq!(&bytes[..4], b"MDFZ");
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.encode(), bytes);

    let inputs = tiny_cases(1, 50)[0].window([4, 4, 4], 16).unwrap().network_inputs();
    let restored = back.network().unwrap();
    assert_eq!(forward_bits(&restored, &inputs), forward_bits(trainer.network(), &inputs));
    let adam = back.optimizer_for(&restored).unwrap().unwrap();
    assert_eq!(adam.step_count(), 2);
    assert_eq!(adam.second_moments(), trainer.optimizer().second_moments());
}

#[test]
fn checkpoint_corruption_is_detected() {
    let bytes = trained_tiny().checkpoint(0).encode();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mut b = bytes.clone();
        let pos = rng.random_range(0..b.len());
        b[pos] ^= 1 << rng.random_range(0..8);
        assert!(Checkpoint::decode(&b).is_err(), "flip at {pos} accepted");
    }
    for len in [0, 3, 9, 40, bytes.len() - 1] {
        assert!(Checkpoint::decode(&bytes[..len]).is_err());
    }
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(Checkpoint::decode(&b).unwrap_err().to_string().contains("\"MDFZ\""));
}

#[test]
fn checkpoint_rejects_mismatched_networks() {
    let ckpt = trained_tiny().checkpoint(0);
    let mut other = Network::<f32>::new(
        NetworkConfig {
            fusion: FusionKind::Average,
            ..NetworkConfig::tiny()
        },
        0,
    )
    .unwrap();
    assert!(matches!(ckpt.apply_to(&mut other), Err(Error::Config(_))));

    let mut renamed = ckpt.clone();
    renamed.params[3].0 = "content_enc.9.bogus".into();
    assert!(matches!(renamed.network(), Err(Error::Config(_))));
    let mut short = ckpt.clone();
    short.params.pop();
    assert!(short.network().is_err());
}

#[test]
fn one_epoch_over_two_cases_writes_two_rows_and_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let summary = train(&tiny_train_config(), &tiny_cases(2, 0), dir.path(), |_| {}).unwrap();
    let log = std::fs::read_to_string(&summary.log_path).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 3);
    assert_eq!(summary.checkpoints.len(), 1);
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.iter().filter(|f| f.to_string_lossy().ends_with(".mdfz")).count(), 1);
    assert!(summary.checkpoints[0].ends_with(checkpoint_name(0)));
}

#[test]
fn runs_are_reproducible() {
    let cases = tiny_cases(2, 3);
    let config = TrainConfig {
        max_epoch: 2,
        ..tiny_train_config()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&config, &cases, a.path(), |_| {}).unwrap();
    train(&config, &cases, b.path(), |_| {}).unwrap();
    for name in ["log.csv", "epoch_0000.mdfz", "epoch_0001.mdfz"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn modality_dropout_changes_the_trajectory() {
    let cases = tiny_cases(3, 7);
    let run = |p: f64| {
        let mut config = tiny_train_config();
        config.network.dropout_prob = p;
        config.max_epoch = 3;
        let mut t = Trainer::new(config, &cases).unwrap();
        (0..3).flat_map(|e| t.run_epoch(e, |_| {}).unwrap()).map(|l| l.total).collect::<Vec<_>>()
    };
    let (keep, drop) = (run(0.0), run(0.5));
    assert_ne!(keep, drop);
}

#[test]
fn tiny_training_reduces_the_loss() {
    let cases = tiny_cases(8, 100);
    let config = TrainConfig {
        max_epoch: 25,
        ..tiny_train_config()
    };
    let mut t = Trainer::new(config, &cases).unwrap();
    // One fixed crop, mask and noise stream per case, scored before and after.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let probe: Vec<(Case, ModalityMask)> = cases
        .iter()
        .map(|c| {
            let c = normalize_case(c).unwrap();
            (crop_patch(&c, &mut rng, 16).unwrap(), sample_modality_mask(&mut rng, 4, 0.5))
        })
        .collect();
    let score = |t: &Trainer| {
        let total: f64 = probe
            .iter()
            .enumerate()
            .map(|(i, (p, m))| t.loss_on(p, m, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap().total)
            .sum();
        total / probe.len() as f64
    };
    let before = score(&t);
    let iterations: usize = (0..25).map(|e| t.run_epoch(e, |_| {}).unwrap().len()).sum();
    assert_eq!(iterations, 200);
    let after = score(&t);
    assert!(before - after >= 0.3 * before, "before {before}, after {after}");
}

#[test]
fn trainer_rejects_mismatched_cases() {
    let mut config = tiny_train_config();
    config.network.modalities = 3;
    assert!(matches!(Trainer::new(config, &tiny_cases(1, 0)), Err(Error::Config(_))));
    assert!(Trainer::new(tiny_train_config(), &[]).is_err());
}

proptest! {
    #[test]
    fn poly_lr_never_increases(max in 1usize..500, power in 0.1f64..3.0) {
        let mut prev = f64::INFINITY;
        for e in 0..=max {
            let lr = poly_lr(e, max, 1e-3, power).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }
}
