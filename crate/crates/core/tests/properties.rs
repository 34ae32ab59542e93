mod common;

use msvae_core::checkpoint::{load_model, save_model, CheckpointInfo};
use msvae_core::data::{
    compose_mixtures, load_dataset, save_dataset, split, subsample_labels, synthetic_pool, MixtureDataset,
};
use msvae_core::inference::{posterior_from_energies, posterior_pass, source_presence};
use msvae_core::rng;
use msvae_core::training::{
    build_model, encoder_gradient, encoder_gradient_component, train, Component, DecoderSchedule, FrozenNoise,
    TrainConfig,
};
use msvae_tensor::{Mode, Tensor};
use proptest::prelude::*;
use rand::Rng;
use tempfile::TempDir;

use common::*;

fn energies(max_k: usize) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_k).prop_flat_map(|k| prop::collection::vec(-50.0..50.0f64, 1 << k))
}

proptest! {
    #[test]
    fn posterior_is_normalized_and_consistent(e in energies(6)) {
        let t = posterior_from_energies(&e).unwrap();
        prop_assert!((t.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (q, lq) in t.q.iter().zip(&t.log_q) {
            prop_assert!(*q >= 0.0 && *lq <= 1e-15);
            prop_assert!((q - lq.exp()).abs() < 1e-12);
        }
        let best = e.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(t.pivot, best);
    }

    #[test]
    fn posterior_ignores_energy_offset(e in energies(5), c in -1e3..1e3f64) {
        let shifted: Vec<f64> = e.iter().map(|v| v + c).collect();
        let a = posterior_from_energies(&e).unwrap();
        let b = posterior_from_energies(&shifted).unwrap();
        for (x, y) in a.q.iter().zip(&b.q) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn lower_energy_means_higher_probability(e in energies(4)) {
        let t = posterior_from_energies(&e).unwrap();
        for i in 0..e.len() {
            for j in 0..e.len() {
                if e[i] < e[j] {
                    prop_assert!(t.q[i] >= t.q[j]);
                }
            }
        }
    }

    #[test]
    fn presence_is_a_marginal(e in energies(5)) {
        let t = posterior_from_energies(&e).unwrap();
        let k = e.len().trailing_zeros() as usize;
        for kk in 0..k {
            let p = source_presence(&t.q, kk);
            let absent: f64 = t.q.iter().enumerate().filter(|(s, _)| s >> kk & 1 == 0).map(|(_, v)| v).sum();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
            prop_assert!((p + absent - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_gradient_components_sum_to_total(seed in any::<u64>(), k in 1..=3usize, bn in any::<bool>()) {
        let (z, d, b, m) = (2, 4, 3, 2);
        let mut model = tiny_model(seed, k, z, d, bn);
        let mut r = rng::rng_for(seed);
        let x = Tensor::matrix(b, d, random_rows(&mut r, b, d)).unwrap();
        let noise = FrozenNoise::draw(&[0, 1, 2], k, m, z, seed).unwrap();
        let total = flatten(&encoder_gradient(&mut model, &x, &noise).unwrap());
        let mut sum = vec![0.0; total.len()];
        for c in [Component::Reconstruction, Component::DiscreteEntropy, Component::Kl] {
            let g = flatten(&encoder_gradient_component(&mut model, &x, &noise, c).unwrap());
            for (s, v) in sum.iter_mut().zip(g) {
                *s += v;
            }
        }
        prop_assert!(relative_error(&total, &sum) < 1e-12, "{}", relative_error(&total, &sum));
    }

    #[test]
    fn subsample_keeps_rounded_ordered_subset(n in 1..40usize, f in 0.05..=1.0f64, seed in any::<u64>()) {
        let pool = synthetic_pool(&[0, 5], 8, n, seed).unwrap();
        match subsample_labels(&pool, f, seed) {
            Ok(sub) => {
                let keep = (f * n as f64).round() as usize;
                for (g, h) in pool.groups().iter().zip(sub.groups()) {
                    prop_assert_eq!(g.label, h.label);
                    prop_assert_eq!(h.exemplars.len(), keep);
                    // Kept exemplars appear in their original relative order.
                    let mut pos = 0;
                    for e in &h.exemplars {
                        let at = g.exemplars[pos..].iter().position(|x| x == e);
                        prop_assert!(at.is_some());
                        pos += at.unwrap() + 1;
                    }
                }
                prop_assert_eq!(sub, subsample_labels(&pool, f, seed).unwrap());
            }
            Err(_) => prop_assert_eq!((f * n as f64).round() as usize, 0),
        }
    }

    #[test]
    fn mixtures_are_sums_of_components_plus_noise(
        n in 0..60usize,
        p0 in 0.0..=1.0f64,
        p1 in 0.0..=1.0f64,
        b in 0.0..0.5f64,
        seed in any::<u64>(),
    ) {
        let pool = synthetic_pool(&[0, 5], 8, 5, seed).unwrap();
        let ds = compose_mixtures(&pool, &[p0, p1], b, n, seed).unwrap();
        prop_assert_eq!(ds.len(), n);
        for i in 0..n {
            let bits = ds.truth_bits(i).unwrap();
            let noise = ds.noise_row(i).unwrap();
            for (kk, &on) in bits.iter().enumerate() {
                let comp = ds.component(i, kk).unwrap();
                if on == 0 {
                    prop_assert!(comp.iter().all(|&v| v == 0.0));
                } else {
                    prop_assert!(pool.groups()[kk].exemplars.iter().any(|e| e == comp));
                }
            }
            for dd in 0..ds.dim() {
                let clean = ds.component(i, 0).unwrap()[dd] + ds.component(i, 1).unwrap()[dd];
                prop_assert_eq!(ds.row(i)[dd], clean + noise[dd]);
            }
        }
    }

    #[test]
    fn split_partitions_rows(n in 1..80usize, f in 0.01..0.99f64, seed in any::<u64>()) {
        let mut r = rng::rng_for(seed);
        let x: Vec<f64> = (0..n * 2).map(|i| i as f64 + r.gen::<f64>() * 0.5).collect();
        let ds = MixtureDataset::from_features(n, 2, x).unwrap();
        let (a, b) = split(&ds, f, seed).unwrap();
        prop_assert_eq!(a.len(), (f * n as f64).round() as usize);
        prop_assert_eq!(a.len() + b.len(), n);
        let mut firsts: Vec<f64> = (0..a.len()).map(|i| a.row(i)[0]).chain((0..b.len()).map(|i| b.row(i)[0])).collect();
        firsts.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = (0..n).map(|i| ds.row(i)[0]).collect();
        want.sort_by(f64::total_cmp);
        prop_assert_eq!(firsts, want);
    }

    #[test]
    fn datasets_survive_disk(n in 0..20usize, k in 1..4usize, seed in any::<u64>()) {
        let families: Vec<usize> = (0..k).collect();
        let pool = synthetic_pool(&families, 8, 3, seed).unwrap();
        let ds = compose_mixtures(&pool, &vec![0.5; k], 0.1, n, seed).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("d.msmx");
        save_dataset(&ds, &path).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}

fn tiny_training() -> (TrainConfig, MixtureDataset) {
    let seed = 77;
    let pool = synthetic_pool(&[0, 5], 8, 20, seed).unwrap();
    let ds = compose_mixtures(&pool, &[0.4, 0.4], 0.1, 64, seed).unwrap();
    let config = TrainConfig {
        sources: 2,
        data_dim: 64,
        latent_dim: 2,
        encoder_hidden: vec![6],
        decoder_hidden: vec![6],
        batchnorm: true,
        samples: 1,
        eval_samples: 2,
        batch_size: 16,
        epochs: 4,
        learning_rate: 1e-3,
        decay_per_epoch: 2e-4,
        schedule: DecoderSchedule::Fixed,
        pi_init: vec![0.5, 0.5],
        b_init: 1.0,
        seed,
    };
    (config, ds)
}

#[test]
fn training_is_deterministic() {
    let (config, ds) = tiny_training();
    let run = || train(&config, build_model(&config, None, None).unwrap(), &ds, |_, _| Ok(())).unwrap();
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(m1, m2);
    assert_eq!(r1.epochs, r2.epochs);
}

#[test]
fn finetune_matches_fixed_until_release() {
    let (mut config, ds) = tiny_training();
    let initial = build_model(&config, None, None).unwrap();
    let mut frozen = initial.generative.decoders().to_vec();
    frozen.iter_mut().for_each(|d| d.set_mode(Mode::Eval));
    let (fixed, fixed_report) = train(&config, initial.clone(), &ds, |_, _| Ok(())).unwrap();
    assert_eq!(fixed.generative.decoders(), &frozen[..]);
    assert!(fixed_report.epochs.iter().all(|r| !r.decoders_trained));

    config.schedule = DecoderSchedule::FinetuneFrom(2);
    let mut decoders_at = Vec::new();
    let (tuned, report) = train(&config, initial, &ds, |_, m| {
        decoders_at.push(m.generative.decoders().to_vec());
        Ok(())
    })
    .unwrap();
    assert_eq!(report.epochs[..2], fixed_report.epochs[..2]);
    assert_eq!(decoders_at[1], frozen);
    assert!(report.epochs[2].decoders_trained);
    assert_ne!(tuned.generative.decoders(), &frozen[..]);
    assert_ne!(report.epochs[3], fixed_report.epochs[3]);
}

#[test]
fn pass_does_not_depend_on_thread_count() {
    let model = tiny_model(5, 3, 2, 6, true);
    let mut r = rng::rng_for(5);
    let x = random_rows(&mut r, 150, 6);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| posterior_pass(&model, &x, 3, 9).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn saved_model_predicts_identically() {
    let model = tiny_model(3, 2, 2, 5, true);
    let info = CheckpointInfo {
        epoch: 7,
        seed: 3,
        labels: vec![4, 9],
        config_hash: Some("abc".into()),
        data_hash: None,
    };
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.msvae");
    save_model(&model, &info, &path).unwrap();
    let (loaded, back) = load_model(&path).unwrap();
    assert_eq!(back, info);
    let mut r = rng::rng_for(3);
    let x = random_rows(&mut r, 20, 5);
    assert_eq!(posterior_pass(&model, &x, 2, 1).unwrap(), posterior_pass(&loaded, &x, 2, 1).unwrap());
}
