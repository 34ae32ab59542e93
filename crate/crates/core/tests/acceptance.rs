//! Acceptance suite: every criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails. Pass criterion numbers as
//! arguments to run a subset (`cargo test --test acceptance -- 4 5`).

mod common;

use std::time::Instant;

use msvae_core::checkpoint::{decode_model, encode_model, CheckpointInfo};
use msvae_core::data::{
    decode_dataset, encode_dataset, encode_idx_images, encode_idx_labels, parse_idx_images,
    parse_idx_labels, pool_from_idx, IdxImages,
};
use msvae_core::inference::{discrete_posterior, posterior_from_energies, posterior_pass};
use msvae_core::metrics::{
    entropy_sum_from_pass, evaluate, mean_posterior_entropy, EvalOptions, EvalReport,
};
use msvae_core::presets::{run_scenario, Outcome, Scenario};
use msvae_core::rng;
use msvae_core::training::{objective, FrozenNoise, HeadTerm, ObjectiveSpec};
use msvae_core::training::{kl_gaussian_standard, update_pi_b};
use msvae_core::{Error, MsVae};
use msvae_tensor::Tensor;
use rand::Rng;

use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

const SEED: u64 = 20_240_601;

fn eval_opts(overlap_only: bool) -> EvalOptions {
    EvalOptions {
        samples: 4,
        seed: rng::derive_seed(SEED, "acceptance-eval"),
        runs: 1,
        overlap_only,
        ssim_window: 7,
    }
}

fn log_epochs(tag: &'static str) -> impl FnMut(&msvae_core::training::EpochRecord, &MsVae) -> msvae_core::Result<()> {
    move |r, _| {
        if r.epoch % 25 == 0 {
            eprintln!(
                "  [{tag}] epoch {:3}: elbo {:.3} H_sum {:.3} pi {:?} b {:.4}",
                r.epoch, r.elbo, r.entropy_sum, r.pi, r.b
            );
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Desk-scale training runs

struct PocRun {
    outcome: Outcome,
    test: EvalReport,
    train_elbo: f64,
    train_entropy_sum: f64,
    train_posterior_entropy: f64,
}

fn proof_of_concept_run() -> PocRun {
    let scenario = Scenario::proof_of_concept(SEED);
    let outcome = run_scenario(&scenario, log_epochs("K=2")).expect("proof-of-concept run");
    let test = evaluate(&outcome.model, &outcome.test_set, &eval_opts(false)).unwrap();
    let pass = posterior_pass(
        &outcome.model,
        outcome.train_set.features(),
        scenario.train.eval_samples,
        rng::derive_seed(SEED, "final-pass"),
    )
    .unwrap();
    PocRun {
        train_elbo: pass.elbo,
        train_entropy_sum: entropy_sum_from_pass(&outcome.model, &pass),
        train_posterior_entropy: mean_posterior_entropy(&pass),
        outcome,
        test,
    }
}

fn criterion_1(run: &PocRun) -> Verdict {
    let model = &run.outcome.model;
    let pi = model.generative.pi();
    let b = model.generative.b();
    let acc = run.test.accuracy.mean;
    let pi_err = pi
        .iter()
        .zip([0.3, 0.2])
        .map(|(p, g)| (p - g).abs())
        .fold(0.0, f64::max);
    let b_err = (b - 0.1).abs();
    verdict(
        acc >= 0.99 && pi_err <= 0.03 && b_err <= 0.02,
        format!(
            "accuracy {acc:.4} (≥0.99), pi {pi:.4?} max err {pi_err:.4} (≤0.03), b {b:.4} err {b_err:.4} (≤0.02), train {:.1}s + pretrain {:.1}s",
            run.outcome.report.wall_clock.as_secs_f64(),
            run.outcome.pretrain_time.as_secs_f64()
        ),
    )
}

fn criterion_2(run: &PocRun) -> Verdict {
    let gap = (run.train_elbo - run.train_entropy_sum).abs() / run.train_entropy_sum.abs();
    let h = run.train_posterior_entropy;
    verdict(
        gap < 0.01 && h < 0.05,
        format!(
            "ELBO {:.4} vs H_sum {:.4}: relative gap {gap:.5} (<0.01), mean H[q(s;x)] {h:.5} (<0.05)",
            run.train_elbo, run.train_entropy_sum
        ),
    )
}

fn criterion_3() -> Verdict {
    let scenario = Scenario::multi_source(SEED);
    let k = scenario.sources();
    let outcome = run_scenario(&scenario, log_epochs("K=6")).expect("multi-source run");
    let all = evaluate(&outcome.model, &outcome.test_set, &eval_opts(false)).unwrap();
    let overlap = evaluate(&outcome.model, &outcome.test_set, &eval_opts(true)).unwrap();
    let target = 1.0 / k as f64;
    let pi = outcome.model.generative.pi();
    let pi_err = pi.iter().map(|p| (p - target).abs()).fold(0.0, f64::max);
    let gains: Vec<f64> = overlap
        .psnr
        .iter()
        .zip(&overlap.mixture_psnr)
        .map(|(p, mix)| p.mean - mix)
        .collect();
    let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        pi_err <= 0.03 && all.accuracy.mean >= 0.9 && min_gain >= 3.0,
        format!(
            "max|pi-1/6| {pi_err:.4} (≤0.03), accuracy {:.4} (≥0.90), overlap points {}, PSNR gain per source {:.2?} dB, min {min_gain:.2} (≥3), train {:.1}s",
            all.accuracy.mean,
            overlap.image_points,
            gains,
            outcome.report.wall_clock.as_secs_f64()
        ),
    )
}

fn criterion_7(full: &PocRun) -> Verdict {
    let scenario = Scenario::proof_of_concept(SEED).with_label_fraction(0.1, 100, 150);
    let outcome = run_scenario(&scenario, log_epochs("10%")).expect("label-fraction run");
    let report = evaluate(&outcome.model, &outcome.test_set, &eval_opts(false)).unwrap();
    let drop = (full.test.accuracy.mean - report.accuracy.mean) * 100.0;
    verdict(
        drop <= 3.0,
        format!(
            "accuracy 100%-labels {:.4}, 10%-labels finetune@100 {:.4}: drop {drop:.2} points (≤3)",
            full.test.accuracy.mean, report.accuracy.mean
        ),
    )
}

// ---------------------------------------------------------------------------
// Exactness checks on tiny models

fn criterion_4() -> Verdict {
    let model = tiny_model(SEED, 2, 2, 4, true);
    let mut r = rng::rng_for(rng::derive_seed(SEED, "oracle"));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = random_rows(&mut r, 1, 4);
        let z: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| 1.5 * rng::standard_normal(&mut r)).collect())
            .collect();
        let table = discrete_posterior(&x, &Tensor::matrix(2, 2, z.concat()).unwrap(), &model.generative)
            .unwrap();
        let oracle = direct_bayes(&model, &x, &z);
        for (a, b) in table.q.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let (n, m) = (40, 3);
    let x = random_rows(&mut r, n, 4);
    let seed = rng::derive_seed(SEED, "pi-update");
    let pass = posterior_pass(&model, &x, m, seed).unwrap();
    let (pi, b) = update_pi_b(&pass.accumulators).unwrap();
    let (pi_bf, b_bf) = brute_force_pi_b(&model, &x, n, m, seed);
    let update_err = pi
        .iter()
        .zip(&pi_bf)
        .map(|(a, b)| (a - b).abs())
        .fold((b - b_bf).abs(), f64::max);
    verdict(
        worst <= 1e-10 && update_err <= 1e-10,
        format!("posterior vs direct Bayes max err {worst:.2e} over 1000 inputs, π/b update vs brute force {update_err:.2e} (both ≤1e-10)"),
    )
}

fn set_param(model: &mut MsVae, decoder: bool, k: usize, p: usize, i: usize, value: f64) {
    let nets = if decoder {
        model.generative.decoders_mut()
    } else {
        model.encoders.nets_mut()
    };
    nets[k].parameters_mut()[p].data_mut()[i] = value;
}

fn get_param(model: &MsVae, decoder: bool, k: usize, p: usize, i: usize) -> f64 {
    let nets = if decoder {
        model.generative.decoders()
    } else {
        model.encoders.nets()
    };
    nets[k].parameters()[p].data()[i]
}

/// Central differences of `spec`'s value with respect to every encoder or
/// decoder parameter, same frozen draws throughout.
fn finite_differences(model: &mut MsVae, x: &Tensor, noise: &FrozenNoise, spec: ObjectiveSpec, decoder: bool) -> Vec<f64> {
    let h = 1e-6;
    let shapes: Vec<Vec<usize>> = {
        let nets = if decoder {
            model.generative.decoders()
        } else {
            model.encoders.nets()
        };
        nets.iter()
            .map(|n| n.parameters().iter().map(|t| t.len()).collect())
            .collect()
    };
    let mut out = Vec::new();
    for (k, sizes) in shapes.iter().enumerate() {
        for (p, &len) in sizes.iter().enumerate() {
            for i in 0..len {
                let v0 = get_param(model, decoder, k, p, i);
                set_param(model, decoder, k, p, i, v0 + h);
                let up = objective(model, x, noise, spec).unwrap().value;
                set_param(model, decoder, k, p, i, v0 - h);
                let down = objective(model, x, noise, spec).unwrap().value;
                set_param(model, decoder, k, p, i, v0);
                out.push((up - down) / (2.0 * h));
            }
        }
    }
    out
}

fn criterion_5() -> Verdict {
    let (mut enc_worst, mut dec_worst) = (0.0f64, 0.0f64);
    for inst in 0..100u64 {
        let seed = rng::index_seed(rng::derive_seed(SEED, "gradcheck"), inst);
        let mut model = tiny_model(seed, 2, 2, 4, inst % 2 == 0);
        let mut r = rng::rng_for(seed);
        let bsz = 3;
        let x = Tensor::matrix(bsz, 4, random_rows(&mut r, bsz, 4)).unwrap();
        let noise = FrozenNoise::draw(&[0, 1, 2], 2, 2, 2, seed).unwrap();

        let full = ObjectiveSpec::FULL;
        let out = objective(&mut model, &x, &noise, full).unwrap();
        let enc_fd = finite_differences(&mut model, &x, &noise, full, false);
        enc_worst = enc_worst.max(relative_error(&flatten(&out.encoder), &enc_fd));

        let dec_spec = ObjectiveSpec {
            head: Some(HeadTerm::Full),
            kl: false,
            decoder_grads: true,
        };
        let out = objective(&mut model, &x, &noise, dec_spec).unwrap();
        let dec_fd = finite_differences(&mut model, &x, &noise, dec_spec, true);
        dec_worst = dec_worst.max(relative_error(&flatten(&out.decoder.unwrap()), &dec_fd));
    }
    verdict(
        enc_worst < 1e-5 && dec_worst < 1e-5,
        format!("worst relative error over 100 instances: encoder {enc_worst:.2e}, decoder {dec_worst:.2e} (<1e-5)"),
    )
}

fn criterion_6() -> Verdict {
    let mut r = rng::rng_for(rng::derive_seed(SEED, "stability"));
    let (mut sum_err, mut shift_err) = (0.0f64, 0.0f64);
    for _ in 0..2000 {
        let states = 1usize << r.gen_range(1..=6);
        let spread = 10f64.powf(r.gen_range(0.0..=4.0));
        let mut e: Vec<f64> = (0..states).map(|_| r.gen_range(0.0..spread)).collect();
        // Make the spread exact.
        e[0] = 0.0;
        e[states - 1] = spread;
        let t = posterior_from_energies(&e).unwrap();
        sum_err = sum_err.max((t.q.iter().sum::<f64>() - 1.0).abs());
        let c = r.gen_range(-1e3..1e3);
        let shifted: Vec<f64> = e.iter().map(|v| v + c).collect();
        let t2 = posterior_from_energies(&shifted).unwrap();
        for (a, b) in t.q.iter().zip(&t2.q) {
            shift_err = shift_err.max((a - b).abs());
        }
    }
    let mut kl_ok = true;
    let mut kl_detail = Vec::new();
    for case in 0..3u64 {
        let mut cr = rng::rng_for(rng::index_seed(rng::derive_seed(SEED, "kl-mc"), case));
        let nu: Vec<f64> = (0..3).map(|_| cr.gen_range(-1.5..1.5)).collect();
        let tau: Vec<f64> = (0..3).map(|_| cr.gen_range(0.2..3.0)).collect();
        let closed = kl_gaussian_standard(&nu, &tau);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut lr = 0.0;
            for h in 0..3 {
                let e = rng::standard_normal(&mut cr);
                let z = nu[h] + tau[h].sqrt() * e;
                // ln q(z) - ln p(z), constants cancel.
                lr += -0.5 * e * e - 0.5 * tau[h].ln() + 0.5 * z * z;
            }
            s1 += lr;
            s2 += lr * lr;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let z = (mean - closed).abs() / se;
        kl_ok &= z <= 3.0;
        kl_detail.push(format!("{closed:.4}/{mean:.4} ({z:.2}σ)"));
    }
    verdict(
        sum_err <= 1e-12 && shift_err <= 1e-12 && kl_ok,
        format!(
            "|Σq-1| max {sum_err:.2e}, pivot shift max {shift_err:.2e} (both ≤1e-12, spreads to 1e4), KL closed/MC {}",
            kl_detail.join(", ")
        ),
    )
}

fn positioned(result: Result<impl std::fmt::Debug, Error>, expected: u64) -> bool {
    matches!(result, Err(Error::Parse { offset, .. }) if offset == expected)
}

fn criterion_8() -> Verdict {
    let mut failures = Vec::new();
    let mut r = rng::rng_for(rng::derive_seed(SEED, "formats"));

    // IDX fixture: 7 images of 5×4 with labels.
    let images = IdxImages {
        rows: 5,
        cols: 4,
        pixels: (0..7 * 20).map(|_| r.gen::<u8>()).collect(),
    };
    let labels: Vec<u8> = (0..7).map(|i| (i % 3) as u8).collect();
    let img_bytes = encode_idx_images(&images);
    let lab_bytes = encode_idx_labels(&labels);
    let img_back = parse_idx_images(&img_bytes).unwrap();
    let lab_back = parse_idx_labels(&lab_bytes).unwrap();
    if img_back != images || encode_idx_images(&img_back) != img_bytes || lab_back != labels || encode_idx_labels(&lab_back) != lab_bytes {
        failures.push("idx round-trip");
    }
    if pool_from_idx(&img_back, &lab_back).unwrap().num_sources() != 3 {
        failures.push("idx pool");
    }
    let mut bad = img_bytes.clone();
    bad[2] = 0x0c;
    if !positioned(parse_idx_images(&bad), 0) {
        failures.push("idx bad magic");
    }
    if !positioned(parse_idx_images(&img_bytes[..img_bytes.len() - 1]), img_bytes.len() as u64 - 1) {
        failures.push("idx truncation");
    }

    // MSMX with every optional block.
    let scenario = Scenario {
        n_train: 50,
        n_test: 10,
        train_exemplars: 5,
        test_exemplars: 5,
        ..Scenario::proof_of_concept(SEED)
    };
    let (ds, _) = scenario.datasets().unwrap();
    let bytes = encode_dataset(&ds);
    let back = decode_dataset(&bytes).unwrap();
    if back.features() != ds.features()
        || back.truth_flat() != ds.truth_flat()
        || back.components_flat() != ds.components_flat()
        || back.meta != ds.meta
        || encode_dataset(&back) != bytes
    {
        failures.push("msmx round-trip");
    }
    let mut bad = bytes.clone();
    bad[0] = b'Z';
    if !positioned(decode_dataset(&bad), 0) {
        failures.push("msmx bad magic");
    }
    let mut bad = bytes.clone();
    bad[8..16].copy_from_slice(&(u64::MAX / 4).to_le_bytes());
    if !matches!(decode_dataset(&bad), Err(Error::Parse { .. })) {
        failures.push("msmx inconsistent header");
    }

    // Checkpoint.
    let model = tiny_model(SEED, 3, 2, 6, true);
    let info = CheckpointInfo {
        epoch: 17,
        seed: SEED,
        config_hash: Some("0123456789abcdef".into()),
        labels: vec![1, 2, 3],
        data_hash: Some("fedcba9876543210".into()),
    };
    let bytes = encode_model(&model, &info);
    match decode_model(&bytes) {
        Ok((m2, i2)) if m2 == model && i2 == info && encode_model(&m2, &i2) == bytes => {}
        _ => failures.push("checkpoint round-trip"),
    }
    let mut bad = bytes.clone();
    bad[3] = 0;
    if !positioned(decode_model(&bad), 0) {
        failures.push("checkpoint bad magic");
    }
    let mut bad = bytes.clone();
    bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    if !positioned(decode_model(&bad), 8) {
        failures.push("checkpoint meta length");
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "IDX, MSMX and checkpoint round-trips bit-identical; corrupted headers rejected at their byte offsets".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|n| (1..=8).contains(n))
        .collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let names = [
        "",
        "proof-of-concept reproduction",
        "entropy-sum convergence",
        "multi-source separation",
        "oracle equivalence",
        "gradient correctness",
        "normalization and stability",
        "label-fraction robustness",
        "format round-trips",
    ];
    let mut results: Vec<(usize, Verdict, f64)> = Vec::new();
    let mut timed = |n: usize, f: &mut dyn FnMut() -> Verdict| {
        eprintln!("criterion {n}: {} ...", names[n]);
        let t = Instant::now();
        let v = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {n} [{}] {}: {} ({secs:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            names[n],
            v.detail
        );
        results.push((n, v, secs));
    };
    for n in [4, 5, 6, 8] {
        if wanted(n) {
            timed(n, &mut || match n {
                4 => criterion_4(),
                5 => criterion_5(),
                6 => criterion_6(),
                _ => criterion_8(),
            });
        }
    }
    if wanted(1) || wanted(2) || wanted(7) {
        let t = Instant::now();
        eprintln!("training the K=2 proof-of-concept run ...");
        let run = proof_of_concept_run();
        eprintln!("  done in {:.1}s", t.elapsed().as_secs_f64());
        for n in [1, 2, 7] {
            if wanted(n) {
                timed(n, &mut || match n {
                    1 => criterion_1(&run),
                    2 => criterion_2(&run),
                    _ => criterion_7(&run),
                });
            }
        }
    }
    if wanted(3) {
        timed(3, &mut criterion_3);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
