//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's posterior, energy or gradient code.

#![allow(dead_code)]

use msvae_core::inference::point_seed;
use msvae_core::rng;
use msvae_core::{Architecture, MsVae};
use msvae_tensor::Tensor;
use rand::Rng;

pub fn tiny_arch(k: usize, z: usize, d: usize, batchnorm: bool) -> Architecture {
    Architecture {
        sources: k,
        data_dim: d,
        latent_dim: z,
        encoder_hidden: vec![5],
        decoder_hidden: vec![5],
        batchnorm,
    }
}

/// Random tiny model with random priors and scale.
pub fn tiny_model(seed: u64, k: usize, z: usize, d: usize, batchnorm: bool) -> MsVae {
    let mut r = rng::rng_for(seed ^ 0x5eed);
    let pi: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..0.95)).collect();
    let b = r.gen_range(0.2..1.5);
    MsVae::random(&tiny_arch(k, z, d, batchnorm), pi, b, seed).unwrap()
}

pub fn random_rows(r: &mut impl Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| r.gen_range(-1.5..2.5)).collect()
}

/// Unnormalized joint p(x, s, z) written out as a product of densities.
pub fn joint_density(x: &[f64], bits: &[bool], mus: &[Vec<f64>], z: &[f64], pi: &[f64], b: f64) -> f64 {
    let mut p = 1.0;
    for (dd, &xv) in x.iter().enumerate() {
        let mut mix = 0.0;
        for (k, on) in bits.iter().enumerate() {
            if *on {
                mix += mus[k][dd];
            }
        }
        p *= (-(xv - mix).abs() / b).exp() / (2.0 * b);
    }
    for (k, on) in bits.iter().enumerate() {
        p *= if *on { pi[k] } else { 1.0 - pi[k] };
    }
    for zv in z {
        p *= (-0.5 * zv * zv).exp() / (2.0 * std::f64::consts::PI).sqrt();
    }
    p
}

pub fn state_bits(index: usize, k: usize) -> Vec<bool> {
    (0..k).map(|j| index >> j & 1 == 1).collect()
}

/// Decoder means `[K][D]` for a joint latent `[K][Z]`, one net at a time.
pub fn decoder_means(model: &MsVae, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    model
        .generative
        .decoders()
        .iter()
        .zip(z)
        .map(|(net, zk)| {
            net.predict(&Tensor::matrix(1, zk.len(), zk.clone()).unwrap())
                .unwrap()
                .into_data()
        })
        .collect()
}

/// Direct Bayes: p(x, s, z) / Σ_s' p(x, s', z).
pub fn direct_bayes(model: &MsVae, x: &[f64], z: &[Vec<f64>]) -> Vec<f64> {
    let k = model.num_sources();
    let mus = decoder_means(model, z);
    let flat: Vec<f64> = z.concat();
    let pi = model.generative.pi();
    let b = model.generative.b();
    let joint: Vec<f64> = (0..1usize << k)
        .map(|s| joint_density(x, &state_bits(s, k), &mus, &flat, pi, b))
        .collect();
    let total: f64 = joint.iter().sum();
    joint.iter().map(|p| p / total).collect()
}

/// Reproduces the latent draws of a posterior pass for point `index`: the
/// eval-mode encoder outputs plus standard-normal noise consumed in
/// source, sample, coordinate order. Returns `M` joint latents `[K][Z]`.
pub fn pass_latents(model: &MsVae, x: &[f64], m: usize, seed: u64, index: usize) -> Vec<Vec<Vec<f64>>> {
    let zd = model.latent_dim();
    let mut r = rng::rng_for(point_seed(seed, index));
    let mut draws = vec![vec![Vec::new(); model.num_sources()]; m];
    for (k, net) in model.encoders.nets().iter().enumerate() {
        let out = net
            .predict(&Tensor::matrix(1, x.len(), x.to_vec()).unwrap())
            .unwrap()
            .into_data();
        for draw in draws.iter_mut() {
            for h in 0..zd {
                let e = rng::standard_normal(&mut r);
                draw[k].push(out[h] + out[zd + h].exp().sqrt() * e);
            }
        }
    }
    draws
}

/// Brute-force (π, b) update: posterior means of the presence bits and of
/// the per-coordinate L1 residual, over all points and draws.
pub fn brute_force_pi_b(model: &MsVae, x: &[f64], n: usize, m: usize, seed: u64) -> (Vec<f64>, f64) {
    let k = model.num_sources();
    let d = model.data_dim();
    let mut presence = vec![0.0; k];
    let mut l1 = 0.0;
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        for z in pass_latents(model, row, m, seed, i) {
            let q = direct_bayes(model, row, &z);
            let mus = decoder_means(model, &z);
            for (s, qs) in q.iter().enumerate() {
                let bits = state_bits(s, k);
                for (kk, on) in bits.iter().enumerate() {
                    if *on {
                        presence[kk] += qs;
                    }
                }
                let resid: f64 = (0..d)
                    .map(|dd| {
                        let mix: f64 = (0..k).filter(|&kk| bits[kk]).map(|kk| mus[kk][dd]).sum();
                        (row[dd] - mix).abs()
                    })
                    .sum();
                l1 += qs * resid;
            }
        }
    }
    let denom = (n * m) as f64;
    (
        presence.iter().map(|p| p / denom).collect(),
        l1 / (denom * d as f64),
    )
}

/// Norm-wise relative error between two flattened gradients.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn flatten(grads: &[Vec<Tensor>]) -> Vec<f64> {
    grads.iter().flatten().flat_map(|t| t.data().iter().copied()).collect()
}
