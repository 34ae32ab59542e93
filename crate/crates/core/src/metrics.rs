//! Case accuracy, per-source image quality and the entropy diagnostics.

use std::f64::consts::{E, PI};
use std::fmt::Write as _;
use std::time::Instant;

use msvae_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::MixtureDataset;
use crate::error::{Error, Result};
use crate::inference::{map_state, posterior_pass, PassSummary};
use crate::msvae::MsVae;
use crate::rng;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

/// Fraction of points whose most probable state (ties toward the lower
/// index) equals the true state. `tables` holds one `q(s; x)` per point.
pub fn case_accuracy(tables: &[Vec<f64>], dataset: &MixtureDataset) -> Result<f64> {
    let k = dataset.num_sources().ok_or(Error::MissingTruth)?;
    if tables.len() != dataset.len() {
        return Err(Error::Dimension(format!(
            "{} posterior tables for {} points",
            tables.len(),
            dataset.len()
        )));
    }
    if tables.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, t) in tables.iter().enumerate() {
        if t.len() != 1 << k {
            return Err(Error::Dimension(format!(
                "table of {} states for K = {k}",
                t.len()
            )));
        }
        if map_state(t, k) == dataset.truth_state(i).expect("truth present") {
            hits += 1;
        }
    }
    Ok(hits as f64 / tables.len() as f64)
}

/// `10 log10(1 / MSE)` with peak 1; identical inputs give [`PSNR_CAP`].
pub fn psnr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::Dimension(format!(
            "psnr over {} and {} values",
            reference.len(),
            estimate.len()
        )));
    }
    let mse = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Mean SSIM over all fully contained `window × window` Gaussian windows
/// (σ = 1.5, dynamic range 1).
pub fn ssim(reference: &[f64], estimate: &[f64], shape: (usize, usize), window: usize) -> Result<f64> {
    let (rows, cols) = shape;
    if reference.len() != rows * cols || estimate.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "ssim over {} and {} values for a {rows}x{cols} image",
            reference.len(),
            estimate.len()
        )));
    }
    if window == 0 || window > rows || window > cols {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} image is smaller than the {window}x{window} window"
        )));
    }
    let w = gaussian_window(window, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=rows - window {
        for j in 0..=cols - window {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..window {
                for b in 0..window {
                    let wt = w[a * window + b];
                    let p = (i + a) * cols + j + b;
                    let (x, y) = (reference[p], estimate[p]);
                    mx += wt * x;
                    my += wt * y;
                    xx += wt * x * x;
                    yy += wt * y * y;
                    xy += wt * x * y;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `-Σ_s q ln q` with `0 ln 0 = 0`.
pub fn posterior_entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn mean_posterior_entropy(pass: &PassSummary) -> f64 {
    if pass.points.is_empty() {
        return 0.0;
    }
    pass.points
        .iter()
        .map(|p| posterior_entropy(&p.table))
        .sum::<f64>()
        / pass.points.len() as f64
}

fn bernoulli_entropy(p: f64) -> f64 {
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Entropy of the Laplace observation model, `D (1 + ln 2b)`.
pub fn laplace_entropy(d: usize, b: f64) -> f64 {
    d as f64 * (1.0 + (2.0 * b).ln())
}

/// `mean_n Σ_k H[q(z_k; x)] - H[p(z)] - H[p(x | s, z)] - H[p(s)] +
/// mean_n H[q(s; x)]`, using the parameters that produced `pass`.
pub fn entropy_sum_from_pass(model: &MsVae, pass: &PassSummary) -> f64 {
    let (k, z, d) = (model.num_sources(), model.latent_dim(), model.data_dim());
    let prior_z = (k * z) as f64 / 2.0 * (2.0 * PI * E).ln();
    let prior_s: f64 = model.generative.pi().iter().map(|&p| bernoulli_entropy(p)).sum();
    pass.gaussian_entropy - prior_z - laplace_entropy(d, model.generative.b()) - prior_s
        + mean_posterior_entropy(pass)
}

pub fn entropy_sum(model: &MsVae, x: &[f64], m: usize, seed: u64) -> Result<f64> {
    Ok(entropy_sum_from_pass(model, &posterior_pass(model, x, m, seed)?))
}

/// Per-source reconstructions `s_k^MAP · μ_k(ν_k)` for every point, as
/// `[N][K][D]`.
pub fn source_reconstructions(model: &MsVae, pass: &PassSummary) -> Result<Vec<Vec<Vec<f64>>>> {
    let (k, z) = (model.num_sources(), model.latent_dim());
    let n = pass.points.len();
    let mut per_source = Vec::with_capacity(k);
    for (kk, dec) in model.generative.decoders().iter().enumerate() {
        let mut nu = Vec::with_capacity(n * z);
        for p in &pass.points {
            nu.extend_from_slice(&p.nu[kk * z..(kk + 1) * z]);
        }
        per_source.push(dec.predict(&Tensor::matrix(n, z, nu)?)?);
    }
    Ok(pass
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = map_state(&p.table, k);
            (0..k)
                .map(|kk| {
                    let row = per_source[kk].row(i);
                    if s.bit(kk) {
                        row.to_vec()
                    } else {
                        vec![0.0; row.len()]
                    }
                })
                .collect()
        })
        .collect())
}

/// Mean and population standard deviation over repeated inference runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    pub runs: usize,
    /// Restrict PSNR/SSIM to points with at least two true sources.
    pub overlap_only: bool,
    pub ssim_window: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub points: usize,
    pub runs: usize,
    pub overlap_only: bool,
    /// Points contributing to the image-quality metrics.
    pub image_points: usize,
    pub accuracy: Stat,
    /// Per source, over points where that source is truly present.
    pub psnr: Vec<Stat>,
    pub ssim: Vec<Stat>,
    /// PSNR of the raw mixture against each clean source, same selection.
    pub mixture_psnr: Vec<f64>,
    pub posterior_entropy: Stat,
    pub entropy_sum: Stat,
    pub elbo: Stat,
    pub inference_seconds: f64,
    pub seed: u64,
    pub config_hash: Option<String>,
}

impl EvalReport {
    /// Line-oriented `key=value` rendering.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let stat = |s: &mut String, key: &str, v: Stat| {
            let _ = writeln!(s, "{key}={:?}", v.mean);
            let _ = writeln!(s, "{key}_std={:?}", v.std);
        };
        let _ = writeln!(s, "points={}", self.points);
        let _ = writeln!(s, "runs={}", self.runs);
        let _ = writeln!(s, "overlap_only={}", self.overlap_only);
        let _ = writeln!(s, "image_points={}", self.image_points);
        stat(&mut s, "accuracy", self.accuracy);
        for (k, v) in self.psnr.iter().enumerate() {
            stat(&mut s, &format!("psnr.source{k}"), *v);
        }
        for (k, v) in self.ssim.iter().enumerate() {
            stat(&mut s, &format!("ssim.source{k}"), *v);
        }
        for (k, v) in self.mixture_psnr.iter().enumerate() {
            let _ = writeln!(s, "mixture_psnr.source{k}={v}");
        }
        stat(&mut s, "posterior_entropy", self.posterior_entropy);
        stat(&mut s, "entropy_sum", self.entropy_sum);
        stat(&mut s, "elbo", self.elbo);
        let _ = writeln!(s, "inference_seconds={}", self.inference_seconds);
        let _ = writeln!(s, "seed={}", self.seed);
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "config_hash={h}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full evaluation of `model` on a truth-bearing dataset, repeated over
/// `runs` independent latent-sample seeds.
pub fn evaluate(model: &MsVae, dataset: &MixtureDataset, opts: &EvalOptions) -> Result<EvalReport> {
    let k = dataset.num_sources().ok_or(Error::MissingTruth)?;
    if k != model.num_sources() || dataset.dim() != model.data_dim() {
        return Err(Error::Dimension(format!(
            "dataset (K={k}, D={}) does not match model (K={}, D={})",
            dataset.dim(),
            model.num_sources(),
            model.data_dim()
        )));
    }
    if opts.runs == 0 {
        return Err(Error::Config("at least one evaluation run is required".into()));
    }
    let selected: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            !opts.overlap_only || dataset.truth_state(i).expect("truth").active_count() >= 2
        })
        .collect();
    let has_images = dataset.components_flat().is_some();
    let shape = dataset.meta.image_shape;
    let base = rng::derive_seed(opts.seed, "eval");
    let started = Instant::now();
    let (mut acc, mut ent, mut hsum, mut elbo) = (vec![], vec![], vec![], vec![]);
    let mut psnr_runs = vec![Vec::new(); k];
    let mut ssim_runs = vec![Vec::new(); k];
    let mut mixture_psnr = vec![0.0; k];
    for run in 0..opts.runs {
        let pass = posterior_pass(model, dataset.features(), opts.samples, rng::index_seed(base, run as u64))?;
        let tables: Vec<Vec<f64>> = pass.points.iter().map(|p| p.table.clone()).collect();
        acc.push(case_accuracy(&tables, dataset)?);
        ent.push(mean_posterior_entropy(&pass));
        hsum.push(entropy_sum_from_pass(model, &pass));
        elbo.push(pass.elbo);
        if !has_images {
            continue;
        }
        let recon = source_reconstructions(model, &pass)?;
        for kk in 0..k {
            let (mut p_sum, mut s_sum, mut mix_sum, mut cnt) = (0.0, 0.0, 0.0, 0usize);
            for &i in &selected {
                if !dataset.truth_state(i).expect("truth").bit(kk) {
                    continue;
                }
                let clean = dataset.component(i, kk).expect("components");
                p_sum += psnr(clean, &recon[i][kk])?;
                mix_sum += psnr(clean, dataset.row(i))?;
                if let Some(sh) = shape {
                    s_sum += ssim(clean, &recon[i][kk], sh, opts.ssim_window)?;
                }
                cnt += 1;
            }
            if cnt > 0 {
                psnr_runs[kk].push(p_sum / cnt as f64);
                if shape.is_some() {
                    ssim_runs[kk].push(s_sum / cnt as f64);
                }
                mixture_psnr[kk] = mix_sum / cnt as f64;
            }
        }
    }
    Ok(EvalReport {
        points: dataset.len(),
        runs: opts.runs,
        overlap_only: opts.overlap_only,
        image_points: if has_images { selected.len() } else { 0 },
        accuracy: Stat::of(&acc),
        psnr: psnr_runs.iter().map(|v| Stat::of(v)).collect(),
        ssim: ssim_runs.iter().map(|v| Stat::of(v)).collect(),
        mixture_psnr: if has_images { mixture_psnr } else { vec![] },
        posterior_entropy: Stat::of(&ent),
        entropy_sum: Stat::of(&hsum),
        elbo: Stat::of(&elbo),
        inference_seconds: started.elapsed().as_secs_f64() / opts.runs as f64,
        seed: opts.seed,
        config_hash: dataset.meta.config_hash.clone(),
    })
}
