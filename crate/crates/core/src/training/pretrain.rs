use msvae_tensor::{Adam, Graph, MlpNet, Mode, Tensor};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::B_FLOOR;
use crate::rng;

/// Settings for single-source expert pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub batchnorm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub samples: usize,
    pub learning_rate: f64,
    pub decay_per_epoch: f64,
    /// Starting value of the expert's own Laplace scale.
    pub b_init: f64,
    /// Leading epochs trained with a Gaussian (squared-error) reconstruction
    /// term before switching to the Laplace one. Sparse sources otherwise
    /// settle on the all-zero median image.
    pub gaussian_warmup: usize,
    pub seed: u64,
}

/// A pretrained single-source VAE.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub label: u32,
    pub encoder: MlpNet,
    pub decoder: MlpNet,
    /// The expert's learned Laplace scale (not carried into the MS-VAE).
    pub b: f64,
    /// Mean negative ELBO per epoch.
    pub losses: Vec<f64>,
}

impl Expert {
    /// Eval-mode reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.encoder.predict(x)?;
        let z = self.decoder.in_dim();
        let mut nu = Vec::with_capacity(h.rows() * z);
        for i in 0..h.rows() {
            nu.extend_from_slice(&h.row(i)[..z]);
        }
        Ok(self.decoder.predict(&Tensor::matrix(h.rows(), z, nu)?)?)
    }
}

/// Trains a standard VAE (Gaussian encoder, Laplace decoder) on clean
/// exemplars of one source. The Laplace scale is re-estimated in closed form
/// after every epoch from the mean absolute residual of that epoch. Both
/// networks are returned in eval mode.
pub fn pretrain_expert(exemplars: &[Vec<f64>], label: u32, cfg: &PretrainConfig) -> Result<Expert> {
    if exemplars.is_empty() {
        return Err(Error::EmptySource { label });
    }
    if cfg.batch_size == 0 || cfg.samples == 0 || cfg.latent_dim == 0 {
        return Err(Error::Config(format!("degenerate pretraining settings {cfg:?}")));
    }
    if !(cfg.b_init > 0.0) {
        return Err(Error::Config(format!("Laplace scale must be positive, got {}", cfg.b_init)));
    }
    let d = exemplars[0].len();
    if exemplars.iter().any(|e| e.len() != d) {
        return Err(Error::Dimension("exemplars of unequal width".into()));
    }
    let zd = cfg.latent_dim;
    let seed = rng::index_seed(rng::derive_seed(cfg.seed, "pretrain"), label as u64);
    let mut init = rng::rng_for(rng::derive_seed(seed, "init"));
    let mut enc_dims = vec![d];
    enc_dims.extend(&cfg.encoder_hidden);
    enc_dims.push(2 * zd);
    let mut dec_dims = vec![zd];
    dec_dims.extend(&cfg.decoder_hidden);
    dec_dims.push(d);
    let mut encoder = MlpNet::new(&enc_dims, cfg.batchnorm, &mut init);
    let mut decoder = MlpNet::new(&dec_dims, cfg.batchnorm, &mut init);
    let enc_names = encoder.parameter_names(&format!("expert{label}.encoder"));
    let dec_names = decoder.parameter_names(&format!("expert{label}.decoder"));
    let mut adam_e = Adam::new(cfg.learning_rate, cfg.decay_per_epoch)?;
    let mut adam_d = Adam::new(cfg.learning_rate, cfg.decay_per_epoch)?;

    let n = exemplars.len();
    let min_batch = if cfg.batchnorm { 2 } else { 1 };
    let mut order: Vec<usize> = (0..n).collect();
    let mut b = cfg.b_init;
    let mut sigma2 = cfg.b_init * cfg.b_init;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let m = cfg.samples;
    for epoch in 0..cfg.epochs {
        let epoch_seed = rng::index_seed(rng::derive_seed(seed, "epoch"), epoch as u64);
        order.shuffle(&mut rng::rng_for(epoch_seed));
        let warm = epoch < cfg.gaussian_warmup;
        let (mut l1_sum, mut sq_sum, mut rows_seen, mut loss_sum, mut points) = (0.0, 0.0, 0usize, 0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < min_batch {
                continue;
            }
            let bsz = batch.len();
            let mut xr = Vec::with_capacity(bsz * m * d);
            let mut xs = Vec::with_capacity(bsz * d);
            for &i in batch {
                xs.extend_from_slice(&exemplars[i]);
                for _ in 0..m {
                    xr.extend_from_slice(&exemplars[i]);
                }
            }
            let mut er = rng::rng_for(rng::index_seed(epoch_seed, bi as u64));
            let eps: Vec<f64> = (0..bsz * m * zd).map(|_| rng::standard_normal(&mut er)).collect();

            let mut g = Graph::new();
            let xv = g.constant(Tensor::matrix(bsz, d, xs)?);
            let rec = encoder.record(&mut g, xv, true)?;
            let nu = g.slice_cols(rec.output, 0, zd)?;
            let ln_tau = g.slice_cols(rec.output, zd, zd)?;
            let tau = g.exp(ln_tau);
            let nu2 = g.square(nu);
            let t = g.add(tau, nu2)?;
            let t = g.sub(t, ln_tau)?;
            let t = g.add_scalar(t, -1.0);
            let kl = g.sum(t);
            let kl = g.scale(kl, 0.5 / bsz as f64);
            let half = g.scale(ln_tau, 0.5);
            let std = g.exp(half);
            let nu_r = g.repeat_rows(nu, m)?;
            let std_r = g.repeat_rows(std, m)?;
            let ev = g.constant(Tensor::matrix(bsz * m, zd, eps)?);
            let spread = g.mul(std_r, ev)?;
            let z = g.add(nu_r, spread)?;
            let drec = decoder.record(&mut g, z, true)?;
            let target = g.constant(Tensor::matrix(bsz * m, d, xr)?);
            let diff = g.sub(target, drec.output)?;
            let a = g.abs(diff);
            let l1 = g.sum(a);
            let l1_val = g.value(l1).item();
            let sq = g.square(diff);
            let sq = g.sum(sq);
            let sq_val = g.value(sq).item();
            let (recon, norm) = if warm {
                let r = g.scale(sq, 0.5 / (sigma2 * (bsz * m) as f64));
                (r, 0.5 * d as f64 * (2.0 * std::f64::consts::PI * sigma2).ln())
            } else {
                (g.scale(l1, 1.0 / (b * (bsz * m) as f64)), d as f64 * (2.0 * b).ln())
            };
            let loss = g.add(recon, kl)?;
            let loss_val = g.value(loss).item() + norm;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    component: "pretraining loss",
                });
            }
            let mut grads = g.backward(loss)?;
            let ge: Vec<Tensor> = rec.params.iter().map(|&p| grads.take(p)).collect();
            let gd: Vec<Tensor> = drec.params.iter().map(|&p| grads.take(p)).collect();
            adam_e.step(&mut encoder.parameters_mut(), &ge, &enc_names)?;
            adam_d.step(&mut decoder.parameters_mut(), &gd, &dec_names)?;
            l1_sum += l1_val;
            sq_sum += sq_val;
            rows_seen += bsz * m;
            loss_sum += loss_val * bsz as f64;
            points += bsz;
        }
        adam_e.end_epoch();
        adam_d.end_epoch();
        if rows_seen > 0 {
            b = (l1_sum / (rows_seen * d) as f64).max(B_FLOOR);
            sigma2 = (sq_sum / (rows_seen * d) as f64).max(B_FLOOR * B_FLOOR);
            losses.push(loss_sum / points as f64);
        }
        log::debug!("expert {label} epoch {}: loss {:.4} b {:.5}", epoch + 1, losses.last().copied().unwrap_or(f64::NAN), b);
    }
    encoder.set_mode(Mode::Eval);
    decoder.set_mode(Mode::Eval);
    Ok(Expert {
        label,
        encoder,
        decoder,
        b,
        losses,
    })
}
