//! The sampled ELBO surrogate and its gradients.
//!
//! For one data point and one joint latent draw, with `a_s = ln p(x|s,z) +
//! ln p(s)` and `q = softmax(a)`, the discrete part of the ELBO is
//! `Σ_s q_s (a_s - ln q_s) = logsumexp(a)`. It splits into a reconstruction
//! term `R = Σ_s q_s ln p(x|s,z)` and a discrete-entropy term
//! `Σ_s q_s (ln p(s) - ln q_s)`. Both depend on `z` through `q`; no
//! stop-gradient is applied.

use msvae_tensor::{CustomOp, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::inference::point_seed;
use crate::model::all_state_mixes;
use crate::msvae::MsVae;
use crate::rng;

/// `KL[N(ν, diag τ) || N(0, I)] = ½ Σ_h (τ_h + ν_h² - 1 - ln τ_h)`.
pub fn kl_gaussian_standard(nu: &[f64], tau: &[f64]) -> f64 {
    0.5 * nu
        .iter()
        .zip(tau)
        .map(|(v, t)| t + v * v - 1.0 - t.ln())
        .sum::<f64>()
}

/// Which part of the per-draw discrete objective the head evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadTerm {
    /// `logsumexp_s a_s`: reconstruction plus discrete entropy.
    Full,
    Reconstruction,
    DiscreteEntropy,
}

/// Encoder gradient components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Reconstruction,
    DiscreteEntropy,
    Kl,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Reconstruction => "reconstruction",
            Component::DiscreteEntropy => "discrete-entropy",
            Component::Kl => "kl",
        }
    }
}

/// Standard-normal draws shared between a gradient evaluation and any finite
/// difference probes of it: one `[B·M, Z]` matrix per source, row `n·M + m`
/// holding draw `m` of point `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNoise {
    pub samples: usize,
    pub eps: Vec<Tensor>,
}

impl FrozenNoise {
    /// Draws for the points `indices`, each from its own stream, in the same
    /// order as [`crate::inference::sample_latents`].
    pub fn draw(indices: &[usize], k: usize, m: usize, z: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("at least one latent sample is required".into()));
        }
        let mut eps: Vec<Vec<f64>> = vec![Vec::with_capacity(indices.len() * m * z); k];
        for &i in indices {
            let mut r = rng::rng_for(point_seed(seed, i));
            for e in eps.iter_mut() {
                for _ in 0..m * z {
                    e.push(rng::standard_normal(&mut r));
                }
            }
        }
        let eps = eps
            .into_iter()
            .map(|e| Tensor::matrix(indices.len() * m, z, e))
            .collect::<std::result::Result<_, _>>()?;
        Ok(FrozenNoise { samples: m, eps })
    }
}

/// What [`objective`] evaluates and differentiates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub head: Option<HeadTerm>,
    pub kl: bool,
    /// Record decoder parameters as trainable leaves.
    pub decoder_grads: bool,
}

impl ObjectiveSpec {
    pub const FULL: ObjectiveSpec = ObjectiveSpec {
        head: Some(HeadTerm::Full),
        kl: true,
        decoder_grads: true,
    };

    pub fn component(c: Component) -> Self {
        match c {
            Component::Reconstruction => ObjectiveSpec {
                head: Some(HeadTerm::Reconstruction),
                kl: false,
                decoder_grads: false,
            },
            Component::DiscreteEntropy => ObjectiveSpec {
                head: Some(HeadTerm::DiscreteEntropy),
                kl: false,
                decoder_grads: false,
            },
            Component::Kl => ObjectiveSpec {
                head: None,
                kl: true,
                decoder_grads: false,
            },
        }
    }
}

/// Value and gradients of the batch surrogate
/// `(1/(B·M)) Σ_{n,m} head_nm - (1/B) Σ_n Σ_k KL_nk`.
#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub value: f64,
    /// Batch means of the three parts, always evaluated.
    pub reconstruction: f64,
    pub discrete_entropy: f64,
    pub kl: f64,
    /// Per source, in [`msvae_tensor::MlpNet::parameters`] order.
    pub encoder: Vec<Vec<Tensor>>,
    pub decoder: Option<Vec<Vec<Tensor>>>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-row coefficients `c_s` so that `∂head/∂μ_k,d = Σ_s c_s s_k
/// sign(x_d - mix_s,d) / b`.
struct MixtureHead {
    x: Tensor,
    samples: usize,
    b: f64,
    states: usize,
    coeffs: Vec<f64>,
    scale: f64,
}

struct HeadForward {
    head: MixtureHead,
    value: f64,
    full: f64,
    reconstruction: f64,
}

fn head_forward(
    x: &Tensor,
    mus: &[&Tensor],
    samples: usize,
    lp: &[f64],
    b: f64,
    term: HeadTerm,
    scale: f64,
) -> Result<HeadForward> {
    let d = x.cols();
    let k = mus.len();
    let states = 1usize << k;
    let r = x.rows() * samples;
    let norm = d as f64 * (2.0 * b).ln();
    let mut coeffs = vec![0.0; r * states];
    let (mut mixes, mut ll, mut a) = (Vec::new(), vec![0.0; states], vec![0.0; states]);
    let (mut value, mut full, mut recon) = (0.0, 0.0, 0.0);
    for row in 0..r {
        let xi = x.row(row / samples);
        let rows_k: Vec<&[f64]> = mus.iter().map(|t| t.row(row)).collect();
        all_state_mixes(&rows_k, &mut mixes);
        for s in 0..states {
            let mix = &mixes[s * d..(s + 1) * d];
            let l1: f64 = xi.iter().zip(mix).map(|(p, q)| (p - q).abs()).sum();
            ll[s] = -norm - l1 / b;
            a[s] = ll[s] + lp[s];
        }
        let pivot = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = pivot + a.iter().map(|v| (v - pivot).exp()).sum::<f64>().ln();
        let c = &mut coeffs[row * states..(row + 1) * states];
        let mut rbar = 0.0;
        for s in 0..states {
            c[s] = (a[s] - lse).exp();
            rbar += c[s] * ll[s];
        }
        match term {
            HeadTerm::Full => value += lse,
            HeadTerm::Reconstruction => {
                value += rbar;
                for s in 0..states {
                    c[s] *= 1.0 + ll[s] - rbar;
                }
            }
            HeadTerm::DiscreteEntropy => {
                value += lse - rbar;
                for s in 0..states {
                    c[s] *= rbar - ll[s];
                }
            }
        }
        full += lse;
        recon += rbar;
    }
    Ok(HeadForward {
        head: MixtureHead {
            x: x.clone(),
            samples,
            b,
            states,
            coeffs,
            scale,
        },
        value: value * scale,
        full: full * scale,
        reconstruction: recon * scale,
    })
}

impl CustomOp for MixtureHead {
    fn name(&self) -> &'static str {
        "mixture_head"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let k = inputs.len();
        let d = self.x.cols();
        let r = inputs[0].rows();
        let g = grad_output.item() * self.scale / self.b;
        let mut grads: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut mixes = Vec::new();
        let mut acc = vec![0.0; k * d];
        for row in 0..r {
            let xi = self.x.row(row / self.samples);
            let rows_k: Vec<&[f64]> = inputs.iter().map(|t| t.row(row)).collect();
            all_state_mixes(&rows_k, &mut mixes);
            acc.iter_mut().for_each(|v| *v = 0.0);
            let c = &self.coeffs[row * self.states..(row + 1) * self.states];
            for s in 1..self.states {
                if c[s] == 0.0 {
                    continue;
                }
                let mix = &mixes[s * d..(s + 1) * d];
                for kk in 0..k {
                    if s >> kk & 1 == 0 {
                        continue;
                    }
                    let out = &mut acc[kk * d..(kk + 1) * d];
                    for j in 0..d {
                        out[j] += c[s] * sign(xi[j] - mix[j]);
                    }
                }
            }
            for (kk, gt) in grads.iter_mut().enumerate() {
                for (o, v) in gt.row_mut(row).iter_mut().zip(&acc[kk * d..(kk + 1) * d]) {
                    *o = g * v;
                }
            }
        }
        grads
    }
}

/// Evaluates the batch surrogate on `x` (`[B, D]`) with frozen draws and
/// back-propagates it. Networks run in their current modes; train-mode batch
/// normalization updates running statistics as a side effect.
pub fn objective(
    model: &mut MsVae,
    x: &Tensor,
    noise: &FrozenNoise,
    spec: ObjectiveSpec,
) -> Result<ObjectiveOutput> {
    let (k, zd) = (model.num_sources(), model.latent_dim());
    let bsz = x.rows();
    let m = noise.samples;
    if noise.eps.len() != k || noise.eps.iter().any(|e| e.shape() != [bsz * m, zd]) {
        return Err(Error::Dimension(format!(
            "noise does not match {k} sources × [{}, {zd}]",
            bsz * m
        )));
    }
    if x.cols() != model.data_dim() {
        return Err(Error::Dimension(format!(
            "batch of width {}, model expects {}",
            x.cols(),
            model.data_dim()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut enc_params = Vec::with_capacity(k);
    let mut dec_params = Vec::with_capacity(k);
    let mut kl_vars = Vec::with_capacity(k);
    let mut mu_vars = Vec::with_capacity(k);
    let b = model.generative.b();
    let lp = model.generative.log_prior_table();
    for kk in 0..k {
        let rec = model.encoders.nets_mut()[kk].record(&mut g, xv, true)?;
        enc_params.push(rec.params);
        let nu = g.slice_cols(rec.output, 0, zd)?;
        let ln_tau = g.slice_cols(rec.output, zd, zd)?;
        let tau = g.exp(ln_tau);
        let nu2 = g.square(nu);
        let t = g.add(tau, nu2)?;
        let t = g.sub(t, ln_tau)?;
        let t = g.add_scalar(t, -1.0);
        let s = g.sum(t);
        kl_vars.push(g.scale(s, 0.5));

        let std = g.scale(ln_tau, 0.5);
        let std = g.exp(std);
        let nu_r = g.repeat_rows(nu, m)?;
        let std_r = g.repeat_rows(std, m)?;
        let e = g.constant(noise.eps[kk].clone());
        let spread = g.mul(std_r, e)?;
        let z = g.add(nu_r, spread)?;
        let drec = model.generative.decoders_mut()[kk].record(&mut g, z, spec.decoder_grads)?;
        dec_params.push(drec.params);
        mu_vars.push(drec.output);
    }

    let head_scale = 1.0 / (bsz * m) as f64;
    let mus: Vec<&Tensor> = mu_vars.iter().map(|&v| g.value(v)).collect();
    let term = spec.head.unwrap_or(HeadTerm::Full);
    let hf = head_forward(x, &mus, m, &lp, b, term, head_scale)?;
    let reconstruction = hf.reconstruction;
    let discrete_entropy = hf.full - hf.reconstruction;
    let kl_total: f64 = kl_vars.iter().map(|&v| g.value(v).item()).sum::<f64>() / bsz as f64;
    for (val, c) in [
        (reconstruction, Component::Reconstruction),
        (discrete_entropy, Component::DiscreteEntropy),
        (kl_total, Component::Kl),
    ] {
        if !val.is_finite() {
            return Err(Error::NonFinite {
                component: c.name(),
            });
        }
    }

    let mut parts: Vec<Var> = Vec::new();
    if spec.head.is_some() {
        let hv = g.custom(&mu_vars, Tensor::scalar(hf.value), Box::new(hf.head));
        parts.push(hv);
    }
    if spec.kl {
        let mut total = kl_vars[0];
        for &v in &kl_vars[1..] {
            total = g.add(total, v)?;
        }
        parts.push(g.scale(total, -1.0 / bsz as f64));
    }
    let mut loss = *parts
        .first()
        .ok_or_else(|| Error::Usage("objective with no terms".into()))?;
    for &p in &parts[1..] {
        loss = g.add(loss, p)?;
    }
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let encoder = enc_params
        .iter()
        .map(|ps| ps.iter().map(|&p| grads.take(p)).collect())
        .collect();
    let decoder = spec.decoder_grads.then(|| {
        dec_params
            .iter()
            .map(|ps| ps.iter().map(|&p| grads.take(p)).collect())
            .collect()
    });
    Ok(ObjectiveOutput {
        value,
        reconstruction,
        discrete_entropy,
        kl: kl_total,
        encoder,
        decoder,
    })
}

/// Gradient of the full surrogate with respect to every encoder parameter.
pub fn encoder_gradient(model: &mut MsVae, x: &Tensor, noise: &FrozenNoise) -> Result<Vec<Vec<Tensor>>> {
    let spec = ObjectiveSpec {
        decoder_grads: false,
        ..ObjectiveSpec::FULL
    };
    Ok(objective(model, x, noise, spec)?.encoder)
}

/// Encoder gradient of one component; the three components sum to
/// [`encoder_gradient`].
pub fn encoder_gradient_component(
    model: &mut MsVae,
    x: &Tensor,
    noise: &FrozenNoise,
    component: Component,
) -> Result<Vec<Vec<Tensor>>> {
    Ok(objective(model, x, noise, ObjectiveSpec::component(component))?.encoder)
}

/// Gradient of the surrogate with respect to every decoder parameter:
/// `(1/(B·M)) Σ_{n,m} Σ_s q_s ∇_W ln p(x|s,z)`.
pub fn decoder_gradient(model: &mut MsVae, x: &Tensor, noise: &FrozenNoise) -> Result<Vec<Vec<Tensor>>> {
    let spec = ObjectiveSpec {
        head: Some(HeadTerm::Full),
        kl: false,
        decoder_grads: true,
    };
    Ok(objective(model, x, noise, spec)?
        .decoder
        .expect("decoder gradients requested"))
}
