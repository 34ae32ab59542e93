use msvae_tensor::MlpNet;

use crate::error::{Error, Result};
use crate::inference::EncoderParams;
use crate::model::GenerativeParams;
use crate::rng;

/// Layer widths of a freshly initialized model.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub sources: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    /// Hidden widths of each encoder, input side first.
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of each decoder, latent side first.
    pub decoder_hidden: Vec<usize>,
    pub batchnorm: bool,
}

impl Architecture {
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.data_dim];
        dims.extend(&self.encoder_hidden);
        dims.push(2 * self.latent_dim);
        dims
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.latent_dim];
        dims.extend(&self.decoder_hidden);
        dims.push(self.data_dim);
        dims
    }
}

/// A complete multi-stream model: encoders Φ and generative parameters Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct MsVae {
    pub encoders: EncoderParams,
    pub generative: GenerativeParams,
}

impl MsVae {
    pub fn new(encoders: EncoderParams, generative: GenerativeParams) -> Result<Self> {
        if encoders.num_sources() != generative.num_sources()
            || encoders.data_dim() != generative.data_dim()
            || encoders.latent_dim() != generative.latent_dim()
        {
            return Err(Error::Dimension(format!(
                "encoders (K={}, D={}, Z={}) do not match decoders (K={}, D={}, Z={})",
                encoders.num_sources(),
                encoders.data_dim(),
                encoders.latent_dim(),
                generative.num_sources(),
                generative.data_dim(),
                generative.latent_dim()
            )));
        }
        Ok(MsVae {
            encoders,
            generative,
        })
    }

    /// Randomly initialized networks; initialization draws come from the
    /// `"init"` stream of `seed`.
    pub fn random(arch: &Architecture, pi: Vec<f64>, b: f64, seed: u64) -> Result<Self> {
        if arch.sources == 0 || arch.data_dim == 0 || arch.latent_dim == 0 {
            return Err(Error::Config(format!("degenerate architecture {arch:?}")));
        }
        if pi.len() != arch.sources {
            return Err(Error::Config(format!(
                "{} initial presence probabilities for {} sources",
                pi.len(),
                arch.sources
            )));
        }
        let mut r = rng::rng_for(rng::derive_seed(seed, "init"));
        let enc = (0..arch.sources)
            .map(|_| MlpNet::new(&arch.encoder_dims(), arch.batchnorm, &mut r))
            .collect();
        let dec = (0..arch.sources)
            .map(|_| MlpNet::new(&arch.decoder_dims(), arch.batchnorm, &mut r))
            .collect();
        MsVae::new(EncoderParams::new(enc)?, GenerativeParams::new(pi, dec, b)?)
    }

    pub fn num_sources(&self) -> usize {
        self.generative.num_sources()
    }

    pub fn data_dim(&self) -> usize {
        self.generative.data_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.generative.latent_dim()
    }
}
