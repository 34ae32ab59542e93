//! Versioned binary checkpoints.
//!
//! Layout: the 8 ASCII bytes `MSVAE001`, a little-endian `u64` length, a UTF-8
//! JSON metadata block of that length, then every parameter tensor in
//! declaration order as little-endian `f64`: encoders first, then decoders;
//! within a network, per layer `weight`, `bias` and, for normalized layers,
//! `gamma`, `beta`, `running_mean`, `running_var`.

use std::path::Path;

use msvae_tensor::{Activation, BatchNorm, Layer, MlpNet, Mode, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::EncoderParams;
use crate::model::GenerativeParams;
use crate::msvae::MsVae;
use crate::training::Expert;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSVAE001";

const FORMAT: &str = "checkpoint";

/// Provenance stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: Option<String>,
    /// Source labels in stream order.
    pub labels: Vec<u32>,
    /// Config hash of the dataset the parameters were fitted to.
    #[serde(default)]
    pub data_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerSpec {
    in_dim: usize,
    out_dim: usize,
    relu: bool,
    batchnorm: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetSpec {
    eval_mode: bool,
    layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Model,
    Expert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: Kind,
    sources: usize,
    data_dim: usize,
    latent_dim: usize,
    pi: Vec<f64>,
    b: f64,
    info: CheckpointInfo,
    encoders: Vec<NetSpec>,
    decoders: Vec<NetSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    losses: Vec<f64>,
}

fn net_spec(net: &MlpNet) -> NetSpec {
    NetSpec {
        eval_mode: net.mode() == Mode::Eval,
        layers: net
            .layers()
            .iter()
            .map(|l| LayerSpec {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                relu: l.activation == Activation::Relu,
                batchnorm: l.batchnorm.as_ref().map(|bn| (bn.eps, bn.momentum)),
            })
            .collect(),
    }
}

fn push_values(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_net(out: &mut Vec<u8>, net: &MlpNet) {
    for l in net.layers() {
        push_values(out, l.weight.data());
        push_values(out, l.bias.data());
        if let Some(bn) = &l.batchnorm {
            push_values(out, bn.gamma.data());
            push_values(out, bn.beta.data());
            push_values(out, &bn.running_mean);
            push_values(out, &bn.running_var);
        }
    }
}

fn encode(meta: &Meta, nets: &[&MlpNet]) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for n in nets {
        push_net(&mut out, n);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn values(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let len = count * 8;
        if self.bytes.len() - self.pos < len {
            return Err(Error::parse(
                FORMAT,
                self.pos as u64,
                format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = self.bytes[self.pos..self.pos + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += len;
        Ok(out)
    }

    fn net(&mut self, spec: &NetSpec, name: &str) -> Result<MlpNet> {
        let start = self.pos;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let what = format!("{name} layer {i}");
            let weight = Tensor::matrix(
                ls.in_dim,
                ls.out_dim,
                self.values(ls.in_dim * ls.out_dim, &what)?,
            )?;
            let bias = Tensor::vector(self.values(ls.out_dim, &what)?);
            let batchnorm = match ls.batchnorm {
                Some((eps, momentum)) => Some(BatchNorm {
                    gamma: Tensor::vector(self.values(ls.out_dim, &what)?),
                    beta: Tensor::vector(self.values(ls.out_dim, &what)?),
                    running_mean: self.values(ls.out_dim, &what)?,
                    running_var: self.values(ls.out_dim, &what)?,
                    momentum,
                    eps,
                }),
                None => None,
            };
            layers.push(Layer {
                weight,
                bias,
                batchnorm,
                activation: if ls.relu {
                    Activation::Relu
                } else {
                    Activation::Identity
                },
            });
        }
        let mode = if spec.eval_mode { Mode::Eval } else { Mode::Train };
        MlpNet::from_layers(layers, mode)
            .map_err(|e| Error::parse(FORMAT, start as u64, format!("{name}: {e}")))
    }
}

fn decode(bytes: &[u8]) -> Result<(Meta, Vec<MlpNet>, Vec<MlpNet>)> {
    if bytes.len() < 8 {
        return Err(Error::parse(FORMAT, bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::parse(
            FORMAT,
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8])),
        ));
    }
    if bytes.len() < 16 {
        return Err(Error::parse(FORMAT, 8, "truncated metadata length"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if len > (bytes.len() - 16) as u64 {
        return Err(Error::parse(
            FORMAT,
            8,
            format!("metadata length {len} exceeds the {} remaining bytes", bytes.len() - 16),
        ));
    }
    let end = 16 + len as usize;
    let meta: Meta = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::parse(FORMAT, 16, format!("metadata: {e}")))?;
    let mut r = Reader { bytes, pos: end };
    let encoders = meta
        .encoders
        .iter()
        .enumerate()
        .map(|(i, s)| r.net(s, &format!("encoder {i}")))
        .collect::<Result<Vec<_>>>()?;
    let decoders = meta
        .decoders
        .iter()
        .enumerate()
        .map(|(i, s)| r.net(s, &format!("decoder {i}")))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::parse(
            FORMAT,
            r.pos as u64,
            format!("{} trailing bytes after parameters", bytes.len() - r.pos),
        ));
    }
    Ok((meta, encoders, decoders))
}

pub fn encode_model(model: &MsVae, info: &CheckpointInfo) -> Vec<u8> {
    let meta = Meta {
        kind: Kind::Model,
        sources: model.num_sources(),
        data_dim: model.data_dim(),
        latent_dim: model.latent_dim(),
        pi: model.generative.pi().to_vec(),
        b: model.generative.b(),
        info: info.clone(),
        encoders: model.encoders.nets().iter().map(net_spec).collect(),
        decoders: model.generative.decoders().iter().map(net_spec).collect(),
        losses: Vec::new(),
    };
    let nets: Vec<&MlpNet> = model
        .encoders
        .nets()
        .iter()
        .chain(model.generative.decoders())
        .collect();
    encode(&meta, &nets)
}

pub fn decode_model(bytes: &[u8]) -> Result<(MsVae, CheckpointInfo)> {
    let (meta, encoders, decoders) = decode(bytes)?;
    if meta.kind != Kind::Model {
        return Err(Error::parse(FORMAT, 16, "checkpoint holds an expert, not a model"));
    }
    let model = MsVae::new(
        EncoderParams::new(encoders)?,
        GenerativeParams::new(meta.pi, decoders, meta.b)?,
    )?;
    if model.num_sources() != meta.sources
        || model.data_dim() != meta.data_dim
        || model.latent_dim() != meta.latent_dim
    {
        return Err(Error::parse(FORMAT, 16, "metadata dimensions disagree with networks"));
    }
    Ok((model, meta.info))
}

pub fn encode_expert(expert: &Expert, info: &CheckpointInfo) -> Vec<u8> {
    let meta = Meta {
        kind: Kind::Expert,
        sources: 1,
        data_dim: expert.decoder.out_dim(),
        latent_dim: expert.decoder.in_dim(),
        pi: Vec::new(),
        b: expert.b,
        info: CheckpointInfo {
            labels: vec![expert.label],
            ..info.clone()
        },
        encoders: vec![net_spec(&expert.encoder)],
        decoders: vec![net_spec(&expert.decoder)],
        losses: expert.losses.clone(),
    };
    encode(&meta, &[&expert.encoder, &expert.decoder])
}

pub fn decode_expert(bytes: &[u8]) -> Result<(Expert, CheckpointInfo)> {
    let (meta, mut encoders, mut decoders) = decode(bytes)?;
    if meta.kind != Kind::Expert || encoders.len() != 1 || decoders.len() != 1 {
        return Err(Error::parse(FORMAT, 16, "checkpoint does not hold a single expert"));
    }
    let label = *meta
        .info
        .labels
        .first()
        .ok_or_else(|| Error::parse(FORMAT, 16, "expert checkpoint without a label"))?;
    Ok((
        Expert {
            label,
            encoder: encoders.remove(0),
            decoder: decoders.remove(0),
            b: meta.b,
            losses: meta.losses,
        },
        meta.info,
    ))
}

pub fn save_model(model: &MsVae, info: &CheckpointInfo, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model, info))
}

pub fn load_model(path: &Path) -> Result<(MsVae, CheckpointInfo)> {
    decode_model(&std::fs::read(path)?)
}

pub fn save_expert(expert: &Expert, info: &CheckpointInfo, path: &Path) -> Result<()> {
    write_atomic(path, &encode_expert(expert, info))
}

pub fn load_expert(path: &Path) -> Result<(Expert, CheckpointInfo)> {
    decode_expert(&std::fs::read(path)?)
}

/// Writes to a sibling temporary file and renames it into place, so an
/// interrupted run never leaves a half-written checkpoint.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
