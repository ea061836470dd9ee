//! Encoder, mirrored decoder and baseline classifier networks.
//!
//! Two encoder trunks are available:
//!
//! | arch    | conv kernels       | strides        | hidden FC   |
//! |---------|--------------------|----------------|-------------|
//! | `Arch1` | 4, 4, 4, 3, 3      | 2, 2, 2, 1, 1  | 512, 256    |
//! | `Arch2` | 4, 4, 3, 3         | 2, 2, 1, 1     | 1000        |
//!
//! Every conv uses padding 1, so a 4x4 stride-2 layer halves the spatial size
//! and a 3x3 stride-1 layer preserves it. Hidden layers use `leaky_relu(0.1)`.
//! The output head is linear with width `1 + 2k`: one classification logit,
//! `k` means and `k` log-variances. The standard classifier is the same trunk;
//! it simply ignores the latent columns.
//!
//! The decoder projects `z` to the encoder's final feature volume and runs the
//! conv stack backwards with transposed convolutions, ending in a sigmoid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::ParamMut;
use crate::rng::RngStream;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const LEAKY_SLOPE: f64 = 0.1;
/// Parameter ids of decoder tensors start here; encoder ids start at zero.
pub const DECODER_PARAM_BASE: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchId {
    Arch1,
    Arch2,
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchId::Arch1 => "arch1",
            ArchId::Arch2 => "arch2",
        })
    }
}

impl FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arch1" => Ok(ArchId::Arch1),
            "arch2" => Ok(ArchId::Arch2),
            _ => Err(Error::InvalidArgument(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSpec {
    base_channels: usize,
    kernel: usize,
    stride: usize,
}

impl ArchId {
    fn conv_specs(self) -> &'static [ConvSpec] {
        const fn c(base_channels: usize, kernel: usize, stride: usize) -> ConvSpec {
            ConvSpec {
                base_channels,
                kernel,
                stride,
            }
        }
        const ARCH1: [ConvSpec; 5] = [c(16, 4, 2), c(32, 4, 2), c(48, 4, 2), c(64, 3, 1), c(96, 3, 1)];
        const ARCH2: [ConvSpec; 4] = [c(16, 4, 2), c(32, 4, 2), c(48, 3, 1), c(64, 3, 1)];
        match self {
            ArchId::Arch1 => &ARCH1,
            ArchId::Arch2 => &ARCH2,
        }
    }

    pub fn hidden_widths(self) -> &'static [usize] {
        match self {
            ArchId::Arch1 => &[512, 256],
            ArchId::Arch2 => &[1000],
        }
    }
}

/// Everything needed to rebuild a network's parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchId,
    pub latent_dim: usize,
    /// Image channels, 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Scales the per-layer conv channel counts (16, 32, 48, 64, 96).
    pub width_multiplier: f64,
}

impl ModelConfig {
    pub fn new(arch: ArchId, latent_dim: usize, channels: usize) -> Self {
        ModelConfig {
            arch,
            latent_dim,
            channels,
            width_multiplier: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::InvalidArgument("latent_dim must be >= 1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::InvalidArgument(
                "width_multiplier must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Output channel count of each conv layer.
    pub fn conv_channels(&self) -> Vec<usize> {
        self.arch
            .conv_specs()
            .iter()
            .map(|s| ((s.base_channels as f64 * self.width_multiplier).round() as usize).max(1))
            .collect()
    }

    /// `(channels, height, width)` of the last conv feature volume.
    pub fn feature_volume(&self) -> (usize, usize, usize) {
        let mut size = IMAGE_SIZE;
        for s in self.arch.conv_specs() {
            size = (size + 2 - s.kernel) / s.stride + 1;
        }
        (*self.conv_channels().last().unwrap(), size, size)
    }

    pub fn head_width(&self) -> usize {
        1 + 2 * self.latent_dim
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        let m = &mut ck.metadata;
        m.insert("arch".into(), self.arch.to_string());
        m.insert("latent_dim".into(), self.latent_dim.to_string());
        m.insert("channels".into(), self.channels.to_string());
        m.insert("width_multiplier".into(), self.width_multiplier.to_string());
    }

    fn read_meta(ck: &Checkpoint) -> Result<Self> {
        let parse = |key: &str| -> Result<usize> {
            ck.meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{key}`")))
        };
        let cfg = ModelConfig {
            arch: ck.meta("arch")?.parse()?,
            latent_dim: parse("latent_dim")?,
            channels: parse("channels")?,
            width_multiplier: ck
                .meta("width_multiplier")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad `width_multiplier`".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.dim(2), self.kernel.dim(3))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn out_features(&self) -> usize {
        self.weight.dim(1)
    }
}

/// He-style uniform: `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`.
fn he_uniform(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

fn dense_init(rng: &mut RngStream, d_in: usize, d_out: usize) -> DenseLayer {
    DenseLayer {
        weight: he_uniform(rng, &[d_in, d_out], d_in),
        bias: Tensor::zeros([d_out]),
    }
}

/// Per-example encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    /// `[N]` classification logits.
    pub logit: Tensor,
    /// `[N, k]` posterior means.
    pub mu: Tensor,
    /// `[N, k]` posterior log-variances; `sigma = exp(logvar / 2)`.
    pub logvar: Tensor,
}

/// Tape handles for one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `[N, 1]`
    pub logit: Var,
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: ModelConfig,
    pub convs: Vec<ConvLayer>,
    pub hidden: Vec<DenseLayer>,
    pub head: DenseLayer,
}

fn check_images(op: &'static str, batch: &Tensor, channels: usize) -> Result<()> {
    match *batch.shape() {
        [_, c, h, w] if c == channels && h == IMAGE_SIZE && w == IMAGE_SIZE => Ok(()),
        [_, c, h, w] => Err(Error::shape(
            op,
            format!("expected [N,{channels},64,64], got [_,{c},{h},{w}]"),
        )),
        ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

impl EncoderParams {
    pub fn build(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut in_ch = config.channels;
        let mut convs = Vec::new();
        for (spec, out_ch) in config.arch.conv_specs().iter().zip(config.conv_channels()) {
            let k = spec.kernel;
            let fan_in = in_ch * k * k;
            convs.push(ConvLayer {
                kernel: he_uniform(rng, &[out_ch, in_ch, k, k], fan_in),
                bias: Tensor::zeros([out_ch]),
                stride: spec.stride,
                padding: 1,
            });
            in_ch = out_ch;
        }
        let (c, h, w) = config.feature_volume();
        let mut width = c * h * w;
        let mut hidden = Vec::new();
        for &out in config.arch.hidden_widths() {
            hidden.push(dense_init(rng, width, out));
            width = out;
        }
        let head = dense_init(rng, width, config.head_width());
        Ok(EncoderParams {
            config,
            convs,
            hidden,
            head,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Named tensors in parameter-id order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.kernel"), &l.kernel));
            out.push((format!("encoder.conv{i}.bias"), &l.bias));
        }
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("encoder.fc{i}.weight"), &l.weight));
            out.push((format!("encoder.fc{i}.bias"), &l.bias));
        }
        out.push(("encoder.head.weight".into(), &self.head.weight));
        out.push(("encoder.head.bias".into(), &self.head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.convs {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records the encoder on `tape`; parameter ids are `0..`.
    pub fn forward_tape<'a>(&'a self, tape: &mut Tape<'a>, images: Var) -> Result<EncoderVars> {
        check_images("encoder_forward", tape.value(images), self.config.channels)?;
        let mut id = 0;
        let mut next = |tape: &mut Tape<'a>, t: &'a Tensor| {
            let v = tape.param(ParamId(id), t);
            id += 1;
            v
        };
        let mut h = images;
        for l in &self.convs {
            let k = next(tape, &l.kernel);
            let b = next(tape, &l.bias);
            let c = tape.conv2d(h, k, b, l.stride, l.padding)?;
            h = tape.leaky_relu(c, LEAKY_SLOPE);
        }
        let n = tape.value(h).dim(0);
        let flat = tape.value(h).row_len();
        h = tape.reshape(h, &[n, flat])?;
        for l in &self.hidden {
            let w = next(tape, &l.weight);
            let b = next(tape, &l.bias);
            let d = tape.dense(h, w, b)?;
            h = tape.leaky_relu(d, LEAKY_SLOPE);
        }
        let w = next(tape, &self.head.weight);
        let b = next(tape, &self.head.bias);
        let out = tape.dense(h, w, b)?;
        let k = self.config.latent_dim;
        Ok(EncoderVars {
            logit: tape.slice_cols(out, 0, 1)?,
            mu: tape.slice_cols(out, 1, k)?,
            logvar: tape.slice_cols(out, 1 + k, k)?,
        })
    }

    pub fn forward(&self, batch: &Tensor) -> Result<LatentStats> {
        let mut tape = Tape::new();
        let x = tape.input_ref(batch);
        let vars = self.forward_tape(&mut tape, x)?;
        let n = batch.dim(0);
        Ok(LatentStats {
            logit: tape.value(vars.logit).clone().reshape([n])?,
            mu: tape.value(vars.mu).clone(),
            logvar: tape.value(vars.logvar).clone(),
        })
    }

    /// [`forward`](Self::forward) over a large batch, `chunk` rows at a time.
    pub fn forward_chunked(&self, batch: &Tensor, chunk: usize) -> Result<LatentStats> {
        check_images("encoder_forward", batch, self.config.channels)?;
        let n = batch.dim(0);
        let k = self.config.latent_dim;
        let (mut logit, mut mu, mut logvar) = (Vec::new(), Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let s = self.forward(&batch.gather_rows(&rows))?;
            logit.extend(s.logit.into_data());
            mu.extend(s.mu.into_data());
            logvar.extend(s.logvar.into_data());
            start = end;
        }
        Ok(LatentStats {
            logit: Tensor::new([n], logit)?,
            mu: Tensor::new([n, k], mu)?,
            logvar: Tensor::new([n, k], logvar)?,
        })
    }

    /// Classification logits only; identical to `forward(batch).logit`.
    pub fn classify(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.logit)
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        named_params(names, self.tensors_mut(), 0)
    }
}

fn named_params(names: Vec<String>, tensors: Vec<&mut Tensor>, base: usize) -> Vec<ParamMut<'_>> {
    names
        .into_iter()
        .zip(tensors)
        .enumerate()
        .map(|(i, (name, tensor))| ParamMut {
            id: ParamId(base + i),
            name,
            tensor,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: ModelConfig,
    pub projection: DenseLayer,
    /// Transposed convs, first applied first (mirror of the last encoder conv).
    pub deconvs: Vec<ConvLayer>,
}

impl DecoderParams {
    pub fn build(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = config.feature_volume();
        let projection = dense_init(rng, config.latent_dim, c * h * w);
        let outs = config.conv_channels();
        let specs = config.arch.conv_specs();
        let mut deconvs = Vec::new();
        for i in (0..specs.len()).rev() {
            let from = outs[i];
            let to = if i == 0 { config.channels } else { outs[i - 1] };
            let k = specs[i].kernel;
            // Each output pixel of a transposed conv sums over roughly
            // from * (k / stride)^2 inputs.
            let fan_in = (from * k * k / (specs[i].stride * specs[i].stride)).max(1);
            deconvs.push(ConvLayer {
                kernel: he_uniform(rng, &[from, to, k, k], fan_in),
                bias: Tensor::zeros([to]),
                stride: specs[i].stride,
                padding: 1,
            });
        }
        Ok(DecoderParams {
            config,
            projection,
            deconvs,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("decoder.proj.weight".to_string(), &self.projection.weight),
            ("decoder.proj.bias".to_string(), &self.projection.bias),
        ];
        for (i, l) in self.deconvs.iter().enumerate() {
            out.push((format!("decoder.deconv{i}.kernel"), &l.kernel));
            out.push((format!("decoder.deconv{i}.bias"), &l.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.projection.weight, &mut self.projection.bias];
        for l in &mut self.deconvs {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        named_params(names, self.tensors_mut(), DECODER_PARAM_BASE)
    }

    /// Records the decoder on `tape`; parameter ids start at [`DECODER_PARAM_BASE`].
    pub fn forward_tape<'a>(&'a self, tape: &mut Tape<'a>, z: Var) -> Result<Var> {
        let zt = tape.value(z);
        if zt.ndim() != 2 || zt.dim(1) != self.config.latent_dim {
            return Err(Error::shape(
                "decoder_forward",
                format!(
                    "latent width: expected [N,{}], got {:?}",
                    self.config.latent_dim,
                    zt.shape()
                ),
            ));
        }
        let n = zt.dim(0);
        let mut id = DECODER_PARAM_BASE;
        let mut next = |tape: &mut Tape<'a>, t: &'a Tensor| {
            let v = tape.param(ParamId(id), t);
            id += 1;
            v
        };
        let w = next(tape, &self.projection.weight);
        let b = next(tape, &self.projection.bias);
        let p = tape.dense(z, w, b)?;
        let p = tape.leaky_relu(p, LEAKY_SLOPE);
        let (c, h, wd) = self.config.feature_volume();
        let mut x = tape.reshape(p, &[n, c, h, wd])?;
        let last = self.deconvs.len() - 1;
        for (i, l) in self.deconvs.iter().enumerate() {
            let k = next(tape, &l.kernel);
            let b = next(tape, &l.bias);
            let y = tape.transposed_conv2d(x, k, b, l.stride, l.padding)?;
            x = if i == last {
                tape.sigmoid(y)
            } else {
                tape.leaky_relu(y, LEAKY_SLOPE)
            };
        }
        Ok(x)
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.input_ref(z);
        let out = self.forward_tape(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }
}

/// Which training objective produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Standard,
    Dbvae,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Standard => "standard",
            ModelKind::Dbvae => "dbvae",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ModelKind::Standard),
            "dbvae" => Ok(ModelKind::Dbvae),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}`"))),
        }
    }
}

/// A trained model as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub encoder: EncoderParams,
    pub decoder: Option<DecoderParams>,
}

impl ModelBundle {
    pub fn config(&self) -> ModelConfig {
        self.encoder.config
    }

    pub fn to_checkpoint(&self, extra: &[(&str, String)]) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.encoder.config.write_meta(&mut ck);
        ck.metadata.insert("kind".into(), self.kind.to_string());
        for (k, v) in extra {
            ck.metadata.insert((*k).into(), v.clone());
        }
        let mut push = |list: Vec<(String, &Tensor)>| {
            for (name, t) in list {
                ck.tensors.push((name, t.clone()));
            }
        };
        push(self.encoder.tensors());
        if let Some(d) = &self.decoder {
            push(d.tensors());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::read_meta(ck)?;
        let kind: ModelKind = ck.meta("kind")?.parse()?;
        // Build shapes from the config, then overwrite every tensor.
        let mut rng = RngStream::new(0);
        let mut encoder = EncoderParams::build(config, &mut rng)?;
        let names: Vec<String> = encoder.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(encoder.tensors_mut()) {
            fill(slot, name, ck)?;
        }
        let has_decoder = ck.tensors.iter().any(|(n, _)| n.starts_with("decoder."));
        let decoder = if has_decoder {
            let mut d = DecoderParams::build(config, &mut rng)?;
            let names: Vec<String> = d.tensors().into_iter().map(|(n, _)| n).collect();
            for (name, slot) in names.iter().zip(d.tensors_mut()) {
                fill(slot, name, ck)?;
            }
            Some(d)
        } else {
            None
        };
        Ok(ModelBundle {
            kind,
            encoder,
            decoder,
        })
    }
}

fn fill(slot: &mut Tensor, name: &str, ck: &Checkpoint) -> Result<()> {
    let t = ck.tensor(name)?;
    if t.shape() != slot.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, config expects {:?}",
            t.shape(),
            slot.shape()
        )));
    }
    *slot = t.clone();
    Ok(())
}
