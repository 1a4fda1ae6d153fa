//! Actor-critic network: spec, parameters and forward evaluation.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kernels::{self, ConvGeom};
use super::tape::{conv_geom, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Layer {
    Conv { out_channels: usize, kernel: usize, stride: usize },
    Relu,
    Flatten,
    Dense { out_dim: usize },
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { out_channels, kernel, stride } => write!(f, "conv {out_channels} {kernel} {stride}"),
            Layer::Relu => f.write_str("relu"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Dense { out_dim } => write!(f, "dense {out_dim}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    /// Parses `conv <out> <kernel> <stride>`, `relu`, `flatten`, `dense <out>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .filter(|v| *v > 0)
                .ok_or_else(|| Error::InvalidSpec(format!("bad layer `{s}`")))
        };
        match parts.first().copied() {
            Some("conv") if parts.len() == 4 => Ok(Layer::Conv {
                out_channels: num(1)?,
                kernel: num(2)?,
                stride: num(3)?,
            }),
            Some("relu") if parts.len() == 1 => Ok(Layer::Relu),
            Some("flatten") if parts.len() == 1 => Ok(Layer::Flatten),
            Some("dense") if parts.len() == 2 => Ok(Layer::Dense { out_dim: num(1)? }),
            _ => Err(Error::InvalidSpec(format!("bad layer `{s}`"))),
        }
    }
}

impl TryFrom<String> for Layer {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Layer> for String {
    fn from(l: Layer) -> String {
        l.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub num_actions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dims {
    Image(usize, usize, usize),
    Flat(usize),
}

impl NetworkSpec {
    /// Two strided convolutions and a dense layer, sized for CPU training.
    pub fn default_for(input: [usize; 3], num_actions: usize) -> Self {
        Self {
            input,
            layers: vec![
                Layer::Conv { out_channels: 16, kernel: 4, stride: 2 },
                Layer::Relu,
                Layer::Conv { out_channels: 32, kernel: 3, stride: 2 },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { out_dim: 128 },
                Layer::Relu,
            ],
            num_actions,
        }
    }

    /// Checks layer compatibility; returns the shapes of every parameter tensor
    /// in canonical order (trunk layers, then policy head, then value head).
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidSpec("input dims must be positive".into()));
        }
        if self.num_actions == 0 {
            return Err(Error::InvalidSpec("num_actions must be positive".into()));
        }
        let mut dims = Dims::Image(h, w, c);
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            dims = match (*layer, dims) {
                (Layer::Conv { out_channels, kernel, stride }, Dims::Image(h, w, c)) => {
                    if kernel > h || kernel > w {
                        return Err(Error::InvalidSpec(format!(
                            "layer {i}: kernel {kernel} larger than input {h}x{w}"
                        )));
                    }
                    shapes.push((format!("conv{i}.weight"), vec![out_channels, kernel, kernel, c]));
                    shapes.push((format!("conv{i}.bias"), vec![out_channels]));
                    Dims::Image((h - kernel) / stride + 1, (w - kernel) / stride + 1, out_channels)
                }
                (Layer::Conv { .. }, Dims::Flat(_)) => {
                    return Err(Error::InvalidSpec(format!("layer {i}: conv after flatten")))
                }
                (Layer::Relu, d) => d,
                (Layer::Flatten, Dims::Image(h, w, c)) => Dims::Flat(h * w * c),
                (Layer::Flatten, Dims::Flat(_)) => {
                    return Err(Error::InvalidSpec(format!("layer {i}: flatten of flat input")))
                }
                (Layer::Dense { out_dim }, Dims::Flat(n)) => {
                    shapes.push((format!("dense{i}.weight"), vec![out_dim, n]));
                    shapes.push((format!("dense{i}.bias"), vec![out_dim]));
                    Dims::Flat(out_dim)
                }
                (Layer::Dense { .. }, Dims::Image(..)) => {
                    return Err(Error::InvalidSpec(format!("layer {i}: dense needs flatten first")))
                }
            };
        }
        let Dims::Flat(features) = dims else {
            return Err(Error::InvalidSpec("trunk must end with a flat feature vector".into()));
        };
        shapes.push(("policy.weight".into(), vec![self.num_actions, features]));
        shapes.push(("policy.bias".into(), vec![self.num_actions]));
        shapes.push(("value.weight".into(), vec![1, features]));
        shapes.push(("value.bias".into(), vec![1]));
        Ok(shapes)
    }

    pub fn canonical(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        format!(
            "input={}x{}x{};layers={};actions={}",
            self.input[0],
            self.input[1],
            self.input[2],
            layers.join(","),
            self.num_actions
        )
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn obs_len(&self) -> usize {
        self.input.iter().product()
    }
}

/// Named parameter tensors of one actor-critic network.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    spec: Arc<NetworkSpec>,
    entries: Vec<(String, Tensor)>,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.entries == other.entries
    }
}

impl ParameterSet {
    pub fn from_entries(
        spec: Arc<NetworkSpec>,
        entries: Vec<(String, Tensor)>,
        init_seed: u64,
        init_scale: f64,
    ) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != entries.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                entries.len()
            )));
        }
        for ((name, shape), (en, et)) in shapes.iter().zip(&entries) {
            if name != en || shape.as_slice() != et.shape() {
                return Err(Error::Shape(format!(
                    "parameter {en} {:?} does not match expected {name} {shape:?}",
                    et.shape()
                )));
            }
        }
        Ok(Self { spec, entries, init_seed, init_scale })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn spec_arc(&self) -> Arc<NetworkSpec> {
        Arc::clone(&self.spec)
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec.hash()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a differentiable leaf on `tape`.
    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.param(t)).collect()
    }
}

/// Draws weights i.i.d. uniform in `[-scale, scale]`; biases start at zero.
pub fn init_params(spec: &NetworkSpec, seed: u64, scale: f64) -> Result<ParameterSet> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::InvalidSpec(format!("init scale must be >= 0, got {scale}")));
    }
    let shapes = spec.param_shapes()?;
    let mut r = rng::stream(seed, rng::tags::INIT);
    let entries = shapes
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") || scale == 0.0 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| r.random_range(-scale..=scale)).collect()
            };
            (name, Tensor::from_parts(shape, data).expect("shape from spec"))
        })
        .collect();
    Ok(ParameterSet {
        spec: Arc::new(spec.clone()),
        entries,
        init_seed: seed,
        init_scale: scale,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorCriticOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

/// Batched network output: logits `[N, A]` and one value per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub logits: Tensor,
    pub values: Vec<f64>,
}

impl BatchOutput {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn logits_row(&self, n: usize) -> &[f64] {
        self.logits.row(n)
    }

    pub fn outputs(&self) -> Vec<ActorCriticOutput> {
        (0..self.len())
            .map(|n| ActorCriticOutput {
                logits: self.logits_row(n).to_vec(),
                value: self.values[n],
            })
            .collect()
    }
}

fn check_obs(spec: &NetworkSpec, obs: &Tensor) -> Result<usize> {
    let s = obs.shape();
    if s.len() != 4 || s[1..] != spec.input {
        return Err(Error::Shape(format!(
            "observation batch {:?} does not match network input {:?}",
            s, spec.input
        )));
    }
    Ok(s[0])
}

/// Tape-free forward pass over a batch `[N, H, W, C]`.
pub fn forward(params: &ParameterSet, obs: &Tensor) -> Result<BatchOutput> {
    let spec = params.spec();
    let n = check_obs(spec, obs)?;
    let mut p = params.tensors();
    let mut next = || p.next().expect("parameter count validated at construction");
    let mut shape: Vec<usize> = obs.shape().to_vec();
    let mut cur: Vec<f64> = obs.data().to_vec();
    for layer in &spec.layers {
        match *layer {
            Layer::Conv { stride, .. } => {
                let (w, b) = (next(), next());
                let geom: ConvGeom = conv_geom(&shape, w.shape(), b.shape(), stride)?;
                cur = kernels::conv2d_forward(&geom, &cur, w.data(), b.data());
                shape = vec![n, geom.out_h(), geom.out_w(), geom.out_c];
            }
            Layer::Relu => cur = kernels::relu(&cur),
            Layer::Flatten => shape = vec![n, cur.len() / n],
            Layer::Dense { out_dim } => {
                let (w, b) = (next(), next());
                cur = kernels::linear_forward(n, shape[1], out_dim, &cur, w.data(), b.data());
                shape = vec![n, out_dim];
            }
        }
    }
    let (pw, pb, vw, vb) = (next(), next(), next(), next());
    let a = spec.num_actions;
    let logits = kernels::linear_forward(n, shape[1], a, &cur, pw.data(), pb.data());
    let values = kernels::linear_forward(n, shape[1], 1, &cur, vw.data(), vb.data());
    let logits = Tensor::from_parts(vec![n, a], logits)?;
    logits.check_finite("policy logits")?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("value output".into()));
    }
    Ok(BatchOutput { logits, values })
}

/// Forward pass recorded on `tape`. Returns (logits `[N, A]`, values `[N]`).
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    spec: &NetworkSpec,
    vars: &[Var],
    obs: Var,
) -> Result<(Var, Var)> {
    let n = check_obs(spec, tape.value(obs))?;
    let mut p = vars.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::Shape("too few parameter vars".into()));
    let mut x = obs;
    for layer in &spec.layers {
        x = match *layer {
            Layer::Conv { stride, .. } => {
                let (w, b) = (next()?, next()?);
                tape.conv2d(x, w, b, stride)?
            }
            Layer::Relu => tape.relu(x),
            Layer::Flatten => {
                let len = tape.value(x).len();
                tape.reshape(x, &[n, len / n])?
            }
            Layer::Dense { .. } => {
                let (w, b) = (next()?, next()?);
                tape.linear(x, w, b)?
            }
        };
    }
    let (pw, pb, vw, vb) = (next()?, next()?, next()?, next()?);
    let logits = tape.linear(x, pw, pb)?;
    let v = tape.linear(x, vw, vb)?;
    let values = tape.reshape(v, &[n])?;
    Ok((logits, values))
}
