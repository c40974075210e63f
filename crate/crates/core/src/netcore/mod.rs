//! The spotting network and its reverse-mode gradients.
//!
//! ```text
//! x [T×P] → MLP (P→256→64, ReLU) → trunk (u-net | Transformer encoder)
//!         → conf head  (conv k=3, K ch) → confidence logits [T×K]
//!         → disp head  (conv k=3, K ch) → displacements     [T×K]
//! ```
//!
//! Every layer has a hand-written backward pass. A forward run with a
//! [`Tape`] records the activations that [`Network::backward`] consumes.
//! All arithmetic is f64.

mod checkpoint;
pub mod ops;
mod te;
mod unet;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use te::{sinusoidal_encoding, TransformerEncoder};
pub use unet::{Bottleneck, UNet};

use ndarray::{Array2, ArrayD, IxDyn};
use ops::{relu, relu_backward, Conv1d, Init, Linear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("backward called without a recorded forward pass")]
    NoForward,
}

/// Conf-head bias at init, so that initial detections are sparse.
pub const CONF_HEAD_BIAS_INIT: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trunk {
    Unet {
        levels: usize,
        base_width: usize,
    },
    Transformer {
        layers: usize,
        embed: usize,
        heads: usize,
        /// Only switched off to isolate order dependence in tests.
        #[serde(default = "default_true")]
        positional_encoding: bool,
    },
}

fn default_true() -> bool {
    true
}

impl Trunk {
    /// 5 contractions for 224-anchor chunks, 4 for 112, so the coarsest
    /// length is 7 either way.
    pub fn unet_for_chunk(chunk_len: usize) -> Self {
        let mut levels = 0;
        while chunk_len.is_multiple_of(1 << (levels + 1)) && chunk_len >> (levels + 1) >= 7 {
            levels += 1;
        }
        Trunk::Unet {
            levels,
            base_width: 64,
        }
    }

    pub fn te_small() -> Self {
        Trunk::Transformer {
            layers: 4,
            embed: 128,
            heads: 4,
            positional_encoding: true,
        }
    }

    pub fn te_base() -> Self {
        Trunk::Transformer {
            layers: 12,
            embed: 256,
            heads: 8,
            positional_encoding: true,
        }
    }

    pub fn unet_levels(&self) -> Option<usize> {
        match self {
            Trunk::Unet { levels, .. } => Some(*levels),
            Trunk::Transformer { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub trunk: Trunk,
    pub num_classes: usize,
    pub chunk_len: usize,
    pub input_dim: usize,
    pub mlp_widths: [usize; 2],
}

impl ModelConfig {
    pub fn new(trunk: Trunk, num_classes: usize, chunk_len: usize, input_dim: usize) -> Self {
        Self {
            trunk,
            num_classes,
            chunk_len,
            input_dim,
            mlp_widths: [256, 64],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes == 0 || self.input_dim == 0 || self.chunk_len == 0 {
            return Err(ModelError::Config(
                "classes, input dim and chunk length must be positive".into(),
            ));
        }
        if self.mlp_widths.contains(&0) {
            return Err(ModelError::Config("MLP widths must be positive".into()));
        }
        match &self.trunk {
            Trunk::Unet { levels, base_width } => {
                if *base_width == 0 {
                    return Err(ModelError::Config(
                        "u-net base width must be positive".into(),
                    ));
                }
                if !self.chunk_len.is_multiple_of(1usize << levels) {
                    return Err(ModelError::Config(format!(
                        "chunk length {} not divisible by 2^{levels}",
                        self.chunk_len
                    )));
                }
            }
            Trunk::Transformer {
                layers,
                embed,
                heads,
                ..
            } => {
                if *layers == 0 || *embed == 0 {
                    return Err(ModelError::Config(
                        "transformer needs layers and width".into(),
                    ));
                }
                if *heads == 0 || embed % heads != 0 {
                    return Err(ModelError::Config(format!(
                        "embed {embed} not divisible by {heads} heads"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One learnable tensor in the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Named parameter tensors, ordered by name. Also used for gradients and
/// optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Option<ArrayD<f64>> {
        self.tensors.insert(name.into(), value)
    }

    /// Panics on unknown names; layers only ask for names they declared and
    /// [`Network::check_params`] guards the public entry points.
    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// `self += alpha · other`; layouts must match.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * alpha);
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// Global L2 norm over all tensors concatenated.
    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// First `(name, flat index)` holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        self.tensors.iter().find_map(|(k, t)| {
            t.iter()
                .position(|v| !v.is_finite())
                .map(|i| (k.clone(), i))
        })
    }
}

/// Draws every tensor in `specs` order from one ChaCha8 stream.
pub fn init_from_specs(specs: &[ParamSpec], seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    for spec in specs {
        let t = match spec.init {
            Init::Const(c) => ArrayD::from_elem(IxDyn(&spec.shape), c),
            Init::FanIn(fan_in) => {
                let normal = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).unwrap();
                ArrayD::from_shape_simple_fn(IxDyn(&spec.shape), || normal.sample(&mut rng))
            }
        };
        p.insert(spec.name.clone(), t);
    }
    p
}

/// Raw outputs for one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub conf_logits: Array2<f64>,
    pub disp: Array2<f64>,
}

impl ForwardOutput {
    pub fn zeros(len: usize, num_classes: usize) -> Self {
        Self {
            conf_logits: Array2::zeros((len, num_classes)),
            disp: Array2::zeros((len, num_classes)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Array2<f64>,
    h0: Array2<f64>,
    r0: Array2<f64>,
    h1: Array2<f64>,
}

#[derive(Clone, Debug)]
enum TrunkCache {
    Unet(unet::UNetCache),
    Te(te::TeCache),
}

#[derive(Clone, Debug)]
struct Trace {
    mlp: MlpCache,
    mlp_out: Array2<f64>,
    trunk: TrunkCache,
    trunk_out: Array2<f64>,
}

/// Activations recorded by a forward pass for the matching backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    trace: Option<Trace>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }

    pub fn clear(&mut self) {
        self.trace = None;
    }

    /// Attention matrices of every Transformer layer and head, in order.
    pub fn attention_weights(&self) -> Vec<&Array2<f64>> {
        match &self.trace {
            Some(Trace {
                trunk: TrunkCache::Te(c),
                ..
            }) => c.attention_weights(),
            _ => Vec::new(),
        }
    }

    pub fn trunk_output(&self) -> Option<&Array2<f64>> {
        self.trace.as_ref().map(|t| &t.trunk_out)
    }
}

/// Gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub params: ModelParams,
    pub input: Array2<f64>,
}

#[derive(Clone, Debug)]
enum TrunkNet {
    Unet(UNet),
    Te(TransformerEncoder),
}

#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    mlp0: Linear,
    mlp1: Linear,
    trunk: TrunkNet,
    head_conf: Conv1d,
    head_disp: Conv1d,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let [w0, w1] = config.mlp_widths;
        let trunk = match &config.trunk {
            Trunk::Unet { levels, base_width } => {
                TrunkNet::Unet(UNet::new("unet", w1, *base_width, *levels))
            }
            Trunk::Transformer {
                layers,
                embed,
                heads,
                positional_encoding,
            } => TrunkNet::Te(TransformerEncoder::new(
                "te",
                w1,
                *embed,
                *heads,
                *layers,
                *positional_encoding,
            )?),
        };
        let width = match &trunk {
            TrunkNet::Unet(u) => u.output_width(),
            TrunkNet::Te(t) => t.output_width(),
        };
        Ok(Self {
            config: config.clone(),
            mlp0: Linear::new("mlp.0", config.input_dim, w0),
            mlp1: Linear::new("mlp.1", w0, w1),
            trunk,
            head_conf: Conv1d::same("head.conf", width, config.num_classes, 3),
            head_disp: Conv1d::same("head.disp", width, config.num_classes, 3),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn trunk_width(&self) -> usize {
        self.head_conf.input
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.mlp0.specs(&mut out);
        self.mlp1.specs(&mut out);
        match &self.trunk {
            TrunkNet::Unet(u) => u.specs(&mut out),
            TrunkNet::Te(t) => t.specs(&mut out),
        }
        self.head_conf
            .specs_with_bias(&mut out, CONF_HEAD_BIAS_INIT);
        self.head_disp.specs(&mut out);
        out
    }

    /// Fan-in-scaled normal weights, zero biases, unit LayerNorm gains and
    /// the conf-head bias at [`CONF_HEAD_BIAS_INIT`].
    pub fn init_params(&self, seed: u64) -> ModelParams {
        init_from_specs(&self.param_specs(), seed)
    }

    /// Names of the parameters belonging to the confidence / displacement heads.
    pub fn head_param_names(&self, conf: bool) -> [String; 2] {
        let h = if conf {
            &self.head_conf
        } else {
            &self.head_disp
        };
        [h.weight_name(), h.bias_name()]
    }

    pub fn check_params(&self, p: &ModelParams) -> Result<(), ModelError> {
        let specs = self.param_specs();
        if specs.len() != p.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                p.len()
            )));
        }
        for s in &specs {
            match p.try_get(&s.name) {
                None => return Err(ModelError::Shape(format!("missing parameter {}", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(ModelError::Shape(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<(), ModelError> {
        if x.ncols() != self.config.input_dim {
            return Err(ModelError::Shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(ModelError::Shape("empty input".into()));
        }
        if let TrunkNet::Unet(u) = &self.trunk {
            let div = 1usize << u.levels();
            if !x.nrows().is_multiple_of(div) {
                return Err(ModelError::Shape(format!(
                    "length {} not divisible by 2^{}",
                    x.nrows(),
                    u.levels()
                )));
            }
        }
        Ok(())
    }

    /// Per-timestep two-layer MLP with ReLU after each layer.
    pub fn mlp_forward(
        &self,
        p: &ModelParams,
        x: &Array2<f64>,
    ) -> Result<(Array2<f64>, MlpCache), ModelError> {
        let h0 = self.mlp0.forward(p, x)?;
        let r0 = relu(&h0);
        let h1 = self.mlp1.forward(p, &r0)?;
        let out = relu(&h1);
        Ok((
            out,
            MlpCache {
                x: x.clone(),
                h0,
                r0,
                h1,
            },
        ))
    }

    fn mlp_backward(
        &self,
        p: &ModelParams,
        c: &MlpCache,
        dy: &Array2<f64>,
        g: &mut ModelParams,
    ) -> Array2<f64> {
        let dh1 = relu_backward(&c.h1, dy);
        let dr0 = self.mlp1.backward(p, &c.r0, &dh1, g);
        let dh0 = relu_backward(&c.h0, &dr0);
        self.mlp0.backward(p, &c.x, &dh0, g)
    }

    pub fn heads_forward(
        &self,
        p: &ModelParams,
        trunk_out: &Array2<f64>,
    ) -> Result<ForwardOutput, ModelError> {
        Ok(ForwardOutput {
            conf_logits: self.head_conf.forward(p, trunk_out)?,
            disp: self.head_disp.forward(p, trunk_out)?,
        })
    }

    fn run(&self, p: &ModelParams, x: &Array2<f64>) -> Result<(ForwardOutput, Trace), ModelError> {
        self.check_params(p)?;
        self.check_input(x)?;
        let (mlp_out, mlp) = self.mlp_forward(p, x)?;
        let (trunk_out, trunk) = match &self.trunk {
            TrunkNet::Unet(u) => {
                let (y, c) = u.forward(p, &mlp_out)?;
                (y, TrunkCache::Unet(c))
            }
            TrunkNet::Te(t) => {
                let (y, c) = t.forward(p, &mlp_out)?;
                (y, TrunkCache::Te(c))
            }
        };
        let out = self.heads_forward(p, &trunk_out)?;
        Ok((
            out,
            Trace {
                mlp,
                mlp_out,
                trunk,
                trunk_out,
            },
        ))
    }

    pub fn forward(&self, p: &ModelParams, x: &Array2<f64>) -> Result<ForwardOutput, ModelError> {
        self.run(p, x).map(|(o, _)| o)
    }

    /// Forward pass that records activations into `tape`.
    pub fn forward_recorded(
        &self,
        p: &ModelParams,
        x: &Array2<f64>,
        tape: &mut Tape,
    ) -> Result<ForwardOutput, ModelError> {
        let (out, trace) = self.run(p, x)?;
        tape.trace = Some(trace);
        Ok(out)
    }

    /// Independent forwards over a batch, evaluated in parallel.
    pub fn forward_batch(
        &self,
        p: &ModelParams,
        xs: &[Array2<f64>],
    ) -> Result<Vec<ForwardOutput>, ModelError> {
        xs.par_iter().map(|x| self.forward(p, x)).collect()
    }

    /// Exact gradients of `<grads_out, outputs>` with respect to every
    /// parameter and the input.
    pub fn backward(
        &self,
        p: &ModelParams,
        tape: &Tape,
        grads_out: &ForwardOutput,
    ) -> Result<Backward, ModelError> {
        let trace = tape.trace.as_ref().ok_or(ModelError::NoForward)?;
        let len = trace.trunk_out.nrows();
        let want = (len, self.config.num_classes);
        if grads_out.conf_logits.dim() != want || grads_out.disp.dim() != want {
            return Err(ModelError::Shape(format!(
                "output gradient must be {want:?}"
            )));
        }
        let mut g = p.zeros_like();
        let mut dtrunk =
            self.head_conf
                .backward(p, &trace.trunk_out, &grads_out.conf_logits, &mut g);
        dtrunk += &self
            .head_disp
            .backward(p, &trace.trunk_out, &grads_out.disp, &mut g);
        let dmlp = match (&self.trunk, &trace.trunk) {
            (TrunkNet::Unet(u), TrunkCache::Unet(c)) => u.backward(p, c, &dtrunk, &mut g),
            (TrunkNet::Te(t), TrunkCache::Te(c)) => t.backward(p, c, &dtrunk, &mut g),
            _ => return Err(ModelError::NoForward),
        };
        debug_assert_eq!(dmlp.dim(), trace.mlp_out.dim());
        let input = self.mlp_backward(p, &trace.mlp, &dmlp, &mut g);
        Ok(Backward { params: g, input })
    }
}

/// One-shot convenience wrapper around [`Network::forward`].
pub fn model_forward(
    x: &Array2<f64>,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    Network::new(config)?.forward(params, x)
}
