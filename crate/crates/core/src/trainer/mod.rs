//! Two-phase training loop: a confidence model and a separate displacement
//! model, each optimized with SAM around AdamW.

mod optim;

pub use optim::{
    adamw_step, linear_decay, sam_gradients, sam_perturbation, sam_step, AdamConfig, AdamState,
    SamGradients,
};

use crate::netcore::{ForwardOutput, ModelConfig, ModelError, ModelParams, Network, Tape};
use crate::seqdata::{sample_chunk, ActionSet, ChunkSpec, FeatureSequence};
use crate::targets::{
    confidence_loss, displacement_loss, make_confidence_targets, make_displacement_targets,
    LossError, RadiusConfig,
};
use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Beta;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Samples per gradient group. Groups are summed internally in order and
/// then combined in group order, so the reduction does not depend on how
/// many threads ran them.
pub const GRADIENT_GROUP: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite gradient in {name} at element {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("non-finite loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("training aborted in epoch {epoch}: {source}")]
    Aborted {
        epoch: usize,
        /// Parameters and optimizer state after the last completed epoch.
        last_good: Box<(ModelParams, AdamState)>,
        #[source]
        source: Box<TrainError>,
    },
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Confidence,
    Displacement,
}

impl TrainPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainPhase::Confidence => "confidence",
            TrainPhase::Displacement => "displacement",
        }
    }
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub chunks_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub wd0: f64,
    pub sam_rho: f64,
    /// 0 disables mixup.
    pub mixup_alpha: f64,
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            chunks_per_epoch: 128,
            batch_size: 8,
            lr0: 1e-3,
            wd0: 1e-3,
            sam_rho: 0.05,
            mixup_alpha: 0.0,
            checkpoint_every: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl OptimConfig {
    /// Defaults for the confidence phase, which adds mixup.
    pub fn confidence() -> Self {
        Self {
            mixup_alpha: 0.2,
            ..Self::default()
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.chunks_per_epoch / self.batch_size.max(1)).max(1)
    }

    pub fn validate(&self, phase: TrainPhase) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.chunks_per_epoch == 0 {
            return bad("batch_size and chunks_per_epoch must be positive");
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0 && self.wd0.is_finite() && self.wd0 >= 0.0) {
            return bad("lr0 and wd0 must be finite and non-negative");
        }
        if !(self.sam_rho.is_finite() && self.sam_rho >= 0.0) {
            return bad("sam_rho must be finite and non-negative");
        }
        if !(self.mixup_alpha.is_finite() && self.mixup_alpha >= 0.0) {
            return bad("mixup_alpha must be finite and non-negative");
        }
        if phase == TrainPhase::Displacement && self.mixup_alpha > 0.0 {
            return bad("mixup is not allowed in the displacement phase");
        }
        if self.mixup_alpha > 0.0 && self.batch_size < 2 {
            return bad("mixup needs batch_size >= 2");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Draws `λ ~ Beta(α, α)`.
pub fn sample_mixup_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64, TrainError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(TrainError::Config(format!(
            "mixup alpha must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(beta.sample(rng))
}

/// `λ·a + (1-λ)·b`.
pub fn mix_pair(a: &Array2<f64>, b: &Array2<f64>, lambda: f64) -> Array2<f64> {
    a * lambda + b * (1.0 - lambda)
}

/// Mixes every element with a partner from a random permutation of the
/// batch, drawing an independent λ for each element.
pub fn mixup_batch<R: Rng + ?Sized>(
    batch: &[(Array2<f64>, Array2<f64>)],
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<(Array2<f64>, Array2<f64>)>, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::Config(
            "mixup needs at least two samples".into(),
        ));
    }
    let mut partner: Vec<usize> = (0..batch.len()).collect();
    partner.shuffle(rng);
    partner
        .iter()
        .enumerate()
        .map(|(a, &b)| {
            let lambda = sample_mixup_lambda(alpha, rng)?;
            Ok((
                mix_pair(&batch[a].0, &batch[b].0, lambda),
                mix_pair(&batch[a].1, &batch[b].1, lambda),
            ))
        })
        .collect()
}

/// A training video with its anchor-level ground truth.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub sequence: FeatureSequence,
    pub actions: ActionSet,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub videos: Vec<TrainVideo>,
    pub chunk: ChunkSpec,
    pub radius: RadiusConfig,
}

#[derive(Clone, Debug)]
pub enum Target {
    Confidence(Array2<f64>),
    Displacement {
        disp: Array2<f64>,
        mask: Array2<bool>,
    },
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Array2<f64>,
    pub target: Target,
}

/// Loss of one sample and the gradient of its output.
pub fn sample_loss(
    out: &ForwardOutput,
    target: &Target,
) -> Result<(f64, ForwardOutput), TrainError> {
    let mut grad = ForwardOutput::zeros(out.conf_logits.nrows(), out.conf_logits.ncols());
    let loss = match target {
        Target::Confidence(c) => {
            let (l, g) = confidence_loss(&out.conf_logits, c)?;
            grad.conf_logits = g;
            l
        }
        Target::Displacement { disp, mask } => {
            let (l, g) = displacement_loss(&out.disp, disp, mask)?;
            grad.disp = g;
            l
        }
    };
    Ok((loss, grad))
}

fn group_loss_grad(
    net: &Network,
    params: &ModelParams,
    group: &[Sample],
) -> Result<(f64, ModelParams), TrainError> {
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    let mut tape = Tape::new();
    for s in group {
        let out = net.forward_recorded(params, &s.x, &mut tape)?;
        let (l, g_out) = sample_loss(&out, &s.target)?;
        let g = net.backward(params, &tape, &g_out)?;
        loss += l;
        grad.add_scaled(1.0, &g.params);
    }
    Ok((loss, grad))
}

/// Mean loss over the batch and its gradient. The summation order is fixed:
/// samples within each group of [`GRADIENT_GROUP`], then groups in order.
pub fn batch_loss_grad(
    net: &Network,
    params: &ModelParams,
    batch: &[Sample],
) -> Result<(f64, ModelParams), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let parts: Vec<Result<(f64, ModelParams), TrainError>> = batch
        .par_chunks(GRADIENT_GROUP)
        .map(|g| group_loss_grad(net, params, g))
        .collect();
    let mut loss = 0.0;
    let mut grad = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.add_scaled(1.0, &g);
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// Chunk sampler: video chosen with probability proportional to its length,
/// then a uniform start inside it.
pub struct ChunkSampler<'a> {
    data: &'a TrainData,
    pick: WeightedIndex<usize>,
}

impl<'a> ChunkSampler<'a> {
    pub fn new(data: &'a TrainData) -> Result<Self, TrainError> {
        let lens: Vec<usize> = data.videos.iter().map(|v| v.sequence.len()).collect();
        let pick = WeightedIndex::new(&lens)
            .map_err(|e| TrainError::Config(format!("no usable training videos: {e}")))?;
        Ok(Self { data, pick })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Array2<f64>, ActionSet) {
        let v = &self.data.videos[self.pick.sample(rng)];
        sample_chunk(&v.sequence, &v.actions, &self.data.chunk, rng)
    }

    /// Draws one batch of samples with targets for the phase, mixing
    /// confidence targets when `mixup_alpha > 0`.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        phase: TrainPhase,
        optim: &OptimConfig,
        rng: &mut R,
    ) -> Result<Vec<Sample>, TrainError> {
        let spec = &self.data.chunk;
        let chunks: Vec<(Array2<f64>, ActionSet)> =
            (0..optim.batch_size).map(|_| self.sample(rng)).collect();
        match phase {
            TrainPhase::Confidence => {
                let mut pairs: Vec<(Array2<f64>, Array2<f64>)> = chunks
                    .into_iter()
                    .map(|(x, g)| {
                        let c = make_confidence_targets(
                            &g,
                            spec.chunk_len_anchors,
                            spec.num_classes,
                            &self.data.radius,
                        );
                        (x, c)
                    })
                    .collect();
                if optim.mixup_alpha > 0.0 {
                    pairs = mixup_batch(&pairs, optim.mixup_alpha, rng)?;
                }
                Ok(pairs
                    .into_iter()
                    .map(|(x, c)| Sample {
                        x,
                        target: Target::Confidence(c),
                    })
                    .collect())
            }
            TrainPhase::Displacement => Ok(chunks
                .into_iter()
                .map(|(x, g)| {
                    let (disp, mask) = make_displacement_targets(
                        &g,
                        spec.chunk_len_anchors,
                        spec.num_classes,
                        &self.data.radius,
                    );
                    Sample {
                        x,
                        target: Target::Displacement { disp, mask },
                    }
                })
                .collect()),
        }
    }
}

/// RNG for one epoch: a fixed seed with the epoch number as stream, so a
/// resumed run draws exactly the batches the uninterrupted run would.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: TrainPhase,
    /// Mean over the epoch's steps of the batch loss at the unperturbed
    /// parameters.
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub wall_seconds: f64,
}

/// What the epoch callback sees after every completed epoch.
pub struct EpochEvent<'a> {
    pub log: &'a EpochLog,
    pub params: &'a ModelParams,
    pub state: &'a AdamState,
    /// True every `checkpoint_every` epochs and after the final epoch.
    pub checkpoint: bool,
}

/// Where a run starts: fresh parameters, or a resumed state after
/// `completed_epochs` epochs.
#[derive(Clone, Debug)]
pub struct TrainStart {
    pub params: ModelParams,
    pub state: AdamState,
    pub completed_epochs: usize,
}

impl TrainStart {
    pub fn fresh(params: ModelParams) -> Self {
        let state = AdamState::new(&params);
        Self {
            params,
            state,
            completed_epochs: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: AdamState,
    pub log: Vec<EpochLog>,
}

/// Runs the remaining epochs of one phase. Each epoch uses
/// [`epoch_rng`]`(seed, epoch)`; any failure inside an epoch aborts with the
/// state from the end of the previous epoch.
pub fn train_from<F>(
    phase: TrainPhase,
    data: &TrainData,
    model: &ModelConfig,
    optim: &OptimConfig,
    seed: u64,
    start: TrainStart,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(EpochEvent<'_>) -> Result<(), TrainError>,
{
    optim.validate(phase)?;
    if data.chunk.chunk_len_anchors != model.chunk_len
        || data.chunk.num_classes != model.num_classes
    {
        return Err(TrainError::Config(
            "chunk spec does not match the model".into(),
        ));
    }
    if data
        .videos
        .iter()
        .any(|v| v.sequence.dim() != model.input_dim)
    {
        return Err(TrainError::Config(
            "feature dimension does not match the model".into(),
        ));
    }
    let net = Network::new(model)?;
    net.check_params(&start.params)?;
    let TrainStart {
        mut params,
        mut state,
        completed_epochs,
    } = start;
    if !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(TrainError::Config(
            "optimizer state does not match the parameters".into(),
        ));
    }
    let mut log = Vec::new();
    if completed_epochs >= optim.epochs {
        return Ok(TrainOutcome { params, state, log });
    }
    let sampler = ChunkSampler::new(data)?;
    for epoch in completed_epochs + 1..=optim.epochs {
        let t0 = Instant::now();
        let lr = linear_decay(optim.lr0, epoch, optim.epochs)?;
        let wd = linear_decay(optim.wd0, epoch, optim.epochs)?;
        let mut rng = epoch_rng(seed, epoch);
        let mut next_params = params.clone();
        let mut next_state = state.clone();
        let run = (|| {
            let mut total = 0.0;
            let steps = optim.steps_per_epoch();
            for _ in 0..steps {
                let batch = sampler.batch(phase, optim, &mut rng)?;
                let loss = sam_step(
                    &mut next_params,
                    &mut next_state,
                    optim.sam_rho,
                    lr,
                    wd,
                    &optim.adam,
                    |p| batch_loss_grad(&net, p, &batch),
                )?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
                total += loss;
            }
            if !next_params.all_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            Ok(total / steps as f64)
        })();
        let loss = match run {
            Ok(l) => l,
            Err(e) => {
                return Err(TrainError::Aborted {
                    epoch,
                    last_good: Box::new((params, state)),
                    source: Box::new(e),
                })
            }
        };
        params = next_params;
        state = next_state;
        let entry = EpochLog {
            epoch,
            phase,
            loss,
            lr,
            wd,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        let checkpoint = epoch == optim.epochs
            || (optim.checkpoint_every > 0 && epoch % optim.checkpoint_every == 0);
        on_epoch(EpochEvent {
            log: &entry,
            params: &params,
            state: &state,
            checkpoint,
        })?;
        log.push(entry);
    }
    Ok(TrainOutcome { params, state, log })
}

/// Trains one phase from freshly initialized parameters.
pub fn train(
    phase: TrainPhase,
    data: &TrainData,
    model: &ModelConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let net = Network::new(model)?;
    let init_seed = seed
        ^ match phase {
            TrainPhase::Confidence => 0x636f_6e66,
            TrainPhase::Displacement => 0x6469_7370,
        };
    let start = TrainStart::fresh(net.init_params(init_seed));
    train_from(phase, data, model, optim, seed, start, |_| Ok(()))
}

#[cfg(test)]
mod tests;
