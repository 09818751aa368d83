//! One-step-lookahead bi-level training of the transformation network, the
//! baselines it is compared against, and evaluation.
//!
//! The base model θ is updated with ordinary SGD on transformed source
//! batches. The transformation φ is updated with the gradient of the
//! target loss taken *after* a lookahead step `θ' = θ - α ∇θ L_s(θ, φ)`,
//! which depends on φ through the source gradient.

mod meta;
mod train;

pub use meta::{
    inner_step, joint_step, lookahead, meta_gradient, metaxl_step, InnerStep, Lookahead, StepLoss,
};
pub use train::{
    evaluate, representations, train, BatchCycler, EvalReport, SourceTransform, TrainOutcome,
    TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{fetch, ParamSet, Var, VarMap};
use crate::encoder::{forward, task_loss, Batch, EncoderConfig, RtnHook};
use crate::error::{contract, Result};
use crate::rtn::rtn_forward;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TargetOnly,
    Jt,
    JtRtn,
    Metaxl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::TargetOnly => "target_only",
            Method::Jt => "jt",
            Method::JtRtn => "jt_rtn",
            Method::Metaxl => "metaxl",
        }
    }

    pub fn uses_rtn(self) -> bool {
        matches!(self, Method::JtRtn | Method::Metaxl)
    }

    pub fn uses_source(self) -> bool {
        !matches!(self, Method::TargetOnly)
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target_only" | "target" => Ok(Method::TargetOnly),
            "jt" => Ok(Method::Jt),
            "jt_rtn" => Ok(Method::JtRtn),
            "metaxl" => Ok(Method::Metaxl),
            other => contract(format!(
                "unknown method '{other}' (expected target_only, jt, jt_rtn or metaxl)"
            )),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the gradient of the target loss with respect to φ is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Backpropagate through the recorded lookahead step.
    Unrolled,
    /// `-α ∇φ (∇θ L_s(θ, φ) · v)` with `v = ∇θ L_t(θ')` held fixed.
    AnalyticExpansion,
    /// Central differences of `∇φ L_s` at `θ ± ε v`, `ε = 0.01 / ‖v‖`.
    FdHvp,
}

/// Batch order for the joint-training baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JtSchedule {
    /// Shuffled batches drawn from the union of source and target examples.
    Concat,
    /// One source batch step, then one target batch step.
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// Learning rate of the base model.
    pub alpha: f64,
    /// Learning rate of the transformation network.
    pub beta: f64,
    /// Hidden-state index the transformation rewrites (0 = embeddings).
    pub placement: usize,
    pub bottleneck_r: usize,
    pub steps: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub seed: u64,
    pub meta_grad_mode: MetaGradMode,
    /// Global-norm clip applied to each update; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub rtn_residual: bool,
    /// After the source and φ updates, also take a plain SGD step on the
    /// target batch.
    pub theta_on_target: bool,
    /// Draw a second source batch for the lookahead instead of reusing the
    /// one used for the θ update.
    pub fresh_lookahead_batch: bool,
    pub jt_schedule: JtSchedule,
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Metaxl,
            alpha: 0.05,
            beta: 0.05,
            placement: 1,
            bottleneck_r: 16,
            steps: 600,
            batch_source: 16,
            batch_target: 16,
            seed: 0,
            meta_grad_mode: MetaGradMode::Unrolled,
            clip_norm: Some(5.0),
            rtn_residual: false,
            theta_on_target: true,
            fresh_lookahead_batch: false,
            jt_schedule: JtSchedule::Concat,
            eval_every: 50,
            eval_batch: 64,
        }
    }
}

/// Learning rates searched for φ at full scale.
pub const FULL_SCALE_BETA_GRID: [f64; 3] = [3e-5, 1e-6, 1e-7];

impl TrainConfig {
    /// Full-scale hyperparameters for NER (base-model width 768): α = 3e-5,
    /// batch 16, bottleneck 384, 20 epochs over 5000 + 100 examples.
    pub fn full_scale_ner() -> Self {
        TrainConfig {
            alpha: 3e-5,
            beta: FULL_SCALE_BETA_GRID[0],
            bottleneck_r: 384,
            batch_source: 16,
            batch_target: 16,
            steps: 20 * 5100usize.div_ceil(16),
            ..TrainConfig::default()
        }
    }

    /// Full-scale hyperparameters for sentiment analysis: batch 12,
    /// bottleneck 192, 20 epochs over 1000 + 100 examples.
    pub fn full_scale_sa() -> Self {
        TrainConfig {
            alpha: 3e-5,
            beta: FULL_SCALE_BETA_GRID[0],
            bottleneck_r: 192,
            batch_source: 12,
            batch_target: 12,
            steps: 20 * 1100usize.div_ceil(12),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() || self.beta < 0.0 || !self.beta.is_finite()
        {
            return contract("learning rates must be finite and non-negative");
        }
        if self.placement > encoder.n_layers {
            return contract(format!(
                "placement {} outside [0, {}]",
                self.placement, encoder.n_layers
            ));
        }
        if self.method.uses_rtn()
            && (self.bottleneck_r == 0 || self.bottleneck_r >= encoder.d_model)
        {
            return contract(format!(
                "bottleneck r={} must satisfy 0 < r < d={}",
                self.bottleneck_r, encoder.d_model
            ));
        }
        if self.batch_source == 0
            || self.batch_target == 0
            || self.eval_every == 0
            || self.eval_batch == 0
        {
            return contract("batch sizes and eval_every must be positive");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return contract("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Training state: base model θ, transformation φ and the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub step: usize,
    pub history: Vec<StepLoss>,
}

impl TrainState {
    pub fn new(theta: ParamSet, phi: ParamSet) -> Self {
        TrainState {
            theta,
            phi,
            step: 0,
            history: Vec::new(),
        }
    }
}

/// A model whose source loss depends on both θ and φ and whose target
/// loss depends on θ alone.
pub trait BilevelProblem {
    type Batch;

    fn source_loss<'g>(
        &self,
        theta: &VarMap<'g>,
        phi: &VarMap<'g>,
        batch: &Self::Batch,
    ) -> Result<Var<'g>>;

    fn target_loss<'g>(&self, theta: &VarMap<'g>, batch: &Self::Batch) -> Result<Var<'g>>;

    /// Relative weight of a batch when source and target losses are mixed.
    fn weight(&self, _batch: &Self::Batch) -> f64 {
        1.0
    }
}

/// The encoder with the transformation spliced in after `placement`.
#[derive(Clone, Debug)]
pub struct EncoderProblem {
    pub config: EncoderConfig,
    pub placement: usize,
    pub residual: bool,
    /// When false the source forward skips the transformation entirely.
    pub hook_enabled: bool,
}

impl EncoderProblem {
    pub fn new(config: EncoderConfig, placement: usize, residual: bool) -> Self {
        EncoderProblem {
            config,
            placement,
            residual,
            hook_enabled: true,
        }
    }
}

impl BilevelProblem for EncoderProblem {
    type Batch = Batch;

    fn source_loss<'g>(
        &self,
        theta: &VarMap<'g>,
        phi: &VarMap<'g>,
        batch: &Batch,
    ) -> Result<Var<'g>> {
        let transform = |h: Var<'g>| rtn_forward(phi, h, self.residual);
        let hook = self.hook_enabled.then_some(RtnHook {
            layer: self.placement,
            transform: &transform,
        });
        let out = forward(&self.config, theta, batch, hook)?;
        task_loss(out.logits, batch)
    }

    fn target_loss<'g>(&self, theta: &VarMap<'g>, batch: &Batch) -> Result<Var<'g>> {
        let out = forward(&self.config, theta, batch, None)?;
        task_loss(out.logits, batch)
    }

    fn weight(&self, batch: &Batch) -> f64 {
        batch.labeled_count() as f64
    }
}

/// `L_s = (θ - φ)²`, `L_t = θ²` on scalars named `theta` and `phi`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScalarToy;

impl ScalarToy {
    pub fn theta(v: f64) -> ParamSet {
        [("theta".to_string(), crate::autodiff::Tensor::scalar(v))]
            .into_iter()
            .collect()
    }

    pub fn phi(v: f64) -> ParamSet {
        [("phi".to_string(), crate::autodiff::Tensor::scalar(v))]
            .into_iter()
            .collect()
    }
}

impl BilevelProblem for ScalarToy {
    type Batch = ();

    fn source_loss<'g>(&self, theta: &VarMap<'g>, phi: &VarMap<'g>, _: &()) -> Result<Var<'g>> {
        let diff = fetch(theta, "theta")?.sub(fetch(phi, "phi")?)?;
        diff.mul(diff)
    }

    fn target_loss<'g>(&self, theta: &VarMap<'g>, _: &()) -> Result<Var<'g>> {
        let t = fetch(theta, "theta")?;
        t.mul(t)
    }
}
