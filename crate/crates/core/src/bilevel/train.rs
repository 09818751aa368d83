use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    joint_step, metaxl_step, EncoderProblem, JtSchedule, Method, StepLoss, TrainConfig, TrainState,
};
use crate::autodiff::{Graph, ParamSet};
use crate::data::{Dataset, ExampleLabels, Role, TaskKind};
use crate::encoder::{
    forward, predictions, task_loss, Batch, BatchLabels, EncoderConfig, EncoderParams, RtnHook,
};
use crate::error::{contract, Result};
use crate::metrics::{binary_prf, span_f1, PrfScore};
use crate::rtn::{rtn_forward, RtnParams};

const RTN_SEED_SALT: u64 = 0x0005_eed0_fa11;
const STREAM_CONCAT: u64 = 10;
const STREAM_SOURCE: u64 = 11;
const STREAM_TARGET: u64 = 12;
const STREAM_LOOKAHEAD: u64 = 13;

/// Endless mini-batches of indices into `0..n`, reshuffled every epoch.
/// The last batch of an epoch may be short.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    pub fn new(n: usize, batch: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchCycler {
            order,
            pos: 0,
            batch,
            rng,
        }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<StepLoss>,
    /// `(step, dev report)` at every evaluation point.
    pub evals: Vec<(usize, EvalReport)>,
    pub best_step: usize,
    pub best_dev: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// θ at the evaluation with the highest dev F1 (earliest on ties).
    pub best_theta: EncoderParams,
    /// φ at the same evaluation as `best_theta`; empty without a transformation.
    pub best_phi: ParamSet,
    pub final_state: TrainState,
    pub report: TrainReport,
}

fn batch_of(data: &Dataset, idx: &[usize], role: Role) -> Result<Batch> {
    let refs: Vec<_> = idx.iter().map(|&i| &data.examples[i]).collect();
    Batch::from_examples(&refs, role)
}

fn check_data(name: &str, data: &Dataset, encoder: &EncoderConfig) -> Result<()> {
    if data.task != encoder.task_kind || data.n_labels != encoder.n_labels {
        return contract(format!(
            "{name} data ({:?}, {} labels) does not match the model ({:?}, {} labels)",
            data.task, data.n_labels, encoder.task_kind, encoder.n_labels
        ));
    }
    if let Some(ex) = data
        .examples
        .iter()
        .find(|e| e.tokens.len() > encoder.max_len)
    {
        return contract(format!(
            "{name} example of {} tokens exceeds max_len {}",
            ex.tokens.len(),
            encoder.max_len
        ));
    }
    Ok(())
}

/// Trains θ (and φ when the method uses one) from the seed in `cfg`,
/// evaluating on `target_dev` every `eval_every` steps and after the last.
pub fn train(
    cfg: &TrainConfig,
    encoder: &EncoderConfig,
    source: &Dataset,
    target_train: &Dataset,
    target_dev: &Dataset,
) -> Result<TrainOutcome> {
    encoder.validate()?;
    cfg.validate(encoder)?;
    check_data("target train", target_train, encoder)?;
    check_data("target dev", target_dev, encoder)?;
    if target_train.is_empty() || target_dev.is_empty() {
        return contract("target train and dev sets must be non-empty");
    }
    if cfg.method.uses_source() {
        check_data("source", source, encoder)?;
        if cfg.method == Method::Metaxl && source.is_empty() {
            return contract("metaxl needs source examples");
        }
    }

    let theta0 = EncoderParams::init(encoder, cfg.seed)?;
    let phi0 = if cfg.method.uses_rtn() {
        RtnParams::init(encoder.d_model, cfg.bottleneck_r, cfg.seed ^ RTN_SEED_SALT)?.to_param_set()
    } else {
        ParamSet::new()
    };
    let mut state = TrainState::new(theta0.params.clone(), phi0);
    let mut problem = EncoderProblem::new(encoder.clone(), cfg.placement, cfg.rtn_residual);
    problem.hook_enabled = cfg.method.uses_rtn();

    let empty = source.select(&[]);
    let source = if cfg.method.uses_source() {
        source
    } else {
        &empty
    };
    let n_s = source.len();

    let alternating = cfg.method == Method::Metaxl || cfg.jt_schedule == JtSchedule::Alternating;
    let mut concat = BatchCycler::new(
        n_s + target_train.len(),
        cfg.batch_source + cfg.batch_target,
        cfg.seed,
        STREAM_CONCAT,
    );
    let mut src = BatchCycler::new(n_s, cfg.batch_source, cfg.seed, STREAM_SOURCE);
    let mut tgt = BatchCycler::new(
        target_train.len(),
        cfg.batch_target,
        cfg.seed,
        STREAM_TARGET,
    );
    let mut fresh = BatchCycler::new(n_s, cfg.batch_source, cfg.seed, STREAM_LOOKAHEAD);

    let mut report = TrainReport::default();
    let mut best: Option<(usize, EvalReport, ParamSet, ParamSet)> = None;
    for step in 1..=cfg.steps {
        match (cfg.method, alternating) {
            (Method::Metaxl, _) => {
                let s = batch_of(source, &src.next_indices(), Role::Source)?;
                let t = batch_of(target_train, &tgt.next_indices(), Role::Target)?;
                let la = if cfg.fresh_lookahead_batch {
                    Some(batch_of(source, &fresh.next_indices(), Role::Source)?)
                } else {
                    None
                };
                metaxl_step(&problem, &mut state, &s, la.as_ref(), &t, cfg)?;
            }
            (_, true) if n_s > 0 => {
                let update_phi = cfg.method.uses_rtn();
                let s = batch_of(source, &src.next_indices(), Role::Source)?;
                let t = batch_of(target_train, &tgt.next_indices(), Role::Target)?;
                let a = joint_step(
                    &problem,
                    &mut state,
                    Some(&s),
                    None,
                    update_phi,
                    cfg.alpha,
                    cfg.clip_norm,
                )?;
                let b = joint_step(
                    &problem,
                    &mut state,
                    None,
                    Some(&t),
                    update_phi,
                    cfg.alpha,
                    cfg.clip_norm,
                )?;
                state.step -= 1;
                state.history.truncate(state.history.len() - 2);
                state.history.push(StepLoss {
                    source: a.source,
                    target: b.target,
                });
            }
            _ => {
                let idx = concat.next_indices();
                let (si, ti): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| i < n_s);
                let ti: Vec<usize> = ti.iter().map(|i| i - n_s).collect();
                let s = (!si.is_empty())
                    .then(|| batch_of(source, &si, Role::Source))
                    .transpose()?;
                let t = (!ti.is_empty())
                    .then(|| batch_of(target_train, &ti, Role::Target))
                    .transpose()?;
                joint_step(
                    &problem,
                    &mut state,
                    s.as_ref(),
                    t.as_ref(),
                    cfg.method.uses_rtn(),
                    cfg.alpha,
                    cfg.clip_norm,
                )?;
            }
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let params = EncoderParams {
                config: encoder.clone(),
                params: state.theta.clone(),
            };
            let dev = evaluate(&params, target_dev, cfg.eval_batch)?;
            report.evals.push((step, dev));
            if best.as_ref().is_none_or(|(_, b, _, _)| dev.f1 > b.f1) {
                best = Some((step, dev, state.theta.clone(), state.phi.clone()));
            }
        }
    }
    report.history = state.history.clone();
    let (best_theta, best_phi) = match best {
        Some((step, dev, theta, phi)) => {
            report.best_step = step;
            report.best_dev = dev;
            (theta, phi)
        }
        None => (state.theta.clone(), state.phi.clone()),
    };
    Ok(TrainOutcome {
        best_theta: EncoderParams {
            config: encoder.clone(),
            params: best_theta,
        },
        best_phi,
        final_state: state,
        report,
    })
}

/// Loss and F1 of θ alone (no transformation) on `data`. Token labeling
/// scores entity spans over the labeled positions; sequence classification
/// scores the positive class.
pub fn evaluate(model: &EncoderParams, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    check_data("evaluation", data, &model.config)?;
    if data.is_empty() {
        return contract("cannot evaluate on an empty dataset");
    }
    let mut gold_tok: Vec<Vec<usize>> = Vec::new();
    let mut pred_tok: Vec<Vec<usize>> = Vec::new();
    let mut gold_seq: Vec<usize> = Vec::new();
    let mut pred_seq: Vec<usize> = Vec::new();
    let (mut loss_sum, mut weight) = (0.0, 0.0);
    for chunk in data.examples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs, data.role)?;
        let g = Graph::new();
        let theta = model.params.to_constants(&g);
        let out = forward(&model.config, &theta, &batch, None)?;
        let w = batch.labeled_count() as f64;
        if w > 0.0 {
            loss_sum += task_loss(out.logits, &batch)?.item()? * w;
            weight += w;
        }
        match predictions(&out.logits.value(), &batch) {
            BatchLabels::Token(rows) => {
                for (ex, pred) in chunk.iter().zip(rows) {
                    let ExampleLabels::Token(gold) = &ex.labels else {
                        return contract("token predictions for a sequence-labeled example");
                    };
                    let (g, p): (Vec<usize>, Vec<usize>) = gold
                        .iter()
                        .zip(&pred)
                        .filter_map(|(g, p)| Some((g.as_ref().copied()?, p.unwrap_or(0))))
                        .unzip();
                    gold_tok.push(g);
                    pred_tok.push(p);
                }
            }
            BatchLabels::Sequence(rows) => {
                for (ex, p) in chunk.iter().zip(rows) {
                    let ExampleLabels::Sequence(gold) = ex.labels else {
                        return contract("sequence prediction for a token-labeled example");
                    };
                    gold_seq.push(gold);
                    pred_seq.push(p);
                }
            }
        }
    }
    let score: PrfScore = match model.config.task_kind {
        TaskKind::TokenLabeling => span_f1(&gold_tok, &pred_tok)?,
        TaskKind::SequenceClassification => binary_prf(&gold_seq, &pred_seq),
    };
    Ok(EvalReport {
        loss: if weight > 0.0 { loss_sum / weight } else { 0.0 },
        precision: score.precision,
        recall: score.recall,
        f1: score.f1,
        examples: data.len(),
    })
}

/// A trained transformation to splice into the forward pass when extracting
/// source-language representations.
#[derive(Clone, Copy, Debug)]
pub struct SourceTransform<'a> {
    pub phi: &'a ParamSet,
    pub placement: usize,
    pub residual: bool,
}

/// Final-layer representations of the first `limit` examples: one vector
/// per labeled token for token labeling, the first position otherwise.
pub fn representations(
    model: &EncoderParams,
    data: &Dataset,
    limit: usize,
    batch_size: usize,
    transform: Option<SourceTransform<'_>>,
) -> Result<Vec<Vec<f64>>> {
    let d = model.config.d_model;
    let mut out = Vec::new();
    let n = limit.min(data.len());
    for chunk in data.examples[..n].chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs, data.role)?;
        let g = Graph::new();
        let theta = model.params.to_constants(&g);
        let phi = transform.map(|t| t.phi.to_constants(&g));
        let apply = |h| {
            rtn_forward(
                phi.as_ref().expect("set with transform"),
                h,
                transform.is_some_and(|t| t.residual),
            )
        };
        let hook = transform.map(|t| RtnHook {
            layer: t.placement,
            transform: &apply,
        });
        let fwd = forward(&model.config, &theta, &batch, hook)?;
        let last = fwd
            .hidden
            .last()
            .expect("at least the embedding output")
            .value();
        let t = batch.seq_len();
        for (i, ex) in chunk.iter().enumerate() {
            let row = |j: usize| last.data()[(i * t + j) * d..(i * t + j + 1) * d].to_vec();
            match &ex.labels {
                ExampleLabels::Token(labels) => {
                    out.extend(
                        labels
                            .iter()
                            .enumerate()
                            .filter(|(_, l)| l.is_some())
                            .map(|(j, _)| row(j)),
                    );
                }
                ExampleLabels::Sequence(_) => out.push(row(0)),
            }
        }
    }
    Ok(out)
}
