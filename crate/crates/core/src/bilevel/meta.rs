use serde::{Deserialize, Serialize};

use super::{BilevelProblem, MetaGradMode, TrainConfig, TrainState};
use crate::autodiff::{grad, Graph, ParamSet, Tensor, Var, VarMap};
use crate::error::{Error, Result};

/// Losses observed during one training step. For MetaXL `target` is the
/// target loss at the lookahead parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub source: Option<f64>,
    pub target: Option<f64>,
}

/// Recorded lookahead step `θ' = θ - α_eff ∇θ L_s(θ, φ)`.
pub struct InnerStep<'g> {
    pub loss: Var<'g>,
    pub grads: VarMap<'g>,
    pub theta_prime: VarMap<'g>,
    /// `α` times the clip coefficient of the source gradient.
    pub alpha_eff: f64,
}

pub(crate) fn clip_coef(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

fn var_norm(vars: &VarMap<'_>) -> f64 {
    ParamSet::from_vars(vars).l2_norm()
}

/// Source loss, its θ-gradient and the lookahead parameters. With
/// `create_graph` the gradient stays differentiable, so `θ'` is a function
/// of φ.
pub fn inner_step<'g, P: BilevelProblem>(
    problem: &P,
    theta: &VarMap<'g>,
    phi: &VarMap<'g>,
    batch: &P::Batch,
    alpha: f64,
    clip: Option<f64>,
    create_graph: bool,
) -> Result<InnerStep<'g>> {
    let loss = problem.source_loss(theta, phi, batch)?;
    let grads = grad(loss, theta, create_graph)?;
    let alpha_eff = alpha * clip_coef(var_norm(&grads), clip);
    let mut theta_prime = VarMap::new();
    for (name, t) in theta {
        let step = grads[name].scale(alpha_eff)?;
        theta_prime.insert(name.clone(), t.sub(step)?);
    }
    Ok(InnerStep {
        loss,
        grads,
        theta_prime,
        alpha_eff,
    })
}

/// Everything produced by one lookahead: the φ meta-gradient plus the
/// quantities the MetaXL update reuses.
#[derive(Clone, Debug)]
pub struct Lookahead {
    pub phi_grad: ParamSet,
    pub source_grad: ParamSet,
    pub theta_prime: ParamSet,
    pub source_loss: f64,
    pub target_loss: f64,
    pub alpha_eff: f64,
}

fn target_grad<P: BilevelProblem>(
    problem: &P,
    theta: &ParamSet,
    batch: &P::Batch,
) -> Result<(ParamSet, f64)> {
    let g = Graph::new();
    let vars = theta.to_vars(&g);
    let loss = problem.target_loss(&vars, batch)?;
    let grads = grad(loss, &vars, false)?;
    Ok((ParamSet::from_vars(&grads), loss.item()?))
}

fn phi_grad_at<P: BilevelProblem>(
    problem: &P,
    theta: &ParamSet,
    phi: &ParamSet,
    batch: &P::Batch,
) -> Result<ParamSet> {
    let g = Graph::new();
    let th = theta.to_constants(&g);
    let ph = phi.to_vars(&g);
    let loss = problem.source_loss(&th, &ph, batch)?;
    Ok(ParamSet::from_vars(&grad(loss, &ph, false)?))
}

/// Runs the lookahead on `source` and differentiates the target loss at
/// `θ'` with respect to φ. The clip coefficient is treated as a constant.
#[allow(clippy::too_many_arguments)]
pub fn lookahead<P: BilevelProblem>(
    problem: &P,
    theta: &ParamSet,
    phi: &ParamSet,
    source: &P::Batch,
    target: &P::Batch,
    alpha: f64,
    clip: Option<f64>,
    mode: MetaGradMode,
) -> Result<Lookahead> {
    let g = Graph::new();
    let th = theta.to_vars(&g);
    let ph = phi.to_vars(&g);
    let inner = inner_step(
        problem,
        &th,
        &ph,
        source,
        alpha,
        clip,
        mode != MetaGradMode::FdHvp,
    )?;
    let source_grad = ParamSet::from_vars(&inner.grads);
    let theta_prime = ParamSet::from_vars(&inner.theta_prime);
    let source_loss = inner.loss.item()?;
    let alpha_eff = inner.alpha_eff;

    let (phi_grad, target_loss) = match mode {
        MetaGradMode::Unrolled => {
            let lt = problem.target_loss(&inner.theta_prime, target)?;
            (ParamSet::from_vars(&grad(lt, &ph, false)?), lt.item()?)
        }
        MetaGradMode::AnalyticExpansion => {
            let (v, lt) = target_grad(problem, &theta_prime, target)?;
            let mut acc: Option<Var<'_>> = None;
            for (name, gs) in &inner.grads {
                let term = gs.dot(g.constant(v.get(name)?.clone()))?;
                acc = Some(match acc {
                    Some(a) => a.add(term)?,
                    None => term,
                });
            }
            let s = acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
            let gphi = ParamSet::from_vars(&grad(s, &ph, false)?);
            (gphi.scaled(-alpha_eff), lt)
        }
        MetaGradMode::FdHvp => {
            let (v, lt) = target_grad(problem, &theta_prime, target)?;
            let norm = v.l2_norm();
            if norm == 0.0 {
                (phi.zeros_like(), lt)
            } else {
                let eps = 0.01 / norm;
                let plus = phi_grad_at(problem, &theta.axpy(eps, &v)?, phi, source)?;
                let minus = phi_grad_at(problem, &theta.axpy(-eps, &v)?, phi, source)?;
                (
                    plus.axpy(-1.0, &minus)?.scaled(-alpha_eff / (2.0 * eps)),
                    lt,
                )
            }
        }
    };
    Ok(Lookahead {
        phi_grad,
        source_grad,
        theta_prime,
        source_loss,
        target_loss,
        alpha_eff,
    })
}

/// `∇φ L_t(θ - α ∇θ L_s(θ, φ))` without clipping.
pub fn meta_gradient<P: BilevelProblem>(
    problem: &P,
    theta: &ParamSet,
    phi: &ParamSet,
    source: &P::Batch,
    target: &P::Batch,
    alpha: f64,
    mode: MetaGradMode,
) -> Result<ParamSet> {
    Ok(lookahead(problem, theta, phi, source, target, alpha, None, mode)?.phi_grad)
}

fn sgd(params: &ParamSet, grads: &ParamSet, lr: f64, clip: Option<f64>) -> Result<ParamSet> {
    params.axpy(-lr * clip_coef(grads.l2_norm(), clip), grads)
}

fn ensure_finite(op: &'static str, sets: &[&ParamSet]) -> Result<()> {
    if sets.iter().all(|p| p.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// One MetaXL step: θ moves along the transformed source gradient, φ along
/// the clipped meta-gradient, then (if enabled) θ takes a plain step on the
/// target batch. The state is only modified when every update is finite.
///
/// `lookahead_source` replaces `source` for the lookahead when given.
pub fn metaxl_step<P: BilevelProblem>(
    problem: &P,
    state: &mut TrainState,
    source: &P::Batch,
    lookahead_source: Option<&P::Batch>,
    target: &P::Batch,
    cfg: &TrainConfig,
) -> Result<StepLoss> {
    let la = lookahead(
        problem,
        &state.theta,
        &state.phi,
        lookahead_source.unwrap_or(source),
        target,
        cfg.alpha,
        cfg.clip_norm,
        cfg.meta_grad_mode,
    )?;
    let mut theta = match lookahead_source {
        None => state.theta.axpy(-la.alpha_eff, &la.source_grad)?,
        Some(_) => {
            let g = Graph::new();
            let th = state.theta.to_vars(&g);
            let ph = state.phi.to_constants(&g);
            let inner = inner_step(problem, &th, &ph, source, cfg.alpha, cfg.clip_norm, false)?;
            state
                .theta
                .axpy(-inner.alpha_eff, &ParamSet::from_vars(&inner.grads))?
        }
    };
    let phi = sgd(&state.phi, &la.phi_grad, cfg.beta, cfg.clip_norm)?;
    if cfg.theta_on_target {
        let (gt, _) = target_grad(problem, &theta, target)?;
        theta = sgd(&theta, &gt, cfg.alpha, cfg.clip_norm)?;
    }
    ensure_finite("metaxl_step", &[&theta, &phi])?;
    state.theta = theta;
    state.phi = phi;
    state.step += 1;
    let loss = StepLoss {
        source: Some(la.source_loss),
        target: Some(la.target_loss),
    };
    state.history.push(loss);
    Ok(loss)
}

/// One SGD step on the mixed loss of a source part (through the
/// transformation) and a target part, weighted by [`BilevelProblem::weight`].
/// With `update_phi` the transformation is trained jointly at rate `alpha`;
/// the clip applies to the combined gradient.
pub fn joint_step<P: BilevelProblem>(
    problem: &P,
    state: &mut TrainState,
    source: Option<&P::Batch>,
    target: Option<&P::Batch>,
    update_phi: bool,
    alpha: f64,
    clip: Option<f64>,
) -> Result<StepLoss> {
    let g = Graph::new();
    let th = state.theta.to_vars(&g);
    let ph = if update_phi {
        state.phi.to_vars(&g)
    } else {
        state.phi.to_constants(&g)
    };
    let ls = source
        .map(|b| problem.source_loss(&th, &ph, b))
        .transpose()?;
    let lt = target.map(|b| problem.target_loss(&th, b)).transpose()?;
    let loss = match (ls, lt) {
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (Some(a), Some(b)) => {
            let ws = problem.weight(source.expect("source part"));
            let wt = problem.weight(target.expect("target part"));
            a.scale(ws / (ws + wt))?.add(b.scale(wt / (ws + wt))?)?
        }
        (None, None) => {
            return Err(Error::Contract(
                "joint step needs a source or a target batch".into(),
            ))
        }
    };
    let mut wrt: Vec<Var<'_>> = th.values().copied().collect();
    if update_phi {
        wrt.extend(ph.values().copied());
    }
    let grads = g.grad(loss, &wrt, false)?;
    let (gt, gp) = grads.split_at(th.len());
    let gtheta: ParamSet = th
        .keys()
        .cloned()
        .zip(gt.iter().map(|v| (*v.value()).clone()))
        .collect();
    let gphi: ParamSet = ph
        .keys()
        .cloned()
        .zip(gp.iter().map(|v| (*v.value()).clone()))
        .collect();
    let norm = (gtheta.sq_norm() + gphi.sq_norm()).sqrt();
    let lr = alpha * clip_coef(norm, clip);
    let theta = state.theta.axpy(-lr, &gtheta)?;
    let phi = if update_phi {
        state.phi.axpy(-lr, &gphi)?
    } else {
        state.phi.clone()
    };
    ensure_finite("joint_step", &[&theta, &phi])?;
    state.theta = theta;
    state.phi = phi;
    state.step += 1;
    let out = StepLoss {
        source: ls.map(|v| v.item()).transpose()?,
        target: lt.map(|v| v.item()).transpose()?,
    };
    state.history.push(out);
    Ok(out)
}
