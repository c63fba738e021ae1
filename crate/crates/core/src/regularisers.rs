//! Classical regularisers and gradient-kernel penalties behind one interface.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{tap_kernel, tap_trace, ForwardContext, Graph};
use crate::kernel::{is_singular, DEFAULT_RANK_TOL};
use crate::linalg::symmetric_eigenvalues;
use crate::loss::{record_loss, LossKind, Targets};
use crate::tensor::{ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegulariserKind {
    None,
    Weight,
    Dropout,
    LossgradParam,
    LossgradInput,
    MgsTrace,
    MgsLogdet,
}

impl RegulariserKind {
    pub const ALL: [RegulariserKind; 7] = [
        RegulariserKind::None,
        RegulariserKind::Weight,
        RegulariserKind::Dropout,
        RegulariserKind::LossgradParam,
        RegulariserKind::LossgradInput,
        RegulariserKind::MgsTrace,
        RegulariserKind::MgsLogdet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegulariserKind::None => "none",
            RegulariserKind::Weight => "weight",
            RegulariserKind::Dropout => "dropout",
            RegulariserKind::LossgradParam => "lossgrad-param",
            RegulariserKind::LossgradInput => "lossgrad-input",
            RegulariserKind::MgsTrace => "mgs-trace",
            RegulariserKind::MgsLogdet => "mgs-logdet",
        }
    }

    /// The penalty differentiated by double backpropagation, if any.
    pub fn penalty(self) -> Option<PenaltyKind> {
        match self {
            RegulariserKind::LossgradParam => Some(PenaltyKind::LossgradParam),
            RegulariserKind::LossgradInput => Some(PenaltyKind::LossgradInput),
            RegulariserKind::MgsTrace => Some(PenaltyKind::MgsTrace),
            RegulariserKind::MgsLogdet => Some(PenaltyKind::MgsLogdet),
            _ => None,
        }
    }
}

impl fmt::Display for RegulariserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegulariserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegulariserKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = RegulariserKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::invalid(format!(
                    "unknown regulariser `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Which regulariser is active and its strength. For dropout `alpha` is the
/// drop rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegulariserConfig {
    pub kind: RegulariserKind,
    pub alpha: f64,
}

impl RegulariserConfig {
    pub fn none() -> Self {
        Self {
            kind: RegulariserKind::None,
            alpha: 0.0,
        }
    }

    pub fn new(kind: RegulariserKind, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid(format!(
                "alpha must be a finite value >= 0, got {alpha}"
            )));
        }
        if kind == RegulariserKind::Dropout && alpha >= 1.0 {
            return Err(Error::invalid(format!("dropout rate must be below 1, got {alpha}")));
        }
        Ok(Self { kind, alpha })
    }

    /// Drop rate the model should be built with.
    pub fn dropout_rate(&self) -> f64 {
        if self.kind == RegulariserKind::Dropout {
            self.alpha
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    MgsTrace,
    MgsLogdet,
    LossgradParam,
    LossgradInput,
}

/// `α ‖θ‖²`.
pub fn weight_penalty(params: &ParamVector, alpha: f64) -> f64 {
    alpha * params.norm_squared()
}

/// `2 α θ`.
pub fn weight_penalty_gradient(params: &ParamVector, alpha: f64) -> ParamVector {
    let v = params.values().iter().map(|t| 2.0 * alpha * t).collect();
    params.with_values(v).expect("same layout")
}

fn norm(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc: Option<Var> = None;
    for &v in vars {
        let sq = tape.mul(v, v);
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s),
        });
    }
    let total = acc.expect("at least one term");
    tape.sqrt(total)
}

/// Records `α · g` for the penalty on the tape; the unscaled value is
/// differentiable with respect to `params` and `input`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_penalty(
    tape: &mut Tape,
    graph: &Graph,
    params: &[Var],
    input: Var,
    targets: Option<&Targets>,
    loss: LossKind,
    kind: PenaltyKind,
    alpha: f64,
    ctx: &ForwardContext,
) -> Result<Var> {
    let g = match kind {
        PenaltyKind::MgsTrace => {
            let (rec, deltas) = graph.record_expanded(tape, params, input, ctx)?;
            let mut acc: Option<Var> = None;
            for (tap, &d) in rec.taps.iter().zip(&deltas) {
                let t = tap_trace(tape, tap, d);
                acc = Some(match acc {
                    None => t,
                    Some(a) => tape.add(a, t),
                });
            }
            acc.expect("graphs have at least one parametrised layer")
        }
        PenaltyKind::MgsLogdet => {
            let (rec, deltas) = graph.record_expanded(tape, params, input, ctx)?;
            let mut acc: Option<Var> = None;
            for (tap, &d) in rec.taps.iter().zip(&deltas) {
                let k = tap_kernel(tape, tap, d);
                acc = Some(match acc {
                    None => k,
                    Some(a) => tape.add(a, k),
                });
            }
            let k = acc.expect("graphs have at least one parametrised layer");
            let values = symmetric_eigenvalues(tape.value(k))?;
            if is_singular(&values, DEFAULT_RANK_TOL) {
                return Err(Error::SingularKernel {
                    smallest: values.last().copied().unwrap_or(0.0),
                    largest: values.first().copied().unwrap_or(0.0),
                });
            }
            tape.sym_logdet(k)
        }
        PenaltyKind::LossgradParam | PenaltyKind::LossgradInput => {
            let targets = targets.ok_or_else(|| Error::invalid("loss-gradient penalties need targets"))?;
            let rec = graph.record(tape, params, input, ctx, None)?;
            let l = record_loss(tape, rec.output, targets, loss)?;
            let grads = if kind == PenaltyKind::LossgradParam {
                tape.grad(l, params)
            } else {
                tape.grad(l, &[input])
            };
            norm(tape, &grads)
        }
    };
    let out = tape.scale(g, alpha);
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite {
            context: format!("{kind:?} penalty"),
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn penalty_tape(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    targets: Option<&Targets>,
    loss: LossKind,
    kind: PenaltyKind,
    alpha: f64,
    ctx: &ForwardContext,
) -> Result<(Tape, Vec<Var>, Var)> {
    graph.check_params(params)?;
    graph.check_batch(batch)?;
    let mut tape = Tape::new();
    let pv = graph.param_leaves(&mut tape, params);
    let x = graph.input_leaf(&mut tape, batch);
    let g = record_penalty(&mut tape, graph, &pv, x, targets, loss, kind, alpha, ctx)?;
    Ok((tape, pv, g))
}

/// Value of a double-backpropagation penalty. `targets` is required for the
/// loss-gradient penalties and ignored by the kernel penalties.
#[allow(clippy::too_many_arguments)]
pub fn penalty_value(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    targets: Option<&Targets>,
    loss: LossKind,
    kind: PenaltyKind,
    alpha: f64,
    ctx: &ForwardContext,
) -> Result<f64> {
    let (tape, _, g) = penalty_tape(graph, params, batch, targets, loss, kind, alpha, ctx)?;
    Ok(tape.scalar(g))
}

/// `∇θ` of [`penalty_value`], by differentiating through the first backward
/// pass.
#[allow(clippy::too_many_arguments)]
pub fn penalty_gradient(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    targets: Option<&Targets>,
    loss: LossKind,
    kind: PenaltyKind,
    alpha: f64,
    ctx: &ForwardContext,
) -> Result<ParamVector> {
    let (mut tape, pv, g) = penalty_tape(graph, params, batch, targets, loss, kind, alpha, ctx)?;
    let grads = tape.grad(g, &pv);
    graph.collect(&tape, &grads, params)
}

/// `α tr K` over the batch.
pub fn mgs_trace_penalty(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    alpha: f64,
    ctx: &ForwardContext,
) -> Result<f64> {
    penalty_value(
        graph,
        params,
        batch,
        None,
        LossKind::MeanSquaredError,
        PenaltyKind::MgsTrace,
        alpha,
        ctx,
    )
}

/// `α Σ log λ(K)`; a singular kernel is an error.
pub fn mgs_logdet_penalty(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    alpha: f64,
    ctx: &ForwardContext,
) -> Result<f64> {
    penalty_value(
        graph,
        params,
        batch,
        None,
        LossKind::MeanSquaredError,
        PenaltyKind::MgsLogdet,
        alpha,
        ctx,
    )
}

/// `α ‖∇θ L‖`.
pub fn lossgrad_param_penalty(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    targets: &Targets,
    loss: LossKind,
    alpha: f64,
    ctx: &ForwardContext,
) -> Result<f64> {
    penalty_value(
        graph,
        params,
        batch,
        Some(targets),
        loss,
        PenaltyKind::LossgradParam,
        alpha,
        ctx,
    )
}

/// `α ‖∇x L‖`.
pub fn lossgrad_input_penalty(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    targets: &Targets,
    loss: LossKind,
    alpha: f64,
    ctx: &ForwardContext,
) -> Result<f64> {
    penalty_value(
        graph,
        params,
        batch,
        Some(targets),
        loss,
        PenaltyKind::LossgradInput,
        alpha,
        ctx,
    )
}

/// Loss, penalty and the gradient of their sum for one optimisation step.
#[derive(Debug, Clone)]
pub struct RegularisedGradient {
    pub loss: f64,
    pub penalty: f64,
    pub gradient: ParamVector,
}

/// Gradient of `L + g` on one batch, recorded on a single tape.
pub fn regularised_loss_and_grad(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    targets: &Targets,
    loss: LossKind,
    reg: &RegulariserConfig,
    ctx: &ForwardContext,
) -> Result<RegularisedGradient> {
    graph.check_params(params)?;
    graph.check_batch(batch)?;
    let mut tape = Tape::new();
    let pv = graph.param_leaves(&mut tape, params);
    let x = graph.input_leaf(&mut tape, batch);
    let rec = graph.record(&mut tape, &pv, x, ctx, None)?;
    let l = record_loss(&mut tape, rec.output, targets, loss)?;
    let loss_value = tape.scalar(l);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { context: "loss".into() });
    }
    let (objective, penalty) = match reg.kind.penalty() {
        Some(kind) if reg.alpha > 0.0 => {
            let g = record_penalty(&mut tape, graph, &pv, x, Some(targets), loss, kind, reg.alpha, ctx)?;
            (tape.add(l, g), tape.scalar(g))
        }
        _ => (l, 0.0),
    };
    let grads = tape.grad(objective, &pv);
    let mut gradient = graph.collect(&tape, &grads, params)?;
    let mut penalty = penalty;
    if reg.kind == RegulariserKind::Weight && reg.alpha > 0.0 {
        penalty = weight_penalty(params, reg.alpha);
        for (g, t) in gradient.values_mut().iter_mut().zip(params.values()) {
            *g += 2.0 * reg.alpha * t;
        }
    }
    Ok(RegularisedGradient {
        loss: loss_value,
        penalty,
        gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    #[test]
    fn kinds_round_trip_through_strings() {
        for k in RegulariserKind::ALL {
            assert_eq!(k.as_str().parse::<RegulariserKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("l1".parse::<RegulariserKind>().is_err());
    }

    #[test]
    fn config_validates_alpha() {
        assert!(RegulariserConfig::new(RegulariserKind::Weight, -1.0).is_err());
        assert!(RegulariserConfig::new(RegulariserKind::Dropout, 1.0).is_err());
        assert_eq!(
            RegulariserConfig::new(RegulariserKind::Dropout, 0.3)
                .unwrap()
                .dropout_rate(),
            0.3
        );
        assert_eq!(
            RegulariserConfig::new(RegulariserKind::Weight, 0.3)
                .unwrap()
                .dropout_rate(),
            0.0
        );
    }

    #[test]
    fn weight_penalty_closed_form() {
        let g = GraphBuilder::new(&[2])
            .unwrap()
            .dense_with_bias("out", 1, false)
            .unwrap()
            .build()
            .unwrap();
        let p = ParamVector::new(vec![3.0, 4.0], g.layout().to_vec()).unwrap();
        assert_eq!(weight_penalty(&p, 0.5), 12.5);
        assert_eq!(weight_penalty_gradient(&p, 0.5).values(), &[3.0, 4.0]);
    }
}
