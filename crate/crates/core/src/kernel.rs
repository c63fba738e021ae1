//! The model gradient similarity kernel `K = J Jᵀ` and its summaries.

use std::sync::OnceLock;

use ndarray::Array2;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{tap_kernel, tap_trace, ForwardContext, Graph, PerSampleJacobian};
use crate::linalg::symmetric_eigenvalues;
use crate::tensor::{ParamVector, Tensor};

/// Relative eigenvalue threshold below which a kernel counts as singular.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Symmetric `(m·q) x (m·q)` kernel over one batch, rows ordered `i·q + c`.
#[derive(Debug, Clone)]
pub struct GradientKernel {
    matrix: Array2<f64>,
    batch_size: usize,
    num_outputs: usize,
    spectrum: OnceLock<Vec<f64>>,
}

impl PartialEq for GradientKernel {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix && self.batch_size == other.batch_size && self.num_outputs == other.num_outputs
    }
}

impl GradientKernel {
    /// Wraps a symmetric matrix. Asymmetry beyond `1e-10` relative is rejected.
    pub fn new(matrix: Array2<f64>, batch_size: usize, num_outputs: usize) -> Result<Self> {
        let n = batch_size * num_outputs;
        if matrix.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                what: "kernel size",
                expected: n,
                found: matrix.nrows().max(matrix.ncols()),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "kernel".into(),
            });
        }
        let scale = matrix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..n {
            for j in 0..i {
                if (matrix[[i, j]] - matrix[[j, i]]).abs() > 1e-10 * scale.max(1e-300) {
                    return Err(Error::invalid(format!("kernel is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            matrix,
            batch_size,
            num_outputs,
            spectrum: OnceLock::new(),
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `K̄_ij = Σ_c K_(i,c),(j,c)`, the `m x m` kernel summed over outputs.
    pub fn output_summed(&self) -> Array2<f64> {
        let (m, q) = (self.batch_size, self.num_outputs);
        Array2::from_shape_fn((m, m), |(i, j)| {
            (0..q).map(|c| self.matrix[[i * q + c, j * q + c]]).sum()
        })
    }
}

/// `K = J Jᵀ`.
pub fn mgs_kernel(j: &PerSampleJacobian) -> Result<GradientKernel> {
    let jm = j.matrix();
    let bad: Vec<usize> = jm
        .outer_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|v| !v.is_finite()))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteRows { rows: bad });
    }
    let k = jm.dot(&jm.t());
    // The product is symmetric up to summation order; make it exact.
    let k = (&k + &k.t()) * 0.5;
    GradientKernel::new(k, j.batch_size(), j.num_outputs())
}

pub fn trace_metric(k: &GradientKernel) -> f64 {
    k.matrix.diag().sum()
}

/// `tr(J Jᵀ)` as the sum of squared row norms, without forming the kernel.
pub fn trace_metric_jacobian(j: &PerSampleJacobian) -> f64 {
    j.matrix().outer_iter().map(|r| r.dot(&r)).sum()
}

/// Eigenvalues of the kernel, descending. Cached after the first call.
pub fn spectrum(k: &GradientKernel) -> Result<Vec<f64>> {
    if let Some(s) = k.spectrum.get() {
        return Ok(s.clone());
    }
    let s = symmetric_eigenvalues(&k.matrix)?;
    Ok(k.spectrum.get_or_init(|| s).clone())
}

/// Whether descending eigenvalues are numerically singular.
pub(crate) fn is_singular(values: &[f64], rank_tol: f64) -> bool {
    match (values.first(), values.last()) {
        (Some(&max), Some(&min)) => max <= 0.0 || min <= rank_tol * max,
        _ => true,
    }
}

/// `Σ log λ`, or `None` when `λ_min <= rank_tol · λ_max`.
pub fn logdet_metric(k: &GradientKernel, rank_tol: f64) -> Result<Option<f64>> {
    if rank_tol.is_nan() || rank_tol <= 0.0 {
        return Err(Error::invalid(format!("rank_tol must be positive, got {rank_tol}")));
    }
    let s = spectrum(k)?;
    if is_singular(&s, rank_tol) {
        return Ok(None);
    }
    Ok(Some(s.iter().map(|l| l.ln()).sum()))
}

/// First-order change of the outputs after one gradient step of size `eta`:
/// `Δf = -η K ∂L/∂f`, with `∂L/∂f` given as `m x q`.
pub fn predicted_update(k: &GradientKernel, loss_model_grads: &Tensor, eta: f64) -> Result<Tensor> {
    let (m, q) = (k.batch_size, k.num_outputs);
    if loss_model_grads.len() != m * q {
        return Err(Error::DimensionMismatch {
            what: "loss-model gradient length",
            expected: m * q,
            found: loss_model_grads.len(),
        });
    }
    let g = ndarray::ArrayView1::from(loss_model_grads.data());
    let df = k.matrix.dot(&g) * -eta;
    Tensor::new(vec![m, q], df.to_vec())
}

/// Frobenius cosine between the output-summed kernel and `Y Yᵀ` for one-hot
/// labels. `None` when the kernel is zero.
pub fn alignment(k: &GradientKernel, labels: &[usize]) -> Result<Option<f64>> {
    let m = k.batch_size;
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            what: "alignment labels",
            expected: m,
            found: labels.len(),
        });
    }
    let kb = k.output_summed();
    let mut dot = 0.0;
    let mut yy = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            if labels[i] == labels[j] {
                dot += kb[[i, j]];
                yy += 1.0;
            }
        }
    }
    let kn = kb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if kn == 0.0 {
        return Ok(None);
    }
    Ok(Some(dot / (kn * yy.sqrt())))
}

/// Kernel of a batch assembled layer by layer from pre-activation gradients,
/// without materialising the Jacobian.
pub fn batch_kernel(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    ctx: &ForwardContext,
) -> Result<GradientKernel> {
    graph.check_params(params)?;
    graph.check_batch(batch)?;
    let mut tape = Tape::new();
    let pv = graph.param_leaves(&mut tape, params);
    let x = graph.input_leaf(&mut tape, batch);
    let (rec, deltas) = graph.record_expanded(&mut tape, &pv, x, ctx)?;
    let mut k: Option<Array2<f64>> = None;
    for (tap, &d) in rec.taps.iter().zip(&deltas) {
        let part = tap_kernel(&mut tape, tap, d);
        let v = tape.value(part);
        k = Some(match k {
            None => v.clone(),
            Some(acc) => acc + v,
        });
    }
    let k = k.expect("graphs have at least one parametrised layer");
    let k = (&k + &k.t()) * 0.5;
    GradientKernel::new(k, batch.rows(), graph.num_outputs())
}

/// `tr K` of a batch from pre-activation gradients.
pub fn batch_trace(graph: &Graph, params: &ParamVector, batch: &Tensor, ctx: &ForwardContext) -> Result<f64> {
    graph.check_params(params)?;
    graph.check_batch(batch)?;
    let mut tape = Tape::new();
    let pv = graph.param_leaves(&mut tape, params);
    let x = graph.input_leaf(&mut tape, batch);
    let (rec, deltas) = graph.record_expanded(&mut tape, &pv, x, ctx)?;
    let mut t = 0.0;
    for (tap, &d) in rec.taps.iter().zip(&deltas) {
        let part = tap_trace(&mut tape, tap, d);
        t += tape.scalar(part);
    }
    if !t.is_finite() {
        return Err(Error::NonFinite {
            context: "kernel trace".into(),
        });
    }
    Ok(t)
}

/// Trace of the batch kernel in evaluation mode. Larger means the model's
/// gradients on the batch are larger and less shared.
pub fn anomaly_score(graph: &Graph, params: &ParamVector, batch: &Tensor) -> Result<f64> {
    let j = graph.per_sample_jacobian(params, batch, &ForwardContext::eval())?;
    Ok(trace_metric_jacobian(&j))
}

/// `J Jᵀ`, `Jᵀ J` and the centred `Jᵀ (I - 11ᵀ/d) J` of a `d x n` matrix.
#[derive(Debug, Clone)]
pub struct ScatterPair {
    pub gram: Array2<f64>,
    pub scatter: Array2<f64>,
    pub centred: Array2<f64>,
}

impl ScatterPair {
    pub fn from_jacobian(j: &Array2<f64>) -> Self {
        let d = j.nrows() as f64;
        let gram = j.dot(&j.t());
        let scatter = j.t().dot(j);
        let mean = j.sum_axis(ndarray::Axis(0)) / d;
        let centred_rows = j - &mean;
        let centred = centred_rows.t().dot(&centred_rows);
        Self { gram, scatter, centred }
    }
}

/// Outcome of [`interlacing_check`]. Eigenvalue lists are descending.
#[derive(Debug, Clone)]
pub struct InterlacingReport {
    pub gram: Vec<f64>,
    pub scatter: Vec<f64>,
    pub centred: Vec<f64>,
    /// Largest `|λ_gram - λ_scatter|` over the shared leading eigenvalues,
    /// divided by the largest eigenvalue.
    pub shared_mismatch: f64,
    /// Largest violation of `λ_{j+1} <= λ̄_j <= λ_j` (zero when it holds).
    pub interlacing_violation: f64,
}

impl InterlacingReport {
    pub fn holds(&self, shared_tol: f64, slack: f64) -> bool {
        self.shared_mismatch <= shared_tol && self.interlacing_violation <= slack
    }
}

/// Compares the spectra of the Gram and scatter matrices of `j` and checks
/// that centring interlaces the scatter spectrum.
pub fn interlacing_check(j: &Array2<f64>) -> Result<InterlacingReport> {
    if j.nrows() < 2 {
        return Err(Error::invalid("interlacing check needs at least two rows"));
    }
    let sp = ScatterPair::from_jacobian(j);
    let gram = symmetric_eigenvalues(&sp.gram)?;
    let scatter = symmetric_eigenvalues(&sp.scatter)?;
    let centred = symmetric_eigenvalues(&sp.centred)?;
    let top = gram[0].max(scatter[0]).max(f64::MIN_POSITIVE);
    let shared = gram.len().min(scatter.len());
    let shared_mismatch = (0..shared)
        .map(|i| (gram[i] - scatter[i]).abs() / top)
        .fold(0.0, f64::max);
    let mut violation: f64 = 0.0;
    for (k, &c) in centred.iter().enumerate() {
        violation = violation.max(c - scatter[k]);
        if let Some(&next) = scatter.get(k + 1) {
            violation = violation.max(next - c);
        }
    }
    Ok(InterlacingReport {
        gram,
        scatter,
        centred,
        shared_mismatch,
        interlacing_violation: violation,
    })
}
