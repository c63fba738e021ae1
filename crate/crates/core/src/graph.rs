//! Layered computation graphs and the differentiation entry points built on
//! the tape: forward passes, loss gradients and per-sample Jacobians.
//!
//! Samples are rows. Images are stored channel-last (`H x W x C`) and
//! flattened per row, so a dense layer after a convolution needs no explicit
//! flatten step.

use std::sync::Arc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, PoolGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{record_loss, LossKind, Targets};
use crate::tensor::{ParamSlot, ParamVector, Tensor};

/// Largest per-sample Jacobian, in bytes, materialised by default.
pub const DEFAULT_JACOBIAN_CAP_BYTES: usize = 2 << 30;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `x W + b` with `W` stored `inputs x outputs`; `b` is optional.
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    /// Valid stride-1 convolution; `W` is `k·k·C_in x C_out`.
    Conv {
        geom: ConvGeom,
        out_channels: usize,
    },
    AvgPool(PoolGeom),
    Relu,
    /// Inverted dropout, active only when the forward context carries a
    /// dropout stream.
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub name: String,
    pub kind: LayerKind,
    pub in_width: usize,
    pub out_width: usize,
    pub weight_slot: Option<usize>,
    pub bias_slot: Option<usize>,
}

/// An immutable feed-forward network description.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    input_shape: Vec<usize>,
    nodes: Vec<GraphNode>,
    layout: Vec<ParamSlot>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Flat(usize),
    Image { h: usize, w: usize, c: usize },
}

impl Shape {
    fn width(self) -> usize {
        match self {
            Shape::Flat(n) => n,
            Shape::Image { h, w, c } => h * w * c,
        }
    }

    fn describe(self) -> String {
        match self {
            Shape::Flat(n) => format!("[{n}]"),
            Shape::Image { h, w, c } => format!("[{h}, {w}, {c}]"),
        }
    }
}

/// Incremental construction of a [`Graph`] with shape checking.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    input_shape: Vec<usize>,
    shape: Shape,
    nodes: Vec<GraphNode>,
    layout: Vec<ParamSlot>,
    offset: usize,
}

impl GraphBuilder {
    /// `input_shape` is `[n]` for vectors, `[h, w]` or `[h, w, c]` for images.
    pub fn new(input_shape: &[usize]) -> Result<Self> {
        let shape = match *input_shape {
            [n] => Shape::Flat(n),
            [h, w] => Shape::Image { h, w, c: 1 },
            [h, w, c] => Shape::Image { h, w, c },
            _ => return Err(Error::invalid(format!("unsupported input shape {input_shape:?}"))),
        };
        if shape.width() == 0 {
            return Err(Error::invalid("input shape has no elements"));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            shape,
            nodes: Vec::new(),
            layout: Vec::new(),
            offset: 0,
        })
    }

    fn push(&mut self, name: &str, kind: LayerKind, out: Shape, slots: Option<(usize, Option<usize>)>) {
        self.nodes.push(GraphNode {
            name: name.to_string(),
            kind,
            in_width: self.shape.width(),
            out_width: out.width(),
            weight_slot: slots.map(|s| s.0),
            bias_slot: slots.and_then(|s| s.1),
        });
        self.shape = out;
    }

    fn add_slot(&mut self, name: String, shape: Vec<usize>) -> usize {
        let slot = ParamSlot {
            name,
            offset: self.offset,
            shape,
        };
        self.offset += slot.len();
        self.layout.push(slot);
        self.layout.len() - 1
    }

    pub fn dense(self, name: &str, outputs: usize) -> Result<Self> {
        self.dense_with_bias(name, outputs, true)
    }

    pub fn dense_with_bias(mut self, name: &str, outputs: usize, bias: bool) -> Result<Self> {
        if outputs == 0 {
            return Err(Error::ShapeMismatch {
                node: name.into(),
                expected: "at least one output unit".into(),
                found: "0".into(),
            });
        }
        let inputs = self.shape.width();
        let w = self.add_slot(format!("{name}.weight"), vec![inputs, outputs]);
        let b = bias.then(|| self.add_slot(format!("{name}.bias"), vec![outputs]));
        let kind = LayerKind::Dense { inputs, outputs, bias };
        self.push(name, kind, Shape::Flat(outputs), Some((w, b)));
        Ok(self)
    }

    pub fn conv(mut self, name: &str, out_channels: usize, kernel: usize) -> Result<Self> {
        let Shape::Image { h, w, c } = self.shape else {
            return Err(Error::ShapeMismatch {
                node: name.into(),
                expected: "an image input".into(),
                found: self.shape.describe(),
            });
        };
        if kernel == 0 || kernel > h || kernel > w || out_channels == 0 {
            return Err(Error::ShapeMismatch {
                node: name.into(),
                expected: format!("an image of at least {kernel}x{kernel}"),
                found: self.shape.describe(),
            });
        }
        let geom = ConvGeom {
            in_h: h,
            in_w: w,
            in_c: c,
            kernel,
        };
        let ws = self.add_slot(format!("{name}.weight"), vec![geom.patch_len(), out_channels]);
        let bs = self.add_slot(format!("{name}.bias"), vec![out_channels]);
        let out = Shape::Image {
            h: geom.out_h(),
            w: geom.out_w(),
            c: out_channels,
        };
        self.push(name, LayerKind::Conv { geom, out_channels }, out, Some((ws, Some(bs))));
        Ok(self)
    }

    /// 2x2 average pooling with stride 2. Both sides must be even.
    pub fn avg_pool(mut self, name: &str) -> Result<Self> {
        match self.shape {
            Shape::Image { h, w, c } if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => {
                let g = PoolGeom {
                    in_h: h,
                    in_w: w,
                    channels: c,
                };
                let out = Shape::Image { h: h / 2, w: w / 2, c };
                self.push(name, LayerKind::AvgPool(g), out, None);
                Ok(self)
            }
            other => Err(Error::ShapeMismatch {
                node: name.into(),
                expected: "an image with even height and width".into(),
                found: other.describe(),
            }),
        }
    }

    pub fn relu(mut self, name: &str) -> Result<Self> {
        let s = self.shape;
        self.push(name, LayerKind::Relu, s, None);
        Ok(self)
    }

    pub fn dropout(mut self, name: &str, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate at `{name}` must be in [0, 1), got {rate}"
            )));
        }
        let s = self.shape;
        self.push(name, LayerKind::Dropout { rate }, s, None);
        Ok(self)
    }

    pub fn build(self) -> Result<Graph> {
        if self.layout.is_empty() {
            return Err(Error::invalid("graph has no parametrised layer"));
        }
        Ok(Graph {
            input_shape: self.input_shape,
            nodes: self.nodes,
            layout: self.layout,
        })
    }
}

/// Identifies the dropout masks of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutStream {
    pub seed: u64,
    pub step: u64,
}

/// Per-call forward settings. The default is evaluation mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardContext {
    pub dropout: Option<DropoutStream>,
    /// Stable per-sample identifiers used to draw dropout masks. Defaults to
    /// the row position within the batch.
    pub sample_keys: Option<Vec<u64>>,
}

impl ForwardContext {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            dropout: Some(DropoutStream { seed, step }),
            sample_keys: None,
        }
    }

    pub fn with_sample_keys(mut self, keys: Vec<u64>) -> Self {
        self.sample_keys = Some(keys);
        self
    }
}

fn mix(mut h: u64, x: u64) -> u64 {
    h ^= x
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(h << 6)
        .wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Dropout mask for one sample at one layer: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(stream: DropoutStream, layer: usize, sample_key: u64, width: usize, rate: f64) -> Vec<f64> {
    let seed = [stream.step, layer as u64, sample_key]
        .into_iter()
        .fold(mix(0, stream.seed), mix);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..width)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Tape handles for one parametrised layer, recorded when the forward pass
/// is expanded for per-output differentiation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub weight_slot: usize,
    pub bias_slot: Option<usize>,
    /// Layer input, one row per expanded row. For convolutions this is the
    /// im2col matrix with `positions` rows per expanded row.
    pub input: Var,
    /// Pre-activation, one row per expanded row.
    pub preact: Var,
    pub conv: Option<ConvGeom>,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Recorded {
    pub output: Var,
    pub taps: Vec<Tap>,
}

/// Per-sample gradients of every output, one row per `(sample, output)` pair
/// ordered sample-major: row `i·q + c` is `∇θ f_c(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleJacobian {
    matrix: Array2<f64>,
    batch_size: usize,
    num_outputs: usize,
}

impl PerSampleJacobian {
    pub fn from_matrix(matrix: Array2<f64>, batch_size: usize, num_outputs: usize) -> Result<Self> {
        if matrix.nrows() != batch_size * num_outputs {
            return Err(Error::DimensionMismatch {
                what: "Jacobian rows",
                expected: batch_size * num_outputs,
                found: matrix.nrows(),
            });
        }
        Ok(Self {
            matrix,
            batch_size,
            num_outputs,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn num_params(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, sample: usize, output: usize) -> ndarray::ArrayView1<'_, f64> {
        self.matrix.row(sample * self.num_outputs + output)
    }
}

impl Graph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_width(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.iter().map(ParamSlot::len).sum()
    }

    pub fn num_outputs(&self) -> usize {
        self.nodes.last().map_or(self.input_width(), |n| n.out_width)
    }

    pub fn has_dropout(&self) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n.kind, LayerKind::Dropout { rate } if rate > 0.0))
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout() == self.layout.as_slice() {
            return Ok(());
        }
        for node in &self.nodes {
            if let Some(ws) = node.weight_slot {
                for s in std::iter::once(ws).chain(node.bias_slot) {
                    let want = &self.layout[s];
                    match params.layout().get(s) {
                        Some(got) if got == want => {}
                        got => {
                            return Err(Error::ShapeMismatch {
                                node: node.name.clone(),
                                expected: format!("parameter `{}` {:?}", want.name, want.shape),
                                found: got.map_or("nothing".into(), |g| format!("`{}` {:?}", g.name, g.shape)),
                            })
                        }
                    }
                }
            }
        }
        Err(Error::DimensionMismatch {
            what: "parameter layout length",
            expected: self.layout.len(),
            found: params.layout().len(),
        })
    }

    pub(crate) fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if batch.row_len() != self.input_width() {
            return Err(Error::ShapeMismatch {
                node: self.nodes.first().map_or("input".into(), |n| n.name.clone()),
                expected: format!("{} inputs per sample ({:?})", self.input_width(), self.input_shape),
                found: format!("{} ({:?})", batch.row_len(), batch.shape()),
            });
        }
        Ok(())
    }

    /// Records every parameter slot as a leaf.
    pub(crate) fn param_leaves(&self, tape: &mut Tape, params: &ParamVector) -> Vec<Var> {
        (0..self.layout.len())
            .map(|s| tape.leaf(params.slot_matrix(s)))
            .collect()
    }

    pub(crate) fn input_leaf(&self, tape: &mut Tape, batch: &Tensor) -> Var {
        tape.leaf(batch.to_matrix())
    }

    /// Records the forward pass of `input` (one row per sample).
    ///
    /// With `expand = Some(q)` every sample row is replicated `q` times right
    /// after the first parametrised layer and the pre-activations of all
    /// parametrised layers are returned as taps. Rows never mix, so
    /// differentiating the selected output of each expanded row yields
    /// per-row gradients in a single backward pass.
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        ctx: &ForwardContext,
        expand: Option<usize>,
    ) -> Result<Recorded> {
        let m = tape.value(input).nrows();
        let keys: Vec<u64> = match &ctx.sample_keys {
            Some(k) if k.len() != m => {
                return Err(Error::DimensionMismatch {
                    what: "dropout sample keys",
                    expected: m,
                    found: k.len(),
                })
            }
            Some(k) => k.clone(),
            None => (0..m as u64).collect(),
        };
        let mut rep = 1;
        let mut x = input;
        let mut taps = Vec::new();
        for (li, node) in self.nodes.iter().enumerate() {
            x = match node.kind {
                LayerKind::Dense { .. } => {
                    let ws = node.weight_slot.expect("dense layer has parameters");
                    let mut z = tape.matmul(x, params[ws]);
                    if let Some(bs) = node.bias_slot {
                        z = tape.add_row(z, params[bs]);
                    }
                    let (a, z) = match expand {
                        Some(q) if rep == 1 => {
                            rep = q;
                            (tape.repeat_rows(x, q), tape.repeat_rows(z, q))
                        }
                        _ => (x, z),
                    };
                    if expand.is_some() {
                        taps.push(Tap {
                            weight_slot: ws,
                            bias_slot: node.bias_slot,
                            input: a,
                            preact: z,
                            conv: None,
                            out_channels: node.out_width,
                        });
                    }
                    z
                }
                LayerKind::Conv { geom, out_channels } => {
                    let ws = node.weight_slot.expect("conv layer has parameters");
                    let rows = tape.value(x).nrows();
                    let p = geom.positions();
                    let cols = tape.im2col(x, geom);
                    let z = tape.matmul(cols, params[ws]);
                    let z = tape.add_row(z, params[node.bias_slot.expect("conv layer has a bias")]);
                    let z = tape.reshape(z, rows, p * out_channels);
                    let (cols, z) = match expand {
                        Some(q) if rep == 1 => {
                            rep = q;
                            let k = geom.patch_len();
                            let c = tape.reshape(cols, rows, p * k);
                            let c = tape.repeat_rows(c, q);
                            let c = tape.reshape(c, rows * q * p, k);
                            (c, tape.repeat_rows(z, q))
                        }
                        _ => (cols, z),
                    };
                    if expand.is_some() {
                        taps.push(Tap {
                            weight_slot: ws,
                            bias_slot: node.bias_slot,
                            input: cols,
                            preact: z,
                            conv: Some(geom),
                            out_channels,
                        });
                    }
                    z
                }
                LayerKind::AvgPool(g) => tape.avg_pool(x, g),
                LayerKind::Relu => tape.relu(x),
                LayerKind::Dropout { rate } => match ctx.dropout {
                    Some(stream) if rate > 0.0 => {
                        let w = node.out_width;
                        let mut mask = Array2::zeros((m * rep, w));
                        for (i, &key) in keys.iter().enumerate() {
                            let row = dropout_mask(stream, li, key, w, rate);
                            let row = ndarray::ArrayView1::from(&row);
                            for j in 0..rep {
                                mask.row_mut(i * rep + j).assign(&row);
                            }
                        }
                        tape.mul_const(x, Arc::new(mask))
                    }
                    _ => x,
                },
            };
        }
        if let Some(q) = expand {
            if rep != q {
                // No parametrised layer: cannot happen for built graphs.
                return Err(Error::invalid("graph has no parametrised layer"));
            }
        }
        Ok(Recorded { output: x, taps })
    }

    /// Network outputs, `m x q`.
    pub fn forward(&self, params: &ParamVector, batch: &Tensor, ctx: &ForwardContext) -> Result<Tensor> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let pv = self.param_leaves(&mut tape, params);
        let x = self.input_leaf(&mut tape, batch);
        let rec = self.record(&mut tape, &pv, x, ctx, None)?;
        let out = Tensor::from_matrix(tape.value(rec.output).clone());
        Ok(out)
    }

    /// Batch-mean loss and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &Tensor,
        targets: &Targets,
        loss: LossKind,
        ctx: &ForwardContext,
    ) -> Result<(f64, ParamVector)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let pv = self.param_leaves(&mut tape, params);
        let x = self.input_leaf(&mut tape, batch);
        let rec = self.record(&mut tape, &pv, x, ctx, None)?;
        let l = record_loss(&mut tape, rec.output, targets, loss)?;
        let value = tape.scalar(l);
        if !value.is_finite() {
            return Err(Error::NonFinite { context: "loss".into() });
        }
        let grads = tape.grad(l, &pv);
        Ok((value, self.collect(&tape, &grads, params)?))
    }

    /// Batch-mean loss and its gradient with respect to the outputs, `m x q`.
    pub fn loss_output_gradient(
        &self,
        params: &ParamVector,
        batch: &Tensor,
        targets: &Targets,
        loss: LossKind,
        ctx: &ForwardContext,
    ) -> Result<(f64, Tensor)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let pv = self.param_leaves(&mut tape, params);
        let x = self.input_leaf(&mut tape, batch);
        let rec = self.record(&mut tape, &pv, x, ctx, None)?;
        let l = record_loss(&mut tape, rec.output, targets, loss)?;
        let g = tape.grad(l, &[rec.output])[0];
        Ok((tape.scalar(l), Tensor::from_matrix(tape.value(g).clone())))
    }

    /// Flattens per-slot gradient nodes into a vector with the graph layout.
    pub(crate) fn collect(&self, tape: &Tape, grads: &[Var], like: &ParamVector) -> Result<ParamVector> {
        let mut values = Vec::with_capacity(like.len());
        for &g in grads {
            values.extend(tape.value(g).iter().copied());
        }
        let out = like.with_values(values)?;
        if !out.all_finite() {
            return Err(Error::NonFinite {
                context: "parameter gradient".into(),
            });
        }
        Ok(out)
    }

    /// Per-sample Jacobian with the default memory cap.
    pub fn per_sample_jacobian(
        &self,
        params: &ParamVector,
        batch: &Tensor,
        ctx: &ForwardContext,
    ) -> Result<PerSampleJacobian> {
        self.per_sample_jacobian_capped(params, batch, ctx, DEFAULT_JACOBIAN_CAP_BYTES)
    }

    pub fn per_sample_jacobian_capped(
        &self,
        params: &ParamVector,
        batch: &Tensor,
        ctx: &ForwardContext,
        cap_bytes: usize,
    ) -> Result<PerSampleJacobian> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let m = batch.rows();
        let q = self.num_outputs();
        let p = self.num_params();
        let rows = m * q;
        let required = rows.saturating_mul(p).saturating_mul(std::mem::size_of::<f64>());
        if required > cap_bytes {
            return Err(Error::MemoryBudget {
                rows,
                cols: p,
                required,
                cap: cap_bytes,
            });
        }
        let mut tape = Tape::new();
        let pv = self.param_leaves(&mut tape, params);
        let x = self.input_leaf(&mut tape, batch);
        let (rec, deltas) = self.record_expanded(&mut tape, &pv, x, ctx)?;
        let mut j = Array2::zeros((rows, p));
        for (tap, &d) in rec.taps.iter().zip(&deltas) {
            let (gw, gb) = tap_gradient_rows(&mut tape, tap, d);
            let wr = self.layout[tap.weight_slot].range();
            j.slice_mut(s![.., wr]).assign(tape.value(gw));
            if let (Some(bs), Some(gb)) = (tap.bias_slot, gb) {
                let br = self.layout[bs].range();
                j.slice_mut(s![.., br]).assign(tape.value(gb));
            }
        }
        let bad: Vec<usize> = j
            .outer_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|v| !v.is_finite()))
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFiniteRows { rows: bad });
        }
        PerSampleJacobian::from_matrix(j, m, q)
    }

    /// Expanded forward pass plus the per-row pre-activation gradients of
    /// each tap, all recorded on the tape.
    pub(crate) fn record_expanded(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        ctx: &ForwardContext,
    ) -> Result<(Recorded, Vec<Var>)> {
        let q = self.num_outputs();
        let rec = self.record(tape, params, input, ctx, Some(q))?;
        let rows = tape.value(rec.output).nrows();
        let mut sel = Array2::zeros((rows, q));
        for r in 0..rows {
            sel[[r, r % q]] = 1.0;
        }
        let picked = tape.mul_const(rec.output, Arc::new(sel));
        let obj = tape.sum_all(picked);
        let preacts: Vec<Var> = rec.taps.iter().map(|t| t.preact).collect();
        let deltas = tape.grad(obj, &preacts);
        Ok((rec, deltas))
    }
}

/// `(δ reshaped to one row per position, per-row bias gradient)` of a conv tap.
fn conv_parts(tape: &mut Tape, tap: &Tap, delta: Var) -> (Var, Var, Var) {
    let g = tap.conv.expect("conv tap");
    let rows = tape.value(delta).nrows();
    let p = g.positions();
    let dr = tape.reshape(delta, rows * p, tap.out_channels);
    let gw = tape.batch_matmul(tap.input, dr, rows, true, false);
    let gw = tape.reshape(gw, rows, g.patch_len() * tap.out_channels);
    let gb = tape.sum_row_groups(dr, p);
    (dr, gw, gb)
}

/// Per-row weight and bias gradients, `R x |W|` and `R x |b|`.
pub(crate) fn tap_gradient_rows(tape: &mut Tape, tap: &Tap, delta: Var) -> (Var, Option<Var>) {
    if tap.conv.is_some() {
        let (_, gw, gb) = conv_parts(tape, tap, delta);
        return (gw, Some(gb));
    }
    let (rows, inputs) = tape.value(tap.input).dim();
    let gw = tape.batch_matmul(tap.input, delta, rows, true, false);
    let gw = tape.reshape(gw, rows, inputs * tap.out_channels);
    (gw, tap.bias_slot.map(|_| delta))
}

/// `Σ_r ‖∇θ_layer f_r‖²` over all expanded rows, as a `1 x 1` node.
pub(crate) fn tap_trace(tape: &mut Tape, tap: &Tap, delta: Var) -> Var {
    if tap.conv.is_some() {
        let (_, gw, gb) = conv_parts(tape, tap, delta);
        let w2 = tape.mul(gw, gw);
        let w2 = tape.sum_all(w2);
        let b2 = tape.mul(gb, gb);
        let b2 = tape.sum_all(b2);
        return tape.add(w2, b2);
    }
    let d2 = tape.mul(delta, delta);
    let d2 = tape.row_sums(d2);
    let a2 = tape.mul(tap.input, tap.input);
    let mut a2 = tape.row_sums(a2);
    if tap.bias_slot.is_some() {
        a2 = tape.add_const(a2, 1.0);
    }
    let t = tape.mul(d2, a2);
    tape.sum_all(t)
}

/// The layer's contribution to the row Gram matrix, `R x R`.
pub(crate) fn tap_kernel(tape: &mut Tape, tap: &Tap, delta: Var) -> Var {
    if tap.conv.is_some() {
        let (_, gw, gb) = conv_parts(tape, tap, delta);
        let kw = tape.matmul_t(gw, gw, false, true);
        let kb = tape.matmul_t(gb, gb, false, true);
        return tape.add(kw, kb);
    }
    let dd = tape.matmul_t(delta, delta, false, true);
    let mut aa = tape.matmul_t(tap.input, tap.input, false, true);
    if tap.bias_slot.is_some() {
        aa = tape.add_const(aa, 1.0);
    }
    tape.mul(dd, aa)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Graph {
        GraphBuilder::new(&[3])
            .and_then(|b| b.dense("h", 4))
            .and_then(|b| b.relu("h.relu"))
            .and_then(|b| b.dropout("h.drop", 0.5))
            .and_then(|b| b.dense("out", 2))
            .and_then(GraphBuilder::build)
            .unwrap()
    }

    fn params(g: &Graph) -> ParamVector {
        let vals = (0..g.num_params())
            .map(|i| ((i * 37 % 17) as f64 - 8.0) / 10.0)
            .collect();
        ParamVector::new(vals, g.layout().to_vec()).unwrap()
    }

    #[test]
    fn layout_is_contiguous() {
        let g = tiny();
        assert_eq!(g.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(g.num_outputs(), 2);
        assert_eq!(g.layout()[2].offset, 16);
    }

    #[test]
    fn builder_reports_offending_node() {
        let e = GraphBuilder::new(&[5]).unwrap().conv("c1", 2, 3).unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch { ref node, .. } if node == "c1"));
        let e = GraphBuilder::new(&[5, 5]).unwrap().avg_pool("p").unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch { ref node, .. } if node == "p"));
    }

    #[test]
    fn wrong_input_width_names_first_node() {
        let g = tiny();
        let x = Tensor::zeros(vec![2, 4]);
        let e = g.forward(&params(&g), &x, &ForwardContext::eval()).unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch { ref node, .. } if node == "h"));
    }

    #[test]
    fn dropout_masks_are_keyed_and_inverted() {
        let s = DropoutStream { seed: 1, step: 2 };
        let a = dropout_mask(s, 0, 7, 1000, 0.3);
        assert_eq!(a, dropout_mask(s, 0, 7, 1000, 0.3));
        assert_ne!(a, dropout_mask(s, 0, 8, 1000, 0.3));
        assert_ne!(a, dropout_mask(DropoutStream { seed: 1, step: 3 }, 0, 7, 1000, 0.3));
        let kept = a.iter().filter(|&&v| v > 0.0).count();
        assert!((600..800).contains(&kept), "{kept}");
        assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let g = tiny();
        let p = params(&g);
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let a = g.forward(&p, &x, &ForwardContext::eval()).unwrap();
        let b = g.forward(&p, &x, &ForwardContext::train(3, 0)).unwrap();
        assert_ne!(a, b);
        let c = g.forward(&p, &x, &ForwardContext::train(3, 0)).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn memory_cap_is_enforced() {
        let g = tiny();
        let x = Tensor::zeros(vec![4, 3]);
        let e = g
            .per_sample_jacobian_capped(&params(&g), &x, &ForwardContext::eval(), 100)
            .unwrap_err();
        assert!(matches!(e, Error::MemoryBudget { rows: 8, cols: 26, .. }));
    }
}
