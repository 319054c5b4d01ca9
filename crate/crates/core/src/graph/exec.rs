use super::{feature_axis, ActKind, LayerKind, LayerNode, ModelGraph, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
use crate::binarize::{ste_backward, ACTIVATION_STE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d, conv2d_backward_input, conv2d_backward_kernels, matmul_into, matmul_nt_into, matmul_tn_into,
    Conv2dGeometry, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics left alone (repeat passes over a batch).
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

impl Mode {
    fn batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retention {
    /// Keep every segment's buffers until the caller drops them.
    All,
    /// Keep nothing; no trace is allocated.
    None,
}

/// Buffers one node keeps for its backward pass.
#[derive(Clone, Debug)]
pub enum NodeCache<T> {
    Input(Tensor<T>),
    PreActivation(Tensor<T>),
    Norm { normalized: Tensor<T>, inv_std: Vec<T> },
    Argmax { indices: Vec<u32>, input_shape: Vec<usize> },
    Shape(Vec<usize>),
    Empty,
}

impl<T: Scalar> NodeCache<T> {
    pub fn bytes(&self) -> usize {
        match self {
            NodeCache::Input(t) | NodeCache::PreActivation(t) => t.bytes(),
            NodeCache::Norm { normalized, inv_std } => normalized.bytes() + inv_std.len() * T::BYTES,
            NodeCache::Argmax { indices, .. } => indices.len() * std::mem::size_of::<u32>(),
            NodeCache::Shape(_) | NodeCache::Empty => 0,
        }
    }
}

/// Retained buffers of one segment's forward pass.
#[derive(Clone, Debug)]
pub struct SegmentTrace<T> {
    pub segment: usize,
    caches: Vec<NodeCache<T>>,
    mode: Mode,
}

impl<T: Scalar> SegmentTrace<T> {
    pub fn bytes(&self) -> usize {
        self.caches.iter().map(NodeCache::bytes).sum()
    }

    /// Cached input of the segment's weight layer (`y_{k-1}`).
    pub fn weight_input(&self) -> Option<&Tensor<T>> {
        self.caches.iter().find_map(|c| match c {
            NodeCache::Input(t) => Some(t),
            _ => None,
        })
    }
}

/// Traces of a whole forward pass, one slot per segment.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<T> {
    segments: Vec<Option<SegmentTrace<T>>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn take(&mut self, k: usize) -> Result<SegmentTrace<T>> {
        self.segments
            .get_mut(k)
            .and_then(Option::take)
            .ok_or(Error::MissingTrace { segment: k })
    }

    pub fn get(&self, k: usize) -> Option<&SegmentTrace<T>> {
        self.segments.get(k).and_then(Option::as_ref)
    }

    pub fn retained_segments(&self) -> usize {
        self.segments.iter().flatten().count()
    }

    pub fn retained_bytes(&self) -> usize {
        self.segments.iter().flatten().map(SegmentTrace::bytes).sum()
    }

    pub fn is_allocated(&self) -> bool {
        !self.segments.is_empty()
    }
}

/// Tracks retained trace bytes and simultaneously live segments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BufferMeter {
    pub live_bytes: usize,
    pub peak_bytes: usize,
    pub live_segments: usize,
    pub peak_segments: usize,
}

impl BufferMeter {
    pub fn retain<T: Scalar>(&mut self, trace: &SegmentTrace<T>) {
        self.live_bytes += trace.bytes();
        self.live_segments += 1;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.peak_segments = self.peak_segments.max(self.live_segments);
    }

    pub fn release<T: Scalar>(&mut self, trace: SegmentTrace<T>) {
        self.live_bytes -= trace.bytes();
        self.live_segments -= 1;
    }

    pub fn merge_peak(&mut self, other: &BufferMeter) {
        self.peak_bytes = self.peak_bytes.max(other.peak_bytes);
        self.peak_segments = self.peak_segments.max(other.peak_segments);
    }
}

/// An error tensor plus the number of activation STEs it has crossed.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSignal<T> {
    pub value: Tensor<T>,
    pub ste_crossings: usize,
}

impl<T> ErrorSignal<T> {
    /// A signal injected directly at a segment output.
    pub fn fresh(value: Tensor<T>) -> Self {
        Self {
            value,
            ste_crossings: 0,
        }
    }
}

/// Parameter gradients of one segment, in the segment's node order.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentGrads<T> {
    pub segment: usize,
    /// `(node index, gradient per parameter)`.
    pub params: Vec<(usize, Vec<Tensor<T>>)>,
    /// STEs the error had crossed when it reached the weight layer.
    pub ste_crossings: usize,
}

impl<T: Scalar> SegmentGrads<T> {
    pub fn norm(&self) -> T {
        self.flat().iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
    }

    /// All gradient entries concatenated in node/parameter order.
    pub fn flat(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|(_, g)| g.iter().flat_map(|t| t.data().iter().copied()))
            .collect()
    }

    /// Gradient of the segment's weight tensor.
    pub fn weight_grad(&self) -> &Tensor<T> {
        &self
            .params
            .iter()
            .find(|(_, g)| g.len() == 2 && g[0].rank() >= 2)
            .unwrap()
            .1[0]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, g)| g.iter().all(Tensor::all_finite))
    }
}

#[derive(Clone, Debug)]
pub struct SegmentBackward<T> {
    pub grads: SegmentGrads<T>,
    /// Error at the segment input; `None` when propagation was not requested.
    pub input_error: Option<ErrorSignal<T>>,
}

pub(crate) struct StatsUpdate<T> {
    node: usize,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Segment output, its trace if retained, and deferred running-stat updates.
type SegmentRun<T> = (Tensor<T>, Option<SegmentTrace<T>>, Vec<StatsUpdate<T>>);

impl<T: Scalar> ModelGraph<T> {
    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![input.shape().first().copied().unwrap_or(0)];
            expected.extend(&self.input_shape);
            return Err(Error::ShapeMismatch {
                op: "model input",
                expected,
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs segment `k` on `input` (the output of segment `k-1`, or the model input).
    pub fn forward_segment(
        &mut self,
        k: usize,
        input: Tensor<T>,
        mode: Mode,
        retain: bool,
    ) -> Result<(Tensor<T>, Option<SegmentTrace<T>>)> {
        let (out, trace, updates) = self.run_segment(k, input, mode, retain)?;
        if mode == Mode::Train {
            self.apply_stats(updates);
        }
        Ok((out, trace))
    }

    pub fn forward(
        &mut self,
        input: Tensor<T>,
        mode: Mode,
        retention: Retention,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.forward_metered(input, mode, retention, &mut BufferMeter::default())
    }

    pub fn forward_metered(
        &mut self,
        input: Tensor<T>,
        mode: Mode,
        retention: Retention,
        meter: &mut BufferMeter,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.check_input(&input)?;
        let retain = retention == Retention::All;
        let mut trace = ForwardTrace {
            segments: if retain {
                Vec::with_capacity(self.segment_count())
            } else {
                Vec::new()
            },
        };
        let mut x = input;
        for k in 0..self.segment_count() {
            let (y, t) = self.forward_segment(k, x, mode, retain)?;
            if let Some(t) = t {
                meter.retain(&t);
                trace.segments.push(Some(t));
            }
            x = y;
        }
        Ok((x, trace))
    }

    /// Eval-mode logits without touching any state.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for k in 0..self.segment_count() {
            x = self.run_segment(k, x, Mode::Eval, false)?.0;
        }
        Ok(x)
    }

    fn apply_stats(&mut self, updates: Vec<StatsUpdate<T>>) {
        let m = T::of(BATCHNORM_MOMENTUM);
        for u in updates {
            let stats = &mut self.nodes[u.node].stats;
            for (r, b) in stats[0].data_mut().iter_mut().zip(&u.mean) {
                *r = (T::one() - m) * *r + m * *b;
            }
            for (r, b) in stats[1].data_mut().iter_mut().zip(&u.var) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
    }

    fn run_segment(&self, k: usize, input: Tensor<T>, mode: Mode, retain: bool) -> Result<SegmentRun<T>> {
        let range = self.segment(k);
        let has_skip = self.nodes[range.clone()]
            .iter()
            .any(|n| matches!(n.kind, LayerKind::SkipAdd { .. }));
        let skip_source = has_skip.then(|| input.clone());
        let mut caches = Vec::with_capacity(if retain { range.len() } else { 0 });
        let mut updates = Vec::new();
        let mut x = input;
        for i in range {
            let node = &self.nodes[i];
            let (y, cache, update) =
                node_forward(node, x, skip_source.as_ref(), mode, retain).map_err(|e| e.at_node(i))?;
            if retain {
                caches.push(cache);
            }
            if let Some(mut u) = update {
                u.node = i;
                updates.push(u);
            }
            x = y;
        }
        let trace = retain.then_some(SegmentTrace {
            segment: k,
            caches,
            mode,
        });
        Ok((x, trace, updates))
    }

    /// Backward through segment `k` only, from an error at its output.
    ///
    /// With `propagate` the error at the segment input is returned as well;
    /// skip connections contribute their identity branch to it.
    pub fn segment_backward(
        &self,
        trace: &SegmentTrace<T>,
        delta: ErrorSignal<T>,
        propagate: bool,
    ) -> Result<SegmentBackward<T>> {
        let k = trace.segment;
        let range = self.segment(k);
        if trace.caches.len() != range.len() {
            return Err(Error::MissingTrace { segment: k });
        }
        let mut crossings = delta.ste_crossings;
        let mut d = delta.value;
        let mut skip_accum: Option<Tensor<T>> = None;
        let mut grads = Vec::new();
        let mut weight_crossings = crossings;
        let mut input_error = None;
        for (i, cache) in range.clone().zip(&trace.caches).rev() {
            let node = &self.nodes[i];
            let is_weight = node.kind.is_weight_layer();
            let need_input = !is_weight || propagate;
            if is_weight {
                weight_crossings = crossings;
            }
            let step = node_backward(node, cache, d, need_input, trace.mode).map_err(|e| e.at_node(i))?;
            if step.crossed_ste {
                crossings += 1;
            }
            if let LayerKind::SkipAdd { .. } = node.kind {
                skip_accum = Some(step.input_error.clone().expect("skip passes its error"));
            }
            if !step.param_grads.is_empty() {
                grads.push((i, step.param_grads));
            }
            match step.input_error {
                Some(e) => d = e,
                None => break,
            }
            if i == range.start {
                input_error = Some(d.clone());
            }
        }
        let input_error = if propagate {
            let mut e = input_error.expect("loop reaches the segment start when propagating");
            if let Some(s) = skip_accum {
                e = e.add(&s)?;
            }
            Some(ErrorSignal {
                value: e,
                ste_crossings: crossings,
            })
        } else {
            None
        };
        grads.reverse();
        Ok(SegmentBackward {
            grads: SegmentGrads {
                segment: k,
                params: grads,
                ste_crossings: weight_crossings,
            },
            input_error,
        })
    }
}

pub(crate) type NodeOutput<T> = (Tensor<T>, NodeCache<T>, Option<StatsUpdate<T>>);

pub(crate) fn node_forward<T: Scalar>(
    node: &LayerNode<T>,
    x: Tensor<T>,
    skip: Option<&Tensor<T>>,
    mode: Mode,
    retain: bool,
) -> Result<NodeOutput<T>> {
    let keep = |t: Tensor<T>| if retain { NodeCache::Input(t) } else { NodeCache::Empty };
    Ok(match &node.kind {
        LayerKind::Dense { inputs, outputs } => {
            let y = dense_forward(&x, &node.effective_weights(), &node.params[1], *inputs, *outputs)?;
            (y, keep(x), None)
        }
        LayerKind::Conv2d { stride, padding, .. } => {
            let mut y = conv2d(&x, &node.effective_weights(), *stride, *padding)?;
            add_channel_bias(&mut y, &node.params[1]);
            (y, keep(x), None)
        }
        LayerKind::Activation(act) => {
            let y = match act {
                ActKind::Tanh => x.tanh(),
                ActKind::Relu => x.relu(),
                ActKind::Sign => crate::binarize::sign_forward(&x),
            };
            let cache = if retain {
                NodeCache::PreActivation(x)
            } else {
                NodeCache::Empty
            };
            (y, cache, None)
        }
        LayerKind::BatchNorm { features } => batchnorm_forward(node, &x, *features, mode, retain)?,
        LayerKind::MaxPool { size } => {
            let (y, indices) = maxpool_forward(&x, *size)?;
            let cache = if retain {
                NodeCache::Argmax {
                    indices,
                    input_shape: x.shape().to_vec(),
                }
            } else {
                NodeCache::Empty
            };
            (y, cache, None)
        }
        LayerKind::AvgPool => {
            let y = avgpool_forward(&x)?;
            (y, NodeCache::Shape(x.shape().to_vec()), None)
        }
        LayerKind::Flatten => {
            let shape = x.shape().to_vec();
            let n = shape[0];
            let row = x.row_len();
            (x.reshape(vec![n, row])?, NodeCache::Shape(shape), None)
        }
        LayerKind::Reshape { to } => {
            let shape = x.shape().to_vec();
            let mut target = vec![shape[0]];
            target.extend(to);
            (x.reshape(target)?, NodeCache::Shape(shape), None)
        }
        LayerKind::Transpose => (x.transpose_last2()?, NodeCache::Empty, None),
        LayerKind::SkipAdd { .. } => {
            let s = skip.expect("segment input captured for skip");
            (x.add(s)?, NodeCache::Empty, None)
        }
    })
}

pub(crate) fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    inputs: usize,
    outputs: usize,
) -> Result<Tensor<T>> {
    if weights.shape() != [outputs, inputs] || bias.shape() != [outputs] {
        return Err(Error::ShapeMismatch {
            op: "dense parameters",
            expected: vec![outputs, inputs],
            actual: weights.shape().to_vec(),
        });
    }
    if x.shape().last() != Some(&inputs) {
        return Err(Error::ShapeMismatch {
            op: "dense",
            expected: vec![inputs],
            actual: x.shape().to_vec(),
        });
    }
    let rows = x.len() / inputs;
    let mut y = vec![T::zero(); rows * outputs];
    matmul_nt_into(rows, inputs, outputs, x.data(), weights.data(), &mut y);
    let b = bias.data();
    for row in y.chunks_mut(outputs) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = outputs;
    Tensor::from_parts(shape, y).finite("dense")
}

pub(crate) fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: &Tensor<T>) {
    let (c, plane) = (y.dim(1), y.dim(2) * y.dim(3));
    let b = bias.data().to_vec();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let bv = b[i % c];
        for v in chunk {
            *v += bv;
        }
    }
}

/// `(outer, channels, inner)` view of a batched tensor for per-feature reductions.
pub(crate) fn norm_layout(shape: &[usize]) -> (usize, usize, usize) {
    let axis = feature_axis(shape.len());
    let c = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (outer, c, inner)
}

fn batchnorm_forward<T: Scalar>(
    node: &LayerNode<T>,
    x: &Tensor<T>,
    features: usize,
    mode: Mode,
    retain: bool,
) -> Result<NodeOutput<T>> {
    let (outer, c, inner) = norm_layout(x.shape());
    if c != features {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            expected: vec![features],
            actual: x.shape().to_vec(),
        });
    }
    let data = x.data();
    let eps = T::of(BATCHNORM_EPS);
    let count = outer * inner;
    debug_assert_eq!(data.len(), outer * c * inner);
    let (mean, var, update) = if mode.batch_stats() {
        let inv = T::one() / T::of(count as f64);
        let mut mean = channel_sums(data, c, inner, |v, _| v, &[]);
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = channel_sums(data, c, inner, |v, m| (v - m) * (v - m), &mean);
        let unbiased: Vec<T> = var
            .iter()
            .map(|&s| if count > 1 { s / T::of((count - 1) as f64) } else { s })
            .collect();
        var.iter_mut().for_each(|s| *s *= inv);
        let update = (mode == Mode::Train).then(|| StatsUpdate {
            node: 0,
            mean: mean.clone(),
            var: unbiased,
        });
        (mean, var, update)
    } else {
        (node.stats[0].data().to_vec(), node.stats[1].data().to_vec(), None)
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gamma, beta) = (node.params[0].data(), node.params[1].data());
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        let rows = data
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(y.chunks_exact_mut(c));
        for ((xr, hr), yr) in rows {
            for ch in 0..c {
                let h = (xr[ch] - mean[ch]) * inv_std[ch];
                hr[ch] = h;
                yr[ch] = gamma[ch] * h + beta[ch];
            }
        }
    } else {
        for_each_channel(outer, c, inner, |ch, range| {
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for j in range {
                let h = (data[j] - m) * s;
                xhat[j] = h;
                y[j] = g * h + b;
            }
        });
    }
    let y = Tensor::from_parts(x.shape().to_vec(), y).finite("batchnorm")?;
    let cache = if retain {
        NodeCache::Norm {
            normalized: Tensor::from_parts(x.shape().to_vec(), xhat),
            inv_std,
        }
    } else {
        NodeCache::Empty
    };
    Ok((y, cache, update))
}

fn maxpool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    if x.rank() != 4 {
        return Err(Error::InvalidGeometry {
            op: "max pool",
            detail: format!("expected [n, c, h, w], got {:?}", x.shape()),
        });
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h / size, w / size);
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let j = base + (oy * size + dy) * w + ox * size + dx;
                        if data[j] > data[best] {
                            best = j;
                        }
                    }
                }
                out.push(data[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), idx))
}

fn avgpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.rank() {
        4 => {
            let (n, c, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
            let inv = T::one() / T::of(plane as f64);
            let data = x
                .data()
                .chunks(plane)
                .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
                .collect();
            Ok(Tensor::from_parts(vec![n, c], data))
        }
        3 => {
            let (n, p, d) = (x.dim(0), x.dim(1), x.dim(2));
            let inv = T::one() / T::of(p as f64);
            let mut out = vec![T::zero(); n * d];
            for b in 0..n {
                for t in 0..p {
                    let row = &x.data()[(b * p + t) * d..(b * p + t + 1) * d];
                    for (o, &v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= inv);
            Ok(Tensor::from_parts(vec![n, d], out))
        }
        _ => Err(Error::InvalidGeometry {
            op: "average pool",
            detail: format!("expected rank 3 or 4, got {:?}", x.shape()),
        }),
    }
}

struct NodeGrad<T> {
    param_grads: Vec<Tensor<T>>,
    input_error: Option<Tensor<T>>,
    crossed_ste: bool,
}

fn node_backward<T: Scalar>(
    node: &LayerNode<T>,
    cache: &NodeCache<T>,
    d: Tensor<T>,
    need_input: bool,
    mode: Mode,
) -> Result<NodeGrad<T>> {
    let plain = |e: Tensor<T>| NodeGrad {
        param_grads: Vec::new(),
        input_error: Some(e),
        crossed_ste: false,
    };
    let missing = || Error::InvalidArgument("trace buffer does not match node".into());
    Ok(match &node.kind {
        LayerKind::Dense { inputs, outputs } => {
            let NodeCache::Input(x) = cache else {
                return Err(missing());
            };
            let rows = x.len() / inputs;
            let dy = d.reshape(vec![rows, *outputs])?;
            let mut dw = vec![T::zero(); outputs * inputs];
            matmul_tn_into(*outputs, rows, *inputs, dy.data(), x.data(), &mut dw);
            let mut db = vec![T::zero(); *outputs];
            for row in dy.data().chunks(*outputs) {
                for (b, &v) in db.iter_mut().zip(row) {
                    *b += v;
                }
            }
            let input_error = if need_input {
                let w = node.effective_weights();
                let mut dx = vec![T::zero(); rows * inputs];
                matmul_into(rows, *outputs, *inputs, dy.data(), w.data(), &mut dx);
                Some(Tensor::from_parts(x.shape().to_vec(), dx).finite("dense backward")?)
            } else {
                None
            };
            NodeGrad {
                param_grads: vec![
                    Tensor::from_parts(vec![*outputs, *inputs], dw).finite("dense weight grad")?,
                    Tensor::from_parts(vec![*outputs], db),
                ],
                input_error,
                crossed_ste: false,
            }
        }
        LayerKind::Conv2d { stride, padding, .. } => {
            let NodeCache::Input(x) = cache else {
                return Err(missing());
            };
            let w = node.effective_weights();
            let g = Conv2dGeometry::new(x.shape(), w.shape(), *stride, *padding)?;
            let dw = conv2d_backward_kernels(&d, x, &g)?;
            let (c, plane) = (d.dim(1), d.dim(2) * d.dim(3));
            let mut db = vec![T::zero(); c];
            for (i, chunk) in d.data().chunks(plane).enumerate() {
                db[i % c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
            }
            let input_error = if need_input {
                Some(conv2d_backward_input(&d, &w, &g)?)
            } else {
                None
            };
            NodeGrad {
                param_grads: vec![dw, Tensor::from_parts(vec![c], db)],
                input_error,
                crossed_ste: false,
            }
        }
        LayerKind::Activation(act) => {
            let NodeCache::PreActivation(z) = cache else {
                return Err(missing());
            };
            let (dz, crossed) = match act {
                ActKind::Tanh => (
                    d.zip_map(z, "tanh backward", |g, z| {
                        let t = z.tanh();
                        g * (T::one() - t * t)
                    })?,
                    false,
                ),
                ActKind::Relu => (
                    d.zip_map(z, "relu backward", |g, z| if z > T::zero() { g } else { T::zero() })?,
                    false,
                ),
                ActKind::Sign => (ste_backward(ACTIVATION_STE, &d, z)?, true),
            };
            NodeGrad {
                param_grads: Vec::new(),
                input_error: Some(dz),
                crossed_ste: crossed,
            }
        }
        LayerKind::BatchNorm { .. } => {
            let NodeCache::Norm { normalized, inv_std } = cache else {
                return Err(missing());
            };
            batchnorm_backward(node, normalized, inv_std, d, mode)?
        }
        LayerKind::MaxPool { .. } => {
            let NodeCache::Argmax { indices, input_shape } = cache else {
                return Err(missing());
            };
            let mut dx = vec![T::zero(); input_shape.iter().product()];
            for (&j, &g) in indices.iter().zip(d.data()) {
                dx[j as usize] += g;
            }
            plain(Tensor::from_parts(input_shape.clone(), dx))
        }
        LayerKind::AvgPool => {
            let NodeCache::Shape(shape) = cache else {
                return Err(missing());
            };
            let mut dx = vec![T::zero(); shape.iter().product()];
            if shape.len() == 4 {
                let plane = shape[2] * shape[3];
                let inv = T::one() / T::of(plane as f64);
                for (chunk, &g) in dx.chunks_mut(plane).zip(d.data()) {
                    chunk.iter_mut().for_each(|v| *v = g * inv);
                }
            } else {
                let (p, dd) = (shape[1], shape[2]);
                let inv = T::one() / T::of(p as f64);
                for b in 0..shape[0] {
                    let grow = &d.data()[b * dd..(b + 1) * dd];
                    for t in 0..p {
                        for (v, &g) in dx[(b * p + t) * dd..(b * p + t + 1) * dd].iter_mut().zip(grow) {
                            *v = g * inv;
                        }
                    }
                }
            }
            plain(Tensor::from_parts(shape.clone(), dx))
        }
        LayerKind::Flatten | LayerKind::Reshape { .. } => {
            let NodeCache::Shape(shape) = cache else {
                return Err(missing());
            };
            plain(d.reshape(shape.clone())?)
        }
        LayerKind::Transpose => plain(d.transpose_last2()?),
        LayerKind::SkipAdd { .. } => plain(d),
    })
}

fn batchnorm_backward<T: Scalar>(
    node: &LayerNode<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    d: Tensor<T>,
    mode: Mode,
) -> Result<NodeGrad<T>> {
    let (outer, c, inner) = norm_layout(xhat.shape());
    let gamma = node.params[0].data();
    let (dyd, xh) = (d.data(), xhat.data());
    let dbeta = channel_sums(dyd, c, inner, |g, _| g, &[]);
    let mut dgamma = vec![T::zero(); c];
    if inner == 1 {
        for (gr, hr) in dyd.chunks_exact(c).zip(xh.chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] += gr[ch] * hr[ch];
            }
        }
    } else {
        for_each_channel(outer, c, inner, |ch, range| {
            let mut acc = dgamma[ch];
            for j in range {
                acc += dyd[j] * xh[j];
            }
            dgamma[ch] = acc;
        });
    }
    let n = T::of((outer * inner) as f64);
    // batch statistics: dx = s·(n·dy − Σdy − x̂·Σdy·x̂) with s = γ/(σ·n)
    // running statistics: dx = γ/σ · dy
    let (scale, shift, slope, gain) = if mode.batch_stats() {
        let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * inv_std[ch] / n).collect();
        (scale, dbeta.clone(), dgamma.clone(), n)
    } else {
        let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * inv_std[ch]).collect();
        (scale, vec![T::zero(); c], vec![T::zero(); c], T::one())
    };
    let mut dx = vec![T::zero(); d.len()];
    if inner == 1 {
        for ((out, gr), hr) in dx.chunks_exact_mut(c).zip(dyd.chunks_exact(c)).zip(xh.chunks_exact(c)) {
            for ch in 0..c {
                out[ch] = scale[ch] * (gain * gr[ch] - shift[ch] - hr[ch] * slope[ch]);
            }
        }
    } else {
        for_each_channel(outer, c, inner, |ch, range| {
            let (s, db, dg) = (scale[ch], shift[ch], slope[ch]);
            for j in range {
                dx[j] = s * (gain * dyd[j] - db - xh[j] * dg);
            }
        });
    }
    Ok(NodeGrad {
        param_grads: vec![Tensor::from_parts(vec![c], dgamma), Tensor::from_parts(vec![c], dbeta)],
        input_error: Some(Tensor::from_parts(d.shape().to_vec(), dx).finite("batchnorm backward")?),
        crossed_ste: false,
    })
}

/// Per-channel sums of `f(value, aux[channel])` in (outer, inner) order.
fn channel_sums<T: Scalar>(data: &[T], c: usize, inner: usize, f: impl Fn(T, T) -> T, aux: &[T]) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    let aux_at = |ch: usize| aux.get(ch).copied().unwrap_or_else(T::zero);
    if inner == 1 {
        let aux: Vec<T> = (0..c).map(aux_at).collect();
        for row in data.chunks_exact(c) {
            for ((s, &v), &a) in sums.iter_mut().zip(row).zip(&aux) {
                *s += f(v, a);
            }
        }
    } else {
        for block in data.chunks_exact(c * inner) {
            for (ch, plane) in block.chunks_exact(inner).enumerate() {
                let a = aux_at(ch);
                let mut acc = sums[ch];
                for &v in plane {
                    acc += f(v, a);
                }
                sums[ch] = acc;
            }
        }
    }
    sums
}

/// Visits the flat index range of every `(outer, channel)` plane.
#[inline(always)]
fn for_each_channel(outer: usize, c: usize, inner: usize, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            f(ch, base..base + inner);
        }
    }
}
