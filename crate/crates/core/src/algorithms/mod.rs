//! Training strategies: backpropagation and four local alternatives.
//!
//! Every strategy turns a batch into per-segment gradients. Update-unlocked
//! strategies (DRTP, HSIC, SigpropTL) hand each segment's gradients to the
//! caller as soon as that segment is done, before the next segment runs its
//! forward pass, and release the segment's buffers right away.

mod feedback;
pub mod hsic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use feedback::{make_feedback, FeedbackMatrices};
pub use hsic::{HsicTargets, SigmaPolicy};

use crate::error::{Error, Result};
use crate::graph::{BufferMeter, ErrorSignal, Mode, ModelGraph, Retention, SegmentGrads};
use crate::scalar::Scalar;
use crate::tensor::{softmax, softmax_cross_entropy, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Bp,
    Dfa,
    Drtp,
    Hsic,
    SigpropTl,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::Bp,
        AlgorithmKind::Dfa,
        AlgorithmKind::Drtp,
        AlgorithmKind::Hsic,
        AlgorithmKind::SigpropTl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Bp => "bp",
            AlgorithmKind::Dfa => "dfa",
            AlgorithmKind::Drtp => "drtp",
            AlgorithmKind::Hsic => "hsic",
            AlgorithmKind::SigpropTl => "sigprop-tl",
        }
    }

    /// Updates segment `k` before segment `k+1` has run, holding one segment's buffers.
    pub fn update_unlocked(self) -> bool {
        matches!(
            self,
            AlgorithmKind::Drtp | AlgorithmKind::Hsic | AlgorithmKind::SigpropTl
        )
    }

    pub fn retention(self) -> Retention {
        if self.update_unlocked() {
            Retention::None
        } else {
            Retention::All
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'")))
    }
}

/// Per-kind hyperparameters beyond the learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    pub hsic_gamma: f64,
    pub hsic_sigma: SigmaPolicy,
    pub sigprop_alpha: f64,
    /// Use `−B_k·y*` instead of `B_k·y*` as the DRTP error signal.
    pub drtp_negate: bool,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            hsic_gamma: 20.0,
            hsic_sigma: SigmaPolicy::Median,
            sigprop_alpha: 0.1,
            drtp_negate: false,
        }
    }
}

/// What a step reports besides gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Mean cross-entropy at the network output.
    pub loss: f64,
    /// Correctly classified samples in the batch.
    pub correct: usize,
    /// Local objective per hidden segment (HSIC objective, SigpropTL target loss).
    pub local_objectives: Vec<f64>,
    pub buffers: BufferMeter,
}

pub type SegmentSink<'a, T> = dyn FnMut(&mut ModelGraph<T>, SegmentGrads<T>) -> Result<()> + 'a;

#[derive(Clone, Debug)]
pub struct TrainingStrategy<T> {
    pub kind: AlgorithmKind,
    pub feedback: Option<FeedbackMatrices<T>>,
    pub params: StrategyParams,
}

impl<T: Scalar> TrainingStrategy<T> {
    /// Draws any feedback matrices the kind needs from `rng`.
    pub fn new(kind: AlgorithmKind, model: &ModelGraph<T>, params: StrategyParams, rng: &mut Rng) -> Result<Self> {
        let feedback = make_feedback(kind, model, rng, params.sigprop_alpha)?;
        Ok(Self { kind, feedback, params })
    }

    fn feedback(&self) -> Result<&FeedbackMatrices<T>> {
        self.feedback.as_ref().ok_or(Error::MissingFeedback { segment: 0 })
    }

    /// Runs one training step on `(x, labels)`.
    ///
    /// `sink` receives each segment's gradients; it may update the model.
    /// Update-unlocked kinds call it as soon as a segment finishes, the
    /// others once the whole backward pass is done.
    pub fn step(
        &self,
        model: &mut ModelGraph<T>,
        x: &Tensor<T>,
        labels: &[usize],
        sink: &mut SegmentSink<'_, T>,
    ) -> Result<StepStats> {
        if labels.len() != x.dim(0) {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {}",
                labels.len(),
                x.dim(0)
            )));
        }
        let targets = Tensor::one_hot(labels, model.num_classes)?;
        match self.kind {
            AlgorithmKind::Bp => self.step_bp(model, x, &targets, sink),
            AlgorithmKind::Dfa => self.step_dfa(model, x, &targets, sink),
            AlgorithmKind::Drtp | AlgorithmKind::Hsic => self.step_local(model, x, &targets, sink),
            AlgorithmKind::SigpropTl => self.step_sigprop(model, x, &targets, sink),
        }
    }

    /// Gradients of one step without touching the parameters.
    pub fn compute_grads(
        &self,
        model: &mut ModelGraph<T>,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(Vec<SegmentGrads<T>>, StepStats)> {
        let mut grads = Vec::new();
        let stats = self.step(model, x, labels, &mut |_, g| {
            grads.push(g);
            Ok(())
        })?;
        grads.sort_by_key(|g| g.segment);
        Ok((grads, stats))
    }

    fn step_bp(
        &self,
        model: &mut ModelGraph<T>,
        x: &Tensor<T>,
        targets: &Tensor<T>,
        sink: &mut SegmentSink<'_, T>,
    ) -> Result<StepStats> {
        let mut meter = BufferMeter::default();
        let (logits, mut trace) = model.forward_metered(x.clone(), Mode::Train, Retention::All, &mut meter)?;
        let (loss, err) = softmax_cross_entropy(&logits, targets)?;
        let mut delta = ErrorSignal::fresh(err);
        let mut grads = Vec::with_capacity(model.segment_count());
        for k in (0..model.segment_count()).rev() {
            let t = trace.take(k)?;
            let back = model.segment_backward(&t, delta, k > 0)?;
            meter.release(t);
            grads.push(back.grads);
            delta = match back.input_error {
                Some(e) => e,
                None => break,
            };
        }
        for g in grads.into_iter().rev() {
            sink(model, g)?;
        }
        Ok(stats(loss, &logits, targets, Vec::new(), meter))
    }

    fn step_dfa(
        &self,
        model: &mut ModelGraph<T>,
        x: &Tensor<T>,
        targets: &Tensor<T>,
        sink: &mut SegmentSink<'_, T>,
    ) -> Result<StepStats> {
        let fb = self.feedback()?;
        let mut meter = BufferMeter::default();
        let (logits, mut trace) = model.forward_metered(x.clone(), Mode::Train, Retention::All, &mut meter)?;
        let (loss, err) = softmax_cross_entropy(&logits, targets)?;
        let last = model.segment_count() - 1;
        let mut grads = Vec::with_capacity(last + 1);
        for k in 0..=last {
            let delta = if k == last {
                err.clone()
            } else {
                fb.project_hidden(k, &err, model.segment_output_shape(k))?
            };
            let t = trace.take(k)?;
            grads.push(model.segment_backward(&t, ErrorSignal::fresh(delta), false)?.grads);
            meter.release(t);
        }
        for g in grads {
            sink(model, g)?;
        }
        Ok(stats(loss, &logits, targets, Vec::new(), meter))
    }

    /// DRTP and HSIC: one segment forward, its local error, its update, then the next.
    fn step_local(
        &self,
        model: &mut ModelGraph<T>,
        x: &Tensor<T>,
        targets: &Tensor<T>,
        sink: &mut SegmentSink<'_, T>,
    ) -> Result<StepStats> {
        let last = model.segment_count() - 1;
        let hsic_targets = if self.kind == AlgorithmKind::Hsic {
            let flat = x.clone().reshape(vec![x.dim(0), x.row_len()])?;
            Some(HsicTargets::new(&flat, targets, self.params.hsic_sigma)?)
        } else {
            None
        };
        let drtp_signal = if self.params.drtp_negate {
            targets.scale(-T::one())?
        } else {
            targets.clone()
        };
        let mut meter = BufferMeter::default();
        let mut objectives = Vec::with_capacity(last);
        let mut y = x.clone();
        for k in 0..last {
            let (out, t) = model.forward_segment(k, y, Mode::Train, true)?;
            let t = t.expect("retained");
            meter.retain(&t);
            let delta = match &hsic_targets {
                Some(ht) => {
                    let z = out.clone().reshape(vec![out.dim(0), out.row_len()])?;
                    let (obj, g) = hsic::hsic_objective_grad(&z, ht, self.params.hsic_gamma, self.params.hsic_sigma)?;
                    objectives.push(obj.as_f64());
                    g.reshape(out.shape().to_vec())?
                }
                None => self
                    .feedback()?
                    .project_hidden(k, &drtp_signal, model.segment_output_shape(k))?,
            };
            let back = model.segment_backward(&t, ErrorSignal::fresh(delta), false)?;
            meter.release(t);
            sink(model, back.grads)?;
            y = out;
        }
        let (logits, t) = model.forward_segment(last, y, Mode::Train, true)?;
        let t = t.expect("retained");
        meter.retain(&t);
        let (loss, err) = softmax_cross_entropy(&logits, targets)?;
        let back = model.segment_backward(&t, ErrorSignal::fresh(err), false)?;
        meter.release(t);
        sink(model, back.grads)?;
        Ok(stats(loss, &logits, targets, objectives, meter))
    }

    fn step_sigprop(
        &self,
        model: &mut ModelGraph<T>,
        x: &Tensor<T>,
        targets: &Tensor<T>,
        sink: &mut SegmentSink<'_, T>,
    ) -> Result<StepStats> {
        let n = x.dim(0);
        let (first, _) = model.forward(x.clone(), Mode::Train, Retention::None)?;
        let err = softmax(&first)?.sub(targets)?;
        let x_target = sigprop_target_input(self.feedback()?, x, &err, &model.input_shape)?;

        let last = model.segment_count() - 1;
        let inv_n = T::one() / T::of(n as f64);
        let mut meter = BufferMeter::default();
        let mut objectives = Vec::with_capacity(last);
        let (mut y, mut y_target) = (x.clone(), x_target);
        for k in 0..last {
            let (out, t) = model.forward_segment(k, y, Mode::TrainFrozenStats, true)?;
            let t = t.expect("retained");
            meter.retain(&t);
            let (out_target, _) = model.forward_segment(k, y_target, Mode::TrainFrozenStats, false)?;
            let diff = out.sub(&out_target)?;
            objectives.push(0.5 * diff.dot(&diff)?.as_f64() / n as f64);
            let back = model.segment_backward(&t, ErrorSignal::fresh(diff.scale(inv_n)?), false)?;
            meter.release(t);
            sink(model, back.grads)?;
            y = out;
            y_target = out_target;
        }
        let (logits, t) = model.forward_segment(last, y, Mode::TrainFrozenStats, true)?;
        let t = t.expect("retained");
        meter.retain(&t);
        let (loss, err) = softmax_cross_entropy(&logits, targets)?;
        let back = model.segment_backward(&t, ErrorSignal::fresh(err), false)?;
        meter.release(t);
        sink(model, back.grads)?;
        Ok(stats(loss, &logits, targets, objectives, meter))
    }
}

/// `x* = x − reshape(e · B_0)`, with `e` the per-sample output error.
pub fn sigprop_target_input<T: Scalar>(
    fb: &FeedbackMatrices<T>,
    x: &Tensor<T>,
    err: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    x.sub(&fb.project_input(err, input_shape)?)
}

fn stats<T: Scalar>(
    loss: T,
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    local: Vec<f64>,
    meter: BufferMeter,
) -> StepStats {
    let truth = targets.argmax_rows();
    let correct = logits.argmax_rows().iter().zip(&truth).filter(|(a, b)| a == b).count();
    StepStats {
        loss: loss.as_f64(),
        correct,
        local_objectives: local,
        buffers: meter,
    }
}

/// Cosine similarity of two equally shaped gradient sets.
pub fn cosine_similarity<T: Scalar>(a: &SegmentGrads<T>, b: &SegmentGrads<T>) -> f64 {
    let (fa, fb) = (a.flat(), b.flat());
    let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = fa.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = fb.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
