//! Adam over latent full-precision parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, SegmentGrads};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shrink parameters directly instead of adding `λ·param` to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decoupled: false,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Moment estimates for every parameter of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<Tensor<T>>>,
    v: Vec<Vec<Tensor<T>>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &ModelGraph<T>, config: AdamConfig) -> Self {
        let zeros =
            |n: &crate::graph::LayerNode<T>| n.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            m: model.nodes.iter().map(zeros).collect(),
            v: model.nodes.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, node: usize, slot: usize) -> &Tensor<T> {
        &self.m[node][slot]
    }

    pub fn second_moment(&self, node: usize, slot: usize) -> &Tensor<T> {
        &self.v[node][slot]
    }

    /// Advances the step counter; call once per batch before any segment update.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates the parameters named in `grads` using the current step counter.
    pub fn update_segment(&mut self, model: &mut ModelGraph<T>, grads: &SegmentGrads<T>) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFiniteGradient { segment: grads.segment });
        }
        if self.t == 0 {
            return Err(Error::InvalidArgument("begin_step must precede updates".into()));
        }
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps, wd) = (T::of(c.learning_rate), T::of(c.eps), T::of(c.weight_decay));
        let bc1 = T::one() - T::of(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.t as i32));
        for (node, node_grads) in &grads.params {
            let params = &mut model.nodes[*node].params;
            if node_grads.len() != params.len() {
                return Err(Error::InvalidArgument(format!(
                    "node {node}: {} gradients for {} parameters",
                    node_grads.len(),
                    params.len()
                )));
            }
            for (slot, g) in node_grads.iter().enumerate() {
                let p = &mut params[slot];
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam",
                        expected: p.shape().to_vec(),
                        actual: g.shape().to_vec(),
                    }
                    .at_node(*node));
                }
                let m = self.m[*node][slot].data_mut();
                let v = self.v[*node][slot].data_mut();
                let w = p.data_mut();
                let n = w.len();
                let (w, g, m, v) = (&mut w[..n], &g.data()[..n], &mut m[..n], &mut v[..n]);
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                let shrink = lr * wd;
                for i in 0..n {
                    let gi = if c.decoupled { g[i] } else { g[i] + wd * w[i] };
                    m[i] = b1 * m[i] + one_b1 * gi;
                    v[i] = b2 * v[i] + one_b2 * gi * gi;
                    let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    if c.decoupled {
                        w[i] -= shrink * w[i];
                    }
                    w[i] -= update;
                }
            }
        }
        Ok(())
    }

    /// One full step: every segment's gradients are checked before any parameter moves.
    pub fn step(&mut self, model: &mut ModelGraph<T>, grads: &[SegmentGrads<T>]) -> Result<()> {
        if let Some(bad) = grads.iter().find(|g| !g.all_finite()) {
            return Err(Error::NonFiniteGradient { segment: bad.segment });
        }
        self.begin_step();
        for g in grads {
            self.update_segment(model, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ArchSpec, Architecture, LayerKind, LayerNode};

    fn scalar_model(w: f64) -> ModelGraph<f64> {
        let mut d = LayerNode::new(0, LayerKind::Dense { inputs: 1, outputs: 2 });
        d.params = vec![Tensor::from_f64([2, 1], &[w, -w]).unwrap(), Tensor::zeros(vec![2])];
        ModelGraph::from_nodes(
            ArchSpec::new(Architecture::MlpPlain, &[1, 1, 1], 2),
            vec![d],
            vec![1],
            2,
        )
        .unwrap()
    }

    fn grads(g: &[f64]) -> SegmentGrads<f64> {
        SegmentGrads {
            segment: 0,
            params: vec![(0, vec![Tensor::from_f64([2, 1], g).unwrap(), Tensor::zeros(vec![2])])],
            ste_crossings: 0,
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters() {
        let mut m = scalar_model(0.7);
        let before = m.clone();
        let mut adam = AdamState::new(&m, AdamConfig::default().with_weight_decay(0.0));
        adam.step(&mut m, &[grads(&[0.0, 0.0])]).unwrap();
        assert_eq!(m, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_the_learning_rate() {
        for scale in [1.0, 1000.0] {
            let mut m = scalar_model(0.5);
            let mut adam = AdamState::new(
                &m,
                AdamConfig::default().with_learning_rate(0.01).with_weight_decay(0.0),
            );
            adam.step(&mut m, &[grads(&[0.3 * scale, -2.0 * scale])]).unwrap();
            let w = m.nodes[0].params[0].data();
            assert!((w[0] - (0.5 - 0.01)).abs() < 1e-3 * 0.01, "{}", w[0]);
            assert!((w[1] - (-0.5 + 0.01)).abs() < 1e-3 * 0.01, "{}", w[1]);
        }
    }

    /// Scalar reference written out longhand.
    fn reference(steps: usize, lr: f64, wd: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (3.0f64, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * (w - 1.0) + wd * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        let (lr, wd) = (0.1, 1e-2);
        let expected = reference(10, lr, wd);
        let mut m = scalar_model(3.0);
        let mut adam = AdamState::new(&m, AdamConfig::default().with_learning_rate(lr).with_weight_decay(wd));
        for want in expected {
            let w = m.nodes[0].params[0].data()[0];
            adam.step(&mut m, &[grads(&[2.0 * (w - 1.0), 0.0])]).unwrap();
            assert!((m.nodes[0].params[0].data()[0] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn decay_alone_shrinks_toward_zero() {
        for decoupled in [false, true] {
            let mut m = scalar_model(0.8);
            let mut cfg = AdamConfig::default().with_learning_rate(0.01).with_weight_decay(0.5);
            cfg.decoupled = decoupled;
            let mut adam = AdamState::new(&m, cfg);
            let mut prev = 0.8;
            for _ in 0..20 {
                adam.step(&mut m, &[grads(&[0.0, 0.0])]).unwrap();
                let w = m.nodes[0].params[0].data()[0];
                assert!(w < prev && w > 0.0);
                prev = w;
            }
        }
    }

    #[test]
    fn nan_gradient_aborts_and_names_segment() {
        let mut m = scalar_model(0.1);
        let before = m.clone();
        let mut adam = AdamState::new(&m, AdamConfig::default());
        let mut g = grads(&[f64::NAN, 0.0]);
        g.segment = 3;
        assert!(matches!(
            adam.step(&mut m, &[g]),
            Err(Error::NonFiniteGradient { segment: 3 })
        ));
        assert_eq!(m, before);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn second_moment_stays_nonnegative() {
        let mut m = scalar_model(0.1);
        let mut adam = AdamState::new(&m, AdamConfig::default());
        for i in 0..5 {
            adam.step(&mut m, &[grads(&[(i as f64 - 2.0) * 0.7, 1.0])]).unwrap();
        }
        assert!(adam.second_moment(0, 0).data().iter().all(|&v| v >= 0.0));
    }
}
