//! First-order update rules shared by backbone training and test-time
//! adaptation. State is indexed positionally so updates stay deterministic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// w ← w − λ·g
    PlainGd,
    /// heavy-ball momentum, μ = 0.9
    Momentum,
    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8 and bias correction
    AdaptiveMoments,
}

const MOMENTUM_MU: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimState {
    kind: OptimizerKind,
    slots: Vec<Slot>,
    step: u64,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        OptimState {
            kind,
            slots: vec![
                Slot {
                    m: Vec::new(),
                    v: Vec::new(),
                };
                n_params
            ],
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the per-parameter `apply` calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn apply(&mut self, index: usize, weights: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(weights.len(), grads.len());
        let slot = &mut self.slots[index];
        match self.kind {
            OptimizerKind::PlainGd => {
                for (w, &g) in weights.iter_mut().zip(grads) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::Momentum => {
                if slot.m.len() != weights.len() {
                    slot.m = vec![0.0; weights.len()];
                }
                for ((w, &g), m) in weights.iter_mut().zip(grads).zip(&mut slot.m) {
                    *m = MOMENTUM_MU * *m + g;
                    *w -= lr * *m;
                }
            }
            OptimizerKind::AdaptiveMoments => {
                if slot.m.len() != weights.len() {
                    slot.m = vec![0.0; weights.len()];
                    slot.v = vec![0.0; weights.len()];
                }
                let t = self.step.max(1) as f64;
                let bc1 = 1.0 - ADAM_BETA1.powf(t);
                let bc2 = 1.0 - ADAM_BETA2.powf(t);
                for (i, (w, &g)) in weights.iter_mut().zip(grads).enumerate() {
                    let m = &mut slot.m[i];
                    let v = &mut slot.v[i];
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gd_is_the_literal_update_rule() {
        let mut opt = OptimState::new(OptimizerKind::PlainGd, 1);
        let mut w = vec![1.0, -2.0];
        opt.begin_step();
        opt.apply(0, &mut w, &[0.5, 0.25], 0.1);
        assert_eq!(w, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        for kind in [
            OptimizerKind::PlainGd,
            OptimizerKind::Momentum,
            OptimizerKind::AdaptiveMoments,
        ] {
            let mut opt = OptimState::new(kind, 1);
            let mut w = vec![0.75_f64, -0.125];
            let before = w.clone();
            for _ in 0..3 {
                opt.begin_step();
                opt.apply(0, &mut w, &[1.0, -4.0], 0.0);
            }
            assert_eq!(w, before);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the very first Adam step is ≈ lr·sign(g)
        let mut opt = OptimState::new(OptimizerKind::AdaptiveMoments, 1);
        let mut w = vec![0.0];
        opt.begin_step();
        opt.apply(0, &mut w, &[3.0], 0.01);
        assert!((w[0] + 0.01).abs() < 1e-6, "got {}", w[0]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut opt = OptimState::new(OptimizerKind::Momentum, 1);
        let mut w = vec![0.0];
        opt.begin_step();
        opt.apply(0, &mut w, &[1.0], 0.1);
        assert!((w[0] + 0.1).abs() < 1e-15);
        opt.begin_step();
        opt.apply(0, &mut w, &[1.0], 0.1);
        // second step velocity = 0.9 + 1.0
        assert!((w[0] + 0.1 + 0.19).abs() < 1e-15);
    }
}
