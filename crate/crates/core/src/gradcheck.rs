//! Central finite-difference gradient checking. Test support: the oracle
//! only ever evaluates the forward pass, so it stays independent of the
//! backward implementation it verifies.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcore::{NodeId, Tape, Tensor};

pub struct GradCheck {
    pub epsilon: f64,
    pub rel_tol: f64,
    /// probes per leaf; all coordinates when a leaf has fewer
    pub probes_per_leaf: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-5,
            rel_tol: 1e-4,
            probes_per_leaf: 6,
        }
    }
}

pub struct GradReport {
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradCheck {
    /// Checks analytic gradients of `build` (which must return a scalar
    /// root) against central differences at randomly probed coordinates
    /// of every leaf. `leaves` are the starting tensors, all of which are
    /// registered with requires_grad.
    pub fn run(
        &self,
        leaves: &[Tensor],
        seed: u64,
        build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    ) -> Result<GradReport> {
        let eval = |tensors: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let root = build(&mut tape, &ids)?;
            let value = tape.value(root).item().expect("scalar root");
            tape.backward(root)?;
            let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
            Ok((value, grads))
        };

        let (_, analytic) = eval(leaves)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut max_rel = 0.0f64;
        let mut probes = 0;

        for (li, leaf) in leaves.iter().enumerate() {
            let n = leaf.numel();
            let coords: Vec<usize> = if n <= self.probes_per_leaf {
                (0..n).collect()
            } else {
                (0..self.probes_per_leaf)
                    .map(|_| rng.random_range(0..n))
                    .collect()
            };
            for ci in coords {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[ci] += self.epsilon;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[ci] -= self.epsilon;
                let (fp, _) = eval(&plus)?;
                let (fm, _) = eval(&minus)?;
                let numeric = (fp - fm) / (2.0 * self.epsilon);
                let exact = analytic[li]
                    .as_ref()
                    .map(|g| g.data()[ci])
                    .unwrap_or(0.0);
                let denom = exact.abs().max(numeric.abs()).max(1e-8);
                let rel = (exact - numeric).abs() / denom;
                max_rel = max_rel.max(rel);
                probes += 1;
            }
        }
        Ok(GradReport {
            max_rel_err: max_rel,
            probes,
        })
    }

    /// Panicking variant for use inside tests.
    pub fn assert(
        &self,
        leaves: &[Tensor],
        seed: u64,
        build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    ) {
        let report = self.run(leaves, seed, build).expect("gradcheck forward failed");
        assert!(
            report.max_rel_err < self.rel_tol,
            "finite-difference mismatch: max rel err {:.3e} over {} probes (tol {:.1e})",
            report.max_rel_err,
            report.probes,
            self.rel_tol
        );
    }
}

/// Seeded standard-normal tensor for randomized checks.
pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite draws")
}
