//! Finite-difference verification of every tape operation. The oracle is
//! central differencing of the forward pass only.

use stalab_core::gradcheck::{randn, GradCheck};
use stalab_core::gradcore::{Tape, Tensor};

fn strict() -> GradCheck {
    // linear/quadratic graphs: central differences are exact up to roundoff
    GradCheck {
        epsilon: 1e-5,
        rel_tol: 1e-6,
        probes_per_leaf: 8,
    }
}

fn standard() -> GradCheck {
    GradCheck::default()
}

#[test]
fn dense_random_layer_matches_finite_differences() {
    let w = randn(&[4, 3], 11);
    let x = randn(&[3], 12);
    let b = randn(&[4], 13);
    strict().assert(&[w, x, b], 100, |tape, ids| {
        let y = tape.dense(ids[0], ids[1], ids[2])?;
        tape.sq_sum(y)
    });
}

#[test]
fn dense_batched_columns_match_finite_differences() {
    let w = randn(&[5, 4], 21);
    let x = randn(&[4, 7], 22);
    let b = randn(&[5], 23);
    strict().assert(&[w, x, b], 101, |tape, ids| {
        let y = tape.dense(ids[0], ids[1], ids[2])?;
        tape.sq_sum(y)
    });
}

#[test]
fn conv2d_random_kernel_matches_finite_differences() {
    let x = randn(&[2, 5, 5], 31);
    let k = randn(&[2, 2, 3, 3], 32);
    strict().assert(&[x, k], 102, |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1])?;
        tape.sq_sum(y)
    });
}

#[test]
fn elementwise_and_pooling_ops_match_finite_differences() {
    // relu probes away from the kink: |x| > 0.1
    let mut x = randn(&[3, 4, 4], 41);
    for v in x.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.2_f64.copysign(*v);
        }
    }
    standard().assert(&[x.clone()], 103, |tape, ids| {
        let y = tape.relu(ids[0])?;
        tape.sq_sum(y)
    });
    standard().assert(&[x.clone()], 104, |tape, ids| {
        let y = tape.sigmoid(ids[0])?;
        tape.sq_sum(y)
    });
    standard().assert(&[x.clone()], 105, |tape, ids| {
        let y = tape.avgpool2(ids[0])?;
        tape.sq_sum(y)
    });
    standard().assert(&[x.clone()], 106, |tape, ids| {
        let y = tape.upsample2(ids[0])?;
        tape.sq_sum(y)
    });
    let b = randn(&[3], 42);
    standard().assert(&[x, b], 107, |tape, ids| {
        let y = tape.channel_bias(ids[0], ids[1])?;
        tape.sq_sum(y)
    });
}

#[test]
fn add_sub_scale_match_finite_differences() {
    let a = randn(&[6], 51);
    let b = randn(&[6], 52);
    strict().assert(&[a, b], 108, |tape, ids| {
        let s = tape.add(ids[0], ids[1])?;
        let d = tape.sub(s, ids[1])?;
        let c = tape.scale(d, 2.5)?;
        tape.sq_sum(c)
    });
}

#[test]
fn feature_norm_matches_finite_differences() {
    let x = randn(&[6, 5], 61);
    let g = randn(&[6], 62);
    let s = randn(&[6], 63);
    standard().assert(&[x, g, s], 109, |tape, ids| {
        let y = tape.feature_norm(ids[0], ids[1], ids[2])?;
        tape.sq_sum(y)
    });
}

#[test]
fn gram_matches_finite_differences() {
    let x = randn(&[3, 4, 4], 71);
    standard().assert(&[x], 110, |tape, ids| {
        let g = tape.gram(ids[0])?;
        tape.sq_sum(g)
    });
}

#[test]
fn deep_composite_graph_matches_finite_differences() {
    // dense -> norm -> relu -> dense -> sigmoid -> gram-style squared sum
    let w1 = randn(&[8, 5], 81);
    let b1 = randn(&[8], 82);
    let g1 = Tensor::full(&[8], 1.0);
    let s1 = Tensor::zeros(&[8]);
    let w2 = randn(&[4, 8], 83);
    let b2 = randn(&[4], 84);
    let x = randn(&[5, 6], 85);
    standard().assert(&[w1, b1, g1, s1, w2, b2, x], 111, |tape, ids| {
        let h = tape.dense(ids[0], ids[6], ids[1])?;
        let n = tape.feature_norm(h, ids[2], ids[3])?;
        let r = tape.relu(n)?;
        let o = tape.dense(ids[4], r, ids[5])?;
        let sg = tape.sigmoid(o)?;
        tape.sq_sum(sg)
    });
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2) elementwise to 1e-10
    let w = randn(&[4, 4], 91);
    let x = randn(&[4], 92);
    let bias = randn(&[4], 93);
    let (a, b) = (1.7, -0.4);

    let grads_of = |mode: u8| -> Vec<f64> {
        let mut tape = Tape::new();
        let wid = tape.leaf(w.clone(), true);
        let xid = tape.constant(x.clone());
        let bid = tape.leaf(bias.clone(), true);
        let y = tape.dense(wid, xid, bid).unwrap();
        let l1 = tape.sq_sum(y).unwrap();
        let r = tape.relu(y).unwrap();
        let l2 = tape.sq_sum(r).unwrap();
        let root = match mode {
            0 => l1,
            1 => l2,
            _ => {
                let sa = tape.scale(l1, a).unwrap();
                let sb = tape.scale(l2, b).unwrap();
                tape.add(sa, sb).unwrap()
            }
        };
        tape.backward(root).unwrap();
        let mut out = tape.grad(wid).unwrap().data().to_vec();
        out.extend_from_slice(tape.grad(bid).unwrap().data());
        out
    };

    let g1 = grads_of(0);
    let g2 = grads_of(1);
    let gc = grads_of(2);
    for i in 0..gc.len() {
        let expect = a * g1[i] + b * g2[i];
        assert!(
            (gc[i] - expect).abs() < 1e-10,
            "component {i}: {} vs {expect}",
            gc[i]
        );
    }
}

#[test]
fn gradients_are_deterministic_for_identical_graphs() {
    let run = || -> u64 {
        let w = randn(&[6, 6], 7);
        let x = randn(&[6, 3], 8);
        let b = randn(&[6], 9);
        let mut tape = Tape::new();
        let wid = tape.leaf(w, true);
        let xid = tape.constant(x);
        let bid = tape.leaf(b, true);
        let y = tape.dense(wid, xid, bid).unwrap();
        let r = tape.relu(y).unwrap();
        let s = tape.sq_sum(r).unwrap();
        tape.backward(s).unwrap();
        tape.grad(wid).unwrap().fingerprint() ^ tape.grad(bid).unwrap().fingerprint()
    };
    assert_eq!(run(), run());
}
