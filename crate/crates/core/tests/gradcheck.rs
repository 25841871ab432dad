//! Finite-difference verification of every tape operation's adjoint.
//!
//! For each op, 20 seeded random inputs are pushed through a graph whose
//! scalar root is a weighted sum of the op's output; the analytic gradient
//! from the reverse sweep must match central differences (h = 1e-5) within
//! relative error 1e-4. Inputs are drawn away from the kinks of relu, abs,
//! and max so the differences are taken on smooth ground.

use crex_core::tensor::{NodeId, Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;
const SEEDS: u64 = 20;

#[derive(Clone, Copy)]
enum Draw {
    /// Magnitudes in [0.1, 1], random sign.
    Signed,
    /// Values in [0.1, 1].
    Positive,
    /// Signed, with column entries separated by at least 1e-3 (for max).
    SeparatedColumns,
}

fn draw_tensor(rng: &mut ChaCha8Rng, shape: &[usize], draw: Draw) -> Tensor {
    loop {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let magnitude = 0.1 + 0.9 * rng.gen::<f64>();
                match draw {
                    Draw::Positive => magnitude,
                    _ => {
                        if rng.gen::<bool>() {
                            magnitude
                        } else {
                            -magnitude
                        }
                    }
                }
            })
            .collect();
        let tensor = Tensor::new(shape.to_vec(), values).unwrap();
        if !matches!(draw, Draw::SeparatedColumns) || columns_separated(&tensor) {
            return tensor;
        }
    }
}

fn columns_separated(t: &Tensor) -> bool {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    for j in 0..cols {
        let mut col: Vec<f64> = (0..rows).map(|i| t.values()[i * cols + j]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if col.windows(2).any(|w| w[1] - w[0] < 1e-3) {
            return false;
        }
    }
    true
}

/// Runs the check for one op configuration.
fn check_op<F>(name: &str, inputs: &[(&[usize], Draw)], builder: F)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|(shape, draw)| draw_tensor(&mut rng, shape, *draw))
            .collect();

        // Probe the output shape, then fix projection weights for the seed.
        let out_shape = {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = leaves.iter().map(|t| tape.param(t.clone())).collect();
            let out = builder(&mut tape, &ids);
            tape.value(out).shape().to_vec()
        };
        let weights: Vec<f64> = (0..out_shape.iter().product::<usize>())
            .map(|_| 0.5 + rng.gen::<f64>())
            .collect();

        let evaluate = |leaf_values: &[Tensor]| -> (Tape, NodeId, Vec<NodeId>) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = leaf_values.iter().map(|t| tape.param(t.clone())).collect();
            let out = builder(&mut tape, &ids);
            let root = if tape.value(out).is_scalar() {
                out
            } else {
                let w = tape
                    .constant(Tensor::new(out_shape.clone(), weights.clone()).unwrap());
                let weighted = tape.mul(out, w);
                tape.sum(weighted)
            };
            (tape, root, ids)
        };

        let (tape, root, ids) = evaluate(&leaves);
        let analytic = tape.backward(root).unwrap();

        for (li, leaf) in leaves.iter().enumerate() {
            let grad = analytic.get(ids[li]).unwrap();
            for j in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].values_mut()[j] += H;
                let mut minus = leaves.clone();
                minus[li].values_mut()[j] -= H;
                let f_plus = {
                    let (t, r, _) = evaluate(&plus);
                    t.value(r).item()
                };
                let f_minus = {
                    let (t, r, _) = evaluate(&minus);
                    t.value(r).item()
                };
                let numeric = (f_plus - f_minus) / (2.0 * H);
                let a = grad.values()[j];
                let err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                assert!(
                    err <= ABS_FLOOR || err <= REL_TOL * scale,
                    "{}: seed {}, leaf {}, element {}: analytic {} vs numeric {}",
                    name,
                    seed,
                    li,
                    j,
                    a,
                    numeric
                );
            }
        }
    }
}

#[test]
fn grad_embed() {
    check_op("embed", &[(&[6, 3], Draw::Signed)], |tape, ids| {
        tape.embed(ids[0], &[0, 2, 5, 2])
    });
}

#[test]
fn grad_gather_rows() {
    check_op("gather_rows", &[(&[5, 3], Draw::Signed)], |tape, ids| {
        tape.gather_rows(ids[0], &[4, 0, 2, 2])
    });
}

#[test]
fn grad_row_col_pick() {
    check_op("row", &[(&[4, 3], Draw::Signed)], |tape, ids| tape.row(ids[0], 2));
    check_op("col", &[(&[4, 3], Draw::Signed)], |tape, ids| tape.col(ids[0], 1));
    check_op("pick", &[(&[5], Draw::Signed)], |tape, ids| tape.pick(ids[0], 3));
}

#[test]
fn grad_matmul() {
    check_op(
        "matmul",
        &[(&[3, 4], Draw::Signed), (&[4, 2], Draw::Signed)],
        |tape, ids| tape.matmul(ids[0], ids[1]),
    );
}

#[test]
fn grad_matvec() {
    check_op(
        "matvec",
        &[(&[3, 4], Draw::Signed), (&[4], Draw::Signed)],
        |tape, ids| tape.matvec(ids[0], ids[1]),
    );
}

#[test]
fn grad_conv1d() {
    check_op(
        "conv1d",
        &[(&[5, 2], Draw::Signed), (&[3, 4], Draw::Signed)],
        |tape, ids| tape.conv1d(ids[0], ids[1], 2),
    );
}

#[test]
fn grad_add_row_scale_rows() {
    check_op(
        "add_row",
        &[(&[4, 3], Draw::Signed), (&[3], Draw::Signed)],
        |tape, ids| tape.add_row(ids[0], ids[1]),
    );
    check_op(
        "scale_rows",
        &[(&[4, 3], Draw::Signed), (&[4], Draw::Signed)],
        |tape, ids| tape.scale_rows(ids[0], ids[1]),
    );
}

#[test]
fn grad_max_over_time() {
    check_op(
        "max_over_time",
        &[(&[5, 3], Draw::SeparatedColumns)],
        |tape, ids| tape.max_over_time(ids[0]),
    );
}

#[test]
fn grad_elementwise_unary() {
    check_op("relu", &[(&[6], Draw::Signed)], |tape, ids| tape.relu(ids[0]));
    check_op("sigmoid", &[(&[6], Draw::Signed)], |tape, ids| tape.sigmoid(ids[0]));
    check_op("tanh", &[(&[6], Draw::Signed)], |tape, ids| tape.tanh(ids[0]));
    check_op("abs", &[(&[6], Draw::Signed)], |tape, ids| tape.abs(ids[0]));
    check_op("neg", &[(&[6], Draw::Signed)], |tape, ids| tape.neg(ids[0]));
}

#[test]
fn grad_softmax() {
    check_op("softmax_vec", &[(&[5], Draw::Signed)], |tape, ids| tape.softmax(ids[0]));
    check_op("softmax_rows", &[(&[3, 4], Draw::Signed)], |tape, ids| {
        tape.softmax(ids[0])
    });
}

#[test]
fn grad_log_guard() {
    check_op("log_guard", &[(&[5], Draw::Positive)], |tape, ids| tape.log_guard(ids[0]));
}

#[test]
fn grad_concat_stack_flatten_transpose() {
    check_op(
        "concat",
        &[(&[3], Draw::Signed), (&[2], Draw::Signed), (&[4], Draw::Signed)],
        |tape, ids| tape.concat(ids),
    );
    check_op(
        "stack_rows",
        &[(&[3], Draw::Signed), (&[3], Draw::Signed)],
        |tape, ids| tape.stack_rows(ids),
    );
    check_op("flatten", &[(&[3, 4], Draw::Signed)], |tape, ids| tape.flatten(ids[0]));
    check_op("transpose", &[(&[3, 4], Draw::Signed)], |tape, ids| {
        tape.transpose(ids[0])
    });
}

#[test]
fn grad_binary_and_const() {
    check_op(
        "add",
        &[(&[5], Draw::Signed), (&[5], Draw::Signed)],
        |tape, ids| tape.add(ids[0], ids[1]),
    );
    check_op(
        "sub",
        &[(&[5], Draw::Signed), (&[5], Draw::Signed)],
        |tape, ids| tape.sub(ids[0], ids[1]),
    );
    check_op(
        "mul",
        &[(&[5], Draw::Signed), (&[5], Draw::Signed)],
        |tape, ids| tape.mul(ids[0], ids[1]),
    );
    check_op("mul_const", &[(&[5], Draw::Signed)], |tape, ids| {
        tape.mul_const(ids[0], -1.7)
    });
    check_op("add_const", &[(&[5], Draw::Signed)], |tape, ids| {
        tape.add_const(ids[0], 0.3)
    });
}

#[test]
fn grad_div_scalar() {
    check_op(
        "div_scalar",
        &[(&[4], Draw::Signed), (&[3], Draw::Positive)],
        |tape, ids| {
            let denom = tape.sum(ids[1]);
            tape.div_scalar(ids[0], denom)
        },
    );
}

#[test]
fn grad_reductions() {
    check_op("sum", &[(&[6], Draw::Signed)], |tape, ids| tape.sum(ids[0]));
    check_op("mean", &[(&[6], Draw::Signed)], |tape, ids| tape.mean(ids[0]));
    check_op("mean_rows", &[(&[4, 3], Draw::Signed)], |tape, ids| {
        tape.mean_rows(ids[0])
    });
    check_op("l1", &[(&[6], Draw::Signed)], |tape, ids| tape.l1(ids[0]));
}

#[test]
fn grad_cosine() {
    check_op(
        "cosine",
        &[(&[5], Draw::Signed), (&[5], Draw::Signed)],
        |tape, ids| tape.cosine(ids[0], ids[1]),
    );
}

#[test]
fn grad_composite_classifier_path() {
    // A miniature classifier: embedding -> conv -> relu -> max pool ->
    // linear -> softmax -> guarded cross-entropy. Exercises the adjoints
    // in the composition the real models use.
    check_op(
        "composite",
        &[
            (&[6, 3], Draw::Signed),  // embedding table
            (&[2, 6], Draw::Signed),  // conv kernel, width 2
            (&[2], Draw::Signed),     // conv bias
            (&[2, 2], Draw::Signed),  // head
            (&[2], Draw::Signed),     // head bias
        ],
        |tape, ids| {
            let emb = tape.embed(ids[0], &[1, 4, 2, 5]);
            let conv = tape.conv1d(emb, ids[1], 2);
            let conv = tape.add_row(conv, ids[2]);
            let conv = tape.relu(conv);
            let pooled = tape.max_over_time(conv);
            let logits_w = tape.matvec(ids[3], pooled);
            let logits = tape.add(logits_w, ids[4]);
            let probs = tape.softmax(logits);
            let p = tape.pick(probs, 1);
            let log = tape.log_guard(p);
            tape.neg(log)
        },
    );
}
