//! Helpers shared by the gradient and acceptance test targets.
#![allow(dead_code)] // each test target uses a different subset

use dex_tts::aligner::{path_score, AlignmentPath, LikelihoodMatrix};
use dex_tts::tensor::{grad_check, NormKind, PadMode, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Reduce any output to a scalar through a fixed random projection so the
/// check exercises every output coordinate.
pub fn to_scalar(tape: &mut Tape, y: Var, seed: u64) -> dex_tts::Result<Var> {
    let probe = randn(tape.shape(y), seed);
    let p = tape.constant(probe)?;
    let prod = tape.mul(y, p)?;
    tape.sum_all(prod)
}

/// Finite-difference check of one op on each listed input shape; returns the
/// worst relative error observed.
pub fn check<F>(name: &str, shapes: &[&[usize]], f: F) -> f64
where
    F: Fn(&mut Tape, Var) -> dex_tts::Result<Var>,
{
    let mut worst: f64 = 0.0;
    for (i, shape) in shapes.iter().enumerate() {
        let x = randn(shape, 100 + i as u64);
        let err = grad_check(
            |tape, v| {
                let y = f(tape, v)?;
                to_scalar(tape, y, 7)
            },
            &x,
            GRAD_STEP,
        )
        .unwrap();
        assert!(err <= GRAD_TOL, "{name} on {shape:?}: max rel error {err}");
        worst = worst.max(err);
    }
    worst
}

/// Runs the finite-difference sweep over the whole differentiable op set,
/// each on two distinct input shapes. Returns the worst relative error.
/// The straight-through substitution is excluded by construction (its forward
/// is a constant replacement; its estimator contract has a dedicated check).
pub fn op_gradient_suite() -> f64 {
    let mut worst: f64 = 0.0;
    let mut track = |e: f64| worst = worst.max(e);

    track(check("add", &[&[2, 3], &[4]], |t, v| {
        let c = t.constant(randn(t.shape(v), 1))?;
        t.add(v, c)
    }));
    track(check("sub", &[&[2, 3], &[5]], |t, v| {
        let c = t.constant(randn(t.shape(v), 2))?;
        t.sub(c, v)
    }));
    track(check("mul", &[&[2, 3], &[3, 1, 2]], |t, v| {
        let c = t.constant(randn(t.shape(v), 3))?;
        t.mul(v, c)
    }));
    track(check("mul_self", &[&[2, 3], &[7]], |t, v| t.mul(v, v)));
    track(check("scale", &[&[2, 3], &[4]], |t, v| t.scale(v, -1.7)));
    track(check("add_scalar", &[&[2, 3], &[4]], |t, v| t.add_scalar(v, 2.5)));

    track(check("broadcast_add_rhs", &[&[1, 4], &[3, 1, 1]], |t, v| {
        let big: Vec<usize> = t.shape(v).iter().map(|&e| if e == 1 { 3 } else { e }).collect();
        let c = t.constant(randn(&big, 4))?;
        t.broadcast_add(c, v)
    }));
    track(check("broadcast_mul_rhs", &[&[1, 4], &[2, 1, 3]], |t, v| {
        let big: Vec<usize> = t.shape(v).iter().map(|&e| if e == 1 { 2 } else { e }).collect();
        let c = t.constant(randn(&big, 5))?;
        t.broadcast_mul(c, v)
    }));
    track(check("broadcast_add_lhs", &[&[2, 4], &[3, 2, 2]], |t, v| {
        let small: Vec<usize> = t.shape(v).iter().enumerate().map(|(i, &e)| if i == 0 { 1 } else { e }).collect();
        let c = t.constant(randn(&small, 6))?;
        t.broadcast_add(v, c)
    }));
    track(check("broadcast_mul_lhs", &[&[2, 4], &[3, 2, 2]], |t, v| {
        let small: Vec<usize> = t.shape(v).iter().enumerate().map(|(i, &e)| if i == 0 { 1 } else { e }).collect();
        let c = t.constant(randn(&small, 8))?;
        t.broadcast_mul(v, c)
    }));

    track(check("matmul_lhs", &[&[2, 3], &[4, 3]], |t, v| {
        let k = t.shape(v)[1];
        let c = t.constant(randn(&[k, 5], 9))?;
        t.matmul(v, c)
    }));
    track(check("matmul_rhs", &[&[3, 2], &[4, 5]], |t, v| {
        let k = t.shape(v)[0];
        let c = t.constant(randn(&[6, k], 10))?;
        t.matmul(c, v)
    }));

    track(check("conv1d_x", &[&[2, 9], &[3, 6]], |t, v| {
        let ci = t.shape(v)[0];
        let w = t.constant(randn(&[4, ci, 3], 11))?;
        t.conv1d(v, w, 1, 1)
    }));
    track(check("conv1d_w", &[&[4, 2, 3], &[2, 3, 5]], |t, v| {
        let ci = t.shape(v)[1];
        let x = t.constant(randn(&[ci, 8], 12))?;
        t.conv1d(x, v, 2, 2)
    }));
    track(check("conv2d_x", &[&[2, 5, 6], &[1, 4, 4]], |t, v| {
        let ci = t.shape(v)[0];
        let w = t.constant(randn(&[3, ci, 3, 3], 13))?;
        t.conv2d(v, w, (1, 1), (1, 1))
    }));
    track(check("conv2d_w", &[&[3, 2, 3, 3], &[2, 1, 2, 2]], |t, v| {
        let ci = t.shape(v)[1];
        let x = t.constant(randn(&[ci, 6, 7], 14))?;
        t.conv2d(x, v, (2, 2), (1, 1))
    }));
    track(check("conv_transpose2d_x", &[&[2, 3, 4], &[1, 5, 2]], |t, v| {
        let ci = t.shape(v)[0];
        let w = t.constant(randn(&[ci, 2, 3, 3], 15))?;
        t.conv_transpose2d(v, w, (2, 2), (1, 1), (1, 1))
    }));
    track(check("conv_transpose2d_w", &[&[2, 3, 3, 3], &[1, 2, 2, 2]], |t, v| {
        let ci = t.shape(v)[0];
        let x = t.constant(randn(&[ci, 4, 5], 16))?;
        t.conv_transpose2d(x, v, (2, 2), (1, 1), (1, 1))
    }));

    track(check("sigmoid", &[&[2, 3], &[5]], |t, v| t.sigmoid(v)));
    track(check("tanh", &[&[2, 3], &[5]], |t, v| t.tanh(v)));
    track(check("gelu", &[&[2, 3], &[5]], |t, v| t.gelu(v)));
    track(check("swish", &[&[2, 3], &[5]], |t, v| t.swish(v)));
    track(check("softplus", &[&[2, 3], &[5]], |t, v| t.softplus(v)));
    track(check("exp", &[&[2, 3], &[5]], |t, v| t.exp(v)));
    // ln and sqrt need positive inputs; relu needs inputs away from its kink
    for shape in [&[2usize, 3] as &[usize], &[6]] {
        let raw = randn(shape, 40);
        let pos: Vec<f64> = raw.data().iter().map(|v| v.abs() + 0.5).collect();
        let x = Tensor::new(shape.to_vec(), pos).unwrap();
        for (name, f) in [
            ("ln", (|t: &mut Tape, v| t.ln(v)) as fn(&mut Tape, Var) -> dex_tts::Result<Var>),
            ("sqrt", |t, v| t.sqrt(v)),
            ("relu", |t, v| t.relu(v)),
        ] {
            let err = grad_check(
                |tape, v| {
                    let y = f(tape, v)?;
                    to_scalar(tape, y, 7)
                },
                &x,
                GRAD_STEP,
            )
            .unwrap();
            assert!(err <= GRAD_TOL, "{name} on {shape:?}: {err}");
            track(err);
        }
    }

    track(check("softmax_axis1", &[&[3, 4], &[2, 5, 2]], |t, v| t.softmax(v, 1)));
    track(check("softmax_axis0", &[&[4, 2], &[3, 3]], |t, v| t.softmax(v, 0)));
    track(check("instance_norm", &[&[2, 6], &[2, 3, 4]], |t, v| {
        t.normalize(v, NormKind::Instance, 1e-5)
    }));
    track(check("layer_norm", &[&[3, 4], &[2, 2, 6]], |t, v| {
        t.normalize(v, NormKind::Layer, 1e-5)
    }));
    track(check("group_norm", &[&[3, 4], &[2, 6]], |t, v| {
        t.normalize(v, NormKind::Group(2), 1e-5)
    }));

    track(check("mean_all", &[&[2, 3], &[7]], |t, v| t.mean_all(v)));
    track(check("sum_all", &[&[2, 3], &[7]], |t, v| t.sum_all(v)));
    track(check("mean_axis", &[&[2, 3], &[2, 3, 4]], |t, v| t.mean_axis(v, 1)));
    track(check("reshape", &[&[2, 6], &[3, 4]], |t, v| t.reshape(v, &[12])));
    track(check("transpose", &[&[2, 3], &[2, 3, 4]], |t, v| {
        let rank = t.shape(v).len();
        let perm: Vec<usize> = (0..rank).rev().collect();
        t.transpose(v, &perm)
    }));
    track(check("slice_axis", &[&[4, 3], &[2, 5, 2]], |t, v| t.slice_axis(v, 1, 1, 2)));
    track(check("pad_reflect_end", &[&[3, 5], &[2, 4, 3]], |t, v| {
        t.pad_reflect_end(v, 1, 2)
    }));
    track(check("pad_replicate", &[&[3, 5], &[2, 4, 3]], |t, v| {
        t.pad_axis(v, 1, 2, 3, PadMode::Replicate)
    }));
    track(check("pad_reflect_both", &[&[3, 5], &[2, 4, 3]], |t, v| {
        t.pad_axis(v, 1, 2, 2, PadMode::Reflect)
    }));
    track(check("gather_rows", &[&[4, 3], &[6, 2]], |t, v| {
        t.gather_rows(v, &[0, 2, 2, 1])
    }));
    track(check("concat", &[&[2, 3], &[4, 2]], |t, v| {
        let c = t.constant(randn(t.shape(v), 17))?;
        t.concat(&[v, c, v], 0)
    }));
    worst
}

/// Exhaustive enumeration of all monotonic surjective paths (compositions of
/// `frames` into `tokens` positive parts), returning the best score and every
/// optimal duration vector.
pub fn brute_force_best(ll: &LikelihoodMatrix) -> (f64, Vec<Vec<usize>>) {
    fn recurse(
        ll: &LikelihoodMatrix,
        parts: &mut Vec<usize>,
        idx: usize,
        remaining: usize,
        best: &mut f64,
        argbest: &mut Vec<Vec<usize>>,
    ) {
        let tokens = parts.len();
        if idx == tokens - 1 {
            parts[idx] = remaining;
            let path = AlignmentPath::new(parts.clone()).unwrap();
            let score = path_score(ll, &path);
            if score > *best + 1e-12 {
                *best = score;
                argbest.clear();
                argbest.push(parts.clone());
            } else if (score - *best).abs() <= 1e-12 {
                argbest.push(parts.clone());
            }
            return;
        }
        let max_here = remaining - (tokens - 1 - idx);
        for d in 1..=max_here {
            parts[idx] = d;
            recurse(ll, parts, idx + 1, remaining - d, best, argbest);
        }
    }
    let tokens = ll.tokens();
    let mut best = f64::NEG_INFINITY;
    let mut argbest = Vec::new();
    let mut parts = vec![1usize; tokens];
    recurse(ll, &mut parts, 0, ll.frames(), &mut best, &mut argbest);
    (best, argbest)
}
