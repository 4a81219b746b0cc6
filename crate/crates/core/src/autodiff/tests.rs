#![allow(clippy::needless_range_loop)]

use rand::Rng as _;

use super::*;
use crate::seed::{rng_from, Rng};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(out ⊙ probe)` from `inputs` registered as parameters, so
/// every output coordinate carries a distinct upstream gradient.
fn probe_loss<F>(inputs: &[Tensor], probe_seed: u64, build: &F) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| tape.param(ParamId(i), x.clone()))
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let probe = random(&shape, &mut rng_from(&[probe_seed]), 1.0);
    let p = tape.constant(probe);
    let prod = tape.mul(out, p).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).item().unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = (0..inputs.len())
        .map(|i| grads.get(ParamId(i)).unwrap().clone())
        .collect();
    (value, g)
}

/// Per-op sweep: 20 random trials, every coordinate of every input.
///
/// A single step cannot resolve every coordinate to 1e-6: at 1e-5 the
/// objective's round-off (~1e-16) leaves ~1e-11 of noise, which swamps
/// gradients that happen to be ~1e-7; at 1e-4 truncation shows on the
/// curved coordinates. Each coordinate is therefore scored at the better
/// of the two steps. A wrong backward rule fails at both.
fn check_op<F>(name: &str, shapes: &[&[usize]], scale: f64, tol: f64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_trials(name, shapes, scale, tol, 0..20, build)
}

fn check_trials<F>(
    name: &str,
    shapes: &[&[usize]],
    scale: f64,
    tol: f64,
    trials: std::ops::Range<u64>,
    build: F,
) where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for trial in trials {
        let mut rng = rng_from(&[0xFD, trial]);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng, scale)).collect();
        let (_, analytic) = probe_loss(&inputs, trial, &build);
        let f = |ps: &[Tensor]| Ok(probe_loss(ps, trial, &build).0);
        let coarse = numeric_gradients(f, &inputs, 1e-4).unwrap();
        let fine = numeric_gradients(f, &inputs, 1e-5).unwrap();
        let mut worst = (0.0f64, 0usize, 0usize);
        for t in 0..inputs.len() {
            for i in 0..inputs[t].numel() {
                let a = analytic[t].data()[i];
                let err = max_relative_error(a, coarse[t].data()[i])
                    .min(max_relative_error(a, fine[t].data()[i]));
                if err > worst.0 {
                    worst = (err, t, i);
                }
            }
        }
        assert!(
            worst.0 <= tol,
            "{name} trial {trial}: rel err {:e} at input {} coord {} (analytic {:e}, numeric {:e} / {:e})",
            worst.0,
            worst.1,
            worst.2,
            analytic[worst.1].data()[worst.2],
            coarse[worst.1].data()[worst.2],
            fine[worst.1].data()[worst.2],
        );
    }
}

#[test]
fn dense_identity_case() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.dense(x, w, Some(b), Activation::Identity).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn dense_zero_input_relu() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let w = tape.constant(t(&[2, 2], &[0.3, -4.0, 2.0, 7.0]));
    let b = tape.constant(t(&[2], &[3.0, -3.0]));
    let y = tape.dense(x, w, Some(b), Activation::Relu).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 0.0]);
}

#[test]
fn dense_rejects_shape_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(
        tape.dense(x, w, None, Activation::Tanh),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn log_sum_exp_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1], &[-3.25]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let c = tape.constant(t(&[2], &[1000.0, 1000.0]));
    let la = tape.log_sum_exp(a).unwrap();
    let lb = tape.log_sum_exp(b).unwrap();
    let lc = tape.log_sum_exp(c).unwrap();
    assert_eq!(tape.value(la).item(), Some(-3.25));
    assert!((tape.value(lb).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let v = tape.value(lc).item().unwrap();
    assert!(v.is_finite() && (v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);

    let e = tape.constant(Tensor::zeros(&[3, 0]));
    assert!(tape.log_sum_exp(e).is_err());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[0.0, 0.0]));
    let sa = tape.softmax(a).unwrap();
    assert_eq!(tape.value(sa).data(), &[0.5, 0.5]);
    let b = tape.constant(t(&[1], &[42.0]));
    let sb = tape.softmax(b).unwrap();
    assert_eq!(tape.value(sb).data(), &[1.0]);

    let mut rng = rng_from(&[11]);
    for _ in 0..50 {
        let v = random(&[3, 7], &mut rng, 20.0);
        let shift = 100.0 * (rng.random::<f64>() - 0.5);
        let shifted = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + shift).collect()).unwrap();
        let x = tape.constant(v);
        let y = tape.constant(shifted);
        let sx = tape.softmax(x).unwrap();
        let sy = tape.softmax(y).unwrap();
        for (p, q) in tape.value(sx).data().iter().zip(tape.value(sy).data()) {
            assert!((p - q).abs() < 1e-12);
        }
        for row in tape.value(sx).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }
}

#[test]
fn backprop_sum_of_squares_is_two_x() {
    let x = t(&[4], &[1.5, -2.0, 0.25, 3.0]);
    let mut tape = Tape::new();
    let v = tape.param(ParamId(0), x.clone());
    let other = tape.param(ParamId(1), t(&[2], &[9.0, 9.0]));
    let _ = other;
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|x| 2.0 * x).collect();
    assert_eq!(g.get(ParamId(0)).unwrap().data(), expect.as_slice());
    assert_eq!(g.get(ParamId(1)).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backprop_rejects_non_scalar() {
    let mut tape = Tape::new();
    let v = tape.param(ParamId(0), Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(v), Err(Error::Shape { .. })));
}

#[test]
fn constants_get_no_gradient_slot() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[2], &[1.0, 2.0]));
    let p = tape.param(ParamId(3), t(&[2], &[0.5, 0.5]));
    let m = tape.mul(c, p).unwrap();
    let loss = tape.sum(m);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g.get(ParamId(3)).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = rng_from(&[3]);
    let x = random(&[5, 6], &mut rng, 1.0);
    let w = random(&[6, 4], &mut rng, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.dense(xv, wv, None, Activation::Tanh).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn quadratic_finite_difference_is_tight() {
    let p = vec![t(&[3], &[0.3, -1.2, 2.0])];
    let f = |ps: &[Tensor]| Ok(ps[0].data().iter().map(|x| 1.5 * x * x + x).sum::<f64>());
    let g = vec![t(&[3], &[1.9, -2.6, 7.0])];
    let r = finite_diff_check(f, &p, &g, 1e-5).unwrap();
    assert!(r.max_rel_error <= 1e-9, "{r:?}");

    let lin = |ps: &[Tensor]| Ok(ps[0].data().iter().sum::<f64>() * 2.0);
    let g = vec![t(&[3], &[2.0, 2.0, 2.0])];
    let r = finite_diff_check(lin, &p, &g, 1e-5).unwrap();
    assert!(r.max_rel_error <= 1e-9, "{r:?}");
}

#[test]
fn finite_difference_rejects_non_finite() {
    let p = vec![t(&[1], &[0.0])];
    let g = vec![t(&[1], &[0.0])];
    let r = finite_diff_check(|_| Ok(f64::NAN), &p, &g, 1e-5);
    assert!(matches!(r, Err(Error::NonFinite { .. })));
}

// ---- per-primitive gradient checks (20 random trials each) ----

const TOL: f64 = 1e-6;

#[test]
fn grad_dense_all_activations() {
    for act in [Activation::Identity, Activation::Tanh] {
        check_op("dense", &[&[3, 4], &[4, 5], &[5]], 1.0, TOL, |t, v| {
            t.dense(v[0], v[1], Some(v[2]), act)
        });
    }
    // Keep pre-activations away from the relu kink.
    check_op("dense-relu", &[&[2, 3], &[3, 2]], 1.0, TOL, |t, v| {
        let y = t.dense(v[0], v[1], None, Activation::Identity)?;
        let c = t.constant(Tensor::full(&[2, 2], 5.0));
        let shifted = t.add(y, c)?;
        let w = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        t.dense(shifted, w, None, Activation::Relu)
    });
    // Batched leading axes.
    check_op("dense-3d", &[&[2, 3, 4], &[4, 2]], 1.0, TOL, |t, v| {
        t.dense(v[0], v[1], None, Activation::Tanh)
    });
}

#[test]
fn grad_bmm() {
    check_op("bmm", &[&[2, 3, 4], &[2, 4, 5]], 1.0, TOL, |t, v| t.bmm(v[0], v[1], false));
    check_op("bmm-t", &[&[2, 3, 4], &[2, 5, 4]], 1.0, TOL, |t, v| t.bmm(v[0], v[1], true));
}

#[test]
fn grad_elementwise() {
    check_op("add", &[&[3, 2], &[3, 2]], 1.0, TOL, |t, v| t.add(v[0], v[1]));
    check_op("sub", &[&[3, 2], &[3, 2]], 1.0, TOL, |t, v| t.sub(v[0], v[1]));
    check_op("mul", &[&[3, 2], &[3, 2]], 1.0, TOL, |t, v| t.mul(v[0], v[1]));
    check_op("add_broadcast", &[&[2, 3, 2], &[3, 2]], 1.0, TOL, |t, v| {
        t.add_broadcast(v[0], v[1])
    });
    check_op("scale", &[&[4]], 1.0, TOL, |t, v| Ok(t.scale(v[0], -2.5)));
    check_op("tanh", &[&[4]], 2.0, TOL, |t, v| Ok(t.tanh(v[0])));
    check_op("exp", &[&[4]], 2.0, TOL, |t, v| Ok(t.exp(v[0])));
    check_op("square", &[&[4]], 2.0, TOL, |t, v| Ok(t.square(v[0])));
    check_op("log", &[&[4]], 1.0, TOL, |t, v| {
        let e = t.exp(v[0]);
        Ok(t.log(e))
    });
    check_op("clamp", &[&[5]], 0.5, TOL, |t, v| Ok(t.clamp(v[0], -0.9, 0.9)));
}

#[test]
fn grad_reductions_and_views() {
    check_op("softmax", &[&[3, 4]], 3.0, TOL, |t, v| t.softmax(v[0]));
    check_op("causal_softmax", &[&[2, 4, 4]], 3.0, TOL, |t, v| t.causal_softmax(v[0]));
    check_op("log_sum_exp", &[&[3, 4]], 3.0, TOL, |t, v| t.log_sum_exp(v[0]));
    check_op("sum", &[&[3, 4]], 1.0, TOL, |t, v| Ok(t.sum(v[0])));
    check_op("mean", &[&[3, 4]], 1.0, TOL, |t, v| t.mean(v[0]));
    check_op("reshape", &[&[3, 4]], 1.0, TOL, |t, v| t.reshape(v[0], &[2, 6]));
    check_op("concat", &[&[2, 1, 3], &[2, 2, 3]], 1.0, TOL, |t, v| {
        t.concat(&[v[0], v[1]], 1)
    });
    check_op("narrow", &[&[2, 5, 3]], 1.0, TOL, |t, v| t.narrow(v[0], 1, 1, 3));
}

#[test]
fn grad_gmm_ops() {
    check_op(
        "gmm_log_prob",
        &[&[2, 3], &[2, 3, 2], &[2, 3, 2], &[2, 4, 2]],
        1.0,
        TOL,
        |t, v| t.gmm_log_prob(v[0], v[1], v[2], v[3]),
    );
    let mut rng = rng_from(&[77]);
    let comp: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
    let eps: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
    check_op("gmm_pathwise", &[&[2, 3, 2], &[2, 3, 2]], 1.0, TOL, move |t, v| {
        t.gmm_pathwise(v[0], v[1], comp.clone(), eps.clone())
    });
}

fn attention_weights(tape: &mut Tape, vars: &[Var]) -> AttentionWeights {
    let _ = tape;
    AttentionWeights {
        pos: vars[1],
        wq: vars[2],
        bq: vars[3],
        wk: vars[4],
        wv: vars[5],
        bv: vars[6],
        wo: vars[7],
        bo: vars[8],
    }
}

const D: usize = 4;
const ATTN_SHAPES: [&[usize]; 9] = [
    &[2, 3, D],
    &[5, D],
    &[D, D],
    &[D],
    &[D, D],
    &[D, D],
    &[D],
    &[D, D],
    &[D],
];

#[test]
fn grad_attention() {
    check_op("causal_self_attention", &ATTN_SHAPES, 1.0, TOL, |t, v| {
        let w = attention_weights(t, v);
        causal_self_attention(t, v[0], &w)
    });
    check_op("attend_last", &ATTN_SHAPES, 1.0, TOL, |t, v| {
        let w = attention_weights(t, v);
        attend_last(t, v[0], &w)
    });
}

fn attention_inputs(seed: u64) -> Vec<Tensor> {
    let mut rng = rng_from(&[seed]);
    ATTN_SHAPES.iter().map(|s| random(s, &mut rng, 1.0)).collect()
}

fn run_attention(inputs: &[Tensor]) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let w = attention_weights(&mut tape, &v);
    let full = causal_self_attention(&mut tape, v[0], &w).unwrap();
    let last = attend_last(&mut tape, v[0], &w).unwrap();
    (tape.value(full).clone(), tape.value(last).clone())
}

#[test]
fn attend_last_matches_final_row() {
    for seed in 0..10 {
        let (full, last) = run_attention(&attention_inputs(seed));
        let (b, l) = (2, 3);
        for i in 0..b {
            for d in 0..D {
                let a = full.data()[(i * l + l - 1) * D + d];
                let c = last.data()[i * D + d];
                assert!((a - c).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_single_token_has_unit_weight() {
    let mut inputs = attention_inputs(1);
    inputs[0] = random(&[2, 1, D], &mut rng_from(&[2]), 1.0);
    let (full, _) = run_attention(&inputs);
    // out = Wo v + bo + x, where v = Wv x + bv and x = token + pos[0]
    for i in 0..2 {
        let x: Vec<f64> = (0..D)
            .map(|d| inputs[0].data()[i * D + d] + inputs[1].data()[d])
            .collect();
        let v: Vec<f64> = (0..D)
            .map(|j| inputs[6].data()[j] + (0..D).map(|k| x[k] * inputs[5].data()[k * D + j]).sum::<f64>())
            .collect();
        for j in 0..D {
            let o = inputs[8].data()[j]
                + (0..D).map(|k| v[k] * inputs[7].data()[k * D + j]).sum::<f64>()
                + x[j];
            assert!((o - full.data()[i * D + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_query_key_weights_give_uniform_prefix_attention() {
    let mut inputs = attention_inputs(3);
    for i in 2..=4 {
        inputs[i] = Tensor::zeros(inputs[i].shape());
    }
    let (full, _) = run_attention(&inputs);
    let (b, l) = (2, 3);
    let x = |i: usize, t: usize, d: usize| inputs[0].data()[(i * l + t) * D + d] + inputs[1].data()[t * D + d];
    let value = |i: usize, t: usize, j: usize| {
        inputs[6].data()[j] + (0..D).map(|k| x(i, t, k) * inputs[5].data()[k * D + j]).sum::<f64>()
    };
    for i in 0..b {
        for t in 0..l {
            let ctx: Vec<f64> = (0..D)
                .map(|j| (0..=t).map(|s| value(i, s, j)).sum::<f64>() / (t + 1) as f64)
                .collect();
            for j in 0..D {
                let o = inputs[8].data()[j]
                    + (0..D).map(|k| ctx[k] * inputs[7].data()[k * D + j]).sum::<f64>()
                    + x(i, t, j);
                assert!((o - full.data()[(i * l + t) * D + j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_is_causal() {
    let inputs = attention_inputs(5);
    let (base, _) = run_attention(&inputs);
    let mut perturbed = inputs.clone();
    // Perturb position 2 of every batch row; positions 0 and 1 must not move.
    for i in 0..2 {
        for d in 0..D {
            perturbed[0].data_mut()[(i * 3 + 2) * D + d] += 0.7;
        }
    }
    let (moved, _) = run_attention(&perturbed);
    for i in 0..2 {
        for t in 0..3 {
            let same = (0..D).all(|d| base.data()[(i * 3 + t) * D + d] == moved.data()[(i * 3 + t) * D + d]);
            assert_eq!(same, t < 2, "batch {i} position {t}");
        }
    }
}

#[test]
fn attention_rejects_context_overflow() {
    let mut inputs = attention_inputs(0);
    inputs[0] = Tensor::zeros(&[1, 6, D]);
    let mut tape = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let w = attention_weights(&mut tape, &v);
    assert!(matches!(
        causal_self_attention(&mut tape, v[0], &w),
        Err(Error::ContextOverflow { tokens: 6, max: 5 })
    ));
}

#[test]
fn composite_network_gradient() {
    // Dense tanh layer, attention, mixture log-density: one network
    // instance. Random instances occasionally carry gradients of ~1e-6
    // that central differences only resolve to ~5e-12 absolute.
    check_trials(
        "composite",
        &[&[2, 3, 5], &[5, D], &[D], &[3, D], &[D, D], &[D, D], &[D, D], &[D, 6], &[2, 1, 1]],
        1.0,
        1e-6,
        0..1,
        |t, v| {
            let h = t.dense(v[0], v[1], Some(v[2]), Activation::Tanh)?;
            let zero = t.constant(Tensor::zeros(&[D]));
            let w = AttentionWeights {
                pos: v[3],
                wq: v[4],
                bq: zero,
                wk: v[5],
                wv: v[6],
                bv: zero,
                wo: v[4],
                bo: zero,
            };
            let ctx = attend_last(t, h, &w)?;
            let head = t.dense(ctx, v[7], None, Activation::Identity)?;
            let logits = t.narrow(head, 1, 0, 2)?;
            let means = t.narrow(head, 1, 2, 2)?;
            let means = t.reshape(means, &[2, 2, 1])?;
            let ls = t.narrow(head, 1, 4, 2)?;
            let ls = t.reshape(ls, &[2, 2, 1])?;
            let lp = t.gmm_log_prob(logits, means, ls, v[8])?;
            t.mean(lp)
        },
    );
}

