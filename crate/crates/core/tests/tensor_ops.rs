use approx::assert_abs_diff_eq;
use pulseid::tensor::{
    conv1d_naive, conv2d_naive, finite_diff, grad, max_rel_error, ParamStore, Tape, Tensor,
};
use pulseid::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut p = ParamStore::new(0);
    for (n, v) in entries {
        p.insert(n, v).unwrap();
    }
    p
}

/// Runs the same forward twice: once for reverse-mode gradients, once through
/// central differences, and returns the norm-wise relative error.
fn check<F>(params: &ParamStore, forward: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Result<pulseid::tensor::Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, params).unwrap();
    let analytic = grad(&tape, loss, params).unwrap();
    let numeric = finite_diff(
        |p| {
            let mut tape = Tape::new();
            let l = forward(&mut tape, p)?;
            Ok(tape.value(l).item())
        },
        params,
        1e-5,
    )
    .unwrap();
    max_rel_error(&analytic, &numeric)
}

/// Scalar readout `Σ (out + c)²` with a fixed random offset so every output
/// coordinate gets a distinct upstream gradient.
fn readout(tape: &mut Tape, out: pulseid::tensor::Var, seed: u64) -> Result<pulseid::tensor::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = tape.shape(out).to_vec();
    let c = tape.constant(random(&shape, &mut rng))?;
    let s = tape.add(out, c)?;
    let sq = tape.square(s)?;
    tape.sum(sq)
}

#[test]
fn dense_examples() {
    let cases = [
        (vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec![1.0, 2.0]),
        (vec![0.0; 4], vec![3.0, 4.0], vec![3.0, 4.0]),
        (vec![1.0; 4], vec![0.0, 0.0], vec![3.0, 3.0]),
    ];
    for (w, b, expect) in cases {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = tape.constant(t(&[2, 2], &w)).unwrap();
        let b = tape.constant(t(&[2], &b)).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), expect.as_slice());
    }
}

#[test]
fn dense_shape_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
    let w = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.dense(x, w, b), Err(Error::Dimension(_))));
}

#[test]
fn conv1d_examples() {
    let run = |x: &[f64], k: &[f64]| {
        let mut tape = Tape::new();
        let xv = tape.constant(t(&[1, 1, x.len()], x)).unwrap();
        let kv = tape.constant(t(&[1, 1, k.len()], k)).unwrap();
        let y = tape.conv1d(xv, kv).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(&[1.0, 2.0, 3.0], &[1.0]), vec![1.0, 2.0, 3.0]);
    // cross-correlation: y[t] = x[t-1] - x[t+1]
    assert_eq!(run(&[1.0, 2.0, 3.0], &[1.0, 0.0, -1.0]), vec![-2.0, -2.0, 2.0]);
    assert_eq!(run(&[0.0; 5], &[0.3, -1.0, 2.0]), vec![0.0; 5]);
}

#[test]
fn even_kernels_are_config_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 4])).unwrap();
    let k = tape.constant(Tensor::zeros(&[1, 1, 2])).unwrap();
    assert!(matches!(tape.conv1d(x, k), Err(Error::Config(_))));
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4])).unwrap();
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 2])).unwrap();
    assert!(matches!(tape.conv2d(x, k), Err(Error::Config(_))));
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xr = random(&[1, 2, 5, 7], &mut rng);
    let x = tape.constant(xr.clone()).unwrap();
    let mut ident = Tensor::zeros(&[2, 2, 1, 1]);
    ident.data_mut()[0] = 1.0;
    ident.data_mut()[3] = 1.0;
    let k = tape.constant(ident).unwrap();
    let y = tape.conv2d(x, k).unwrap();
    assert_eq!(tape.value(y), &xr);

    let c = tape.constant(Tensor::full(&[1, 1, 6, 6], 2.5)).unwrap();
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0)).unwrap();
    let y = tape.conv2d(c, k).unwrap();
    for h in 1..5 {
        for w in 1..5 {
            assert_abs_diff_eq!(tape.value(y).data()[h * 6 + w], 2.5, epsilon = 1e-12);
        }
    }

    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = tape.conv2d(x, k).unwrap();
    let oracle = conv2d_naive(tape.value(x), tape.value(k));
    assert_eq!(tape.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
    assert_eq!(tape.value(y), &oracle);
}

#[test]
fn conv_matches_naive_reference() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..9));
        let kh = [1, 3, 5][rng.random_range(0..3)];
        let kw = [1, 3, 5][rng.random_range(0..3)];
        let x = random(&[b, c, h, w], &mut rng);
        let k = random(&[o, c, kh, kw], &mut rng);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()).unwrap(), tape.constant(k.clone()).unwrap());
        let y = tape.conv2d(xv, kv).unwrap();
        let r = conv2d_naive(&x, &k);
        for (a, e) in tape.value(y).data().iter().zip(r.data()) {
            assert!((a - e).abs() < 1e-10);
        }

        let x1 = random(&[b, c, w], &mut rng);
        let k1 = random(&[o, c, kw], &mut rng);
        let (xv, kv) = (tape.constant(x1.clone()).unwrap(), tape.constant(k1.clone()).unwrap());
        let y = tape.conv1d(xv, kv).unwrap();
        let r = conv1d_naive(&x1, &k1);
        for (a, e) in tape.value(y).data().iter().zip(r.data()) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

/// Direct evaluation of multi-head attention from its definition.
fn attention_oracle(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, heads: usize) -> Vec<f64> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let proj = |w: &Tensor, bi: usize, i: usize, col: usize| -> f64 {
        (0..d).map(|m| x.data()[(bi * l + i) * d + m] * w.data()[m * d + col]).sum()
    };
    let mut out = vec![0.0; b * l * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| {
                        (0..dh)
                            .map(|e| proj(wq, bi, i, h * dh + e) * proj(wk, bi, j, h * dh + e))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for e in 0..dh {
                    out[(bi * l + i) * d + h * dh + e] = (0..l)
                        .map(|j| scores[j].exp() / z * proj(wv, bi, j, h * dh + e))
                        .sum();
                }
            }
        }
    }
    out
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 4;
    let (wq, wk, wv) = (
        random(&[d, d], &mut rng),
        random(&[d, d], &mut rng),
        random(&[d, d], &mut rng),
    );
    let mut tape = Tape::new();
    let q = tape.constant(wq.clone()).unwrap();
    let k = tape.constant(wk.clone()).unwrap();
    let v = tape.constant(wv.clone()).unwrap();

    // single token: softmax over one key is 1
    let x1 = random(&[1, 1, d], &mut rng);
    let xv = tape.constant(x1.clone()).unwrap();
    let y = tape.attention(xv, q, k, v, 2).unwrap();
    let bias = tape.constant(Tensor::zeros(&[d])).unwrap();
    let xw = tape.dense(xv, v, bias).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(tape.value(xw).data()) {
        assert_abs_diff_eq!(*a, *e, epsilon = 1e-12);
    }

    // identical tokens give identical outputs
    let tok = random(&[1, 1, d], &mut rng);
    let rep: Vec<f64> = (0..3).flat_map(|_| tok.data().to_vec()).collect();
    let xv = tape.constant(t(&[1, 3, d], &rep)).unwrap();
    let y = tape.attention(xv, q, k, v, 2).unwrap();
    let out = tape.value(y);
    for i in 1..3 {
        for e in 0..d {
            assert_abs_diff_eq!(out.data()[i * d + e], out.data()[e], epsilon = 1e-12);
        }
    }

    // L = 2 against the formula
    let x2 = random(&[2, 2, d], &mut rng);
    let xv = tape.constant(x2.clone()).unwrap();
    let y = tape.attention(xv, q, k, v, 2).unwrap();
    let oracle = attention_oracle(&x2, &wq, &wk, &wv, 2);
    for (a, e) in tape.value(y).data().iter().zip(&oracle) {
        assert_abs_diff_eq!(*a, *e, epsilon = 1e-12);
    }

    assert!(matches!(tape.attention(xv, q, k, v, 3), Err(Error::Config(_))));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
    }
    let logs = [1f64.ln(), 2f64.ln(), 3f64.ln()];
    let x = tape.constant(t(&[3], &logs)).unwrap();
    let y = tape.softmax(x).unwrap();
    for (v, e) in tape.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
    }
    let shifted: Vec<f64> = logs.iter().map(|v| v + 123.4).collect();
    let xs = tape.constant(t(&[3], &shifted)).unwrap();
    let ys = tape.softmax(xs).unwrap();
    for (a, b) in tape.value(ys).data().iter().zip(tape.value(y).data()) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let mut x = random(&[20, 7], &mut rng);
    x.data_mut().iter_mut().for_each(|v| *v *= 30.0);
    let xv = tape.constant(x).unwrap();
    let y = tape.softmax(xv).unwrap();
    for r in 0..20 {
        let s: f64 = tape.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(tape.value(y).row(r).iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn grad_trivial_cases() {
    let p = store(vec![("w", t(&[1], &[3.0])), ("u", t(&[2], &[1.0, 2.0]))]);
    let mut tape = Tape::new();
    let w = tape.param(&p, "w").unwrap();
    let sq = tape.square(w).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = grad(&tape, loss, &p).unwrap();
    assert_eq!(g["w"].data(), &[6.0]);
    assert_eq!(g["u"].data(), &[0.0, 0.0]);

    let not_scalar = tape.scale(w, 1.0).unwrap();
    let u = tape.param(&p, "u").unwrap();
    assert!(matches!(grad(&tape, u, &p), Err(Error::Contract(_))));
    let _ = not_scalar;
}

#[test]
fn finite_diff_trivial_cases() {
    let p = store(vec![("x", t(&[1], &[3.0]))]);
    let g = finite_diff(|p| Ok(p.get("x").unwrap().item().powi(2)), &p, 1e-4).unwrap();
    assert_abs_diff_eq!(g["x"].item(), 6.0, epsilon = 1e-8);
    let g = finite_diff(|_| Ok(4.2), &p, 1e-4).unwrap();
    assert_abs_diff_eq!(g["x"].item(), 0.0, epsilon = 1e-12);
}

const SEEDS: u64 = 10;
const TOL: f64 = 1e-4;

#[test]
fn gradients_dense_and_activations() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = store(vec![
            ("x", random(&[3, 4], &mut rng)),
            ("w", random(&[4, 5], &mut rng)),
            ("b", random(&[5], &mut rng)),
        ]);
        let err = check(&p, |tape, p| {
            let (x, w, b) = (tape.param(p, "x")?, tape.param(p, "w")?, tape.param(p, "b")?);
            let y = tape.dense(x, w, b)?;
            let y = tape.tanh(y)?;
            let z = tape.relu(y)?;
            let y = tape.add(y, z)?;
            readout(tape, y, seed)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradients_convolutions_and_pooling() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = store(vec![
            ("x", random(&[1, 2, 6, 9], &mut rng)),
            ("k", random(&[3, 2, 3, 3], &mut rng)),
            ("b", random(&[3], &mut rng)),
            ("x1", random(&[2, 2, 9], &mut rng)),
            ("k1", random(&[3, 2, 5], &mut rng)),
        ]);
        let err = check(&p, |tape, p| {
            let (x, k, b) = (tape.param(p, "x")?, tape.param(p, "k")?, tape.param(p, "b")?);
            let y = tape.conv2d(x, k)?;
            let y = tape.channel_bias(y, b)?;
            let y = tape.row_pool(y, 3)?;
            let y = tape.mean_axis(y, 2)?;
            let l1 = readout(tape, y, seed)?;
            let (x1, k1) = (tape.param(p, "x1")?, tape.param(p, "k1")?);
            let z = tape.conv1d(x1, k1)?;
            let z = tape.max_pool1d(z)?;
            let z = tape.transpose12(z)?;
            let l2 = readout(tape, z, seed + 1)?;
            tape.add(l1, l2)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradients_attention_layernorm_softmax_ce() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let p = store(vec![
            ("x", random(&[2, 3, d], &mut rng)),
            ("wq", random(&[d, d], &mut rng)),
            ("wk", random(&[d, d], &mut rng)),
            ("wv", random(&[d, d], &mut rng)),
            ("g", random(&[d], &mut rng)),
            ("beta", random(&[d], &mut rng)),
        ]);
        let err = check(&p, |tape, p| {
            let x = tape.param(p, "x")?;
            let (q, k, v) = (tape.param(p, "wq")?, tape.param(p, "wk")?, tape.param(p, "wv")?);
            let a = tape.attention(x, q, k, v, 2)?;
            let r = tape.add(x, a)?;
            let (g, b) = (tape.param(p, "g")?, tape.param(p, "beta")?);
            let n = tape.layer_norm(r, g, b)?;
            let n2 = tape.reshape(n, &[6, d])?;
            let s = tape.softmax(n2)?;
            let ce = tape.cross_entropy(s, 1)?;
            let l = readout(tape, n, seed)?;
            tape.add(ce, l)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradients_psd_contrastive_and_segment_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = store(vec![("m", random(&[2, 40], &mut rng))]);
        let err = check(&p, |tape, p| {
            let m = tape.param(p, "m")?;
            let mut fa = Vec::new();
            let mut fb = Vec::new();
            for i in 0..3 {
                let w = tape.window(m, 0, 3 * i, 20)?;
                fa.push(tape.band_power(w, 10.0, (0.6, 4.0), 40)?);
                let w = tape.window(m, 1, 5 + 2 * i, 20)?;
                fb.push(tape.band_power(w, 10.0, (0.6, 4.0), 40)?);
            }
            let (f, fp) = (tape.stack(&fa)?, tape.stack(&fb)?);
            let c = tape.contrastive(f, fp)?;
            let rows = vec![
                vec![(0, 0.25), (1, 0.75)],
                vec![(3, 1.0)],
                vec![(5, 0.5), (6, 0.5)],
                vec![(41, 0.1), (70, 0.9)],
            ];
            let s = tape.sparse_linear(m, rows, &[2, 2])?;
            let s = tape.zscore_rows(s)?;
            let l = readout(tape, s, seed)?;
            tape.add(c, l)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn backward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = store(vec![
            ("x", random(&[1, 3, 6, 12], &mut rng)),
            ("k", random(&[4, 3, 3, 3], &mut rng)),
        ]);
        let mut tape = Tape::new();
        let (x, k) = (tape.param(&p, "x").unwrap(), tape.param(&p, "k").unwrap());
        let y = tape.conv2d(x, k).unwrap();
        let y = tape.tanh(y).unwrap();
        let l = readout(&mut tape, y, 3).unwrap();
        grad(&tape, l, &p).unwrap()
    };
    let (a, b) = (run(), run());
    for (name, ga) in &a {
        let bits_a: Vec<u64> = ga.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b[name].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    assert!(matches!(
        tape.constant(t(&[1], &[f64::NAN])),
        Err(Error::NonFinite(_))
    ));
    let x = tape.constant(t(&[1], &[1e200])).unwrap();
    assert!(matches!(tape.square(x), Err(Error::NonFinite(_))));
}
