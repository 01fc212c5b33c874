//! Randomized checks of the rescale fold and the fake quantizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitq::quantizer::{Granularity, QuantizerState, Target};
use vitq::reparam::RescaleState;
use vitq::Tensor;

pub type Check = std::result::Result<(), String>;

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// `Y = X·Wᵀ + b` in plain loops.
fn linear(x: &[f64], w: &[f64], b: &[f64], tokens: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; tokens * out];
    for t in 0..tokens {
        for o in 0..out {
            let mut s = b[o];
            for c in 0..inp {
                s += x[t * inp + c] * w[o * inp + c];
            }
            y[t * out + o] = s;
        }
    }
    y
}

/// One random layer: rescaling the input and folding the inverse into the
/// weight and bias reproduces the original output.
pub fn fold_case(rng: &mut ChaCha8Rng) -> Check {
    let tokens = rng.gen_range(1..9);
    let inp = rng.gen_range(1..7);
    let out = rng.gen_range(1..7);
    let mut x = uniform(rng, tokens * inp, 3.0);
    let mut w = uniform(rng, out * inp, 1.0);
    let b = uniform(rng, out, 1.0);
    // degenerate channels: constant activations or all-zero weight columns
    for c in 0..inp {
        if rng.gen_bool(0.2) {
            let v = rng.gen_range(-2.0..2.0);
            (0..tokens).for_each(|t| x[t * inp + c] = v);
        }
        if rng.gen_bool(0.1) {
            (0..out).for_each(|o| w[o * inp + c] = 0.0);
        }
    }
    let xt = Tensor::new(&[tokens, inp], x.clone()).unwrap();
    let wt = Tensor::new(&[out, inp], w.clone()).unwrap();
    let bt = Tensor::from_vec(b.clone()).unwrap();
    let r = if rng.gen_bool(0.5) {
        RescaleState::init(&xt, &wt, 0.01, 99.9).map_err(|e| e.to_string())?
    } else {
        let alpha = (0..inp).map(|_| 10f64.powf(rng.gen_range(-2.0..2.0))).collect();
        RescaleState::new(alpha, uniform(rng, inp, 3.0)).unwrap()
    };
    let xr = r.rescale(&xt).map_err(|e| e.to_string())?;
    let (wf, bf) = r.fold(&wt, &bt).map_err(|e| e.to_string())?;
    let want = linear(&x, &w, &b, tokens, inp, out);
    let got = linear(xr.data(), wf.data(), bf.data(), tokens, inp, out);
    for (i, (g, y)) in got.iter().zip(&want).enumerate() {
        if (g - y).abs() > 1e-10 * y.abs().max(1.0) {
            return Err(format!("output {i}: folded {g} vs original {y}"));
        }
    }
    Ok(())
}

fn random_quantizer(rng: &mut ChaCha8Rng, rows: usize) -> (QuantizerState, bool) {
    let levels = match rng.gen_range(0..4) {
        0 => 3,
        1 => 1 << rng.gen_range(1..9),
        _ => rng.gen_range(2..300),
    };
    let per_row = rng.gen_bool(0.5);
    let n = if per_row { rows } else { 1 };
    let delta = (0..n).map(|_| 10f64.powf(rng.gen_range(-3.0..0.5))).collect();
    let zero = (0..n).map(|_| rng.gen_range(-2.0..levels as f64 + 2.0)).collect();
    let (g, t) = if per_row {
        (Granularity::PerOutputChannel, Target::Weights)
    } else {
        (Granularity::PerTensor, Target::Activations)
    };
    (QuantizerState::new(levels, g, t, delta, zero).unwrap(), per_row)
}

/// Idempotence, boundedness, grid optimality and monotonicity for one random
/// quantizer and input.
pub fn quantizer_case(rng: &mut ChaCha8Rng) -> Check {
    let rows = rng.gen_range(1..5);
    let cols = rng.gen_range(1..12);
    let (q, per_row) = random_quantizer(rng, rows);
    let scale = 10f64.powf(rng.gen_range(-2.0..1.5));
    let mut x = uniform(rng, rows * cols, scale);
    for r in 0..rows {
        x[r * cols..(r + 1) * cols].sort_by(f64::total_cmp);
    }
    let xt = Tensor::new(&[rows, cols], x.clone()).unwrap();
    let y = q.apply(&xt).map_err(|e| e.to_string())?;
    let yy = q.apply(&y).map_err(|e| e.to_string())?;
    if yy.data() != y.data() {
        return Err("fake quantization is not idempotent".into());
    }
    let top = (q.levels() - 1) as f64;
    for r in 0..rows {
        let p = if per_row { r } else { 0 };
        let d = q.delta().data()[p];
        let zr = q.zero_point().data()[p].round_ties_even();
        let (lo, hi) = ((0.0 - zr) * d, (top - zr) * d);
        for c in 0..cols {
            let i = r * cols + c;
            let v = y.data()[i];
            if v < lo || v > hi {
                return Err(format!("{v} outside [{lo}, {hi}]"));
            }
            let pre = (x[i] / d).round_ties_even() + zr;
            if (0.0..=top).contains(&pre) && (v - x[i]).abs() > d / 2.0 + 1e-12 {
                return Err(format!("unclipped {} mapped to {v} with step {d}", x[i]));
            }
            if c > 0 && y.data()[i - 1] > v {
                return Err(format!("not monotone: {} > {v}", y.data()[i - 1]));
            }
        }
    }
    Ok(())
}

/// Three levels with a zero-point rounding to 1 give only `{−Δ, 0, +Δ}`.
pub fn ternary_case(rng: &mut ChaCha8Rng) -> Check {
    let n = rng.gen_range(1..40);
    let d = 10f64.powf(rng.gen_range(-3.0..1.0));
    let z = rng.gen_range(0.5..1.5);
    let q = QuantizerState::new(3, Granularity::PerTensor, Target::Weights, vec![d], vec![z]).unwrap();
    let x = Tensor::from_vec(uniform(rng, n, 4.0 * d)).unwrap();
    let y = q.apply(&x).map_err(|e| e.to_string())?;
    match y.data().iter().find(|v| ![-d, 0.0, d].contains(v)) {
        Some(v) => Err(format!("ternary output {v} with step {d}")),
        None => Ok(()),
    }
}

/// Mean-squared error with percentile initialization does not grow as the
/// level count doubles from 4 to 256.
pub fn doubling_case(rng: &mut ChaCha8Rng) -> Check {
    let n = rng.gen_range(16..400);
    let data: Vec<f64> = match rng.gen_range(0..3) {
        0 => uniform(rng, n, 1.0),
        1 => (0..n).map(|_| rng.gen_range(-1.0f64..1.0).powi(3) * 5.0).collect(),
        _ => (0..n).map(|_| rng.gen_range(0.0f64..1.0).exp()).collect(),
    };
    let x = Tensor::from_vec(data).unwrap();
    let mut prev = f64::INFINITY;
    for bits in 2..=8 {
        let levels = 1 << bits;
        let q = QuantizerState::init_from_data(&x, levels, 0.1, 99.9, Target::Activations)
            .map_err(|e| e.to_string())?;
        let y = q.apply(&x).map_err(|e| e.to_string())?;
        let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        if mse > prev {
            return Err(format!("error rose from {prev} to {mse} at {levels} levels"));
        }
        prev = mse;
    }
    Ok(())
}

pub fn repeat(n: usize, seed: u64, f: fn(&mut ChaCha8Rng) -> Check) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        f(&mut rng).map_err(|e| format!("case {i}: {e}"))?;
    }
    Ok(())
}
