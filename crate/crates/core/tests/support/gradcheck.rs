//! Central finite-difference checks of every differentiable operation.
//!
//! Each case projects its output onto a fixed random tensor so the whole
//! Jacobian is exercised. Straight-through operations are compared with a
//! surrogate that matches them exactly near the base point: rounding
//! residuals and clip masks are frozen at their base values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitq::params::Bindings;
use vitq::prompt::{loss_cls_rows, loss_orth, loss_var};
use vitq::ptq::{loss_feat, loss_kl, loss_reg};
use vitq::reparam::{fold_into_layer, rescale_input};
use vitq::teacher::cross_entropy;
use vitq::vit::{QuantMode, TinyViT, ViTConfig};
use vitq::{Result, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Box<OpFn>,
    /// Smooth stand-in evaluated for the finite differences, if `f` uses STE.
    pub surrogate: Option<Box<OpFn>>,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
        surrogate: None,
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0) * 1.7).collect();
    Tensor::new(shape, data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero in magnitude.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<f64> {
    let w = tape.constant(weights.clone())?;
    let p = tape.mul(out, w)?;
    let s = tape.sum(p)?;
    Ok(tape.scalar(s))
}

fn eval(f: &OpFn, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    project(&mut tape, out, weights)
}

/// Largest scaled discrepancy `|a − n| / max(1, |a|, |n|)`.
pub fn check_case(c: &Case, rng: &mut ChaCha8Rng) -> std::result::Result<f64, String> {
    let err = |e: vitq::Error| format!("{}: {e}", c.name);
    let mut tape = Tape::new();
    let vars = c
        .inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()
        .map_err(err)?;
    let out = (c.f)(&mut tape, &vars).map_err(err)?;
    let weights = randn(rng, tape.shape(out), 1.0);
    let wv = tape.constant(weights.clone()).map_err(err)?;
    let p = tape.mul(out, wv).map_err(err)?;
    let loss = tape.sum(p).map_err(err)?;
    let grads = tape.backward(loss).map_err(err)?;
    let num_f: &OpFn = c.surrogate.as_deref().unwrap_or(&*c.f);
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; c.inputs[k].len()];
        let analytic = grads.get(*v).unwrap_or(&zeros).to_vec();
        for i in 0..c.inputs[k].len() {
            let mut plus = c.inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = c.inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fp = eval(num_f, &plus, &weights).map_err(err)?;
            let fm = eval(num_f, &minus, &weights).map_err(err)?;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic[i];
            let scaled = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !(scaled <= TOL) {
                return Err(format!(
                    "{}: input {k} element {i}: analytic {a} vs numeric {numeric}",
                    c.name
                ));
            }
            worst = worst.max(scaled);
        }
    }
    Ok(worst)
}

fn fake_quant_case(rng: &mut ChaCha8Rng, per_row: bool) -> Case {
    let levels = [3usize, 4, 16, 256][rng.gen_range(0..4)];
    let rows = 3;
    let cols = 5;
    let n_par = if per_row { rows } else { 1 };
    let delta = positive(rng, &[n_par], 0.05, 0.4);
    let zero = Tensor::new(
        &[n_par],
        (0..n_par).map(|_| rng.gen_range(0.0..(levels - 1) as f64)).collect(),
    )
    .unwrap();
    let x = randn(rng, &[rows, cols], 1.0);
    // frozen rounding residuals and clip masks at the base point
    let top = (levels - 1) as f64;
    let mut res = vec![0.0; rows * cols];
    let mut inside = vec![0.0; rows * cols];
    let mut below = vec![0.0; rows * cols];
    let mut above = vec![0.0; rows * cols];
    for r in 0..rows {
        let p = if per_row { r } else { 0 };
        let (d, z) = (delta.data()[p], zero.data()[p]);
        let zr = z.round_ties_even();
        for c in 0..cols {
            let i = r * cols + c;
            let u = x.data()[i] / d;
            let v = u.round_ties_even() + zr;
            res[i] = u.round_ties_even() - u;
            if v < 0.0 {
                below[i] = 1.0;
            } else if v > top {
                above[i] = 1.0;
            } else {
                inside[i] = 1.0;
            }
        }
    }
    let zres: Vec<f64> = zero.data().iter().map(|z| z.round_ties_even() - z).collect();
    let zres = Tensor::new(&[n_par], zres).unwrap();
    let shape = [rows, cols];
    let consts = [res, inside, below, above].map(|v| Tensor::new(&shape, v).unwrap());
    let pshape = if per_row { vec![rows, 1] } else { vec![1] };
    let surrogate = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let (x, d, z) = (v[0], v[1], v[2]);
        let d = t.reshape(d, &pshape)?;
        let z = t.reshape(z, &pshape)?;
        let zres = t.constant(zres.clone())?;
        let zres = t.reshape(zres, &pshape)?;
        let [res, inside, below, above] = consts.clone().map(|c| t.constant(c).unwrap());
        let zr = t.add(z, zres)?;
        let rd = t.mul(res, d)?;
        let vin = t.add(x, rd)?;
        let vin = t.mul(vin, inside)?;
        let zd = t.mul(zr, d)?;
        let vb = t.neg(zd)?;
        let vb = t.mul(vb, below)?;
        let topz = t.neg(zr)?;
        let topz = t.add_scalar(topz, top)?;
        let va = t.mul(topz, d)?;
        let va = t.mul(va, above)?;
        let s = t.add(vin, vb)?;
        t.add(s, va)
    };
    Case {
        name: if per_row { "fake_quant_per_row" } else { "fake_quant" },
        inputs: vec![x, delta, zero],
        f: Box::new(move |t, v| t.fake_quant(v[0], v[1], v[2], levels, per_row)),
        surrogate: Some(Box::new(surrogate)),
    }
}

/// All cases for one seed.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = vec![
        case("add", vec![randn(r, &[3, 4], 1.0), randn(r, &[4], 1.0)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![randn(r, &[3, 1], 1.0), randn(r, &[3, 4], 1.0)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[3, 1], 1.0)], |t, v| t.mul(v[0], v[1])),
        case("div", vec![randn(r, &[3, 4], 1.0), positive(r, &[4], 0.5, 2.0)], |t, v| t.div(v[0], v[1])),
        case("scale", vec![randn(r, &[5], 1.0)], |t, v| t.scale(v[0], -1.7)),
        case("neg", vec![randn(r, &[5], 1.0)], |t, v| t.neg(v[0])),
        case("add_scalar", vec![randn(r, &[5], 1.0)], |t, v| t.add_scalar(v[0], 0.3)),
        case("exp", vec![randn(r, &[2, 3], 1.0)], |t, v| t.exp(v[0])),
        case("ln", vec![positive(r, &[2, 3], 0.2, 3.0)], |t, v| t.ln(v[0])),
        case("sqrt", vec![positive(r, &[2, 3], 0.2, 3.0)], |t, v| t.sqrt(v[0])),
        case("abs", vec![away_from_zero(r, &[2, 3])], |t, v| t.abs(v[0])),
        case("tanh", vec![randn(r, &[2, 3], 1.0)], |t, v| t.tanh(v[0])),
        case("gelu", vec![randn(r, &[2, 3], 2.0)], |t, v| t.gelu(v[0])),
        case("square", vec![randn(r, &[2, 3], 1.0)], |t, v| t.square(v[0])),
        case("clip", vec![away_from_zero(r, &[3, 3])], |t, v| t.clip(v[0], -0.1, 0.1)),
        case("clamp_min", vec![away_from_zero(r, &[3, 3])], |t, v| t.clamp_min(v[0], 0.0)),
        case("matmul", vec![randn(r, &[3, 4], 1.0), randn(r, &[4, 2], 1.0)], |t, v| t.matmul(v[0], v[1])),
        case("matmul_nt", vec![randn(r, &[3, 4], 1.0), randn(r, &[2, 4], 1.0)], |t, v| t.matmul_nt(v[0], v[1])),
        case("bmm", vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 4, 2], 1.0)], |t, v| t.bmm(v[0], v[1])),
        case("bmm_nt", vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 5, 4], 1.0)], |t, v| t.bmm_nt(v[0], v[1])),
        case("softmax", vec![randn(r, &[3, 5], 2.0)], |t, v| t.softmax(v[0])),
        case("log_softmax", vec![randn(r, &[3, 5], 2.0)], |t, v| t.log_softmax(v[0])),
        case(
            "layer_norm",
            vec![randn(r, &[3, 6], 1.5), randn(r, &[6], 1.0), randn(r, &[6], 1.0)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
        ),
        case("sum", vec![randn(r, &[2, 3], 1.0)], |t, v| t.sum(v[0])),
        case("mean", vec![randn(r, &[2, 3], 1.0)], |t, v| t.mean(v[0])),
        case("sum_axis", vec![randn(r, &[2, 3, 4], 1.0)], |t, v| t.sum_axis(v[0], 1)),
        case("reshape", vec![randn(r, &[2, 6], 1.0)], |t, v| t.reshape(v[0], &[3, 4])),
        case("split_heads", vec![randn(r, &[6, 4], 1.0)], |t, v| t.split_heads(v[0], 2, 2)),
        case("merge_heads", vec![randn(r, &[4, 3, 2], 1.0)], |t, v| t.merge_heads(v[0], 2)),
        case("slice_cols", vec![randn(r, &[3, 6], 1.0)], |t, v| t.slice_cols(v[0], 2, 3)),
        case("select_rows", vec![randn(r, &[4, 3], 1.0)], |t, v| t.select_rows(v[0], &[3, 0, 3])),
        case("prepend_row", vec![randn(r, &[4, 3], 1.0), randn(r, &[3], 1.0)], |t, v| {
            t.prepend_row(v[0], v[1], 2)
        }),
        case(
            "rescale_input",
            vec![randn(r, &[4, 3], 2.0), positive(r, &[3], 0.3, 2.0), randn(r, &[3], 1.0)],
            |t, v| rescale_input(t, v[0], v[1], v[2]),
        ),
        case(
            "fold_into_layer",
            vec![
                randn(r, &[2, 3], 1.0),
                randn(r, &[2], 1.0),
                positive(r, &[3], 0.3, 2.0),
                randn(r, &[3], 1.0),
            ],
            |t, v| {
                let (w, b) = fold_into_layer(t, v[0], v[1], v[2], v[3])?;
                let b = t.reshape(b, &[2, 1])?;
                t.add(w, b)
            },
        ),
        case(
            "rescaled_linear",
            vec![
                randn(r, &[4, 3], 2.0),
                randn(r, &[2, 3], 1.0),
                randn(r, &[2], 1.0),
                positive(r, &[3], 0.3, 2.0),
                randn(r, &[3], 1.0),
            ],
            |t, v| {
                let x = rescale_input(t, v[0], v[3], v[4])?;
                let (w, b) = fold_into_layer(t, v[1], v[2], v[3], v[4])?;
                let y = t.matmul_nt(x, w)?;
                t.add(y, b)
            },
        ),
        case("round_ste", vec![randn(r, &[3, 3], 3.0)], |t, v| t.round_ste(v[0])),
        case(
            "loss_feat",
            vec![randn(r, &[3, 4], 1.0), randn(r, &[3, 4], 1.0), randn(r, &[2, 2], 1.0), randn(r, &[2, 2], 1.0)],
            |t, v| loss_feat(t, &[v[0], v[2]], &[v[1], v[3]]),
        ),
        {
            // the teacher side is detached, so it enters as a constant
            let fp = randn(r, &[3, 5], 3.0);
            case("loss_kl", vec![randn(r, &[3, 5], 3.0)], move |t, v| {
                let fp = t.constant(fp.clone())?;
                loss_kl(t, fp, v[0], 3.0)
            })
        },
        case("cross_entropy", vec![randn(r, &[3, 4], 2.0)], |t, v| cross_entropy(t, v[0], &[1, 3, 0])),
        case("loss_cls", vec![randn(r, &[4, 5], 2.0)], |t, v| loss_cls_rows(t, v[0], 2)),
        case("loss_orth", vec![randn(r, &[4, 6], 1.0)], |t, v| loss_orth(t, v[0])),
        case("loss_var", vec![randn(r, &[4, 2, 3], 1.0)], |t, v| loss_var(t, v[0])),
    ];
    // round_ste passes gradients straight through: compare with a frozen-residual identity
    let rs = out.iter().position(|c| c.name == "round_ste").unwrap();
    let base = out[rs].inputs[0].clone();
    let res = Tensor::new(
        base.shape(),
        base.data().iter().map(|x| x.round_ties_even() - x).collect(),
    )
    .unwrap();
    out[rs].surrogate = Some(Box::new(move |t, v| {
        let c = t.constant(res.clone())?;
        t.add(v[0], c)
    }));
    out.push(fake_quant_case(r, false));
    out.push(fake_quant_case(r, true));
    out
}

/// `loss_reg` reads the refinement tensors through the model's parameter store.
pub fn check_loss_reg(seed: u64) -> std::result::Result<f64, String> {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        classes: 3,
        seed,
    };
    let mut model = TinyViT::new(cfg, QuantMode::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = model.refine_ids();
    for &id in &ids {
        let t = model.params_mut().get_mut(id);
        for x in t.data_mut() {
            let m = rng.gen_range(0.01..0.5);
            *x = if rng.gen::<bool>() { m } else { -m };
        }
        t.set_requires_grad(true);
    }
    let value = |m: &TinyViT| -> f64 {
        let mut tape = Tape::new();
        let mut bind = Bindings::new(m.params());
        let l = loss_reg(&mut tape, &mut bind, m).unwrap();
        tape.scalar(l)
    };
    let mut tape = Tape::new();
    let mut bind = Bindings::new(model.params());
    let l = loss_reg(&mut tape, &mut bind, &model).map_err(|e| e.to_string())?;
    let grads = tape.backward(l).map_err(|e| e.to_string())?;
    bind.deposit(&grads, model.params_mut()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for &id in &ids {
        let analytic = model.params().get(id).grad().unwrap().to_vec();
        for i in 0..analytic.len() {
            let mut p = model.clone();
            p.params_mut().get_mut(id).data_mut()[i] += H;
            let mut m = model.clone();
            m.params_mut().get_mut(id).data_mut()[i] -= H;
            let numeric = (value(&p) - value(&m)) / (2.0 * H);
            let scaled = (analytic[i] - numeric).abs() / 1f64.max(numeric.abs());
            if !(scaled <= TOL) {
                return Err(format!("loss_reg: analytic {} vs numeric {numeric}", analytic[i]));
            }
            worst = worst.max(scaled);
        }
    }
    Ok(worst)
}

/// Runs every case on `seeds` seeds; returns the number of checked cases.
pub fn run_suite(seeds: u64) -> std::result::Result<usize, String> {
    let mut n = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for c in cases(seed) {
            check_case(&c, &mut rng)?;
            n += 1;
        }
        check_loss_reg(seed)?;
        n += 1;
    }
    Ok(n)
}
