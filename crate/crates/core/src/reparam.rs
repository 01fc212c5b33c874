//! Channel-wise rescaling of linear-layer inputs with exact compensation in
//! the layer's weight and bias.
//!
//! Activations are laid out `[tokens, channels]`; channel `c` is column `c`.
//! For a layer `Y = X·Wᵀ + b` the rescaled input `X' = (X - β) / α` and the
//! folded layer `W' = W·diag(α)`, `b' = b + W·β` reproduce `Y` exactly.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{median, percentile_sorted, Tensor};

/// Lower bound kept on every scale after an optimizer update.
pub const ALPHA_FLOOR: f64 = 1e-6;
/// Percentile ranges below this are degenerate and yield `α = 1`.
pub const DEGENERATE_RANGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct RescaleState {
    alpha: Tensor,
    beta: Tensor,
}

impl RescaleState {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::dim(format!(
                "alpha has {} channels, beta has {}",
                alpha.len(),
                beta.len()
            )));
        }
        if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::State("rescale factors must be positive".into()));
        }
        Ok(Self {
            alpha: Tensor::from_vec(alpha)?,
            beta: Tensor::from_vec(beta)?,
        })
    }

    pub fn identity(channels: usize) -> Result<Self> {
        Self::new(vec![1.0; channels], vec![0.0; channels])
    }

    /// Calibration-time initialization from activations `x_cal` (`[tokens, in]`)
    /// and the layer weight `w` (`[out, in]`).
    ///
    /// `β_c` is the median of channel `c`; `α_c` is the square root of the ratio
    /// between the channel's percentile range and the weight column's.
    pub fn init(x_cal: &Tensor, w: &Tensor, lo_pct: f64, hi_pct: f64) -> Result<Self> {
        let cols = check_cols(x_cal, w)?;
        if x_cal.is_empty() {
            return Err(Error::domain("empty calibration batch"));
        }
        let mut alpha = Vec::with_capacity(cols);
        let mut beta = Vec::with_capacity(cols);
        for c in 0..cols {
            let xc = x_cal.column(c);
            beta.push(median(&xc)?);
            let rx = range(xc, lo_pct, hi_pct)?;
            let rw = range(w.column(c), lo_pct, hi_pct)?;
            alpha.push(if rx < DEGENERATE_RANGE || rw < DEGENERATE_RANGE {
                1.0
            } else {
                (rx / rw).sqrt()
            });
        }
        Self::new(alpha, beta)
    }

    pub fn channel_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.alpha, self.beta)
    }

    pub fn enforce_floor(&mut self) {
        enforce_alpha_floor(self.alpha.data_mut());
    }

    /// `(X - β) / α` without gradients.
    pub fn rescale(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (a, b) = self.bind(&mut tape)?;
        let y = rescale_input(&mut tape, xv, a, b)?;
        Ok(tape.tensor(y))
    }

    /// `X'·α + β`, the inverse of [`RescaleState::rescale`].
    pub fn restore(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (a, b) = self.bind(&mut tape)?;
        check_channels(&tape, xv, a)?;
        let scaled = tape.mul(xv, a)?;
        let y = tape.add(scaled, b)?;
        Ok(tape.tensor(y))
    }

    /// Folded `(W', b')` without gradients.
    pub fn fold(&self, w: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone())?;
        let bv = tape.constant(b.clone())?;
        let (a, s) = self.bind(&mut tape)?;
        let (w2, b2) = fold_into_layer(&mut tape, wv, bv, a, s)?;
        Ok((tape.tensor(w2), tape.tensor(b2)))
    }

    /// Records `α` and `β` as leaves honoring their `requires_grad` flags.
    pub fn bind(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        Ok((tape.leaf(&self.alpha)?, tape.leaf(&self.beta)?))
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.alpha.set_requires_grad(flag);
        self.beta.set_requires_grad(flag);
    }
}

pub fn enforce_alpha_floor(alpha: &mut [f64]) {
    alpha.iter_mut().for_each(|a| *a = a.max(ALPHA_FLOOR));
}

fn range(mut v: Vec<f64>, lo_pct: f64, hi_pct: f64) -> Result<f64> {
    v.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&v, hi_pct)? - percentile_sorted(&v, lo_pct)?)
}

fn check_cols(x: &Tensor, w: &Tensor) -> Result<usize> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(Error::dim("rescale init expects 2-D activations and weights"));
    }
    if x.shape()[1] != w.shape()[1] {
        return Err(Error::dim(format!(
            "activations have {} channels but the weight has {} columns",
            x.shape()[1],
            w.shape()[1]
        )));
    }
    Ok(x.shape()[1])
}

fn check_channels(tape: &Tape, x: Var, alpha: Var) -> Result<()> {
    let xs = tape.shape(x);
    let c = tape.value(alpha).len();
    if xs[xs.len() - 1] != c {
        return Err(Error::dim(format!(
            "input {xs:?} does not have {c} channels"
        )));
    }
    Ok(())
}

/// `X' = (X - β) / α` per channel (last dimension).
pub fn rescale_input(tape: &mut Tape, x: Var, alpha: Var, beta: Var) -> Result<Var> {
    check_channels(tape, x, alpha)?;
    if tape.value(beta).len() != tape.value(alpha).len() {
        return Err(Error::dim("alpha and beta lengths differ"));
    }
    let centered = tape.sub(x, beta)?;
    tape.div(centered, alpha)
}

/// `W' = W·diag(α)`, `b' = b + W·β` for `W: [out, in]`, `b: [out]`.
pub fn fold_into_layer(
    tape: &mut Tape,
    w: Var,
    b: Var,
    alpha: Var,
    beta: Var,
) -> Result<(Var, Var)> {
    let ws = tape.shape(w).to_vec();
    if ws.len() != 2 {
        return Err(Error::dim(format!("weight must be 2-D, got {ws:?}")));
    }
    check_channels(tape, w, alpha)?;
    if tape.value(beta).len() != ws[1] || tape.value(b).len() != ws[0] {
        return Err(Error::dim("bias or shift length does not match the weight"));
    }
    let w2 = tape.mul(w, alpha)?;
    let beta_row = tape.reshape(beta, &[1, ws[1]])?;
    let shift = tape.matmul_nt(w, beta_row)?;
    let shift = tape.reshape(shift, &[ws[0]])?;
    let b2 = tape.add(b, shift)?;
    Ok((w2, b2))
}
