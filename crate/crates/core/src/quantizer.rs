//! Simulated uniform quantization with learnable step size and zero-point.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{percentile_sorted, Tensor};

/// Lower bound kept on every step size after an optimizer update.
pub const DELTA_FLOOR: f64 = 1e-8;
/// Range below which the percentile range is treated as degenerate.
pub const RANGE_EPS: f64 = 1e-8;
/// Weight quantizers with at most this many levels use the full min/max range.
pub const MINMAX_MAX_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerOutputChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Weights,
    Activations,
}

impl Granularity {
    pub fn tag(self) -> u8 {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerOutputChannel => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Granularity::PerTensor),
            1 => Ok(Granularity::PerOutputChannel),
            t => Err(Error::Format(format!("unknown granularity tag {t}"))),
        }
    }
}

impl Target {
    pub fn tag(self) -> u8 {
        match self {
            Target::Weights => 0,
            Target::Activations => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Target::Weights),
            1 => Ok(Target::Activations),
            t => Err(Error::Format(format!("unknown quantizer target tag {t}"))),
        }
    }
}

/// Step size and zero-point of one quantizer, shared or per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerState {
    levels: usize,
    granularity: Granularity,
    target: Target,
    delta: Tensor,
    zero_point: Tensor,
}

impl QuantizerState {
    pub fn new(
        levels: usize,
        granularity: Granularity,
        target: Target,
        delta: Vec<f64>,
        zero_point: Vec<f64>,
    ) -> Result<Self> {
        if levels < 2 {
            return Err(Error::State(format!("quantizer needs at least 2 levels, got {levels}")));
        }
        if granularity == Granularity::PerOutputChannel && target == Target::Activations {
            return Err(Error::State("activation quantizers are per-tensor".into()));
        }
        if granularity == Granularity::PerTensor && delta.len() != 1 {
            return Err(Error::dim("per-tensor quantizer holds a single step size"));
        }
        if delta.len() != zero_point.len() {
            return Err(Error::dim("step size and zero-point lengths differ"));
        }
        if delta.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::State("quantizer step size must be positive".into()));
        }
        Ok(Self {
            levels,
            granularity,
            target,
            delta: Tensor::from_vec(delta)?,
            zero_point: Tensor::from_vec(zero_point)?,
        })
    }

    /// Per-tensor initialization from the `[lo_pct, hi_pct]` percentile range.
    pub fn init_from_data(
        x: &Tensor,
        levels: usize,
        lo_pct: f64,
        hi_pct: f64,
        target: Target,
    ) -> Result<Self> {
        let (d, z) = range_init(x.data(), levels, lo_pct, hi_pct)?;
        Self::new(levels, Granularity::PerTensor, target, vec![d], vec![z])
    }

    /// One `(Δ, z)` per row of a `[out, in]` weight matrix.
    pub fn init_per_channel(w: &Tensor, levels: usize, lo_pct: f64, hi_pct: f64) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::dim(format!(
                "per-channel init expects a 2-D weight, got {:?}",
                w.shape()
            )));
        }
        let mut delta = Vec::with_capacity(w.shape()[0]);
        let mut zero = Vec::with_capacity(w.shape()[0]);
        for r in 0..w.shape()[0] {
            let (d, z) = range_init(w.row(r), levels, lo_pct, hi_pct)?;
            delta.push(d);
            zero.push(z);
        }
        Self::new(levels, Granularity::PerOutputChannel, Target::Weights, delta, zero)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn zero_point(&self) -> &Tensor {
        &self.zero_point
    }

    pub fn delta_mut(&mut self) -> &mut Tensor {
        &mut self.delta
    }

    pub fn zero_point_mut(&mut self) -> &mut Tensor {
        &mut self.zero_point
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.delta, self.zero_point)
    }

    /// Restores `delta >= DELTA_FLOOR` elementwise.
    pub fn enforce_floor(&mut self) {
        enforce_delta_floor(self.delta.data_mut());
    }

    /// Quantize-dequantize `x` on a fresh tape without gradients.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let y = fake_quantize(&mut tape, xv, self)?;
        Ok(tape.tensor(y))
    }
}

pub fn enforce_delta_floor(delta: &mut [f64]) {
    delta.iter_mut().for_each(|d| *d = d.max(DELTA_FLOOR));
}

/// `(Δ, z)` for `levels` grid points spanning the percentile range of `x`.
pub fn range_init(x: &[f64], levels: usize, lo_pct: f64, hi_pct: f64) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::domain("cannot initialize a quantizer from an empty tensor"));
    }
    if levels < 2 {
        return Err(Error::State(format!("quantizer needs at least 2 levels, got {levels}")));
    }
    if lo_pct >= hi_pct {
        return Err(Error::domain(format!("percentile pair ({lo_pct}, {hi_pct}) is not increasing")));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, lo_pct)?;
    let hi = percentile_sorted(&sorted, hi_pct)?;
    let steps = (levels - 1) as f64;
    let mut delta = (hi - lo) / steps;
    if hi - lo < RANGE_EPS {
        let absmax = sorted[0].abs().max(sorted[sorted.len() - 1].abs());
        delta = absmax.max(RANGE_EPS) / steps;
    }
    Ok((delta, (-lo / delta).round_ties_even()))
}

/// Percentile pair used for a weight quantizer with `levels` levels.
pub fn weight_percentiles(levels: usize, lo_pct: f64, hi_pct: f64) -> (f64, f64) {
    if levels <= MINMAX_MAX_LEVELS {
        (0.0, 100.0)
    } else {
        (lo_pct, hi_pct)
    }
}

/// Straight-through rounding: forward `round(x)`, backward identity.
pub fn round_ste(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.round_ste(x)
}

/// Records `q`'s parameters as leaves and fake-quantizes `x` with them.
pub fn fake_quantize(tape: &mut Tape, x: Var, q: &QuantizerState) -> Result<Var> {
    let delta = tape.leaf(&q.delta)?;
    let zero = tape.leaf(&q.zero_point)?;
    fake_quantize_with(tape, x, delta, zero, q.levels, q.granularity)
}

/// Fake quantization with already-recorded step size and zero-point.
pub fn fake_quantize_with(
    tape: &mut Tape,
    x: Var,
    delta: Var,
    zero: Var,
    levels: usize,
    granularity: Granularity,
) -> Result<Var> {
    let per_row = granularity == Granularity::PerOutputChannel;
    if per_row && tape.shape(x).len() != 2 {
        return Err(Error::dim("per-channel quantization expects a 2-D input"));
    }
    tape.fake_quant(x, delta, zero, levels, per_row)
}

/// Weight and activation level counts, e.g. `W4A4` or `W1.58A8`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitConfig {
    pub weight_levels: usize,
    pub activation_levels: usize,
    pub label: String,
}

impl BitConfig {
    pub fn new(weight_levels: usize, activation_levels: usize) -> Result<Self> {
        if weight_levels < 2 || activation_levels < 2 {
            return Err(Error::Invalid("bit config needs at least 2 levels per side".into()));
        }
        let label = format!(
            "W{}A{}",
            bits_label(weight_levels),
            bits_label(activation_levels)
        );
        Ok(Self {
            weight_levels,
            activation_levels,
            label,
        })
    }
}

fn bits_label(levels: usize) -> String {
    if levels == 3 {
        "1.58".into()
    } else if levels.is_power_of_two() {
        levels.trailing_zeros().to_string()
    } else {
        format!("L{levels}")
    }
}

fn parse_bits(s: &str) -> Result<usize> {
    if s == "1.58" {
        return Ok(3);
    }
    if let Some(l) = s.strip_prefix('L') {
        return l.parse().map_err(|_| Error::Invalid(format!("bad level count {s:?}")));
    }
    let bits: u32 = s
        .parse()
        .map_err(|_| Error::Invalid(format!("bad bit width {s:?}")))?;
    if !(1..=30).contains(&bits) {
        return Err(Error::Invalid(format!("bit width {bits} out of range")));
    }
    Ok(1usize << bits)
}

impl FromStr for BitConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix('W')
            .ok_or_else(|| Error::Invalid(format!("bit config {s:?} must look like W4A4")))?;
        let (w, a) = rest
            .split_once('A')
            .ok_or_else(|| Error::Invalid(format!("bit config {s:?} must look like W4A4")))?;
        BitConfig::new(parse_bits(w)?, parse_bits(a)?)
    }
}

impl fmt::Display for BitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}
