//! Joint optimization of quantizers, rescales and weight refinements by
//! distilling the frozen full-precision path into the quantized path.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CalibrationSource;
use crate::error::{AtSite, Error, Result};
use crate::optim::{Adam, TrainSchedule};
use crate::params::{Bindings, ParamKind};
use crate::tape::{Tape, Var};
use crate::vit::{DualOutput, TinyViT};

/// Images in the fixed batch used to measure initial and final loss.
pub const PROBE_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_feat: f64,
    pub lambda_kl: f64,
    pub lambda_reg: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_feat: 1.0,
            lambda_kl: 1.0,
            lambda_reg: 0.01,
            tau: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_feat, self.lambda_kl, self.lambda_reg];
        if w.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `Σ_i mean((fp_i − q_i)²)`.
pub fn loss_feat(tape: &mut Tape, fp: &[Var], q: &[Var]) -> Result<Var> {
    if fp.len() != q.len() {
        return Err(Error::dim(format!(
            "feature lists differ in length: {} vs {}",
            fp.len(),
            q.len()
        )));
    }
    let mut total = tape.scalar_const(0.0)?;
    for (&a, &b) in fp.iter().zip(q) {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::dim(format!(
                "feature shapes differ: {:?} vs {:?}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
        let d = tape.sub(a, b)?;
        let d2 = tape.square(d)?;
        let m = tape.mean(d2)?;
        total = tape.add(total, m)?;
    }
    Ok(total)
}

/// `τ² · mean_b KL(softmax(fp/τ) ‖ softmax(q/τ))` with the fp side detached.
pub fn loss_kl(tape: &mut Tape, fp_logits: Var, q_logits: Var, tau: f64) -> Result<Var> {
    if tape.shape(fp_logits) != tape.shape(q_logits) {
        return Err(Error::dim(format!(
            "logit shapes differ: {:?} vs {:?}",
            tape.shape(fp_logits),
            tape.shape(q_logits)
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(fp_logits).to_vec();
    let rows = if shape.len() > 1 { shape[0] } else { 1 };
    let fp = tape.detach(fp_logits);
    let fp = tape.scale(fp, 1.0 / tau)?;
    let log_p = tape.log_softmax(fp)?;
    let p = tape.exp(log_p)?;
    let q = tape.scale(q_logits, 1.0 / tau)?;
    let log_q = tape.log_softmax(q)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let s = tape.sum(terms)?;
    tape.scale(s, tau * tau / rows as f64)
}

/// `Σ_layers mean(|W_refine|)`.
pub fn loss_reg(tape: &mut Tape, bind: &mut Bindings, model: &TinyViT) -> Result<Var> {
    let mut total = tape.scalar_const(0.0)?;
    for id in model.refine_ids() {
        let r = bind.get(tape, model.params(), id)?;
        let a = tape.abs(r)?;
        let m = tape.mean(a)?;
        total = tape.add(total, m)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub feat: Var,
    pub kl: Var,
    pub reg: Var,
}

pub fn total_loss(
    tape: &mut Tape,
    bind: &mut Bindings,
    out: &DualOutput,
    model: &TinyViT,
    w: &LossWeights,
) -> Result<LossTerms> {
    let feat = loss_feat(tape, &out.fp_features, &out.q_features).at("loss_feat")?;
    let kl = loss_kl(tape, out.fp_logits, out.q_logits, w.tau).at("loss_kl")?;
    let reg = loss_reg(tape, bind, model).at("loss_reg")?;
    let a = tape.scale(feat, w.lambda_feat)?;
    let b = tape.scale(kl, w.lambda_kl)?;
    let c = tape.scale(reg, w.lambda_reg)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms {
        total,
        feat,
        kl,
        reg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub feat: f64,
    pub kl: f64,
    pub reg: f64,
}

impl LossValues {
    fn read(tape: &Tape, t: &LossTerms) -> Self {
        Self {
            total: tape.scalar(t.total),
            feat: tape.scalar(t.feat),
            kl: tape.scalar(t.kl),
            reg: tape.scalar(t.reg),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub records: Vec<IterRecord>,
    /// Loss on the probe batch before the first update.
    pub init: LossValues,
    /// Loss on the probe batch after the last update.
    pub final_: LossValues,
}

impl TrainReport {
    /// Mean training loss over the `window` iterations ending at `iter` (exclusive).
    pub fn moving_average(&self, iter: usize, window: usize) -> Option<f64> {
        if window == 0 || iter < window || iter > self.records.len() {
            return None;
        }
        let s: f64 = self.records[iter - window..iter].iter().map(|r| r.loss.total).sum();
        Some(s / window as f64)
    }

    /// One `key=value` line per iteration, then the probe losses.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(
                out,
                "iter={} lr={:?} loss_total={:?} loss_feat={:?} loss_kl={:?} loss_reg={:?}",
                r.iter, r.lr, r.loss.total, r.loss.feat, r.loss.kl, r.loss.reg
            )
            .expect("string write");
        }
        for (tag, l) in [("init", &self.init), ("final", &self.final_)] {
            writeln!(
                out,
                "probe={tag} seed={} loss_total={:?} loss_feat={:?} loss_kl={:?} loss_reg={:?}",
                self.seed, l.total, l.feat, l.kl, l.reg
            )
            .expect("string write");
        }
        out
    }
}

/// Loss of the current model on a fixed batch, without gradients.
pub fn probe_loss(model: &TinyViT, batch: &crate::Tensor, w: &LossWeights) -> Result<LossValues> {
    let mut tape = Tape::new();
    let mut bind = Bindings::new(model.params());
    let out = model.forward_dual(&mut tape, &mut bind, batch)?;
    let terms = total_loss(&mut tape, &mut bind, &out, model, w)?;
    Ok(LossValues::read(&tape, &terms))
}

/// Distills the full-precision path into the quantized path for
/// `s.total_iters` Adam steps on batches sampled with replacement.
///
/// Teacher weights are left bitwise unchanged and labels are never seen.
pub fn run_ptq(
    model: &mut TinyViT,
    data: &CalibrationSource,
    s: &TrainSchedule,
    w: &LossWeights,
) -> Result<TrainReport> {
    s.validate()?;
    w.validate()?;
    if !model.mode().calibrated {
        return Err(Error::State("run_ptq needs a calibrated model".into()));
    }
    if data.is_empty() {
        return Err(Error::domain("calibration source is empty"));
    }
    data.check_shape(model.config())?;
    let cfg = model.config().clone();
    let probe = data.head_batch(PROBE_BATCH, &cfg)?;
    let init = probe_loss(model, &probe, w)?;

    model.params_mut().set_trainable(ParamKind::is_quantization);
    model.params_mut().zero_grads();
    let mut adam = Adam::for_store(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut records = Vec::with_capacity(s.total_iters);
    for iter in 0..s.total_iters {
        let idx: Vec<usize> = (0..s.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
        let batch = data.batch(&idx, &cfg)?;
        let mut tape = Tape::new();
        let mut bind = Bindings::new(model.params());
        let out = model.forward_dual(&mut tape, &mut bind, &batch)?;
        let terms = total_loss(&mut tape, &mut bind, &out, model, w)?;
        let loss = LossValues::read(&tape, &terms);
        let grads = tape
            .backward(terms.total)
            .map_err(|e| Error::AtSite {
                site: format!("backward at iteration {iter}"),
                source: Box::new(e),
            })?;
        bind.deposit(&grads, model.params_mut())?;
        let lr = s.lr_at(iter)?;
        let refine_lr = s.lr_for(ParamKind::Refine, iter)?;
        adam.step_store(model.params_mut(), |k| match k {
            ParamKind::Refine => refine_lr,
            _ => lr,
        })?;
        let store = model.params();
        if let Some(bad) = store.ids().find(|&id| !store.get(id).all_finite()) {
            return Err(Error::AtSite {
                site: store.name(bad).to_string(),
                source: Box::new(Error::NonFinite(format!("update at iteration {iter}"))),
            });
        }
        records.push(IterRecord { iter, lr, loss });
        log::debug!("ptq iter {iter} lr {lr:e} loss {:.6}", loss.total);
    }
    model.params_mut().set_trainable(|_| false);
    let final_ = probe_loss(model, &probe, w)?;
    Ok(TrainReport {
        seed: s.seed,
        records,
        init,
        final_,
    })
}
