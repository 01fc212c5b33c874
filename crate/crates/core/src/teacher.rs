//! Supervised pretraining of the full-precision model and top-1 evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::optim::{Adam, TrainSchedule};
use crate::params::{Bindings, ParamKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{stack_images, Path, TinyViT};

/// Mean of `−log softmax(logits)[target]` over the rows of `[batch, classes]` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (rows, classes) = match shape[..] {
        [c] => (1, c),
        [r, c] => (r, c),
        _ => return Err(Error::dim(format!("logits must be 1-D or 2-D, got {shape:?}"))),
    };
    if targets.len() != rows {
        return Err(Error::dim(format!("{} targets for {rows} rows", targets.len())));
    }
    let mut onehot = vec![0.0; rows * classes];
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::domain(format!("class {t} out of range for {classes} classes")));
        }
        onehot[r * classes + t] = 1.0;
    }
    let mask = tape.constant(Tensor::new(&shape, onehot)?)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.mul(lp, mask)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / rows as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// `(iter, loss)` for every step.
    pub losses: Vec<(usize, f64)>,
}

/// Trains the teacher weights with cross-entropy; quantizers are untouched.
pub fn pretrain(model: &mut TinyViT, set: &LabeledSet, s: &TrainSchedule) -> Result<PretrainReport> {
    s.validate()?;
    if set.is_empty() {
        return Err(Error::domain("pretraining set is empty"));
    }
    let cfg = model.config().clone();
    model.params_mut().set_trainable(|k| k == ParamKind::Teacher);
    model.params_mut().zero_grads();
    let mut adam = Adam::for_store(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut losses = Vec::with_capacity(s.total_iters);
    for iter in 0..s.total_iters {
        let idx: Vec<usize> = (0..s.batch_size).map(|_| rng.gen_range(0..set.len())).collect();
        let imgs: Vec<Tensor> = idx.iter().map(|&i| set.images[i].clone()).collect();
        let targets: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let batch = stack_images(&imgs, &cfg)?;
        let mut tape = Tape::new();
        let mut bind = Bindings::new(model.params());
        let (_, logits) = model.forward(&mut tape, &mut bind, &batch, Path::FullPrecision)?;
        let loss = cross_entropy(&mut tape, logits, &targets)?;
        let grads = tape.backward(loss)?;
        bind.deposit(&grads, model.params_mut())?;
        let lr = s.lr_at(iter)?;
        adam.step_store(model.params_mut(), |_| lr)?;
        losses.push((iter, tape.scalar(loss)));
    }
    model.params_mut().set_trainable(|_| false);
    Ok(PretrainReport { losses })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub fp_accuracy: f64,
    pub q_accuracy: f64,
    /// Fraction of samples where both paths predict the same class.
    pub agreement: f64,
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / pred.len() as f64
}

pub fn evaluate(model: &TinyViT, set: &LabeledSet) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::domain("evaluation set is empty"));
    }
    let fp = model.predict(&set.images, Path::FullPrecision)?;
    let q = model.predict(&set.images, Path::Quantized)?;
    Ok(EvalReport {
        fp_accuracy: accuracy(&fp, &set.labels),
        q_accuracy: accuracy(&q, &set.labels),
        agreement: accuracy(&fp, &q),
    })
}
