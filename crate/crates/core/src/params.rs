//! Named parameter storage shared by the model and the optimizers.

use crate::error::Result;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; decides which phase trains it and at which rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Full-precision model weights; frozen during quantization.
    Teacher,
    /// Additive weight refinement applied before weight quantization.
    Refine,
    QuantDelta,
    QuantZero,
    RescaleAlpha,
    RescaleBeta,
}

impl ParamKind {
    pub fn is_quantization(self) -> bool {
        !matches!(self, ParamKind::Teacher)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Marks exactly the parameters selected by `pred` as requiring gradients.
    pub fn set_trainable(&mut self, pred: impl Fn(ParamKind) -> bool) {
        for (t, k) in self.tensors.iter_mut().zip(&self.kinds) {
            t.set_requires_grad(pred(*k));
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Lazily records store parameters as leaves of one tape.
#[derive(Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
        }
    }

    pub fn get(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = tape.leaf(store.get(id))?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    /// Adds each bound parameter's gradient into its tensor's gradient slot.
    pub fn deposit(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if !store.tensors[i].requires_grad() {
                continue;
            }
            match grads.get(*v) {
                Some(g) => store.tensors[i].accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; store.tensors[i].len()];
                    store.tensors[i].accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }
}
