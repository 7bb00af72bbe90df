//! Named parameter storage shared by the model, optimizer and checkpoints.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are stored and checkpointed but never updated.
    pub trainable: bool,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, trainable, grad });
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let i = self.index_of(name).ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))?;
        Ok(&mut self.params[i])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Record parameter `name` on `tape` as a leaf tagged with its index.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self.index_of(name).ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))?;
        let p = &self.params[i];
        Ok(tape.param(i, p.value.clone(), p.trainable))
    }

    /// Add the gradients of every bound parameter on `tape` into the store.
    pub fn accumulate(&mut self, tape: &Tape) -> Result<()> {
        for (i, g) in tape.param_grads() {
            let p = self
                .params
                .get_mut(i)
                .ok_or_else(|| Error::Contract(format!("tape references parameter index {i}")))?;
            if g.shape() != p.grad.shape() {
                return Err(Error::dim("accumulate", format!("gradient {:?} for `{}` {:?}", g.shape(), p.name, p.grad.shape())));
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }
}
