use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameter tensors with persistent gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Tape handles for the trainable parameters of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound to the tape")
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let grad = value.zeros_like();
        self.entries.push(ParamEntry { name: name.into(), value, grad, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    /// Simultaneous access for optimiser updates.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &mut e.grad)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.grad.fill(T::zero()));
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.len()).sum()
    }

    /// Put every trainable parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => Some(tape.leaf(e.value.clone(), requires_grad)),
                ParamKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }

    /// Add the tape's gradients into the persistent accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (e, v) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(g) = v.and_then(|v| tape.grad_ref(v)) {
                e.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// FNV-1a over names and value bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for e in &self.entries {
            e.name.bytes().for_each(&mut eat);
            for v in e.value.data() {
                v.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    /// Copy values for every name both stores share with identical shapes.
    /// Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|o| o.name == e.name && o.value.shape() == e.value.shape()) {
                e.value = src.value.clone();
                copied += 1;
            }
        }
        copied
    }

    /// Replace the value of a named tensor, checking its shape.
    pub fn load(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Contract(alloc::format!("unknown parameter {}", name)))?;
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(alloc::format!(
                "parameter {} has shape {:?}, got {:?}",
                name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), grad: e.grad.cast(), kind: e.kind })
                .collect(),
        }
    }
}
