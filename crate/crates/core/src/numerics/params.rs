use std::ops::Index;

use super::{ArrayMap, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors. Names are checkpoint keys such as
/// `encoder.layer0.attn.query`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`. With `trainable == false` they
    /// enter as constants and nothing is kept for a backward pass.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.leaf(t)
                    } else {
                        tape.constant(t.shape(), t.values().to_vec())
                            .expect("parameter shape is consistent")
                    }
                })
                .collect(),
        )
    }

    /// Binds only parameters whose name satisfies `select`; the rest map to
    /// an empty placeholder that fails any shape check it meets.
    pub fn bind_where(&self, tape: &mut Tape, trainable: bool, select: impl Fn(&str) -> bool) -> Bound {
        let placeholder = tape.constant(&[0], Vec::new()).expect("empty shape");
        Bound(
            self.names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| match (select(name), trainable) {
                    (false, _) => placeholder,
                    (true, true) => tape.leaf(t),
                    (true, false) => tape
                        .constant(t.shape(), t.values().to_vec())
                        .expect("parameter shape is consistent"),
                })
                .collect(),
        )
    }

    /// Adds `d loss / d param` into each parameter's grad slot. Parameters not
    /// on the loss path receive zeros so the optimizer sees every tensor.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (tensor, &var) in self.tensors.iter_mut().zip(&bound.0) {
            tensor.accumulate_grad(&grads.wrt(var))?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn to_arrays(&self) -> ArrayMap {
        let mut map = ArrayMap::new();
        for (name, t) in self.iter() {
            map.insert(name, Tensor::new(t.shape().to_vec(), t.values().to_vec()).unwrap());
        }
        map
    }

    /// Overwrites values from `map`; every parameter must be present with a
    /// matching shape.
    pub fn load_arrays(&mut self, map: &ArrayMap) -> Result<()> {
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != tensor.shape() {
                return Err(Error::Shape {
                    op: "load_arrays",
                    lhs: tensor.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            tensor.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }
}
