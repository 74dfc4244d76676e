//! Named parameter collections.
//!
//! [`ParamTree`] is the single carrier for model parameters: the live weights,
//! the pristine episodic snapshot, the momentum shadow, and checkpoint
//! contents are all trees with the same keys and shapes. [`GradTree`] mirrors
//! a tree's keys and shapes and carries gradients (zero for frozen blocks).

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor2;

#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub tensor: Tensor2,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamTree {
    blocks: Vec<ParamBlock>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor2, trainable: bool) -> Result<()> {
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::invalid(format!("duplicate block name `{name}`")));
        }
        self.blocks.push(ParamBlock { name: name.to_string(), tensor, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.blocks
            .iter_mut()
            .find(|b| b.name == name)
            .map(|b| &mut b.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor2> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing block `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.blocks
            .iter()
            .any(|b| b.name == name && b.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        match self.blocks.iter_mut().find(|b| b.name == name) {
            Some(b) => {
                b.trainable = trainable;
                Ok(())
            }
            None => Err(Error::invalid(format!("missing block `{name}`"))),
        }
    }

    /// Mark exactly the named blocks trainable, everything else frozen.
    pub fn set_trainable_exactly(&mut self, names: &[&str]) -> Result<()> {
        for n in names {
            if !self.blocks.iter().any(|b| b.name == *n) {
                return Err(Error::invalid(format!("missing block `{n}`")));
            }
        }
        for b in &mut self.blocks {
            b.trainable = names.contains(&b.name.as_str());
        }
        Ok(())
    }

    /// Same block names, shapes, and order.
    pub fn congruent(&self, other: &ParamTree) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.tensor.same_shape(&b.tensor))
    }

    /// Copy all values (and trainability flags) from `other`.
    pub fn reset_from(&mut self, other: &ParamTree) -> Result<()> {
        if !self.congruent(other) {
            return Err(Error::invalid("reset_from: trees not congruent"));
        }
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            dst.tensor = src.tensor.clone();
            dst.trainable = src.trainable;
        }
        Ok(())
    }

    /// `self ← a·self + b·other` over trainable blocks; frozen blocks are left
    /// untouched so they stay bit-identical through long update chains.
    pub fn linear_combine_trainable(&mut self, a: f64, b: f64, other: &ParamTree) -> Result<()> {
        if !self.congruent(other) {
            return Err(Error::invalid("linear_combine: trees not congruent"));
        }
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            if !dst.trainable {
                continue;
            }
            for (x, y) in dst.tensor.data_mut().iter_mut().zip(src.tensor.data()) {
                *x = a * *x + b * *y;
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ParamTree) -> bool {
        self.congruent(other)
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.tensor.bit_eq(&b.tensor))
    }

    /// Largest absolute difference over all entries of all blocks.
    pub fn max_abs_diff(&self, other: &ParamTree) -> f64 {
        debug_assert!(self.congruent(other));
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.tensor.max_abs_diff(&b.tensor))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct GradTree {
    blocks: Vec<(String, Tensor2)>,
}

impl GradTree {
    /// All-zero gradients congruent with `params` (every block, frozen included).
    pub fn zeros_like(params: &ParamTree) -> Self {
        Self {
            blocks: params
                .blocks()
                .iter()
                .map(|b| (b.name.clone(), Tensor2::zeros(b.tensor.rows(), b.tensor.cols())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.blocks
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.blocks.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn congruent_with(&self, params: &ParamTree) -> bool {
        self.blocks.len() == params.len()
            && self
                .blocks
                .iter()
                .zip(params.blocks())
                .all(|((n, t), b)| *n == b.name && t.same_shape(&b.tensor))
    }

    /// Flatten every entry (used for gradient-direction cosines in tests).
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|(_, t)| t.data())
            .fold(0.0, |m, v| v.abs().max(m))
    }
}
