//! Named, layer-indexed parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NumArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    /// Index of the layer descriptor that owns this tensor.
    pub layer: usize,
    pub kind: ParamKind,
    /// Whether the tensor participates in masks. Biases and affine terms never do.
    pub prunable: bool,
    pub value: NumArray,
}

/// Ordered parameters of one network. Order is fixed by the network layout
/// and is the "layer index" used for tie-breaking in pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

impl ParameterSet {
    pub fn new(params: Vec<Parameter>) -> Self {
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn prunable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.prunable)
    }

    pub fn prunable_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut().filter(|p| p.prunable)
    }

    /// Total number of prunable weights.
    pub fn prunable_count(&self) -> usize {
        self.prunable().map(|p| p.value.len()).sum()
    }

    /// Zero-filled tensors with the same layout, e.g. for momentum buffers.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    value: NumArray::zeros(p.value.shape()),
                    ..p.clone()
                })
                .collect(),
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_congruent(&self, other: &ParameterSet) -> Result<()> {
        let diffs = self.layout_differences(other);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Architecture(diffs))
        }
    }

    pub(crate) fn layout_differences(&self, other: &ParameterSet) -> Vec<String> {
        let mut diffs = Vec::new();
        let n = self.params.len().max(other.params.len());
        for i in 0..n {
            match (self.params.get(i), other.params.get(i)) {
                (Some(a), Some(b)) if a.name == b.name && a.value.shape() == b.value.shape() => {}
                (Some(a), Some(b)) => diffs.push(format!(
                    "{} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )),
                (Some(a), None) => diffs.push(format!("{} missing on the right", a.name)),
                (None, Some(b)) => diffs.push(format!("{} missing on the left", b.name)),
                (None, None) => unreachable!(),
            }
        }
        diffs
    }

    /// Bitwise equality of every value.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl<'a> IntoIterator for &'a ParameterSet {
    type Item = &'a Parameter;
    type IntoIter = std::slice::Iter<'a, Parameter>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}
