use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::NumArray;

/// Keep/prune flags for one prunable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskLayer {
    pub name: String,
    pub shape: Vec<usize>,
    keep: Vec<bool>,
}

impl MaskLayer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != keep.len() {
            return Err(Error::Dimension {
                lhs: shape,
                rhs: vec![keep.len()],
                context: "mask layer shape vs entries",
            });
        }
        Ok(Self {
            name: name.into(),
            shape,
            keep,
        })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn keep_mut(&mut self) -> &mut [bool] {
        &mut self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn surviving(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        1.0 - self.surviving() as f64 / self.keep.len() as f64
    }

    pub fn to_array(&self) -> NumArray {
        NumArray::new(
            self.shape.clone(),
            self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask layer shape is validated on construction")
    }
}

/// The pruning mask: one {0,1} layer per prunable tensor of a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    layers: Vec<MaskLayer>,
}

impl BinaryMask {
    pub fn new(layers: Vec<MaskLayer>) -> Self {
        Self { layers }
    }

    fn filled_for(params: &ParameterSet, keep: bool) -> Self {
        Self {
            layers: params
                .prunable()
                .map(|p| MaskLayer {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    keep: vec![keep; p.value.len()],
                })
                .collect(),
        }
    }

    pub fn ones_for(params: &ParameterSet) -> Self {
        Self::filled_for(params, true)
    }

    pub fn zeros_for(params: &ParameterSet) -> Self {
        Self::filled_for(params, false)
    }

    pub fn layers(&self) -> &[MaskLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MaskLayer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&MaskLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Flat view over all entries in layer order.
    pub fn iter_flat(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers.iter().flat_map(|l| l.keep.iter().copied())
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn surviving(&self) -> usize {
        self.layers.iter().map(|l| l.surviving()).sum()
    }

    pub fn pruned(&self) -> usize {
        self.total() - self.surviving()
    }

    /// Fraction of prunable entries that are zero.
    pub fn sparsity(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.pruned() as f64 / total as f64
    }

    pub fn layer_sparsity(&self) -> Vec<(String, f64)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.sparsity()))
            .collect()
    }

    pub fn is_all_ones(&self) -> bool {
        self.layers.iter().all(|l| l.keep.iter().all(|&k| k))
    }

    /// `self <= other` elementwise.
    pub fn is_nested_in(&self, other: &BinaryMask) -> bool {
        self.same_layout(other)
            && self
                .iter_flat()
                .zip(other.iter_flat())
                .all(|(a, b)| !a || b)
    }

    pub fn same_layout(&self, other: &BinaryMask) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_same_layout(&self, other: &BinaryMask) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        Err(Error::Dimension {
            lhs: self.layers.iter().map(|l| l.len()).collect(),
            rhs: other.layers.iter().map(|l| l.len()).collect(),
            context: "mask layouts differ",
        })
    }

    /// Checks the mask covers exactly the prunable tensors of `params`.
    pub fn check_congruent(&self, params: &ParameterSet) -> Result<()> {
        let mut diffs = Vec::new();
        let prunable: Vec<_> = params.prunable().collect();
        if prunable.len() != self.layers.len() {
            diffs.push(format!(
                "{} prunable tensors vs {} mask layers",
                prunable.len(),
                self.layers.len()
            ));
        }
        for (p, l) in prunable.iter().zip(&self.layers) {
            if p.name != l.name || p.value.shape() != l.shape.as_slice() {
                diffs.push(format!(
                    "{} {:?} vs mask {} {:?}",
                    p.name,
                    p.value.shape(),
                    l.name,
                    l.shape
                ));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Architecture(diffs))
        }
    }

    /// Zeroes every masked prunable weight in place.
    pub fn apply(&self, params: &mut ParameterSet) {
        for (p, l) in params.prunable_mut().zip(&self.layers) {
            for (v, &k) in p.value.data_mut().iter_mut().zip(&l.keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn applied(&self, params: &ParameterSet) -> ParameterSet {
        let mut out = params.clone();
        self.apply(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamKind, Parameter};

    fn params() -> ParameterSet {
        ParameterSet::new(vec![
            Parameter {
                name: "l0.weight".into(),
                layer: 0,
                kind: ParamKind::Weight,
                prunable: true,
                value: NumArray::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap(),
            },
            Parameter {
                name: "l0.bias".into(),
                layer: 0,
                kind: ParamKind::Bias,
                prunable: false,
                value: NumArray::new(vec![2], vec![5.0, 6.0]).unwrap(),
            },
        ])
    }

    #[test]
    fn ones_and_zeros_cover_prunable_only() {
        let p = params();
        let ones = BinaryMask::ones_for(&p);
        assert_eq!(ones.total(), 4);
        assert_eq!(ones.sparsity(), 0.0);
        assert_eq!(BinaryMask::zeros_for(&p).sparsity(), 1.0);
        ones.check_congruent(&p).unwrap();
    }

    #[test]
    fn apply_leaves_bias_alone() {
        let p = params();
        let mask = BinaryMask::new(vec![
            MaskLayer::new("l0.weight", vec![2, 2], vec![true, false, false, true]).unwrap(),
        ]);
        let out = mask.applied(&p);
        assert_eq!(out.get("l0.weight").unwrap().value.data(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(out.get("l0.bias").unwrap().value.data(), &[5.0, 6.0]);
        assert!(mask.is_nested_in(&BinaryMask::ones_for(&p)));
        assert!(!BinaryMask::ones_for(&p).is_nested_in(&mask));
    }
}
