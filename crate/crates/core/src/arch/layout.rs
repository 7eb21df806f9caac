use gradcore::Tensor;
use serde::{Deserialize, Serialize};

use super::{ArchError, ArchSpec, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Bias,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    pub total_len: usize,
}

impl ParamLayout {
    pub(crate) fn push(&mut self, layer: usize, role: TensorRole, shape: Vec<usize>) {
        let len = shape.iter().product();
        self.segments.push(Segment {
            layer,
            role,
            shape,
            offset: self.total_len,
            len,
        });
        self.total_len += len;
    }

    /// Segment of `role` belonging to `layer`, if that layer has one.
    pub fn find(&self, layer: usize, role: TensorRole) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layer == layer && s.role == role)
    }
}

/// A flat parameter vector tagged with the architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f32>,
    layout: ParamLayout,
    arch_id: u64,
}

impl FlatParams {
    /// Wraps `values`, checking length and finiteness against `arch`.
    pub fn new(arch: &ArchSpec, values: Vec<f32>) -> Result<Self> {
        let layout = arch.layout();
        if values.len() != layout.total_len {
            return Err(ArchError::Length {
                expected: layout.total_len,
                got: values.len(),
                first_segment: first_short_segment(layout, values.len()),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ArchError::NonFinite { index, value });
        }
        Ok(Self {
            values,
            layout: layout.clone(),
            arch_id: arch.id(),
        })
    }

    pub fn zeros(arch: &ArchSpec) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            layout: arch.layout().clone(),
            arch_id: arch.id(),
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn arch_id(&self) -> u64 {
        self.arch_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_arch(&self, arch: &ArchSpec) -> Result<()> {
        if self.arch_id != arch.id() {
            return Err(ArchError::ArchMismatch {
                expected: arch.id(),
                found: self.arch_id,
            });
        }
        Ok(())
    }
}

fn first_short_segment(layout: &ParamLayout, len: usize) -> usize {
    layout
        .segments
        .iter()
        .position(|s| s.offset + s.len > len)
        .unwrap_or(layout.segments.len())
}

/// Concatenates per-layer tensors (in layout order) into one flat vector.
pub fn flatten(per_layer: &[Tensor<f32>], arch: &ArchSpec) -> Result<FlatParams> {
    let layout = arch.layout();
    if per_layer.len() != layout.segments.len() {
        return Err(ArchError::SegmentCount {
            expected: layout.segments.len(),
            got: per_layer.len(),
        });
    }
    let mut values = Vec::with_capacity(layout.total_len);
    for (index, (seg, t)) in layout.segments.iter().zip(per_layer).enumerate() {
        if t.shape() != seg.shape.as_slice() {
            return Err(ArchError::SegmentShape {
                index,
                layer: seg.layer,
                role: seg.role,
                expected: seg.shape.clone(),
                got: t.shape().to_vec(),
            });
        }
        values.extend_from_slice(t.data());
    }
    FlatParams::new(arch, values)
}

/// Splits a flat vector back into per-layer tensors.
pub fn slice(flat: &FlatParams) -> Vec<Tensor<f32>> {
    flat.layout
        .segments
        .iter()
        .map(|seg| Tensor::new(&seg.shape, flat.values[seg.range()].to_vec()).expect("layout covers the vector"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin_arch, ArchKind};

    #[test]
    fn short_vector_names_first_incomplete_segment() {
        let arch = builtin_arch(ArchKind::Cnn3, &[1, 14, 14], 10).unwrap();
        match FlatParams::new(&arch, vec![0.0; 75]) {
            Err(ArchError::Length { first_segment, .. }) => assert_eq!(first_segment, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flatten_rejects_misshapen_segment() {
        let arch = builtin_arch(ArchKind::Cnn2, &[1, 8, 8], 3).unwrap();
        let mut parts = slice(&FlatParams::zeros(&arch));
        parts[2] = Tensor::zeros(&[16, 8, 3, 2]);
        assert!(matches!(flatten(&parts, &arch), Err(ArchError::SegmentShape { index: 2, .. })));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let arch = builtin_arch(ArchKind::Mlp, &[2], 2).unwrap();
        let mut v = vec![0.0; arch.param_count()];
        v[5] = f32::NAN;
        assert!(matches!(FlatParams::new(&arch, v), Err(ArchError::NonFinite { index: 5, .. })));
    }
}
