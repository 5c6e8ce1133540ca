use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tape, Tensor, Var};

/// Named block inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage split into named, contiguous segments
/// (one per layer weight or bias).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    segments: Vec<Segment>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn new(named: Vec<(String, Tensor)>) -> Result<Self, AutodiffError> {
        let mut seen = HashSet::new();
        let mut segments = Vec::with_capacity(named.len());
        let mut data = Vec::new();
        for (name, t) in named {
            if !seen.insert(name.clone()) {
                return Err(AutodiffError::DuplicateSegment(name));
            }
            segments.push(Segment {
                name,
                shape: t.shape().to_vec(),
                offset: data.len(),
            });
            data.extend_from_slice(t.data());
        }
        Ok(Self { segments, data })
    }

    /// Reassembles a vector with `layout`'s segments from flat values.
    pub fn from_flat(layout: &ParamVector, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if data.len() != layout.data.len() {
            return Err(AutodiffError::InvalidTensor(format!(
                "layout holds {} values but {} were given",
                layout.data.len(),
                data.len()
            )));
        }
        Ok(Self {
            segments: layout.segments.clone(),
            data,
        })
    }

    /// Builds a vector with `layout`'s segments from one tensor per segment.
    pub fn from_tensors(layout: &ParamVector, tensors: Vec<Tensor>) -> Result<Self, AutodiffError> {
        if tensors.len() != layout.segments.len() {
            return Err(AutodiffError::InvalidTensor(format!(
                "layout has {} segments but {} tensors were given",
                layout.segments.len(),
                tensors.len()
            )));
        }
        let mut data = Vec::with_capacity(layout.data.len());
        for (seg, t) in layout.segments.iter().zip(&tensors) {
            if t.numel() != seg.len() {
                return Err(AutodiffError::Shape {
                    op: "from_tensors",
                    detail: format!("segment {} expects {:?}, got {:?}", seg.name, seg.shape, t.shape()),
                });
            }
            data.extend_from_slice(t.data());
        }
        Ok(Self {
            segments: layout.segments.clone(),
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self.segments.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn segment_tensor(&self, index: usize) -> Tensor {
        let s = &self.segments[index];
        Tensor::from_parts(s.shape.clone(), self.data[s.offset..s.offset + s.len()].to_vec())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        (0..self.segments.len()).map(|i| self.segment_tensor(i)).collect()
    }

    /// Records one leaf per segment.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        (0..self.segments.len())
            .map(|i| tape.leaf(self.segment_tensor(i)))
            .collect()
    }

    /// True when both vectors have identical segment names and shapes.
    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    /// Concatenates several vectors. Segment names must stay unique.
    pub fn concat(parts: &[&ParamVector]) -> Result<Self, AutodiffError> {
        let named = parts
            .iter()
            .flat_map(|p| {
                p.segments
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.name.clone(), p.segment_tensor(i)))
            })
            .collect();
        Self::new(named)
    }
}
