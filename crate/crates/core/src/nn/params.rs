use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, contiguous slice of a [`ParamVector`].
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

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage partitioned into named layers.
///
/// The partition is fixed at construction; only the values change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    /// Zero-filled storage for the given `(name, shape)` layout.
    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        let mut offset = 0;
        let segments: Vec<Segment> = layout
            .iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += seg.len();
                seg
            })
            .collect();
        Self {
            data: vec![0.0; offset],
            segments,
        }
    }

    /// Rebuilds a vector from raw data and an existing layout.
    pub fn from_parts(data: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let expected: usize = segments.iter().map(Segment::len).sum();
        if expected != data.len() {
            return Err(Error::DimensionMismatch {
                what: "parameter data length",
                expected,
                got: data.len(),
            });
        }
        let mut offset = 0;
        for seg in &segments {
            if seg.offset != offset {
                return Err(Error::invalid("parameter layout", format!("segment {} is not contiguous", seg.name)));
            }
            offset += seg.len();
        }
        Ok(Self { data, segments })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    /// A zero vector with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            segments: self.segments.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }
}

pub(crate) fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}
