//! Volume, mask and 2.5D slice-stack containers.

use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical voxel size in millimetres, ordered `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub fn new(z: f64, y: f64, x: f64) -> Result<Self> {
        let s = Self { z, y, x };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic(v: f64) -> Self {
        Self { z: v, y: v, x: v }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.z, self.y, self.x].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("spacing must be positive, got {self:?}")))
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            z: self.z * f,
            y: self.y * f,
            x: self.x * f,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }
}

/// 3-D scalar image, voxels indexed `[z, y, x]` (depth × height × width).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing: Spacing,
    /// Min/max of the source data before any normalisation.
    pub intensity_range: (f32, f32),
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        if voxels.is_empty() {
            return Err(Error::Invalid("volume must have D, H, W >= 1".into()));
        }
        let intensity_range = min_max(voxels.iter().copied());
        Ok(Self {
            voxels,
            spacing,
            intensity_range,
        })
    }

    /// `(D, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(Axis(0), z)
    }
}

pub(crate) fn min_max(it: impl Iterator<Item = f32>) -> (f32, f32) {
    it.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Binary label volume (0 background, 1 prostate).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    pub labels: Array3<u8>,
}

impl MaskVolume {
    pub fn new(labels: Array3<u8>) -> Result<Self> {
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("mask labels must be 0 or 1".into()));
        }
        Ok(Self { labels })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            labels: Array3::zeros(dims),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&v| v == 0)
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, u8> {
        self.labels.index_axis(Axis(0), z)
    }
}

/// `c` consecutive slices centred on `center_index`, shape `(c, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub channels: Array3<f32>,
    pub center_index: usize,
}

impl SliceStack {
    pub fn num_channels(&self) -> usize {
        self.channels.dim().0
    }

    pub fn height(&self) -> usize {
        self.channels.dim().1
    }

    pub fn width(&self) -> usize {
        self.channels.dim().2
    }

    pub fn center(&self) -> ArrayView2<'_, f32> {
        self.channels.index_axis(Axis(0), self.num_channels() / 2)
    }
}

/// One labelled case.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub mask: MaskVolume,
}

impl Case {
    pub fn new(id: impl Into<String>, volume: Volume, mask: MaskVolume) -> Result<Self> {
        let id = id.into();
        if volume.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "case {id}: volume {:?} vs mask {:?}",
                volume.dims(),
                mask.dims()
            )));
        }
        Ok(Self { id, volume, mask })
    }
}

/// A set of labelled volumes from one acquisition domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Case>,
    pub domain_tag: String,
}

impl Dataset {
    pub fn new(items: Vec<Case>, domain_tag: impl Into<String>) -> Self {
        Self {
            items,
            domain_tag: domain_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Cases `[start, end)` as a new dataset with the same tag.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            items: self.items[range].to_vec(),
            domain_tag: self.domain_tag.clone(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            domain_tag: self.domain_tag.clone(),
        }
    }

    pub fn total_slices(&self) -> usize {
        self.items.iter().map(|c| c.volume.depth()).sum()
    }
}
