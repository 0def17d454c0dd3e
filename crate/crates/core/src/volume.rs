//! Volumetric data carriers shared by every stage of the pipeline.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Scalar intensity grid of shape `(D, H, W)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        check_len(dims, data.len(), 1)?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; voxels(dims)] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let mut data = Vec::with_capacity(voxels(dims));
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f([d, h, w]));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, p: [usize; 3]) -> f64 {
        self.data[linear_index(self.dims, p)]
    }

    /// `[1, 1, D, H, W]` view for the tape.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new([1, 1, d, h, w], self.data.clone()).expect("volume length")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [1, 1, d, h, w] => Self::new([*d, *h, *w], t.data().to_vec()),
            [d, h, w] => Self::new([*d, *h, *w], t.data().to_vec()),
            s => shape_err(format!("expected a single-channel volume, got {s:?}")),
        }
    }
}

/// Integer segmentation grid; label 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: [usize; 3],
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u16>) -> Result<Self> {
        check_len(dims, data.len(), 1)?;
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn at(&self, p: [usize; 3]) -> u16 {
        self.data[linear_index(self.dims, p)]
    }

    /// Sorted distinct label values.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.clone();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

/// Per-voxel displacement `u(p)` in voxel units, stored as three
/// component planes (depth, height, width): `φ(p) = p + u(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl DeformationField {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        check_len(dims, data.len(), 3)?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; 3 * voxels(dims)] }
    }

    /// Builds a field from a per-voxel displacement function `(d, h, w) -> u`.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let n = voxels(dims);
        let mut data = vec![0.0; 3 * n];
        let mut v = 0;
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let u = f([d, h, w]);
                    for c in 0..3 {
                        data[c * n + v] = u[c];
                    }
                    v += 1;
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = voxels(self.dims);
        &self.data[c * n..][..n]
    }

    pub fn displacement(&self, p: [usize; 3]) -> [f64; 3] {
        let n = voxels(self.dims);
        let v = linear_index(self.dims, p);
        [self.data[v], self.data[n + v], self.data[2 * n + v]]
    }

    pub fn max_norm(&self) -> f64 {
        let n = voxels(self.dims);
        (0..n)
            .map(|v| (0..3).map(|c| self.data[c * n + v].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `[1, 3, D, H, W]` view for the tape.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new([1, 3, d, h, w], self.data.clone()).expect("field length")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [1, 3, d, h, w] | [3, d, h, w] => Self::new([*d, *h, *w], t.data().to_vec()),
            s => shape_err(format!("expected a [3, D, H, W] field, got {s:?}")),
        }
    }
}

pub fn voxels(dims: [usize; 3]) -> usize {
    dims.iter().product()
}

pub fn linear_index(dims: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

fn check_len(dims: [usize; 3], len: usize, channels: usize) -> Result<()> {
    if voxels(dims) * channels != len {
        return shape_err(format!("dims {dims:?} x {channels} channels need {} values, got {len}", voxels(dims) * channels));
    }
    Ok(())
}
