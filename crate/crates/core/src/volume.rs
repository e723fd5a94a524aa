//! 3D voxel grids and binary masks. Storage order is x fastest, then y, then z.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("dims {dims:?} hold {expected} voxels but data has {got}")]
    DataLength {
        dims: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("dims must be >= 1 per axis, got {0:?}")]
    EmptyDim([usize; 3]),
    #[error("spacing must be positive and finite, got {0:?}")]
    Spacing([f32; 3]),
    #[error("dims differ: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// On-disk voxel type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    U8,
    I16,
    F32,
}

impl DataType {
    pub fn nifti_code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::F32 => 16,
        }
    }

    pub fn from_nifti_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DataType::U8),
            4 => Some(DataType::I16),
            16 => Some(DataType::F32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::F32 => 4,
        }
    }
}

/// Scanner-space orientation, carried through I/O but never applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            qfac: 1.0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }
}

/// Axis along which a volume is cut into 2D slices.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    X,
    Y,
    #[default]
    Z,
}

impl std::str::FromStr for SliceAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(SliceAxis::X),
            "y" => Ok(SliceAxis::Y),
            "z" | "axial" => Ok(SliceAxis::Z),
            _ => Err(format!("unknown slice axis '{s}' (expected x, y or z)")),
        }
    }
}

impl SliceAxis {
    fn index(self) -> usize {
        match self {
            SliceAxis::X => 0,
            SliceAxis::Y => 1,
            SliceAxis::Z => 2,
        }
    }

    /// In-plane (row axis, column axis).
    fn plane_axes(self) -> (usize, usize) {
        match self {
            SliceAxis::X => (2, 1),
            SliceAxis::Y => (2, 0),
            SliceAxis::Z => (1, 0),
        }
    }
}

/// Dimensions of a 3D grid with slicing helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub dims: [usize; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VolumeError::EmptyDim(dims));
        }
        Ok(Grid { dims })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let r = i / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    pub fn slice_count(&self, axis: SliceAxis) -> usize {
        self.dims[axis.index()]
    }

    /// (rows, cols) of a slice.
    pub fn slice_shape(&self, axis: SliceAxis) -> (usize, usize) {
        let (r, c) = axis.plane_axes();
        (self.dims[r], self.dims[c])
    }

    /// Flat index of (row, col) in slice `s`.
    pub fn slice_index(&self, axis: SliceAxis, s: usize, row: usize, col: usize) -> usize {
        let mut p = [0; 3];
        let (r, c) = axis.plane_axes();
        p[axis.index()] = s;
        p[r] = row;
        p[c] = col;
        self.index(p[0], p[1], p[2])
    }

    pub fn extract_slice<T: Copy>(&self, data: &[T], axis: SliceAxis, s: usize) -> Vec<T> {
        let (h, w) = self.slice_shape(axis);
        let mut out = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                out.push(data[self.slice_index(axis, s, row, col)]);
            }
        }
        out
    }

    pub fn insert_slice<T: Copy>(&self, data: &mut [T], axis: SliceAxis, s: usize, plane: &[T]) {
        let (h, w) = self.slice_shape(axis);
        for row in 0..h {
            for col in 0..w {
                data[self.slice_index(axis, s, row, col)] = plane[row * w + col];
            }
        }
    }

    fn neighbors6(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let [x, y, z] = self.coords(i);
        let [nx, ny, nz] = self.dims;
        let sxy = nx * ny;
        [
            (x > 0).then(|| i - 1),
            (x + 1 < nx).then(|| i + 1),
            (y > 0).then(|| i - nx),
            (y + 1 < ny).then(|| i + nx),
            (z > 0).then(|| i - sxy),
            (z + 1 < nz).then(|| i + sxy),
        ]
        .into_iter()
        .flatten()
    }
}

/// Voxel volume in `f32` with physical metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    spacing: [f32; 3],
    pub orientation: Orientation,
    pub source_dtype: DataType,
    /// Canonical little-endian header bytes of the file this volume came from.
    pub header: Option<Box<[u8; 348]>>,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let grid = Grid::new(dims)?;
        if data.len() != grid.len() {
            return Err(VolumeError::DataLength {
                dims,
                expected: grid.len(),
                got: data.len(),
            });
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::Spacing(spacing));
        }
        Ok(Volume {
            grid,
            spacing,
            orientation: Orientation::default(),
            source_dtype: DataType::F32,
            header: None,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        let n = Grid::new(dims)?.len();
        Volume::new(dims, [1.0; 3], vec![value; n])
    }

    /// Same metadata, new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(VolumeError::DataLength {
                dims: self.dims(),
                expected: self.data.len(),
                got: data.len(),
            });
        }
        Ok(Volume {
            data,
            header: self.header.clone(),
            ..*self
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn check_same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(VolumeError::DimsMismatch {
                a: self.dims(),
                b: other.dims(),
            });
        }
        Ok(())
    }
}

/// Boolean voxel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask3 {
    grid: Grid,
    data: Vec<bool>,
}

impl BinaryMask3 {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let grid = Grid::new(dims)?;
        if data.len() != grid.len() {
            return Err(VolumeError::DataLength {
                dims,
                expected: grid.len(),
                got: data.len(),
            });
        }
        Ok(BinaryMask3 { grid, data })
    }

    pub fn empty(dims: [usize; 3]) -> Result<Self> {
        let n = Grid::new(dims)?.len();
        BinaryMask3::new(dims, vec![false; n])
    }

    pub fn full(dims: [usize; 3]) -> Result<Self> {
        let n = Grid::new(dims)?.len();
        BinaryMask3::new(dims, vec![true; n])
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        let grid = Grid::new(dims)?;
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Ok(BinaryMask3 { grid, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        if self.dims() != dims {
            return Err(VolumeError::DimsMismatch {
                a: self.dims(),
                b: dims,
            });
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask3) -> Result<BinaryMask3> {
        other.check_dims(self.dims())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(BinaryMask3 {
            grid: self.grid,
            data,
        })
    }

    pub fn intersection_count(&self, other: &BinaryMask3) -> Result<usize> {
        other.check_dims(self.dims())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    /// 6-connected component labels (0 = background, components numbered from
    /// 1 in order of their first voxel) and per-component sizes.
    pub fn components(&self) -> (Vec<u32>, Vec<usize>) {
        let mut labels = vec![0u32; self.data.len()];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for seed in 0..self.data.len() {
            if !self.data[seed] || labels[seed] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            labels[seed] = label;
            queue.push_back(seed);
            let mut size = 0;
            while let Some(i) = queue.pop_front() {
                size += 1;
                for j in self.grid.neighbors6(i) {
                    if self.data[j] && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
            sizes.push(size);
        }
        (labels, sizes)
    }

    /// Largest 6-connected component; ties go to the earliest component.
    pub fn largest_component(&self) -> BinaryMask3 {
        let (labels, sizes) = self.components();
        let Some(best) = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32 + 1)
        else {
            return self.clone();
        };
        BinaryMask3 {
            grid: self.grid,
            data: labels.iter().map(|&l| l == best).collect(),
        }
    }

    /// Drops 6-connected components smaller than `min_size` voxels.
    pub fn remove_small_components(&self, min_size: usize) -> BinaryMask3 {
        let (labels, sizes) = self.components();
        BinaryMask3 {
            grid: self.grid,
            data: labels
                .iter()
                .map(|&l| l != 0 && sizes[l as usize - 1] >= min_size)
                .collect(),
        }
    }

    /// Mask as a 0/1 volume carrying `template`'s metadata.
    pub fn to_volume(&self, template: &Volume) -> Result<Volume> {
        self.check_dims(template.dims())?;
        let mut v = template.with_data(
            self.data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )?;
        v.source_dtype = DataType::U8;
        Ok(v)
    }

    /// Nonzero voxels of `v`.
    pub fn from_volume(v: &Volume) -> BinaryMask3 {
        BinaryMask3 {
            grid: v.grid(),
            data: v.data().iter().map(|&x| x != 0.0).collect(),
        }
    }
}
