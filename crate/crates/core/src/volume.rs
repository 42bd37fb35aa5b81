//! Volumes, plane reslicing and pseudo-RGB slice bags.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::RngExt;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"LGMR";
const HEADER_LEN: u64 = 16;

/// Dense scalar field indexed `(d, h, w)`, `w` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::contract(format!("volume dims must be positive, got {dims:?}")));
        }
        let len = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::contract(format!("volume dims {dims:?} overflow")))?;
        if len != voxels.len() {
            return Err(Error::contract(format!(
                "volume {dims:?} needs {len} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Volume { dims, voxels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            voxels: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    voxels.push(f(d, h, w));
                }
            }
        }
        Volume { dims, voxels }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.voxels[self.index(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, value: f64) {
        let i = self.index(d, h, w);
        self.voxels[i] = value;
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.voxels.len() as f64;
        let mean = self.voxels.iter().sum::<f64>() / n;
        let var = self.voxels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Serializes as `LGMR`, three little-endian u32 extents, then f32 voxels.
    /// Values are stored in single precision.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * self.voxels.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.voxels {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt_err = |offset: u64, detail: String| Error::Format { offset, detail };
        if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
            return Err(fmt_err(0, "missing LGMR magic".into()));
        }
        if (bytes.len() as u64) < HEADER_LEN {
            return Err(fmt_err(bytes.len() as u64, "header truncated".into()));
        }
        let mut dims = [0usize; 3];
        for (k, d) in dims.iter_mut().enumerate() {
            let at = 4 + 4 * k;
            *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            if *d == 0 {
                return Err(fmt_err(at as u64, "zero extent".into()));
            }
        }
        let count = (dims[0] as u64)
            .checked_mul(dims[1] as u64)
            .and_then(|v| v.checked_mul(dims[2] as u64))
            .filter(|&c| c <= (u64::MAX - HEADER_LEN) / 4 && c <= usize::MAX as u64)
            .ok_or_else(|| fmt_err(4, format!("dims {dims:?} overflow")))?;
        let expected = HEADER_LEN + 4 * count;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(fmt_err(
                actual,
                format!("payload truncated: {count} voxels need {expected} bytes, file has {actual}"),
            ));
        }
        if actual > expected {
            return Err(fmt_err(expected, format!("{} trailing bytes", actual - expected)));
        }
        let mut voxels = Vec::with_capacity(count as usize);
        for (i, chunk) in bytes[HEADER_LEN as usize..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fmt_err(HEADER_LEN + 4 * i as u64, "non-finite voxel".into()));
            }
            voxels.push(f64::from(v));
        }
        Ok(Volume { dims, voxels })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Anatomical reslicing direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Plane {
    /// Slices indexed by `d`, each `H × W`.
    Axial,
    /// Slices indexed by `h`, each `D × W`.
    Coronal,
    /// Slices indexed by `w`, each `D × H`.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Volume axis the plane steps along.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    /// `(slice count, rows, cols)` for a volume of the given dims.
    pub fn slice_geometry(self, dims: [usize; 3]) -> (usize, usize, usize) {
        let [d, h, w] = dims;
        match self {
            Plane::Axial => (d, h, w),
            Plane::Coronal => (h, d, w),
            Plane::Sagittal => (w, d, h),
        }
    }

    pub(crate) fn code(self) -> u8 {
        self.axis() as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Plane::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::config(format!("unknown plane `{other}`"))),
        }
    }
}

/// Row-major 2D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Image2 {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Ordered 2D slices of a volume along `plane`.
pub fn reslice(volume: &Volume, plane: Plane) -> Vec<Image2> {
    let (count, rows, cols) = plane.slice_geometry(volume.dims);
    (0..count)
        .map(|i| {
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(match plane {
                        Plane::Axial => volume.get(i, r, c),
                        Plane::Coronal => volume.get(r, i, c),
                        Plane::Sagittal => volume.get(r, c, i),
                    });
                }
            }
            Image2 { rows, cols, data }
        })
        .collect()
}

/// Inverse of [`reslice`].
pub fn restack(slices: &[Image2], plane: Plane) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::contract("restack needs at least one slice"))?;
    let (rows, cols) = (first.rows, first.cols);
    if slices.iter().any(|s| s.rows != rows || s.cols != cols || s.data.len() != rows * cols) {
        return Err(Error::contract("restack: slices differ in size"));
    }
    let dims = match plane {
        Plane::Axial => [slices.len(), rows, cols],
        Plane::Coronal => [rows, slices.len(), cols],
        Plane::Sagittal => [rows, cols, slices.len()],
    };
    Ok(Volume::from_fn(dims, |d, h, w| match plane {
        Plane::Axial => slices[d].get(h, w),
        Plane::Coronal => slices[h].get(d, w),
        Plane::Sagittal => slices[w].get(d, h),
    }))
}

/// Three-channel slice: (previous neighbour, centre, next neighbour).
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoRgb {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PseudoRgb {
    pub fn channel(&self, c: usize) -> &[f64] {
        let area = self.rows * self.cols;
        &self.data[c * area..(c + 1) * area]
    }
}

/// Stacks slice `i` (1-based) with the slices `gap` before and after it,
/// replicating the nearest valid slice past either end.
pub fn stack_neighbors(slices: &[Image2], i: usize, gap: usize) -> Result<PseudoRgb> {
    let len = slices.len();
    if i == 0 || i > len {
        return Err(Error::contract(format!("slice index {i} outside 1..={len}")));
    }
    let prev = i.saturating_sub(gap).max(1);
    let next = i.saturating_add(gap).min(len);
    let centre = &slices[i - 1];
    let mut data = Vec::with_capacity(3 * centre.data.len());
    for k in [prev, i, next] {
        data.extend_from_slice(&slices[k - 1].data);
    }
    Ok(PseudoRgb {
        rows: centre.rows,
        cols: centre.cols,
        data,
    })
}

/// Ordered pseudo-RGB slices of one plane, stored as `[L, 3, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBag {
    pub plane: Plane,
    pub gap: usize,
    rows: usize,
    cols: usize,
    len: usize,
    data: Vec<f64>,
}

impl SliceBag {
    pub fn from_slices(plane: Plane, gap: usize, slices: &[PseudoRgb]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::contract("a slice bag needs at least one slice"))?;
        let (rows, cols) = (first.rows, first.cols);
        let mut data = Vec::with_capacity(slices.len() * 3 * rows * cols);
        for s in slices {
            if s.rows != rows || s.cols != cols || s.data.len() != 3 * rows * cols {
                return Err(Error::contract("slice bag: slices differ in size"));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(SliceBag {
            plane,
            gap,
            rows,
            cols,
            len: slices.len(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slice_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Slice `i` (0-based) as a pseudo-RGB image.
    pub fn slice(&self, i: usize) -> PseudoRgb {
        let stride = 3 * self.rows * self.cols;
        PseudoRgb {
            rows: self.rows,
            cols: self.cols,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    /// New bag with slices reordered so that slice `k` is `self.slice(order[k])`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let slices: Vec<PseudoRgb> = order.iter().map(|&i| self.slice(i)).collect();
        if order.len() != self.len {
            return Err(Error::contract("permutation length differs from bag length"));
        }
        SliceBag::from_slices(self.plane, self.gap, &slices)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len, 3, self.rows, self.cols], self.data.clone())
    }
}

/// Pseudo-RGB bag of every slice along `plane`.
pub fn make_bag(volume: &Volume, plane: Plane, gap: usize) -> SliceBag {
    let slices = reslice(volume, plane);
    let stacked: Vec<PseudoRgb> = (1..=slices.len())
        .map(|i| stack_neighbors(&slices, i, gap).expect("index within range"))
        .collect();
    SliceBag::from_slices(plane, gap, &stacked).expect("reslice yields uniform slices")
}

/// Per-volume z-score (std floored at 1e-8), then trilinear resampling to
/// `target` with corner-aligned sample positions.
pub fn normalize_volume(volume: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::contract(format!("target dims must be positive, got {target:?}")));
    }
    let (mean, std) = volume.mean_std();
    let std = std.max(1e-8);
    let z = Volume {
        dims: volume.dims,
        voxels: volume.voxels.iter().map(|v| (v - mean) / std).collect(),
    };
    Ok(resample_trilinear(&z, target))
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = if dst > 1 && src > 1 {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

pub fn resample_trilinear(volume: &Volume, target: [usize; 3]) -> Volume {
    if target == volume.dims {
        return volume.clone();
    }
    let pd = sample_positions(volume.dims[0], target[0]);
    let ph = sample_positions(volume.dims[1], target[1]);
    let pw = sample_positions(volume.dims[2], target[2]);
    Volume::from_fn(target, |d, h, w| {
        let (d0, d1, fd) = pd[d];
        let (h0, h1, fh) = ph[h];
        let (w0, w1, fw) = pw[w];
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let plane = |dd: usize| {
            lerp(
                lerp(volume.get(dd, h0, w0), volume.get(dd, h0, w1), fw),
                lerp(volume.get(dd, h1, w0), volume.get(dd, h1, w1), fw),
                fh,
            )
        };
        lerp(plane(d0), plane(d1), fd)
    })
}

/// Reverses the volume along `axis`.
pub fn flip(volume: &Volume, axis: usize) -> Volume {
    let [d, h, w] = volume.dims;
    Volume::from_fn(volume.dims, |i, j, k| match axis {
        0 => volume.get(d - 1 - i, j, k),
        1 => volume.get(i, h - 1 - j, k),
        _ => volume.get(i, j, w - 1 - k),
    })
}

/// Integer shift per axis; vacated voxels are zero.
pub fn translate(volume: &Volume, shift: [isize; 3]) -> Volume {
    let dims = volume.dims;
    Volume::from_fn(dims, |d, h, w| {
        let src = [d as isize - shift[0], h as isize - shift[1], w as isize - shift[2]];
        if src.iter().zip(dims).all(|(&s, n)| s >= 0 && (s as usize) < n) {
            volume.get(src[0] as usize, src[1] as usize, src[2] as usize)
        } else {
            0.0
        }
    })
}

/// Random flips and integer translations applied to whole volumes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentPolicy {
    /// Flip probability per axis `(d, h, w)`.
    pub flip: [f64; 3],
    /// Largest absolute shift per axis, in voxels.
    pub max_shift: [usize; 3],
}

impl AugmentPolicy {
    pub fn is_identity(&self) -> bool {
        self.flip.iter().all(|&p| p == 0.0) && self.max_shift.iter().all(|&s| s == 0)
    }
}

pub fn augment<R: rand::Rng + ?Sized>(volume: &Volume, rng: &mut R, policy: &AugmentPolicy) -> Result<Volume> {
    for axis in 0..3 {
        if policy.max_shift[axis] >= volume.dims[axis] && policy.max_shift[axis] > 0 {
            return Err(Error::contract(format!(
                "shift {} along axis {axis} not below extent {}",
                policy.max_shift[axis], volume.dims[axis]
            )));
        }
        if !(0.0..=1.0).contains(&policy.flip[axis]) {
            return Err(Error::contract(format!("flip probability {} outside [0, 1]", policy.flip[axis])));
        }
    }
    let mut out = volume.clone();
    for axis in 0..3 {
        if policy.flip[axis] > 0.0 && rng.random_bool(policy.flip[axis]) {
            out = flip(&out, axis);
        }
    }
    let mut shift = [0isize; 3];
    for axis in 0..3 {
        let m = policy.max_shift[axis] as isize;
        if m > 0 {
            shift[axis] = rng.random_range(-(m as i64)..=m as i64) as isize;
        }
    }
    if shift != [0; 3] {
        out = translate(&out, shift);
    }
    Ok(out)
}
