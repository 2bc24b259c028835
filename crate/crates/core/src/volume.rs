//! Volumetric image container and generic image operators shared by the
//! VOI-extraction stage and the network pipeline.
//!
//! Voxel order is x-fastest throughout: `idx = x + nx*(y + ny*z)`. The
//! transverse (axial) plane is x-y; slices stack along z.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense 3D scalar grid with physical spacing (mm per voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    /// Validates invariants: positive dims/spacing, matching length, finite values.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::SpecInvalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::SpecInvalid(format!(
                "spacing must be > 0, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::SpecInvalid(format!(
                "voxel count {} does not match dims {:?} (expected {})",
                voxels.len(),
                dims,
                n
            )));
        }
        if let Some(bad) = voxels.iter().find(|v| !v.is_finite()) {
            return Err(Error::SpecInvalid(format!("non-finite voxel value {bad}")));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    /// Internal constructor for operators that preserve finiteness.
    pub(crate) fn from_parts(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Self {
        debug_assert_eq!(voxels.len(), dims[0] * dims[1] * dims[2]);
        Self {
            dims,
            spacing,
            voxels,
        }
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Self {
        Self::from_parts(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.voxels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Trilinear sample at a continuous index coordinate, clamped to the grid.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f32 {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let c = p[a].clamp(0.0, (self.dims[a] - 1) as f64);
            let f = c.floor();
            i0[a] = f as usize;
            i1[a] = (i0[a] + 1).min(self.dims[a] - 1);
            frac[a] = c - f;
        }
        let mut acc = 0.0f64;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 {
                continue;
            }
            let z = if dz == 0 { i0[2] } else { i1[2] };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                let y = if dy == 0 { i0[1] } else { i1[1] };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    let x = if dx == 0 { i0[0] } else { i1[0] };
                    acc += wz * wy * wx * self.at(x, y, z) as f64;
                }
            }
        }
        acc as f32
    }

    /// Nearest-neighbor sample at a continuous index coordinate, clamped.
    pub fn sample_nearest(&self, p: [f64; 3]) -> f32 {
        let x = nearest_index(p[0], self.dims[0]);
        let y = nearest_index(p[1], self.dims[1]);
        let z = nearest_index(p[2], self.dims[2]);
        self.at(x, y, z)
    }
}

#[inline]
fn nearest_index(c: f64, n: usize) -> usize {
    (c.round().max(0.0) as usize).min(n - 1)
}

/// One bit per voxel, same x-fastest layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    words: Vec<u64>,
}

impl BinaryMask {
    pub fn empty(dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        (self.words[idx / 64] >> (idx % 64)) & 1 == 1
    }

    #[inline]
    pub fn get_xyz(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(self.index(x, y, z))
    }

    #[inline]
    pub fn set(&mut self, idx: usize, value: bool) {
        let w = idx / 64;
        let b = idx % 64;
        if value {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    #[inline]
    pub fn set_xyz(&mut self, x: usize, y: usize, z: usize, value: bool) {
        self.set(self.index(x, y, z), value);
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Ascending flat indices of set voxels.
    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.len();
        (0..n).filter(move |&i| self.get(i))
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims != other.dims {
            return Err(Error::GeometryMismatch {
                expected: self.dims,
                got: other.dims,
            });
        }
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a & b)
            .collect();
        Ok(BinaryMask {
            dims: self.dims,
            words,
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims != other.dims {
            return Err(Error::GeometryMismatch {
                expected: self.dims,
                got: other.dims,
            });
        }
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a | b)
            .collect();
        Ok(BinaryMask {
            dims: self.dims,
            words,
        })
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims
            && self
                .words
                .iter()
                .zip(&other.words)
                .all(|(a, b)| a & !b == 0)
    }

    /// Voxel bounding box of the set voxels: (min, max) inclusive, or None.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for idx in self.iter_set() {
            let c = self.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            any = true;
        }
        any.then_some((lo, hi))
    }
}

/// Records a crop followed by an axis-aligned rescale so results computed in
/// the resized space can be mapped back to original-image coordinates.
///
/// Index mapping: `original = crop_offset + target_index * scale` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricTransform {
    pub crop_offset: [usize; 3],
    pub scale: [f64; 3],
    pub original_dims: [usize; 3],
    pub target_dims: [usize; 3],
}

impl GeometricTransform {
    pub fn identity(dims: [usize; 3]) -> Self {
        Self {
            crop_offset: [0; 3],
            scale: [1.0; 3],
            original_dims: dims,
            target_dims: dims,
        }
    }

    /// Map a target-space continuous index to original-space coordinates.
    pub fn to_original(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.crop_offset[0] as f64 + p[0] * self.scale[0],
            self.crop_offset[1] as f64 + p[1] * self.scale[1],
            self.crop_offset[2] as f64 + p[2] * self.scale[2],
        ]
    }

    /// Inverse of [`Self::to_original`].
    pub fn to_target(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.crop_offset[0] as f64) / self.scale[0],
            (p[1] - self.crop_offset[1] as f64) / self.scale[1],
            (p[2] - self.crop_offset[2] as f64) / self.scale[2],
        ]
    }

    /// Compose with a crop that was applied before the rescale this transform
    /// records. `original_dims` is the uncropped geometry.
    pub fn after_crop(mut self, crop_offset: [usize; 3], original_dims: [usize; 3]) -> Self {
        self.crop_offset = [
            self.crop_offset[0] + crop_offset[0],
            self.crop_offset[1] + crop_offset[1],
            self.crop_offset[2] + crop_offset[2],
        ];
        self.original_dims = original_dims;
        self
    }
}

/// One maximal connected set of mask voxels.
///
/// `max_planar_radius` is the largest x-y distance from the voxel-rounded
/// centroid to any member voxel, matching the transverse-section reading used
/// by the detection cube rule.
#[derive(Debug, Clone)]
pub struct ConnectedComponent {
    pub voxel_indices: Vec<usize>,
    pub centroid: [f64; 3],
    pub z_extent: usize,
    pub max_planar_radius: f64,
}

impl ConnectedComponent {
    /// Voxel-rounded centroid.
    pub fn center(&self) -> [usize; 3] {
        [
            self.centroid[0].round() as usize,
            self.centroid[1].round() as usize,
            self.centroid[2].round() as usize,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    match self {
                        Connectivity::Six if manhattan == 1 => out.push([dx, dy, dz]),
                        Connectivity::TwentySix => out.push([dx, dy, dz]),
                        _ => {}
                    }
                }
            }
        }
        out
    }
}

/// Affine rescale of intensities to `[0, target_max]`.
pub fn normalize_intensity(vol: &Volume, target_max: f32) -> Result<Volume> {
    let (lo, hi) = vol.min_max();
    if lo == hi {
        return Err(Error::ConstantVolume { value: lo });
    }
    let range = hi - lo;
    let voxels = vol
        .voxels()
        .iter()
        .map(|&v| ((v - lo) / range) * target_max)
        .collect();
    Ok(Volume::from_parts(vol.dims(), vol.spacing(), voxels))
}

/// Resample to cubic voxels of side `min(spacing)`, preserving physical extent.
pub fn resample_isotropic(vol: &Volume, interp: Interpolation) -> (Volume, GeometricTransform) {
    let s = vol.spacing();
    let m = s[0].min(s[1]).min(s[2]);
    let dims = vol.dims();
    let mut target = [0usize; 3];
    let mut scale = [0f64; 3];
    for a in 0..3 {
        target[a] = ((dims[a] as f64 * s[a] / m).round() as usize).max(1);
        scale[a] = m / s[a];
    }
    let transform = GeometricTransform {
        crop_offset: [0; 3],
        scale,
        original_dims: dims,
        target_dims: target,
    };
    let out = resample_with(vol, &transform, [m, m, m], interp);
    (out, transform)
}

/// Rescale to exact target dims. The transform maps target indices back to
/// source indices (`scale = source/target` per axis).
pub fn resize_to(
    vol: &Volume,
    target_dims: [usize; 3],
    interp: Interpolation,
) -> (Volume, GeometricTransform) {
    let dims = vol.dims();
    let mut scale = [0f64; 3];
    let mut spacing = [0f64; 3];
    for a in 0..3 {
        scale[a] = dims[a] as f64 / target_dims[a] as f64;
        spacing[a] = vol.spacing()[a] * scale[a];
    }
    let transform = GeometricTransform {
        crop_offset: [0; 3],
        scale,
        original_dims: dims,
        target_dims,
    };
    let out = resample_with(vol, &transform, spacing, interp);
    (out, transform)
}

fn resample_with(
    vol: &Volume,
    transform: &GeometricTransform,
    spacing: [f64; 3],
    interp: Interpolation,
) -> Volume {
    let t = transform.target_dims;
    let plane = t[0] * t[1];
    let mut voxels = vec![0f32; t[0] * t[1] * t[2]];
    voxels
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(z, slab)| {
            for y in 0..t[1] {
                for x in 0..t[0] {
                    let p = transform.to_original([x as f64, y as f64, z as f64]);
                    slab[x + t[0] * y] = match interp {
                        Interpolation::Nearest => vol.sample_nearest(p),
                        Interpolation::Trilinear => vol.sample_trilinear(p),
                    };
                }
            }
        });
    Volume::from_parts(t, spacing, voxels)
}

/// Extract the window starting at `offset` with the given dims.
pub fn crop(vol: &Volume, offset: [usize; 3], dims: [usize; 3]) -> Result<Volume> {
    let src = vol.dims();
    for a in 0..3 {
        if offset[a] + dims[a] > src[a] || dims[a] == 0 {
            return Err(Error::GeometryMismatch {
                expected: src,
                got: [offset[0] + dims[0], offset[1] + dims[1], offset[2] + dims[2]],
            });
        }
    }
    let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let base = vol.index(offset[0], offset[1] + y, offset[2] + z);
            voxels.extend_from_slice(&vol.voxels()[base..base + dims[0]]);
        }
    }
    Ok(Volume::from_parts(dims, vol.spacing(), voxels))
}

/// Mirror the slice stack: voxel (x, y, z) moves to (x, y, nz-1-z).
pub fn flip_transverse(vol: &Volume) -> Volume {
    let [nx, ny, nz] = vol.dims();
    let plane = nx * ny;
    let mut voxels = vec![0f32; vol.len()];
    for z in 0..nz {
        let src = &vol.voxels()[z * plane..(z + 1) * plane];
        let dst_z = nz - 1 - z;
        voxels[dst_z * plane..(dst_z + 1) * plane].copy_from_slice(src);
    }
    Volume::from_parts(vol.dims(), vol.spacing(), voxels)
}

/// Same z-mirror for masks.
pub fn flip_transverse_mask(mask: &BinaryMask) -> BinaryMask {
    let nz = mask.dims()[2];
    let mut out = BinaryMask::empty(mask.dims());
    for idx in mask.iter_set() {
        let [x, y, z] = mask.coords(idx);
        out.set_xyz(x, y, nz - 1 - z, true);
    }
    out
}

/// Classic CDF-mapping histogram equalization over the full volume. The
/// output range equals the input range.
pub fn histogram_equalize(vol: &Volume, bins: usize) -> Result<Volume> {
    assert!(bins >= 2, "bins must be >= 2");
    let (lo, hi) = vol.min_max();
    if lo == hi {
        return Err(Error::ConstantVolume { value: lo });
    }
    let range = (hi - lo) as f64;
    let bin_of = |v: f32| -> usize {
        let b = ((v - lo) as f64 / range * bins as f64) as usize;
        b.min(bins - 1)
    };
    let mut hist = vec![0u64; bins];
    for &v in vol.voxels() {
        hist[bin_of(v)] += 1;
    }
    let mut cdf = vec![0u64; bins];
    let mut acc = 0u64;
    for (b, &h) in hist.iter().enumerate() {
        acc += h;
        cdf[b] = acc;
    }
    let n = vol.len() as f64;
    let cdf_min = *cdf
        .iter()
        .find(|&&c| c > 0)
        .expect("non-empty volume has a populated bin") as f64;
    let denom = n - cdf_min;
    debug_assert!(denom > 0.0, "non-constant volume spans more than one bin");
    let voxels = vol
        .voxels()
        .iter()
        .map(|&v| {
            let c = cdf[bin_of(v)] as f64;
            (lo as f64 + (c - cdf_min) / denom * range) as f32
        })
        .collect();
    Ok(Volume::from_parts(vol.dims(), vol.spacing(), voxels))
}

/// Sampled, renormalized Gaussian taps truncated to `width` (clamped up to the
/// nearest odd integer >= 3).
pub fn gaussian_kernel(variance: f64, max_kernel_width: usize) -> Vec<f64> {
    assert!(variance > 0.0, "variance must be > 0");
    let mut width = max_kernel_width.max(3);
    if width % 2 == 0 {
        width += 1;
    }
    let radius = (width / 2) as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * variance)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian smoothing with clamp-to-edge borders.
pub fn gaussian_smooth_discrete(vol: &Volume, variance: f64, max_kernel_width: usize) -> Volume {
    let taps = gaussian_kernel(variance, max_kernel_width);
    let radius = (taps.len() / 2) as i64;
    let [nx, ny, nz] = vol.dims();
    let mut cur = vol.voxels().to_vec();
    for axis in 0..3 {
        let mut next = vec![0f32; cur.len()];
        let n = [nx, ny, nz][axis];
        let plane = nx * ny;
        next.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = [x, y, z][axis] as i64;
                    let mut acc = 0f64;
                    for (t, &w) in taps.iter().enumerate() {
                        let q = (pos + t as i64 - radius).clamp(0, n as i64 - 1) as usize;
                        let mut c = [x, y, z];
                        c[axis] = q;
                        acc += w * cur[c[0] + nx * (c[1] + ny * c[2])] as f64;
                    }
                    slab[x + nx * y] = acc as f32;
                }
            }
        });
        cur = next;
    }
    Volume::from_parts(vol.dims(), vol.spacing(), cur)
}

/// Euclidean dilation: all voxels within `radius` (in voxels) of a set voxel.
pub fn spherical_dilate(mask: &BinaryMask, radius: f64) -> BinaryMask {
    assert!(radius >= 0.0, "radius must be >= 0");
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut offsets = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if (dx * dx + dy * dy + dz * dz) as f64 <= r2 {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
    }
    let [nx, ny, nz] = mask.dims();
    let mut out = mask.clone();
    for idx in mask.iter_set() {
        let [x, y, z] = mask.coords(idx);
        for o in &offsets {
            let px = x as i64 + o[0];
            let py = y as i64 + o[1];
            let pz = z as i64 + o[2];
            if px >= 0 && py >= 0 && pz >= 0 && px < nx as i64 && py < ny as i64 && pz < nz as i64 {
                out.set_xyz(px as usize, py as usize, pz as usize, true);
            }
        }
    }
    out
}

/// Partition set voxels into maximal connected sets, ordered by each
/// component's (min z, min y, min x).
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<ConnectedComponent> {
    let offsets = connectivity.offsets();
    let [nx, ny, nz] = mask.dims();
    let n = mask.len();
    let mut visited = vec![false; n];
    let mut components = Vec::new();
    let mut queue = std::collections::VecDeque::new();

    for start in 0..n {
        if visited[start] || !mask.get(start) {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(idx) = queue.pop_front() {
            voxels.push(idx);
            let [x, y, z] = mask.coords(idx);
            for o in &offsets {
                let px = x as i64 + o[0];
                let py = y as i64 + o[1];
                let pz = z as i64 + o[2];
                if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64
                {
                    continue;
                }
                let nidx = px as usize + nx * (py as usize + ny * pz as usize);
                if !visited[nidx] && mask.get(nidx) {
                    visited[nidx] = true;
                    queue.push_back(nidx);
                }
            }
        }
        voxels.sort_unstable();
        components.push(build_component(mask, voxels));
    }

    components.sort_by_key(|c| {
        let mut min = [usize::MAX; 3];
        for &idx in &c.voxel_indices {
            let [x, y, z] = mask.coords(idx);
            min = min.min([z, y, x]);
        }
        min
    });
    components
}

fn build_component(mask: &BinaryMask, voxels: Vec<usize>) -> ConnectedComponent {
    let mut sum = [0f64; 3];
    let mut zmin = usize::MAX;
    let mut zmax = 0usize;
    for &idx in &voxels {
        let [x, y, z] = mask.coords(idx);
        sum[0] += x as f64;
        sum[1] += y as f64;
        sum[2] += z as f64;
        zmin = zmin.min(z);
        zmax = zmax.max(z);
    }
    let n = voxels.len() as f64;
    let centroid = [sum[0] / n, sum[1] / n, sum[2] / n];
    let cx = centroid[0].round();
    let cy = centroid[1].round();
    let mut max_r2 = 0f64;
    for &idx in &voxels {
        let [x, y, _] = mask.coords(idx);
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        max_r2 = max_r2.max(dx * dx + dy * dy);
    }
    ConnectedComponent {
        voxel_indices: voxels,
        centroid,
        z_extent: zmax - zmin + 1,
        max_planar_radius: max_r2.sqrt(),
    }
}

/// Map a mask from transform target space back into original-image space by
/// nearest-neighbor inverse sampling. A second pass paints the rounded image
/// of every set voxel so none is lost when the target grid is finer.
pub fn remap_mask(mask: &BinaryMask, transform: &GeometricTransform) -> Result<BinaryMask> {
    if mask.dims() != transform.target_dims {
        return Err(Error::GeometryMismatch {
            expected: transform.target_dims,
            got: mask.dims(),
        });
    }
    let od = transform.original_dims;
    let td = transform.target_dims;
    let mut out = BinaryMask::empty(od);
    for z in 0..od[2] {
        for y in 0..od[1] {
            for x in 0..od[0] {
                let t = transform.to_target([x as f64, y as f64, z as f64]);
                let tx = t[0].round();
                let ty = t[1].round();
                let tz = t[2].round();
                if tx < 0.0 || ty < 0.0 || tz < 0.0 {
                    continue;
                }
                let (tx, ty, tz) = (tx as usize, ty as usize, tz as usize);
                if tx < td[0] && ty < td[1] && tz < td[2] && mask.get_xyz(tx, ty, tz) {
                    out.set_xyz(x, y, z, true);
                }
            }
        }
    }
    for idx in mask.iter_set() {
        let [x, y, z] = mask.coords(idx);
        let p = transform.to_original([x as f64, y as f64, z as f64]);
        let ox = nearest_index(p[0], od[0]);
        let oy = nearest_index(p[1], od[1]);
        let oz = nearest_index(p[2], od[2]);
        out.set_xyz(ox, oy, oz, true);
    }
    Ok(out)
}
