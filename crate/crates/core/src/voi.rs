//! Training-free cerebral-artery volume-of-interest extraction: threshold
//! binarization, radial step detection on the middle slice slab, seed
//! template construction, Gaussian intensity statistics, auto-threshold
//! region growing and spherical dilation.

use crate::error::{Error, Result};
use crate::volume::{
    normalize_intensity, spherical_dilate, BinaryMask, Volume,
};

/// Mean / population standard deviation of seed intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Inclusive intensity band accepted by region growing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityWindow {
    pub lo: f64,
    pub hi: f64,
}

impl IntensityWindow {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// A point on a radial line of one transverse slice, in continuous slice
/// coordinates, plus its distance from the slice center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPoint {
    pub x: f64,
    pub y: f64,
    pub distance: f64,
}

/// Seed template: per-slice boundary polygons stacked into a spherical-like
/// region, intersected with the binarized image.
#[derive(Debug, Clone)]
pub struct SeedTemplate {
    /// 2 * n_lines boundary points per processed slice, ordered by ray angle.
    pub boundary_points: Vec<Vec<StepPoint>>,
    pub region: BinaryMask,
    pub seeds: BinaryMask,
    pub z_range: (usize, usize),
}

/// Output of the full extraction.
#[derive(Debug, Clone)]
pub struct VoiResult {
    pub vessel_mask: BinaryMask,
    /// Normalized intensities inside the mask, 0 elsewhere.
    pub masked_volume: Volume,
    pub stats: GaussianStats,
    pub window: IntensityWindow,
}

/// Knobs of the extraction pipeline. Defaults follow the screening recipe:
/// normalize to [0, 1024], binarize at 300, keep the middle 60% of slices,
/// 12 radial lines, 25% fallback radius, mu +/- 1.28 sigma window.
#[derive(Debug, Clone)]
pub struct VoiParams {
    pub target_max: f32,
    pub threshold: f32,
    pub slab_fraction: f64,
    pub n_lines: usize,
    pub min_radius_fraction: f64,
    pub z_factor: f64,
    pub dilate_radius: f64,
}

impl Default for VoiParams {
    fn default() -> Self {
        Self {
            target_max: 1024.0,
            threshold: 300.0,
            slab_fraction: 0.6,
            n_lines: 12,
            min_radius_fraction: 0.25,
            z_factor: 1.28,
            dilate_radius: 2.0,
        }
    }
}

/// Bit set iff voxel value >= threshold (inclusive).
pub fn threshold_binarize(vol: &Volume, threshold: f32) -> BinaryMask {
    let mut mask = BinaryMask::empty(vol.dims());
    for (i, &v) in vol.voxels().iter().enumerate() {
        if v >= threshold {
            mask.set(i, true);
        }
    }
    mask
}

/// Contiguous centered range of `round(fraction * nz)` slices; the lower
/// margin takes the floor when the margins split unevenly. Returns inclusive
/// (z_lo, z_hi).
pub fn middle_slice_range(nz: usize, fraction: f64) -> (usize, usize) {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction in (0, 1]");
    assert!(nz >= 1);
    let count = ((fraction * nz as f64).round() as usize).clamp(1, nz);
    let lo = (nz - count) / 2;
    (lo, lo + count - 1)
}

/// All 0<->1 transitions found by sampling the given slice along a ray from
/// the slice center, at unit-voxel steps with nearest-neighbor lookup.
/// `dir` must be a unit vector. Returns points ordered by distance.
fn ray_steps(
    slice: &dyn Fn(usize, usize) -> bool,
    nx: usize,
    ny: usize,
    dir: [f64; 2],
) -> Vec<StepPoint> {
    let cx = nx as f64 / 2.0;
    let cy = ny as f64 / 2.0;
    let mut steps = Vec::new();
    let mut prev = sample_plane(slice, nx, ny, cx, cy);
    let mut t = 1.0f64;
    loop {
        let x = cx + t * dir[0];
        let y = cy + t * dir[1];
        if x < 0.0 || y < 0.0 || x >= nx as f64 || y >= ny as f64 {
            break;
        }
        let cur = sample_plane(slice, nx, ny, x, y);
        if let Some(p) = prev {
            if let Some(c) = cur {
                if c != p {
                    steps.push(StepPoint { x, y, distance: t });
                }
            }
        }
        prev = cur;
        t += 1.0;
    }
    steps
}

fn sample_plane(
    slice: &dyn Fn(usize, usize) -> bool,
    nx: usize,
    ny: usize,
    x: f64,
    y: f64,
) -> Option<bool> {
    if x < 0.0 || y < 0.0 || x >= nx as f64 || y >= ny as f64 {
        return None;
    }
    Some(slice(x as usize, y as usize))
}

/// Distance from the slice center to the image edge along a unit direction.
fn edge_distance(nx: usize, ny: usize, dir: [f64; 2]) -> f64 {
    let cx = nx as f64 / 2.0;
    let cy = ny as f64 / 2.0;
    let mut t = f64::INFINITY;
    if dir[0] > 1e-12 {
        t = t.min((nx as f64 - cx) / dir[0]);
    } else if dir[0] < -1e-12 {
        t = t.min(-cx / dir[0]);
    }
    if dir[1] > 1e-12 {
        t = t.min((ny as f64 - cy) / dir[1]);
    } else if dir[1] < -1e-12 {
        t = t.min(-cy / dir[1]);
    }
    t
}

/// Unit directions of the 2*n_lines rays: line k runs at angle
/// k * (180 / n_lines) degrees, sampled in both directions.
fn ray_directions(n_lines: usize) -> Vec<[f64; 2]> {
    let mut dirs = Vec::with_capacity(2 * n_lines);
    for k in 0..n_lines {
        let a = std::f64::consts::PI * k as f64 / n_lines as f64;
        dirs.push([a.cos(), a.sin()]);
    }
    for k in 0..n_lines {
        let a = std::f64::consts::PI * k as f64 / n_lines as f64;
        dirs.push([-a.cos(), -a.sin()]);
    }
    dirs
}

/// Per line, the two step points farthest from the slice center: one per
/// direction when both directions have steps, otherwise the two farthest
/// overall. Lines with fewer than two steps report `None`.
pub fn radial_step_points(
    slice: &dyn Fn(usize, usize) -> bool,
    nx: usize,
    ny: usize,
    n_lines: usize,
) -> Vec<Option<(StepPoint, StepPoint)>> {
    assert!(n_lines >= 1);
    let dirs = ray_directions(n_lines);
    let mut out = Vec::with_capacity(n_lines);
    for k in 0..n_lines {
        let pos = ray_steps(slice, nx, ny, dirs[k]);
        let neg = ray_steps(slice, nx, ny, dirs[k + n_lines]);
        let farthest = |steps: &[StepPoint]| -> Option<StepPoint> {
            steps
                .iter()
                .copied()
                .max_by(|a, b| a.distance.total_cmp(&b.distance))
        };
        let pair = match (farthest(&pos), farthest(&neg)) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => {
                let mut all: Vec<StepPoint> = pos.iter().chain(neg.iter()).copied().collect();
                all.sort_by(|a, b| b.distance.total_cmp(&a.distance));
                if all.len() >= 2 {
                    Some((all[0], all[1]))
                } else {
                    None
                }
            }
        };
        out.push(pair);
    }
    out
}

/// Even-odd scanline fill of a polygon given by vertices in order. Vertices
/// are continuous slice coordinates; a voxel is inside when its center
/// (x + 0.5, y + 0.5) is inside the polygon.
fn fill_polygon(vertices: &[(f64, f64)], nx: usize, ny: usize, out: &mut dyn FnMut(usize, usize)) {
    let n = vertices.len();
    if n < 3 {
        return;
    }
    for y in 0..ny {
        let yc = y as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..n {
            let (x0, y0) = vertices[i];
            let (x1, y1) = vertices[(i + 1) % n];
            // Half-open rule [min(y), max(y)) so shared vertices count once.
            if (y0 <= yc && y1 > yc) || (y1 <= yc && y0 > yc) {
                let t = (yc - y0) / (y1 - y0);
                xs.push(x0 + t * (x1 - x0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let lo = pair[0];
            let hi = pair[1];
            let x_start = (lo - 0.5).ceil().max(0.0) as usize;
            let x_end = (hi - 0.5).floor().min(nx as f64 - 1.0);
            if x_end < 0.0 {
                continue;
            }
            for x in x_start..=(x_end as usize) {
                out(x, y);
            }
        }
    }
}

/// Build the seed template over the given inclusive z range. Per slice and
/// ray direction, the boundary point is the farthest step point of that
/// direction if it lies at >= `min_radius_fraction` of the center-to-edge
/// distance, otherwise a synthetic point placed exactly at that fraction.
pub fn build_seed_template(
    bin: &BinaryMask,
    z_range: (usize, usize),
    n_lines: usize,
    min_radius_fraction: f64,
) -> Result<SeedTemplate> {
    assert!(min_radius_fraction > 0.0 && min_radius_fraction < 1.0);
    let [nx, ny, nz] = bin.dims();
    assert!(z_range.0 <= z_range.1 && z_range.1 < nz);
    let dirs = ray_directions(n_lines);
    let cx = nx as f64 / 2.0;
    let cy = ny as f64 / 2.0;

    let mut region = BinaryMask::empty(bin.dims());
    let mut boundary_points = Vec::with_capacity(z_range.1 - z_range.0 + 1);

    for z in z_range.0..=z_range.1 {
        let slice = |x: usize, y: usize| bin.get_xyz(x, y, z);
        let mut points: Vec<StepPoint> = Vec::with_capacity(dirs.len());
        for dir in &dirs {
            let fallback_d = min_radius_fraction * edge_distance(nx, ny, *dir);
            let steps = ray_steps(&slice, nx, ny, *dir);
            let best = steps
                .iter()
                .copied()
                .max_by(|a, b| a.distance.total_cmp(&b.distance));
            let point = match best {
                Some(p) if p.distance >= fallback_d => p,
                _ => StepPoint {
                    x: cx + fallback_d * dir[0],
                    y: cy + fallback_d * dir[1],
                    distance: fallback_d,
                },
            };
            points.push(point);
        }
        if points.len() < 3 {
            return Err(Error::DegenerateSlice { z });
        }
        // Rays are generated as k, then k+180deg; interleave into a single
        // angular sweep for a simple polygon.
        let mut ordered: Vec<(f64, f64)> = Vec::with_capacity(points.len());
        for p in points.iter().take(n_lines) {
            ordered.push((p.x, p.y));
        }
        for p in points.iter().skip(n_lines) {
            ordered.push((p.x, p.y));
        }
        fill_polygon(&ordered, nx, ny, &mut |x, y| {
            region.set_xyz(x, y, z, true);
        });
        boundary_points.push(points);
    }

    let seeds = region.intersect(bin)?;
    Ok(SeedTemplate {
        boundary_points,
        region,
        seeds,
        z_range,
    })
}

/// Mean and population standard deviation of the volume over seed voxels.
pub fn seed_statistics(vol: &Volume, seeds: &BinaryMask) -> Result<GaussianStats> {
    if seeds.dims() != vol.dims() {
        return Err(Error::GeometryMismatch {
            expected: vol.dims(),
            got: seeds.dims(),
        });
    }
    let n = seeds.count();
    if n == 0 {
        return Err(Error::EmptySeeds);
    }
    let mut sum = 0f64;
    for idx in seeds.iter_set() {
        sum += vol.voxels()[idx] as f64;
    }
    let mu = sum / n as f64;
    let mut ss = 0f64;
    for idx in seeds.iter_set() {
        let d = vol.voxels()[idx] as f64 - mu;
        ss += d * d;
    }
    Ok(GaussianStats {
        mu,
        sigma: (ss / n as f64).sqrt(),
    })
}

/// [mu - z*sigma, mu + z*sigma].
pub fn gaussian_window(stats: GaussianStats, z_factor: f64) -> IntensityWindow {
    assert!(z_factor > 0.0);
    IntensityWindow {
        lo: stats.mu - z_factor * stats.sigma,
        hi: stats.mu + z_factor * stats.sigma,
    }
}

/// 6-connected flood fill from in-window seed voxels through in-window
/// voxels. Seeds outside the window do not start growth.
pub fn region_grow(vol: &Volume, seeds: &BinaryMask, window: IntensityWindow) -> BinaryMask {
    let [nx, ny, nz] = vol.dims();
    let mut out = BinaryMask::empty(vol.dims());
    let mut queue = std::collections::VecDeque::new();
    for idx in seeds.iter_set() {
        if window.contains(vol.voxels()[idx] as f64) && !out.get(idx) {
            out.set(idx, true);
            queue.push_back(idx);
        }
    }
    let nbr = [
        [1i64, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    while let Some(idx) = queue.pop_front() {
        let [x, y, z] = vol.coords(idx);
        for o in &nbr {
            let px = x as i64 + o[0];
            let py = y as i64 + o[1];
            let pz = z as i64 + o[2];
            if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64 {
                continue;
            }
            let nidx = px as usize + nx * (py as usize + ny * pz as usize);
            if !out.get(nidx) && window.contains(vol.voxels()[nidx] as f64) {
                out.set(nidx, true);
                queue.push_back(nidx);
            }
        }
    }
    out
}

/// Full extraction: normalize -> binarize -> middle slab -> seed template ->
/// seed statistics -> intensity window -> region grow -> dilate -> mask the
/// normalized volume.
pub fn extract_voi(vol_raw: &Volume, params: &VoiParams) -> Result<VoiResult> {
    let normalized = normalize_intensity(vol_raw, params.target_max)?;
    let bin = threshold_binarize(&normalized, params.threshold);
    let z_range = middle_slice_range(vol_raw.dims()[2], params.slab_fraction);
    let template = build_seed_template(&bin, z_range, params.n_lines, params.min_radius_fraction)?;
    let stats = seed_statistics(&normalized, &template.seeds)?;
    let window = gaussian_window(stats, params.z_factor);
    let grown = region_grow(&normalized, &template.seeds, window);
    let vessel_mask = spherical_dilate(&grown, params.dilate_radius);
    let mut masked = vec![0f32; normalized.len()];
    for idx in vessel_mask.iter_set() {
        masked[idx] = normalized.voxels()[idx];
    }
    let masked_volume = Volume::from_parts(normalized.dims(), normalized.spacing(), masked);
    Ok(VoiResult {
        vessel_mask,
        masked_volume,
        stats,
        window,
    })
}
