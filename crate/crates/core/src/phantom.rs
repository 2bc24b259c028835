//! Deterministic synthetic TOF-MRA-like volumes: Gaussian-profile vessel
//! tubes with optional spherical aneurysm bumps over a noisy background,
//! plus half-peak ground-truth masks for desk-scale training and evaluation.

use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::volume::{BinaryMask, Volume};

#[derive(Debug, Clone)]
pub struct VesselSpec {
    /// Polyline control points in voxel index coordinates.
    pub path: Vec<[f64; 3]>,
    pub radius: f64,
    pub peak: f32,
}

#[derive(Debug, Clone)]
pub struct BumpSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub peak: f32,
}

#[derive(Debug, Clone)]
pub struct BackgroundSpec {
    pub mean: f32,
    pub noise_std: f64,
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub vessels: Vec<VesselSpec>,
    pub aneurysms: Vec<BumpSpec>,
    pub background: BackgroundSpec,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AneurysmGt {
    /// Flat voxel indices (x-fastest) of the half-peak region.
    pub voxels: Vec<usize>,
    pub max_diameter_mm: f64,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub vessel_gt: BinaryMask,
    pub aneurysm_gt: Vec<AneurysmGt>,
}

/// Half-peak distance of the Gaussian profile: contribution >= peak/2 within
/// `radius * sqrt(2 ln 2) / 2` of the structure axis or center.
pub fn half_peak_distance(radius: f64) -> f64 {
    radius * (2.0 * std::f64::consts::LN_2).sqrt() / 2.0
}

fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    };
    let d = [
        p[0] - (a[0] + t * ab[0]),
        p[1] - (a[1] + t * ab[1]),
        p[2] - (a[2] + t * ab[2]),
    ];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Distance from a point to the closest segment of a polyline.
pub fn polyline_distance(p: [f64; 3], path: &[[f64; 3]]) -> f64 {
    if path.len() == 1 {
        return point_segment_distance(p, path[0], path[0]);
    }
    path.windows(2)
        .map(|w| point_segment_distance(p, w[0], w[1]))
        .fold(f64::INFINITY, f64::min)
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.dims.iter().any(|&d| d == 0) {
        return Err(Error::SpecInvalid("dims must be >= 1".into()));
    }
    if spec.background.noise_std < 0.0 {
        return Err(Error::SpecInvalid("noise std must be >= 0".into()));
    }
    for v in &spec.vessels {
        if v.radius <= 0.0 {
            return Err(Error::SpecInvalid("vessel radius must be > 0".into()));
        }
        if v.peak <= spec.background.mean {
            return Err(Error::SpecInvalid(
                "vessel peak must exceed the background mean".into(),
            ));
        }
        if v.path.is_empty() {
            return Err(Error::SpecInvalid("vessel path must be non-empty".into()));
        }
    }
    for a in &spec.aneurysms {
        if a.radius <= 0.0 {
            return Err(Error::SpecInvalid("aneurysm radius must be > 0".into()));
        }
        if a.peak <= spec.background.mean {
            return Err(Error::SpecInvalid(
                "aneurysm peak must exceed the background mean".into(),
            ));
        }
        for axis in 0..3 {
            if a.center[axis] < 0.0 || a.center[axis] >= spec.dims[axis] as f64 {
                return Err(Error::SpecInvalid(format!(
                    "aneurysm center {:?} out of bounds {:?}",
                    a.center, spec.dims
                )));
            }
        }
    }
    Ok(())
}

/// Intensity = background mean + sum of peak * exp(-d^2 / (2 (radius/2)^2))
/// over all structures, plus seeded Gaussian noise. Ground truth is the
/// half-peak region of each structure.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    validate(spec)?;
    let [nx, ny, nz] = spec.dims;
    let n = nx * ny * nz;
    let mut voxels = vec![0f32; n];
    let mut vessel_gt = BinaryMask::empty(spec.dims);
    let mut bump_voxels: Vec<Vec<usize>> = vec![Vec::new(); spec.aneurysms.len()];

    let mut idx = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let mut acc = spec.background.mean as f64;
                for v in &spec.vessels {
                    let d = polyline_distance(p, &v.path);
                    let sigma = v.radius / 2.0;
                    let c = v.peak as f64 * (-d * d / (2.0 * sigma * sigma)).exp();
                    acc += c;
                    if d <= half_peak_distance(v.radius) {
                        vessel_gt.set(idx, true);
                    }
                }
                for (ai, a) in spec.aneurysms.iter().enumerate() {
                    let d = point_segment_distance(p, a.center, a.center);
                    let sigma = a.radius / 2.0;
                    let c = a.peak as f64 * (-d * d / (2.0 * sigma * sigma)).exp();
                    acc += c;
                    if d <= half_peak_distance(a.radius) {
                        bump_voxels[ai].push(idx);
                    }
                }
                voxels[idx] = acc as f32;
                idx += 1;
            }
        }
    }

    if spec.background.noise_std > 0.0 {
        let mut rng = Rng::from_seed(spec.seed);
        for v in voxels.iter_mut() {
            *v += rng.normal(0.0, spec.background.noise_std) as f32;
        }
    }

    let aneurysm_gt = spec
        .aneurysms
        .iter()
        .zip(bump_voxels)
        .map(|(a, voxels)| AneurysmGt {
            voxels,
            max_diameter_mm: 2.0 * half_peak_distance(a.radius) * spec.spacing[0],
        })
        .collect();

    Ok(Phantom {
        volume: Volume::new(spec.dims, spec.spacing, voxels)?,
        vessel_gt,
        aneurysm_gt,
    })
}

/// Parameter ranges for seeded dataset generation. Geometry scales with the
/// volume side so the same template works at 32^3 and 64^3.
#[derive(Debug, Clone)]
pub struct DatasetTemplate {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background_mean: f32,
    pub noise_std: f64,
    pub vessel_radius: (f64, f64),
    pub vessel_peak: (f32, f32),
    pub aneurysm_radius: (f64, f64),
    pub aneurysm_peak: (f32, f32),
}

impl DatasetTemplate {
    pub fn for_cube(side: usize, noise_std: f64) -> Self {
        let s = side as f64;
        Self {
            dims: [side, side, side],
            spacing: [1.0, 1.0, 1.0],
            background_mean: 100.0,
            noise_std,
            vessel_radius: (0.055 * s, 0.075 * s),
            vessel_peak: (550.0, 800.0),
            aneurysm_radius: (0.11 * s, 0.16 * s),
            aneurysm_peak: (550.0, 800.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub case_id: String,
    pub spec: PhantomSpec,
    pub phantom: Phantom,
}

/// Seeded dataset: one wandering near-center vessel per case, with a wall
/// bump planted on `round(rate * n)` cases. Case i is bit-reproducible from
/// (seed, i) alone.
pub fn generate_dataset(
    n_cases: usize,
    aneurysm_rate: f64,
    template: &DatasetTemplate,
    seed: u64,
) -> Result<Vec<PhantomCase>> {
    assert!(n_cases >= 1);
    assert!((0.0..=1.0).contains(&aneurysm_rate));
    let n_pos = (aneurysm_rate * n_cases as f64).round() as usize;
    let mut out = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let case_id = format!("case_{i:03}");
        let mut rng = Rng::derive(seed, &case_id);
        let spec = sample_case_spec(template, &mut rng, i < n_pos);
        let phantom = generate_phantom(&spec)?;
        out.push(PhantomCase {
            case_id,
            spec,
            phantom,
        });
    }
    Ok(out)
}

fn sample_case_spec(template: &DatasetTemplate, rng: &mut Rng, positive: bool) -> PhantomSpec {
    let [nx, ny, nz] = template.dims;
    let (cx, cy) = (nx as f64 / 2.0, ny as f64 / 2.0);
    let jitter = 0.08 * nx as f64;
    let z_fracs = [0.08, 0.37, 0.63, 0.92];
    let path: Vec<[f64; 3]> = z_fracs
        .iter()
        .map(|f| {
            [
                cx + rng.uniform(-jitter, jitter),
                cy + rng.uniform(-jitter, jitter),
                f * nz as f64,
            ]
        })
        .collect();
    let radius = rng.uniform(template.vessel_radius.0, template.vessel_radius.1);
    let peak = rng.uniform(template.vessel_peak.0 as f64, template.vessel_peak.1 as f64) as f32;
    let vessel = VesselSpec { path: path.clone(), radius, peak };

    let mut aneurysms = Vec::new();
    if positive {
        // Attach to the vessel wall at a mid-course arclength.
        let t = rng.uniform(0.30, 0.70);
        let p = polyline_point(&path, t);
        let dir = random_unit(rng);
        let offset = radius * rng.uniform(0.4, 0.95);
        let center = [
            p[0] + offset * dir[0],
            p[1] + offset * dir[1],
            p[2] + offset * dir[2],
        ];
        let a_radius = rng.uniform(template.aneurysm_radius.0, template.aneurysm_radius.1);
        let a_peak =
            rng.uniform(template.aneurysm_peak.0 as f64, template.aneurysm_peak.1 as f64) as f32;
        aneurysms.push(BumpSpec {
            center,
            radius: a_radius,
            peak: a_peak,
        });
    }

    PhantomSpec {
        dims: template.dims,
        spacing: template.spacing,
        vessels: vec![vessel],
        aneurysms,
        background: BackgroundSpec {
            mean: template.background_mean,
            noise_std: template.noise_std,
        },
        seed: rng.next_u64(),
    }
}

/// Point at normalized arclength t in [0, 1] along a polyline.
fn polyline_point(path: &[[f64; 3]], t: f64) -> [f64; 3] {
    let mut lengths = Vec::with_capacity(path.len() - 1);
    let mut total = 0.0;
    for w in path.windows(2) {
        let d = point_segment_distance(w[0], w[1], w[1]);
        lengths.push(d);
        total += d;
    }
    let mut remaining = t.clamp(0.0, 1.0) * total;
    for (w, len) in path.windows(2).zip(&lengths) {
        if remaining <= *len && *len > 0.0 {
            let f = remaining / len;
            return [
                w[0][0] + f * (w[1][0] - w[0][0]),
                w[0][1] + f * (w[1][1] - w[0][1]),
                w[0][2] + f * (w[1][2] - w[0][2]),
            ];
        }
        remaining -= len;
    }
    *path.last().expect("non-empty path")
}

fn random_unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_structures_is_pure_noise() {
        let spec = PhantomSpec {
            dims: [8, 8, 8],
            spacing: [1.0; 3],
            vessels: vec![],
            aneurysms: vec![],
            background: BackgroundSpec {
                mean: 100.0,
                noise_std: 5.0,
            },
            seed: 3,
        };
        let p = generate_phantom(&spec).unwrap();
        assert!(p.vessel_gt.is_empty());
        assert!(p.aneurysm_gt.is_empty());
        let mean: f64 =
            p.volume.voxels().iter().map(|&v| v as f64).sum::<f64>() / p.volume.len() as f64;
        assert!((mean - 100.0).abs() < 2.0);
    }

    #[test]
    fn straight_tube_profile_matches_closed_form() {
        let spec = PhantomSpec {
            dims: [32, 32, 16],
            spacing: [1.0; 3],
            vessels: vec![VesselSpec {
                path: vec![[16.0, 16.0, 0.0], [16.0, 16.0, 15.0]],
                radius: 4.0,
                peak: 800.0,
            }],
            aneurysms: vec![],
            background: BackgroundSpec {
                mean: 100.0,
                noise_std: 0.0,
            },
            seed: 0,
        };
        let p = generate_phantom(&spec).unwrap();
        // Centerline voxels read background + peak.
        assert!((p.volume.at(16, 16, 8) - 900.0).abs() < 1e-2);
        // Half-peak boundary at radius * sqrt(2 ln 2) / 2 ~ 2.35 voxels.
        let hp = half_peak_distance(4.0);
        assert!((hp - 2.3548).abs() < 1e-3);
        assert!(p.vessel_gt.get_xyz(16 + 2, 16, 8)); // d = 2 < 2.35
        assert!(!p.vessel_gt.get_xyz(16 + 3, 16, 8)); // d = 3 > 2.35

        // Noise-free volume matches an independent evaluation of the
        // superposition formula.
        for (i, &v) in p.volume.voxels().iter().enumerate() {
            let [x, y, z] = p.volume.coords(i);
            let dx = x as f64 - 16.0;
            let dy = y as f64 - 16.0;
            let _ = z;
            let d2 = dx * dx + dy * dy;
            let expect = 100.0 + 800.0 * (-d2 / (2.0 * 4.0)).exp();
            let rel = ((v as f64 - expect) / expect.max(1.0)).abs();
            assert!(rel < 1e-4, "voxel {i}: {v} vs {expect}");
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = PhantomSpec {
            dims: [16, 16, 16],
            spacing: [1.0; 3],
            vessels: vec![VesselSpec {
                path: vec![[8.0, 8.0, 1.0], [8.0, 8.0, 14.0]],
                radius: 2.0,
                peak: 700.0,
            }],
            aneurysms: vec![],
            background: BackgroundSpec {
                mean: 100.0,
                noise_std: 6.0,
            },
            seed: 42,
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.volume.voxels(), b.volume.voxels());
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let t = DatasetTemplate::for_cube(32, 4.0);
        let d1 = generate_dataset(20, 0.5, &t, 9).unwrap();
        let d2 = generate_dataset(20, 0.5, &t, 9).unwrap();
        assert_eq!(d1.len(), 20);
        let positives = d1.iter().filter(|c| !c.phantom.aneurysm_gt.is_empty()).count();
        assert_eq!(positives, 10);
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.phantom.volume.voxels(), b.phantom.volume.voxels());
        }

        let all_pos = generate_dataset(10, 1.0, &t, 9).unwrap();
        assert!(all_pos.iter().all(|c| !c.phantom.aneurysm_gt.is_empty()));
        let none = generate_dataset(10, 0.0, &t, 9).unwrap();
        assert!(none.iter().all(|c| c.phantom.aneurysm_gt.is_empty()));
    }

    #[test]
    fn planted_bumps_attach_to_the_vessel_wall() {
        let t = DatasetTemplate::for_cube(32, 0.0);
        let cases = generate_dataset(12, 1.0, &t, 5).unwrap();
        for c in &cases {
            let v = &c.spec.vessels[0];
            let a = &c.spec.aneurysms[0];
            let d = polyline_distance(a.center, &v.path);
            assert!(
                d <= v.radius + 1e-9,
                "bump center {d:.2} voxels from centerline, vessel radius {:.2}",
                v.radius
            );
            assert!(!c.phantom.aneurysm_gt[0].voxels.is_empty());
        }
    }
}
