//! Inference pipeline: VOI-restricted prediction, likelihood binarization,
//! remapping into original-image space, and cube-box generation.

use crate::error::Result;
use crate::model::{Mode, Model};
use crate::tensor::{Rng, Tensor};
use crate::voi::{extract_voi, VoiParams};
use crate::volume::{
    connected_components, crop, remap_mask, resize_to, BinaryMask, ConnectedComponent,
    Connectivity, GeometricTransform, Interpolation, Volume,
};

/// Fixed in-plane box side for compact components.
pub const CUBE_BASE_SIDE: usize = 60;
/// Planar radius above which the box grows to twice the radius.
pub const CUBE_RADIUS_LIMIT: f64 = 30.0;

/// A cube detection in original-image voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box_min: [usize; 3],
    /// (width, length, H): in-plane sides and slice count, after clipping.
    pub box_size: [usize; 3],
    /// Max aneurysm-channel probability over the source component.
    pub score: f64,
    pub component_id: usize,
}

impl Detection {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.box_min[a] && p[a] < self.box_min[a] + self.box_size[a])
    }
}

#[derive(Debug, Clone)]
pub struct DetectParams {
    pub voi: VoiParams,
    pub binarize_threshold: f64,
    /// Voxels of padding around the vessel bounding box before resizing.
    pub crop_margin: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            voi: VoiParams::default(),
            binarize_threshold: 0.5,
            crop_margin: 2,
        }
    }
}

/// Network-space aneurysm likelihood for a raw volume: extract the VOI, crop
/// to the vessel bounding box, resize to the network input cube, run the
/// model, and zero every voxel outside the (resampled) VOI.
pub fn predict_likelihood(
    model: &Model<f32>,
    vol_raw: &Volume,
    params: &DetectParams,
) -> Result<(Volume, GeometricTransform)> {
    let voi = extract_voi(vol_raw, &params.voi)?;
    let dims = vol_raw.dims();
    let (bb_lo, bb_hi) = voi
        .vessel_mask
        .bounding_box()
        .expect("region growing succeeded, mask non-empty");
    let mut offset = [0usize; 3];
    let mut size = [0usize; 3];
    for a in 0..3 {
        offset[a] = bb_lo[a].saturating_sub(params.crop_margin);
        let hi = (bb_hi[a] + 1 + params.crop_margin).min(dims[a]);
        size[a] = hi - offset[a];
    }
    let cropped = crop(&voi.masked_volume, offset, size)?;
    let s = model.config.input_dims;
    let (resized, t) = resize_to(&cropped, [s, s, s], Interpolation::Trilinear);
    let transform = t.after_crop(offset, dims);

    let scale = 1.0 / params.voi.target_max;
    let data: Vec<f32> = resized.voxels().iter().map(|&v| v * scale).collect();
    let input = Tensor::from_vec([1, 1, s, s, s], data)?;
    let probs = model.forward(input, Mode::Inference, &mut Rng::from_seed(0))?;

    // Aneurysm channel, with voxels outside the VOI forced to exactly 0.
    let m = s * s * s;
    let mut likelihood = vec![0f32; m];
    let aneurysm = &probs.data()[m..2 * m];
    let mut idx = 0usize;
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let p = transform.to_original([x as f64, y as f64, z as f64]);
                let ox = (p[0].round().max(0.0) as usize).min(dims[0] - 1);
                let oy = (p[1].round().max(0.0) as usize).min(dims[1] - 1);
                let oz = (p[2].round().max(0.0) as usize).min(dims[2] - 1);
                if voi.vessel_mask.get_xyz(ox, oy, oz) {
                    likelihood[idx] = aneurysm[idx];
                }
                idx += 1;
            }
        }
    }
    let spacing = [
        vol_raw.spacing()[0] * transform.scale[0],
        vol_raw.spacing()[1] * transform.scale[1],
        vol_raw.spacing()[2] * transform.scale[2],
    ];
    Ok((
        Volume::new([s, s, s], spacing, likelihood)?,
        transform,
    ))
}

/// Bit set iff probability is strictly greater than the threshold.
pub fn binarize_likelihood(likelihood: &Volume, threshold: f64) -> BinaryMask {
    let mut mask = BinaryMask::empty(likelihood.dims());
    for (i, &v) in likelihood.voxels().iter().enumerate() {
        if (v as f64) > threshold {
            mask.set(i, true);
        }
    }
    mask
}

/// Box side for a component of planar radius r: 60 when r <= 30, else 2r
/// rounded up to an even integer.
fn box_side(r: f64) -> usize {
    if r <= CUBE_RADIUS_LIMIT {
        CUBE_BASE_SIDE
    } else {
        let side = (2.0 * r).ceil() as usize;
        side + side % 2
    }
}

/// One cube box per 26-connected component: in-plane side by the 60 / 2r
/// rule, H = the component's slice extent, centered on the rounded centroid
/// and clipped to the volume bounds. `score_of` supplies the detection score.
pub fn boxes_from_mask(
    mask: &BinaryMask,
    score_of: impl Fn(&ConnectedComponent) -> f64,
) -> Vec<Detection> {
    let dims = mask.dims();
    let comps = connected_components(mask, Connectivity::TwentySix);
    comps
        .iter()
        .enumerate()
        .map(|(component_id, comp)| {
            let c = comp.center();
            let side = box_side(comp.max_planar_radius);
            let size = [side, side, comp.z_extent];
            let mut box_min = [0usize; 3];
            let mut box_size = [0usize; 3];
            for a in 0..3 {
                let lo = c[a] as i64 - (size[a] / 2) as i64;
                let hi = (lo + size[a] as i64).min(dims[a] as i64);
                let lo = lo.max(0);
                box_min[a] = lo as usize;
                box_size[a] = (hi - lo).max(0) as usize;
            }
            Detection {
                box_min,
                box_size,
                score: score_of(comp),
                component_id,
            }
        })
        .collect()
}

/// Full detection pass: likelihood -> strict binarization -> remap into
/// original space -> cube boxes, sorted by descending score.
pub fn detect(
    model: &Model<f32>,
    vol_raw: &Volume,
    params: &DetectParams,
) -> Result<Vec<Detection>> {
    let (likelihood, transform) = predict_likelihood(model, vol_raw, params)?;
    let mask_model = binarize_likelihood(&likelihood, params.binarize_threshold);
    let mask_orig = remap_mask(&mask_model, &transform)?;
    let model_dims = likelihood.dims();
    let score_of = |comp: &ConnectedComponent| -> f64 {
        let mut best = 0f64;
        for &idx in &comp.voxel_indices {
            let [x, y, z] = mask_orig.coords(idx);
            let t = transform.to_target([x as f64, y as f64, z as f64]);
            let tx = (t[0].round().max(0.0) as usize).min(model_dims[0] - 1);
            let ty = (t[1].round().max(0.0) as usize).min(model_dims[1] - 1);
            let tz = (t[2].round().max(0.0) as usize).min(model_dims[2] - 1);
            best = best.max(likelihood.at(tx, ty, tz) as f64);
        }
        best
    };
    let mut dets = boxes_from_mask(&mask_orig, score_of);
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.component_id.cmp(&b.component_id))
    });
    Ok(dets)
}
