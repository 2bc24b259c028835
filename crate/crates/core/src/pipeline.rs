//! End-to-end drivers shared by the CLI and the acceptance suite: dataset
//! loading, case preparation, training runs, dataset evaluation, k-fold
//! cross-validation and the attention-position ablation harness.

use std::path::Path;

use crate::detect::{detect, DetectParams};
use crate::error::{Error, Result};
use crate::eval::{crossval_summary, CaseEval, EvalReport};
use crate::io::{
    load_annotation, load_volume, save_config, save_weights, Annotation, CrossvalReport,
    FoldResult,
};
use crate::model::{build_network, AttentionPosition, Model, NetworkConfig};
use crate::tensor::{Rng, Tensor};
use crate::train::{
    expand_dataset, kfold_split, one_hot, prepare_label, train_with, Checkpoint, EpochRecord,
    LabelVolume, LabeledCase, PreparedSample, TrainConfig,
};
use crate::voi::{extract_voi, VoiParams};
use crate::volume::{
    crop, resize_to, BinaryMask, GeometricTransform, Interpolation, Volume,
};

/// Everything a training or evaluation run needs to know.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub voi: VoiParams,
    /// Label sphere radius in voxels.
    pub sphere_radius: usize,
    /// Expand the training set with the eight augmentation variants.
    pub augment: bool,
    /// Fraction of training cases held out for validation / early stopping.
    pub val_fraction: f64,
    /// Padding around the vessel bounding box before resizing.
    pub crop_margin: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            voi: VoiParams::default(),
            sphere_radius: 30,
            augment: false,
            val_fraction: 0.1,
            crop_margin: 2,
        }
    }
}

impl PipelineConfig {
    pub fn detect_params(&self) -> DetectParams {
        DetectParams {
            voi: self.voi.clone(),
            binarize_threshold: 0.5,
            crop_margin: self.crop_margin,
        }
    }
}

/// Load every `*.vhdr` volume in a directory (sorted by file name) together
/// with its `*.annot` annotation.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Volume, Annotation)>> {
    let mut headers: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "vhdr"))
        .collect();
    headers.sort();
    if headers.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .vhdr volumes found"),
        ));
    }
    let mut out = Vec::with_capacity(headers.len());
    for h in headers {
        let vol = load_volume(&h)?;
        let annot_path = h.with_extension("annot");
        let annot = load_annotation(&annot_path)?;
        if vol.dims() != annot.dims {
            return Err(Error::GeometryMismatch {
                expected: vol.dims(),
                got: annot.dims,
            });
        }
        out.push((vol, annot));
    }
    Ok(out)
}

/// Run the VOI extractor on a raw volume and attach the annotation masks.
pub fn build_labeled_case(
    vol: &Volume,
    annot: &Annotation,
    voi_params: &VoiParams,
) -> Result<LabeledCase> {
    let voi = extract_voi(vol, voi_params)?;
    let mut aneurysm_mask = BinaryMask::empty(vol.dims());
    for a in &annot.aneurysms {
        for &idx in &a.voxels {
            aneurysm_mask.set(idx, true);
        }
    }
    Ok(LabeledCase {
        case_id: annot.case_id.clone(),
        volume: vol.clone(),
        aneurysm_mask,
        vessel_mask: voi.vessel_mask,
        declared_positive: !annot.aneurysms.is_empty(),
        diameters_mm: annot.aneurysms.iter().map(|a| a.diameter_mm).collect(),
    })
}

/// Nearest-neighbor label resampling through a geometric transform.
fn resample_labels(labels: &LabelVolume, transform: &GeometricTransform) -> LabelVolume {
    let t = transform.target_dims;
    let [nx, ny, _] = labels.dims;
    let mut classes = vec![0u8; t[0] * t[1] * t[2]];
    let mut idx = 0usize;
    for z in 0..t[2] {
        for y in 0..t[1] {
            for x in 0..t[0] {
                let p = transform.to_original([x as f64, y as f64, z as f64]);
                let ox = (p[0].round().max(0.0) as usize).min(labels.dims[0] - 1);
                let oy = (p[1].round().max(0.0) as usize).min(labels.dims[1] - 1);
                let oz = (p[2].round().max(0.0) as usize).min(labels.dims[2] - 1);
                classes[idx] = labels.classes[ox + nx * (oy + ny * oz)];
                idx += 1;
            }
        }
    }
    LabelVolume {
        dims: t,
        classes,
    }
}

/// Preprocess a labeled case into a network input / one-hot target pair:
/// normalize, mask to the VOI, crop to the vessel bounding box, resize to the
/// network cube, and carry the labels through the same transform.
pub fn prepare_sample(case: &LabeledCase, opts: &PipelineConfig) -> Result<PreparedSample> {
    let normalized = crate::volume::normalize_intensity(&case.volume, opts.voi.target_max)?;
    let mut masked = vec![0f32; normalized.len()];
    for idx in case.vessel_mask.iter_set() {
        masked[idx] = normalized.voxels()[idx];
    }
    let masked =
        Volume::new(normalized.dims(), normalized.spacing(), masked).expect("finite values");

    let dims = case.volume.dims();
    let (bb_lo, bb_hi) = case
        .vessel_mask
        .bounding_box()
        .ok_or(Error::EmptySeeds)?;
    let mut offset = [0usize; 3];
    let mut size = [0usize; 3];
    for a in 0..3 {
        offset[a] = bb_lo[a].saturating_sub(opts.crop_margin);
        let hi = (bb_hi[a] + 1 + opts.crop_margin).min(dims[a]);
        size[a] = hi - offset[a];
    }
    let cropped = crop(&masked, offset, size)?;
    let s = opts.network.input_dims;
    let (resized, t) = resize_to(&cropped, [s, s, s], Interpolation::Trilinear);
    let transform = t.after_crop(offset, dims);

    let scale = 1.0 / opts.voi.target_max;
    let data: Vec<f32> = resized.voxels().iter().map(|&v| v * scale).collect();
    let input = Tensor::from_vec([1, 1, s, s, s], data)?;

    let labels = prepare_label(case, opts.sphere_radius)?;
    let labels = resample_labels(&labels, &transform);
    let target = one_hot(&labels, opts.network.out_classes);
    Ok(PreparedSample {
        case_id: case.case_id.clone(),
        input,
        target,
    })
}

/// Split prepared samples into train / validation sets by a seeded shuffle.
fn split_validation(
    samples: Vec<PreparedSample>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<PreparedSample>, Vec<PreparedSample>) {
    if samples.len() < 2 || val_fraction <= 0.0 {
        return (samples, Vec::new());
    }
    let n_val = ((samples.len() as f64 * val_fraction).round() as usize)
        .clamp(1, samples.len() - 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    Rng::derive(seed, "valsplit").shuffle(&mut order);
    let val_idx: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if val_idx.contains(&i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

/// Train a fresh network on labeled cases. Augmentation (when enabled)
/// expands the training split only; the best checkpoint by validation loss
/// is loaded back into the returned model. `run_dir`, when given, receives
/// the config snapshot, per-epoch metrics and the best weights.
pub fn train_run(
    cases: &[LabeledCase],
    opts: &PipelineConfig,
    run_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model<f32>, Checkpoint, Vec<EpochRecord>)> {
    let samples: Vec<PreparedSample> = cases
        .iter()
        .map(|c| prepare_sample(c, opts))
        .collect::<Result<_>>()?;
    let (train_samples, val_samples) =
        split_validation(samples, opts.val_fraction, opts.train.seed);

    let train_samples = if opts.augment {
        // Re-augment at the case level so intensity ops see raw volumes.
        let train_ids: std::collections::BTreeSet<&str> =
            train_samples.iter().map(|s| s.case_id.as_str()).collect();
        let train_cases: Vec<LabeledCase> = cases
            .iter()
            .filter(|c| train_ids.contains(c.case_id.as_str()))
            .cloned()
            .collect();
        expand_dataset(&train_cases)?
            .iter()
            .map(|c| prepare_sample(c, opts))
            .collect::<Result<Vec<_>>>()?
    } else {
        train_samples
    };

    let mut model = build_network(&opts.network, opts.train.seed)?;
    let (checkpoint, history) = train_with(
        &mut model,
        &train_samples,
        &val_samples,
        &opts.train,
        on_epoch,
    )?;
    for (p, best) in model.params_mut().iter_mut().zip(&checkpoint.params) {
        *p = best.clone();
    }

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_config(&dir.join("config.txt"), &opts.network)?;
        let mut metrics = String::new();
        for r in &history {
            use std::fmt::Write as _;
            let _ = writeln!(
                metrics,
                "epoch={} train_loss={} val_loss={}",
                r.epoch, r.train_loss, r.val_loss
            );
        }
        std::fs::write(dir.join("metrics.txt"), metrics)
            .map_err(|e| Error::io(dir.join("metrics.txt"), e))?;
        save_weights(&dir.join("best.awnet"), &model)?;
    }
    Ok((model, checkpoint, history))
}

/// Detect on every case and score against its annotation.
pub fn evaluate_cases(
    model: &Model<f32>,
    data: &[(Volume, Annotation)],
    params: &DetectParams,
) -> Result<EvalReport> {
    let mut per_case = Vec::with_capacity(data.len());
    for (vol, annot) in data {
        let dets = detect(model, vol, params)?;
        let gts: Vec<(Vec<usize>, f64)> = annot
            .aneurysms
            .iter()
            .map(|a| (a.voxels.clone(), a.diameter_mm))
            .collect();
        per_case.push(CaseEval::evaluate(&annot.case_id, &dets, &gts, vol.dims()));
    }
    Ok(EvalReport::from_cases(per_case))
}

/// K-fold cross-validation: per fold, train on the train split and evaluate
/// on the held-out split. Per-fold seeds derive deterministically from the
/// base seed.
pub fn crossval_run(
    data: &[(Volume, Annotation)],
    opts: &PipelineConfig,
    k: usize,
    on_progress: &mut dyn FnMut(&str),
) -> Result<CrossvalReport> {
    let ids: Vec<String> = data.iter().map(|(_, a)| a.case_id.clone()).collect();
    let folds = kfold_split(&ids, k, opts.train.seed)?;
    let mut results = Vec::with_capacity(k);
    for (fi, (train_ids, test_ids)) in folds.iter().enumerate() {
        on_progress(&format!("fold {fi}: training on {} cases", train_ids.len()));
        let train_set: std::collections::BTreeSet<&str> =
            train_ids.iter().map(String::as_str).collect();
        let mut fold_opts = opts.clone();
        fold_opts.train.seed = opts.train.seed.wrapping_add(fi as u64);

        let mut train_cases = Vec::new();
        let mut test_data = Vec::new();
        for (vol, annot) in data {
            if train_set.contains(annot.case_id.as_str()) {
                train_cases.push(build_labeled_case(vol, annot, &opts.voi)?);
            } else if test_ids.contains(&annot.case_id) {
                test_data.push((vol.clone(), annot.clone()));
            }
        }
        let (model, _, _) = train_run(&train_cases, &fold_opts, None, &mut |_| {})?;
        let report = evaluate_cases(&model, &test_data, &opts.detect_params())?;
        on_progress(&format!(
            "fold {fi}: tp={} fp={} fn={}",
            report.tp, report.fp, report.fn_count
        ));
        results.push(FoldResult {
            index: fi,
            test_cases: test_data.len(),
            tp: report.tp,
            fp: report.fp,
            fn_count: report.fn_count,
            sensitivity: report.sensitivity.unwrap_or(0.0),
            fp_per_case: report.fp_per_case,
        });
    }
    let sens: Vec<f64> = results.iter().map(|f| f.sensitivity).collect();
    Ok(CrossvalReport {
        k,
        seed: opts.train.seed,
        folds: results,
        summary: crossval_summary(&sens),
    })
}

/// One attention configuration's outcome within the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub ratio: usize,
    pub position: AttentionPosition,
    pub sensitivity: f64,
    pub fp_per_case: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub positions: Vec<AttentionPosition>,
    pub ratios: Vec<usize>,
    pub baseline_sensitivity: f64,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// Render as a position-by-ratio table mirroring the ablation layout.
    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = write!(s, "{:>12}", "");
        for p in &self.positions {
            let _ = write!(s, "{:>12}", p.as_str());
        }
        let _ = writeln!(s);
        for &r in &self.ratios {
            let _ = write!(s, "{:>12}", format!("SE(R={r})"));
            for &p in &self.positions {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.ratio == r && c.position == p)
                    .expect("complete table");
                let _ = write!(s, "{:>12}", crate::eval::format_percent2(cell.sensitivity));
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(
            s,
            "baseline (no attention): {}",
            crate::eval::format_percent2(self.baseline_sensitivity)
        );
        s
    }
}

/// Position/ratio sweep on a fixed train/test split (the first fold of a
/// seeded k=4 split), mirroring the attention ablation protocol.
pub fn ablate_run(
    data: &[(Volume, Annotation)],
    opts: &PipelineConfig,
    positions: &[AttentionPosition],
    ratios: &[usize],
    on_progress: &mut dyn FnMut(&str),
) -> Result<AblationTable> {
    let ids: Vec<String> = data.iter().map(|(_, a)| a.case_id.clone()).collect();
    let folds = kfold_split(&ids, 4, opts.train.seed)?;
    let (train_ids, test_ids) = &folds[0];
    let train_set: std::collections::BTreeSet<&str> =
        train_ids.iter().map(String::as_str).collect();
    let mut train_cases = Vec::new();
    let mut test_data = Vec::new();
    for (vol, annot) in data {
        if train_set.contains(annot.case_id.as_str()) {
            train_cases.push(build_labeled_case(vol, annot, &opts.voi)?);
        } else if test_ids.contains(&annot.case_id) {
            test_data.push((vol.clone(), annot.clone()));
        }
    }

    let run_one = |attention: AttentionPosition,
                   ratio: usize,
                   on_progress: &mut dyn FnMut(&str)|
     -> Result<EvalReport> {
        let mut cfg = opts.clone();
        cfg.network.attention = attention;
        cfg.network.se_ratio = ratio;
        on_progress(&format!(
            "training attention={} ratio={ratio}",
            attention.as_str()
        ));
        let (model, _, _) = train_run(&train_cases, &cfg, None, &mut |_| {})?;
        evaluate_cases(&model, &test_data, &cfg.detect_params())
    };

    let baseline = run_one(AttentionPosition::None, opts.network.se_ratio, on_progress)?;
    let mut cells = Vec::new();
    for &r in ratios {
        for &p in positions {
            let report = run_one(p, r, on_progress)?;
            cells.push(AblationCell {
                ratio: r,
                position: p,
                sensitivity: report.sensitivity.unwrap_or(0.0),
                fp_per_case: report.fp_per_case,
            });
        }
    }
    Ok(AblationTable {
        positions: positions.to_vec(),
        ratios: ratios.to_vec(),
        baseline_sensitivity: baseline.sensitivity.unwrap_or(0.0),
        cells,
    })
}

/// Write a phantom dataset (volume + annotation pairs) to a directory.
pub fn write_phantom_dataset(
    dir: &Path,
    cases: &[crate::phantom::PhantomCase],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for case in cases {
        let vol_path = dir.join(format!("{}.vhdr", case.case_id));
        crate::io::save_volume(&vol_path, &case.phantom.volume, crate::io::VolumeDtype::F32)?;
        let annot = Annotation {
            case_id: case.case_id.clone(),
            dims: case.phantom.volume.dims(),
            aneurysms: case
                .phantom
                .aneurysm_gt
                .iter()
                .map(|a| crate::io::AnnotatedAneurysm {
                    voxels: a.voxels.clone(),
                    diameter_mm: a.max_diameter_mm,
                    location: Some("synthetic".into()),
                })
                .collect(),
        };
        crate::io::save_annotation(&dir.join(format!("{}.annot", case.case_id)), &annot)?;
    }
    Ok(())
}
