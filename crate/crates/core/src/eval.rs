//! Evaluation protocol: greedy TP matching under the strict >30% cube
//! overlap rule, sensitivity and FPs-per-case, size-bin subgroups, and
//! cross-validation summary statistics.

use crate::detect::Detection;
use crate::error::{Error, Result};

/// Fraction of an aneurysm's voxels a box must cover (strictly more than)
/// to count as a hit.
pub const OVERLAP_RULE: f64 = 0.30;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// (detection index, aneurysm index, overlap fraction) per matched pair.
    pub assignment: Vec<(usize, usize, f64)>,
}

fn coords(idx: usize, dims: [usize; 3]) -> [usize; 3] {
    [
        idx % dims[0],
        (idx / dims[0]) % dims[1],
        idx / (dims[0] * dims[1]),
    ]
}

/// Fraction of ground-truth voxels covered by the detection box.
pub fn overlap_fraction(det: &Detection, gt_voxels: &[usize], dims: [usize; 3]) -> f64 {
    if gt_voxels.is_empty() {
        return 0.0;
    }
    let inside = gt_voxels
        .iter()
        .filter(|&&idx| det.contains(coords(idx, dims)))
        .count();
    inside as f64 / gt_voxels.len() as f64
}

/// Greedy single-credit matching: pairs ranked by descending overlap (ties by
/// detection order, then aneurysm order); each aneurysm is credited at most
/// one TP and each detection matches at most one aneurysm. Unmatched
/// detections are FPs, unmatched aneurysms FNs.
pub fn match_case(dets: &[Detection], gts: &[Vec<usize>], dims: [usize; 3]) -> MatchOutcome {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (di, det) in dets.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let frac = overlap_fraction(det, gt, dims);
            if frac > OVERLAP_RULE {
                pairs.push((di, gi, frac));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut assignment = Vec::new();
    for (di, gi, frac) in pairs {
        if !det_used[di] && !gt_used[gi] {
            det_used[di] = true;
            gt_used[gi] = true;
            assignment.push((di, gi, frac));
        }
    }
    let tp = assignment.len();
    MatchOutcome {
        tp,
        fp: dets.len() - tp,
        fn_count: gts.len() - tp,
        assignment,
    }
}

/// TP / (TP + FN).
pub fn sensitivity(tp: usize, fn_count: usize) -> Result<f64> {
    if tp + fn_count == 0 {
        return Err(Error::NoPositives);
    }
    Ok(tp as f64 / (tp + fn_count) as f64)
}

/// FP / number of evaluated cases.
pub fn fp_per_case(fp: usize, n_cases: usize) -> f64 {
    assert!(n_cases > 0, "fp_per_case needs at least one case");
    fp as f64 / n_cases as f64
}

pub const SIZE_BIN_LABELS: [&str; 4] = ["<3.0", "3.0-4.9", "5.0-9.9", ">=10.0"];

/// Bin index for an aneurysm max diameter in millimeters.
pub fn size_bin(diameter_mm: f64) -> usize {
    if diameter_mm < 3.0 {
        0
    } else if diameter_mm < 5.0 {
        1
    } else if diameter_mm < 10.0 {
        2
    } else {
        3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeBin {
    pub label: &'static str,
    pub total: usize,
    pub detected: usize,
    pub sensitivity: f64,
}

/// Per-bin sensitivity over (diameter mm, detected) pairs; empty bins are
/// absent from the result.
pub fn subgroup_by_size(per_aneurysm: &[(f64, bool)]) -> Vec<SizeBin> {
    let mut totals = [0usize; 4];
    let mut hits = [0usize; 4];
    for &(d, detected) in per_aneurysm {
        let b = size_bin(d);
        totals[b] += 1;
        if detected {
            hits[b] += 1;
        }
    }
    (0..4)
        .filter(|&b| totals[b] > 0)
        .map(|b| SizeBin {
            label: SIZE_BIN_LABELS[b],
            total: totals[b],
            detected: hits[b],
            sensitivity: hits[b] as f64 / totals[b] as f64,
        })
        .collect()
}

/// Outcome of one detection within a case report.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutcome {
    pub detection: Detection,
    /// (aneurysm index, overlap fraction) when this box was credited a TP.
    pub matched: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AneurysmOutcome {
    pub diameter_mm: f64,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseEval {
    pub case_id: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub detections: Vec<DetectionOutcome>,
    pub aneurysms: Vec<AneurysmOutcome>,
}

impl CaseEval {
    /// Evaluate one case from its detections and ground-truth voxel sets.
    pub fn evaluate(
        case_id: &str,
        dets: &[Detection],
        gts: &[(Vec<usize>, f64)],
        dims: [usize; 3],
    ) -> CaseEval {
        let sets: Vec<Vec<usize>> = gts.iter().map(|(v, _)| v.clone()).collect();
        let outcome = match_case(dets, &sets, dims);
        let detections = dets
            .iter()
            .enumerate()
            .map(|(di, det)| DetectionOutcome {
                detection: det.clone(),
                matched: outcome
                    .assignment
                    .iter()
                    .find(|(d, _, _)| *d == di)
                    .map(|&(_, gi, frac)| (gi, frac)),
            })
            .collect();
        let aneurysms = gts
            .iter()
            .enumerate()
            .map(|(gi, (_, diameter))| AneurysmOutcome {
                diameter_mm: *diameter,
                detected: outcome.assignment.iter().any(|(_, g, _)| *g == gi),
            })
            .collect();
        CaseEval {
            case_id: case_id.to_string(),
            tp: outcome.tp,
            fp: outcome.fp,
            fn_count: outcome.fn_count,
            detections,
            aneurysms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_case: Vec<CaseEval>,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// None when the dataset has no positives.
    pub sensitivity: Option<f64>,
    pub fp_per_case: f64,
    pub size_bins: Vec<SizeBin>,
}

impl EvalReport {
    pub fn from_cases(per_case: Vec<CaseEval>) -> EvalReport {
        assert!(!per_case.is_empty(), "report needs at least one case");
        let tp: usize = per_case.iter().map(|c| c.tp).sum();
        let fp: usize = per_case.iter().map(|c| c.fp).sum();
        let fn_count: usize = per_case.iter().map(|c| c.fn_count).sum();
        let per_aneurysm: Vec<(f64, bool)> = per_case
            .iter()
            .flat_map(|c| c.aneurysms.iter().map(|a| (a.diameter_mm, a.detected)))
            .collect();
        EvalReport {
            sensitivity: sensitivity(tp, fn_count).ok(),
            fp_per_case: fp_per_case(fp, per_case.len()),
            size_bins: subgroup_by_size(&per_aneurysm),
            per_case,
            tp,
            fp,
            fn_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalSummary {
    pub mean: f64,
    /// Population (1/k) standard deviation.
    pub std: f64,
    pub best: f64,
}

/// Mean, population standard deviation and best of per-fold sensitivities.
pub fn crossval_summary(per_fold: &[f64]) -> CrossvalSummary {
    assert!(per_fold.len() >= 2, "need at least two folds");
    assert!(per_fold.iter().all(|v| (0.0..=1.0).contains(v)));
    let k = per_fold.len() as f64;
    let mean = per_fold.iter().sum::<f64>() / k;
    let var = per_fold.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    let best = per_fold.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    CrossvalSummary {
        mean,
        std: var.sqrt(),
        best,
    }
}

/// "91.0%" style: one decimal place.
pub fn format_percent1(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

/// "98.12%" style: two decimal places.
pub fn format_percent2(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

/// "97.89 ± 0.88%" style summary line.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}%", mean * 100.0, std * 100.0)
}
