//! Label preparation, the eight-variant augmentation, soft Dice /
//! cross-entropy losses, the batch-1 Adam training loop with early stopping,
//! and seeded k-fold splitting.

use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::tensor::{adam_step, AdamState, Rng, Scalar, Tensor};
use crate::volume::{
    connected_components, flip_transverse, flip_transverse_mask, gaussian_smooth_discrete,
    histogram_equalize, BinaryMask, Connectivity, Volume,
};

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_ANEURYSM: u8 = 1;
pub const CLASS_VESSEL: u8 = 2;

/// One case of the screening dataset: raw volume, annotation, and the vessel
/// mask produced by the VOI extractor.
#[derive(Debug, Clone)]
pub struct LabeledCase {
    pub case_id: String,
    pub volume: Volume,
    pub aneurysm_mask: BinaryMask,
    pub vessel_mask: BinaryMask,
    pub declared_positive: bool,
    /// Max diameter (mm) per annotated aneurysm, for subgroup reporting.
    pub diameters_mm: Vec<f64>,
}

/// Per-voxel class ids: 0 background, 1 aneurysm, 2 vessel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub classes: Vec<u8>,
}

impl LabelVolume {
    pub fn flip_transverse(&self) -> LabelVolume {
        let [nx, ny, nz] = self.dims;
        let plane = nx * ny;
        let mut classes = vec![0u8; self.classes.len()];
        for z in 0..nz {
            classes[(nz - 1 - z) * plane..(nz - z) * plane]
                .copy_from_slice(&self.classes[z * plane..(z + 1) * plane]);
        }
        LabelVolume {
            dims: self.dims,
            classes,
        }
    }
}

/// Training label: per aneurysm component, the union of the component and a
/// sphere of `sphere_radius` voxels around its rounded centroid becomes class
/// 1; the remaining vessel mask becomes class 2. Class priority 1 > 2 > 0.
pub fn prepare_label(case: &LabeledCase, sphere_radius: usize) -> Result<LabelVolume> {
    if case.declared_positive && case.aneurysm_mask.is_empty() {
        return Err(Error::EmptyAnnotation {
            case_id: case.case_id.clone(),
        });
    }
    let dims = case.volume.dims();
    let [nx, ny, nz] = dims;
    let mut classes = vec![CLASS_BACKGROUND; nx * ny * nz];
    for idx in case.vessel_mask.iter_set() {
        classes[idx] = CLASS_VESSEL;
    }

    let r = sphere_radius as i64;
    let r2 = (sphere_radius * sphere_radius) as i64;
    let mut ball = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    ball.push([dx, dy, dz]);
                }
            }
        }
    }
    for comp in connected_components(&case.aneurysm_mask, Connectivity::TwentySix) {
        let c = comp.center();
        for o in &ball {
            let px = c[0] as i64 + o[0];
            let py = c[1] as i64 + o[1];
            let pz = c[2] as i64 + o[2];
            if px >= 0 && py >= 0 && pz >= 0 && px < nx as i64 && py < ny as i64 && pz < nz as i64 {
                classes[px as usize + nx * (py as usize + ny * pz as usize)] = CLASS_ANEURYSM;
            }
        }
        for &idx in &comp.voxel_indices {
            classes[idx] = CLASS_ANEURYSM;
        }
    }
    Ok(LabelVolume { dims, classes })
}

/// One of the eight augmentation variants; intensity ops apply in the fixed
/// order noise -> flip -> histogram equalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentVariant {
    pub noise: bool,
    pub flip: bool,
    pub histeq: bool,
}

impl AugmentVariant {
    pub const IDENTITY: AugmentVariant = AugmentVariant {
        noise: false,
        flip: false,
        histeq: false,
    };

    /// The full 8-element power set in a fixed order.
    pub fn all() -> [AugmentVariant; 8] {
        let v = |noise, flip, histeq| AugmentVariant { noise, flip, histeq };
        [
            v(false, false, false),
            v(true, false, false),
            v(false, true, false),
            v(false, false, true),
            v(true, true, false),
            v(true, false, true),
            v(false, true, true),
            v(true, true, true),
        ]
    }

    pub fn tag(&self) -> String {
        if *self == Self::IDENTITY {
            return "id".into();
        }
        let mut s = String::new();
        if self.noise {
            s.push('n');
        }
        if self.flip {
            s.push('f');
        }
        if self.histeq {
            s.push('h');
        }
        s
    }
}

pub const NOISE_FILTER_VARIANCE: f64 = 4.0;
pub const NOISE_FILTER_MAX_WIDTH: usize = 32;
pub const HISTEQ_BINS: usize = 256;

/// Intensity transforms touch only the volume; flipping also mirrors the
/// masks. Annotated diameters are geometric invariants and stay unchanged.
pub fn augment_case(case: &LabeledCase, variant: AugmentVariant) -> Result<LabeledCase> {
    let mut volume = case.volume.clone();
    if variant.noise {
        volume = gaussian_smooth_discrete(&volume, NOISE_FILTER_VARIANCE, NOISE_FILTER_MAX_WIDTH);
    }
    let mut aneurysm_mask = case.aneurysm_mask.clone();
    let mut vessel_mask = case.vessel_mask.clone();
    if variant.flip {
        volume = flip_transverse(&volume);
        aneurysm_mask = flip_transverse_mask(&aneurysm_mask);
        vessel_mask = flip_transverse_mask(&vessel_mask);
    }
    if variant.histeq {
        volume = histogram_equalize(&volume, HISTEQ_BINS)?;
    }
    let case_id = if variant == AugmentVariant::IDENTITY {
        case.case_id.clone()
    } else {
        format!("{}+{}", case.case_id, variant.tag())
    };
    Ok(LabeledCase {
        case_id,
        volume,
        aneurysm_mask,
        vessel_mask,
        declared_positive: case.declared_positive,
        diameters_mm: case.diameters_mm.clone(),
    })
}

/// All eight variants of every case, in case-major order.
pub fn expand_dataset(cases: &[LabeledCase]) -> Result<Vec<LabeledCase>> {
    let mut out = Vec::with_capacity(cases.len() * 8);
    for case in cases {
        for variant in AugmentVariant::all() {
            out.push(augment_case(case, variant)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftDice,
    CrossEntropy,
    DicePlusCe,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "soft-dice" => Ok(Self::SoftDice),
            "cross-entropy" => Ok(Self::CrossEntropy),
            "dice-plus-ce" => Ok(Self::DicePlusCe),
            other => Err(Error::ConfigInvalid(format!(
                "unknown loss `{other}` (expected soft-dice|cross-entropy|dice-plus-ce)"
            ))),
        }
    }
}

const DICE_EPS: f64 = 1e-5;

/// Soft Dice over foreground classes: 1 - mean_k (2*sum(p*t) + eps) /
/// (sum(p) + sum(t) + eps). Returns the loss and its gradient w.r.t. the
/// predicted probabilities.
pub fn soft_dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    let [n, c, _, _, _] = pred.shape();
    assert_eq!(pred.shape(), target.shape());
    assert!(c >= 2, "need at least one foreground class");
    let m = pred.spatial();
    let classes = c - 1;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0f64;
    for ni in 0..n {
        for k in 1..c {
            let base = (ni * c + k) * m;
            let p = &pred.data()[base..base + m];
            let t = &target.data()[base..base + m];
            let mut inter = 0.0f64;
            let mut psum = 0.0f64;
            let mut tsum = 0.0f64;
            for (&pv, &tv) in p.iter().zip(t) {
                inter += pv.to_f64_() * tv.to_f64_();
                psum += pv.to_f64_();
                tsum += tv.to_f64_();
            }
            let denom = psum + tsum + DICE_EPS;
            let dice = (2.0 * inter + DICE_EPS) / denom;
            loss += (1.0 - dice) / (classes * n) as f64;
            let g = &mut grad.data_mut()[base..base + m];
            let scale = 1.0 / (classes * n) as f64;
            for (gv, &tv) in g.iter_mut().zip(t) {
                // d(1 - dice)/dp = -(2 t denom - (2 inter + eps)) / denom^2
                let d = -(2.0 * tv.to_f64_() * denom - (2.0 * inter + DICE_EPS)) / (denom * denom);
                *gv = T::from_f64(d * scale);
            }
        }
    }
    (loss, grad)
}

/// Mean voxel-wise cross-entropy against one-hot targets.
pub fn cross_entropy_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    assert_eq!(pred.shape(), target.shape());
    let [n, _, _, _, _] = pred.shape();
    let m = pred.spatial();
    let nvox = (n * m) as f64;
    let tiny = 1e-12f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0f64;
    for ((&pv, &tv), gv) in pred
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut().iter_mut())
    {
        let t = tv.to_f64_();
        if t > 0.0 {
            let p = pv.to_f64_().max(tiny);
            loss -= t * p.ln() / nvox;
            *gv = T::from_f64(-t / p / nvox);
        }
    }
    (loss, grad)
}

pub fn loss_and_grad<T: Scalar>(
    kind: LossKind,
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> (f64, Tensor<T>) {
    match kind {
        LossKind::SoftDice => soft_dice_loss(pred, target),
        LossKind::CrossEntropy => cross_entropy_loss(pred, target),
        LossKind::DicePlusCe => {
            let (l1, mut g1) = soft_dice_loss(pred, target);
            let (l2, g2) = cross_entropy_loss(pred, target);
            for (a, b) in g1.data_mut().iter_mut().zip(g2.data()) {
                *a += *b;
            }
            (l1 + l2, g1)
        }
    }
}

/// One-hot encoding of a label volume as a (1, classes, d, h, w) tensor.
/// Volume x/y/z maps onto tensor w/h/d.
pub fn one_hot<T: Scalar>(labels: &LabelVolume, classes: usize) -> Tensor<T> {
    let [nx, ny, nz] = labels.dims;
    let m = nx * ny * nz;
    let mut t = Tensor::zeros([1, classes, nz, ny, nx]);
    for (i, &cl) in labels.classes.iter().enumerate() {
        t.data_mut()[(cl as usize) * m + i] = T::one();
    }
    t
}

/// A case after preprocessing: network input plus one-hot target.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub case_id: String,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            lr: 5e-4,
            max_epochs: 300,
            early_stop_patience: 20,
            seed: 0,
            loss: LossKind::SoftDice,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: Vec<Tensor<f32>>,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Strict-improvement early stopping: stop after `patience` epochs without a
/// new best metric.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns true when training should stop after this epoch.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best >= self.patience
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_metric(&self) -> f64 {
        self.best
    }
}

/// Batch-1 (by default) Adam training with per-epoch validation and early
/// stopping. Returns the best checkpoint by validation loss plus the full
/// epoch history. Bit-reproducible for a fixed config seed.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    train_with(model, train_set, val_set, config, &mut |_| {})
}

/// [`train`] with a per-epoch progress callback.
pub fn train_with(
    model: &mut Model<f32>,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    assert!(config.batch_size >= 1);
    assert!(!train_set.is_empty(), "empty training set");
    let mut state = AdamState::for_params(model.params());
    let lr = config.lr as f32;
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::derive(config.seed, &format!("shuffle.{epoch}")).shuffle(&mut order);
        let mut dropout_rng = Rng::derive(config.seed, &format!("dropout.{epoch}"));

        let mut train_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            for &i in batch {
                let sample = &train_set[i];
                let (g, out) =
                    model.forward_traced(sample.input.clone(), Mode::Train, &mut dropout_rng)?;
                let (loss, dloss) = loss_and_grad(config.loss, g.value(out), &sample.target);
                if !loss.is_finite() {
                    return Err(Error::DivergenceDetected { epoch });
                }
                train_loss += loss;
                let grads = g.backward(out, dloss)?;
                let batch_grads: Vec<Tensor<f32>> = grads
                    .params
                    .into_iter()
                    .zip(model.params())
                    .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                match &mut acc {
                    None => acc = Some(batch_grads),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&batch_grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f32;
                for g in &mut grads {
                    for v in g.data_mut() {
                        *v *= inv;
                    }
                }
            }
            adam_step(model.params_mut(), &grads, &mut state, lr)?;
        }
        train_loss /= train_set.len() as f64;

        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            evaluate_loss(model, val_set, config.loss)?
        };
        if !val_loss.is_finite() {
            return Err(Error::DivergenceDetected { epoch });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&record);
        history.push(record);

        let is_best = val_loss < stopper.best_metric();
        let stop = stopper.observe(epoch, val_loss);
        if is_best || best.is_none() {
            best = Some(Checkpoint {
                epoch,
                params: model.params().to_vec(),
                val_metric: val_loss,
            });
        }
        if stop {
            break;
        }
    }
    Ok((best.expect("at least one epoch ran"), history))
}

/// Mean loss over a set in inference mode.
pub fn evaluate_loss(
    model: &Model<f32>,
    set: &[PreparedSample],
    loss: LossKind,
) -> Result<f64> {
    let mut rng = Rng::from_seed(0);
    let mut total = 0.0;
    for sample in set {
        let pred = model.forward(sample.input.clone(), Mode::Inference, &mut rng)?;
        total += loss_and_grad(loss, &pred, &sample.target).0;
    }
    Ok(total / set.len() as f64)
}

/// Seeded shuffle + contiguous chunking into k (train, test) partitions.
/// Fold sizes differ by at most one; earlier folds take the remainder.
pub fn kfold_split(
    case_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k < 2 || case_ids.len() < k {
        return Err(Error::TooFewCases {
            n_cases: case_ids.len(),
            k,
        });
    }
    let mut shuffled: Vec<String> = case_ids.to_vec();
    Rng::derive(seed, "kfold").shuffle(&mut shuffled);
    let n = shuffled.len();
    let base = n / k;
    let rem = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0usize;
    for f in 0..k {
        let size = base + usize::from(f < rem);
        let test: Vec<String> = shuffled[start..start + size].to_vec();
        let train: Vec<String> = shuffled[..start]
            .iter()
            .chain(&shuffled[start + size..])
            .cloned()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}
