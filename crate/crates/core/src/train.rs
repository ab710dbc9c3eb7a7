//! Confidence-weighted MPJPE loss, Adam, and the training loops.
//!
//! Supervised training fits ground-truth poses with every joint weighted 1.
//! Weakly supervised training fits pseudo-labels; each joint is weighted by
//! `beta = exp(1 - 1/c^2)` from its detector confidence `c`, and joints below
//! the confidence threshold are dropped from the loss.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::Rng as _;
use rand::seq::{IndexedRandom as _, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{self, EvalError, Predictor};
use crate::geometry;
use crate::model::{NUM_JOINTS, Pose3D, Sample};
use crate::nn::{
    self, Architecture, Availability, BatchInput, Dropout, DropoutMasks, GradCheckReport, LIFT_IN, ModelParams,
    NnError, POSE_DIM, Tensor2, Variant,
};
use crate::rng::{self, stream};
use crate::synth::{self, NoiseProfile, SynthConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("confidence {0} is outside (0, 1]")]
    Confidence(f64),
    #[error("target has no valid joint")]
    NoValidJoints,
    #[error("empty training set")]
    EmptyDataset,
    #[error("{mode} training needs {field} on every sample; {id} has none")]
    MissingTargets { mode: &'static str, field: &'static str, id: String },
    #[error("no sample has a usable {0} target")]
    NoTargets(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Supervised,
    Weak,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Weak => "weak",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub variant: Variant,
    pub arch: Architecture,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplier, applied in weak mode only.
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    /// Weak mode: joints with confidence below this get no loss.
    pub confidence_threshold: f64,
    pub seed: u64,
    /// Fusion only: chance that one sample loses one branch for a step.
    pub branch_dropout_prob: f64,
}

impl TrainConfig {
    /// 250 epochs supervised, 25 weak, learning rate 5e-4, threshold 0.8,
    /// seed 42, batch 64, decay 0.95 per epoch.
    pub fn defaults(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            variant: Variant::Fusion,
            arch: Architecture::paper(),
            epochs: match mode {
                TrainMode::Supervised => 250,
                TrainMode::Weak => 25,
            },
            learning_rate: 5e-4,
            lr_decay_per_epoch: 0.95,
            batch_size: 64,
            confidence_threshold: 0.8,
            seed: 42,
            branch_dropout_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return bad("confidence threshold must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.branch_dropout_prob) {
            return bad("branch dropout must lie in [0, 1)");
        }
        self.arch.validate()?;
        Ok(())
    }
}

/// `exp(1 - 1/c^2)` for `c` in `(0, 1]`.
///
/// ```
/// # use fusionpose::train::confidence_weight;
/// assert_eq!(confidence_weight(1.0).unwrap(), 1.0);
/// assert!((confidence_weight(0.8).unwrap() - (-0.5625f64).exp()).abs() < 1e-15);
/// ```
pub fn confidence_weight(c: f64) -> Result<f64, TrainError> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(TrainError::Confidence(c));
    }
    Ok((1.0 - 1.0 / (c * c)).exp())
}

pub fn confidence_weights(c: &[f64; NUM_JOINTS]) -> Result<[f64; NUM_JOINTS], TrainError> {
    let mut out = [0.0; NUM_JOINTS];
    for (o, &ci) in out.iter_mut().zip(c) {
        *o = confidence_weight(ci)?;
    }
    Ok(out)
}

/// `(1/|V|) sum_{i in V} beta_i |pred_i - target_i|` over target-valid joints
/// `V`, with its gradient with respect to the 39 predicted coordinates.
/// Joints closer than 1e-12 get zero gradient.
pub fn weighted_mpjpe_loss(
    pred: &Pose3D,
    target: &Pose3D,
    beta: &[f64; NUM_JOINTS],
) -> Result<(f64, [f64; POSE_DIM]), TrainError> {
    let n = target.n_valid();
    if n == 0 {
        return Err(TrainError::NoValidJoints);
    }
    let mut loss = 0.0;
    let mut grad = [0.0; POSE_DIM];
    for j in (0..NUM_JOINTS).filter(|&j| target.valid[j]) {
        let d = pred.joints[j] - target.joints[j];
        let norm = d.norm();
        loss += beta[j] * norm;
        if norm >= 1e-12 {
            let g = d * (beta[j] / (n as f64 * norm));
            grad[3 * j..3 * j + 3].copy_from_slice(g.as_slice());
        }
    }
    Ok((loss / n as f64, grad))
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], s: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != s.m.len() || s.m.len() != s.v.len() {
        return Err(TrainError::Shape(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            s.m.len()
        )));
    }
    s.step += 1;
    let c1 = 1.0 - s.beta1.powi(s.step as i32);
    let c2 = 1.0 - s.beta2.powi(s.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
        let mhat = s.m[i] / c1;
        let vhat = s.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + s.eps);
    }
    Ok(())
}

/// `base * decay^epoch` in weak mode, `base` otherwise.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.mode {
        TrainMode::Weak => cfg.learning_rate * cfg.lr_decay_per_epoch.powi(epoch as i32),
        TrainMode::Supervised => cfg.learning_rate,
    }
}

/// 64-bit digest of a sample id, used to key per-sample random streams.
pub fn id_hash(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Draws exactly `n` points: a uniform subset when the cloud is larger,
/// otherwise every point once plus uniform duplicates. An empty cloud gives
/// `n` origins.
pub fn resample_cloud(points: &[Vector3<f64>], n: usize, rng: &mut rng::Rng) -> Vec<Vector3<f64>> {
    if points.is_empty() {
        return vec![Vector3::zeros(); n];
    }
    if points.len() >= n {
        rand::seq::index::sample(rng, points.len(), n).into_iter().map(|i| points[i]).collect()
    } else {
        let mut out = points.to_vec();
        out.extend((points.len()..n).map(|_| *points.choose(rng).unwrap()));
        out
    }
}

/// Network inputs of one sample: normalized keypoints and the box-frame
/// cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub keypoints: [f64; LIFT_IN],
    pub cloud: Vec<Vector3<f64>>,
    pub key: u64,
}

impl SampleInput {
    /// Keypoints whose tight box is degenerate give an all-zero input.
    pub fn new(s: &Sample) -> Self {
        let keypoints = geometry::normalize_keypoints(&s.keypoints2d)
            .map(|n| n.to_input())
            .unwrap_or([0.0; LIFT_IN]);
        SampleInput {
            keypoints,
            cloud: geometry::cloud_to_box_frame(s),
            key: id_hash(&s.id),
        }
    }
}

/// Assembles a batch; sample `k` resamples its cloud from `rng_for(k)`.
pub fn build_batch(
    inputs: &[&SampleInput],
    n_points: usize,
    avail: Vec<Availability>,
    mut rng_for: impl FnMut(&SampleInput) -> rng::Rng,
) -> BatchInput {
    let b = inputs.len();
    let mut keypoints = Tensor2::zeros(b, LIFT_IN);
    let mut clouds = Tensor2::zeros(b * n_points, 3);
    for (k, inp) in inputs.iter().enumerate() {
        keypoints.row_mut(k).copy_from_slice(&inp.keypoints);
        let pts = resample_cloud(&inp.cloud, n_points, &mut rng_for(inp));
        for (i, p) in pts.iter().enumerate() {
            clouds.row_mut(k * n_points + i).copy_from_slice(p.as_slice());
        }
    }
    BatchInput {
        keypoints,
        clouds,
        n_points,
        avail,
    }
}

/// A trained network with the seed that keys its evaluation resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub variant: Variant,
    pub seed: u64,
}

impl Model {
    pub fn from_checkpoint(c: nn::Checkpoint) -> Self {
        Model {
            params: c.params,
            variant: c.variant,
            seed: c.seed,
        }
    }

    pub fn to_checkpoint(&self) -> nn::Checkpoint {
        nn::Checkpoint {
            seed: self.seed,
            variant: self.variant,
            params: self.params.clone(),
        }
    }

    /// Box-frame poses with dropout off. A sample's cloud is resampled from
    /// a stream keyed by its id, so the result does not depend on which
    /// other samples share its batch.
    pub fn predict_inputs(&self, inputs: &[SampleInput]) -> Result<Vec<Pose3D>, NnError> {
        let n_points = self.params.arch().num_points;
        let chunks: Vec<Vec<Pose3D>> = inputs
            .par_chunks(64)
            .map(|chunk| {
                let refs: Vec<&SampleInput> = chunk.iter().collect();
                let batch = build_batch(&refs, n_points, vec![Availability::BOTH; refs.len()], |inp| {
                    rng::rng_for(self.seed, stream::EVAL_RESAMPLE, inp.key)
                });
                let (y, _) = nn::forward(&self.params, self.variant, &batch, Dropout::Off)?;
                Ok((0..y.rows).map(|r| Pose3D::from_flat(y.row(r))).collect())
            })
            .collect::<Result<_, NnError>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

impl Predictor for Model {
    fn label(&self) -> String {
        self.variant.label().to_string()
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Pose3D>, EvalError> {
        let inputs: Vec<SampleInput> = samples.par_iter().map(SampleInput::new).collect();
        self.predict_inputs(&inputs).map_err(|e| EvalError::Prediction(e.to_string()))
    }
}

/// A training example: inputs, box-frame target, per-joint weights.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: SampleInput,
    pub target: Pose3D,
    pub beta: [f64; NUM_JOINTS],
}

/// Builds examples for the mode. Supervised needs `gt3d` on every sample.
/// Weak needs `pseudo3d` on every sample; joints below the threshold are
/// masked out, and samples left without any joint are skipped.
pub fn prepare_examples(data: &[Sample], cfg: &TrainConfig) -> Result<Vec<Example>, TrainError> {
    let (field, mode) = match cfg.mode {
        TrainMode::Supervised => ("gt3d", "supervised"),
        TrainMode::Weak => ("pseudo3d", "weakly supervised"),
    };
    if let Some(s) = data.iter().find(|s| match cfg.mode {
        TrainMode::Supervised => s.gt3d.is_none(),
        TrainMode::Weak => s.pseudo3d.is_none(),
    }) {
        return Err(TrainError::MissingTargets {
            mode,
            field,
            id: s.id.clone(),
        });
    }
    let examples: Vec<Option<Example>> = data
        .par_iter()
        .map(|s| {
            let (target, beta) = match cfg.mode {
                TrainMode::Supervised => (geometry::pose_to_box_frame(s.gt3d.as_ref().unwrap(), s), [1.0; NUM_JOINTS]),
                TrainMode::Weak => {
                    let mut t = geometry::pose_to_box_frame(s.pseudo3d.as_ref().unwrap(), s);
                    let mut beta = [0.0; NUM_JOINTS];
                    for j in 0..NUM_JOINTS {
                        let c = s.keypoints2d.confidence[j];
                        if t.valid[j] && c > 0.0 && c >= cfg.confidence_threshold {
                            beta[j] = confidence_weight(c.min(1.0)).unwrap();
                        } else {
                            t.valid[j] = false;
                        }
                    }
                    (t, beta)
                }
            };
            (target.n_valid() > 0).then(|| Example {
                input: SampleInput::new(s),
                target,
                beta,
            })
        })
        .collect();
    let examples: Vec<Example> = examples.into_iter().flatten().collect();
    if examples.is_empty() {
        return Err(TrainError::NoTargets(field));
    }
    Ok(examples)
}

/// One row of the epoch log; epoch `e` reports the state after `e + 1`
/// passes over the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mpjpe_cm: Option<f64>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_mpjpe_cm\n");
    for r in log {
        let val = r.val_mpjpe_cm.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(out, "{},{:e},{:.9},{}", r.epoch, r.lr, r.train_loss, val).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Batch mean of the weighted loss on network outputs, with `dL/dy`.
pub fn batch_loss(y: &Tensor2, targets: &[&Pose3D], betas: &[&[f64; NUM_JOINTS]]) -> Result<(f64, Tensor2), TrainError> {
    if y.rows != targets.len() || y.cols != POSE_DIM {
        return Err(TrainError::Shape(format!("{}x{} outputs for {} targets", y.rows, y.cols, targets.len())));
    }
    let b = y.rows as f64;
    let mut dy = Tensor2::zeros(y.rows, POSE_DIM);
    let mut total = 0.0;
    for r in 0..y.rows {
        let (l, g) = weighted_mpjpe_loss(&Pose3D::from_flat(y.row(r)), targets[r], betas[r])?;
        total += l;
        for (d, gi) in dy.row_mut(r).iter_mut().zip(g) {
            *d = gi / b;
        }
    }
    Ok((total / b, dy))
}

/// Trains from scratch. `progress` sees each epoch's log row as it is made.
pub fn train_with(
    data: &[Sample],
    val: Option<&[Sample]>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let examples = prepare_examples(data, cfg)?;
    let val_inputs: Option<(Vec<SampleInput>, &[Sample])> = val
        .filter(|v| !v.is_empty() && v.iter().all(|s| s.gt3d.is_some()))
        .map(|v| (v.par_iter().map(SampleInput::new).collect(), v));

    let mut model = Model {
        params: nn::init_params(&cfg.arch, cfg.seed),
        variant: cfg.variant,
        seed: cfg.seed,
    };
    let mut adam = AdamState::new(model.params.len());
    let n_points = cfg.arch.num_points;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.sort_unstable();
        order.shuffle(&mut rng::rng_for(cfg.seed, stream::SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_ex: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut drop_rng = rng::rng_for(cfg.seed, stream::BRANCH_DROP, step);
            let avail = batch_ex
                .iter()
                .map(|_| {
                    if cfg.variant == Variant::Fusion && drop_rng.random::<f64>() < cfg.branch_dropout_prob {
                        if drop_rng.random::<bool>() {
                            Availability { lifting: false, point: true }
                        } else {
                            Availability { lifting: true, point: false }
                        }
                    } else {
                        Availability::BOTH
                    }
                })
                .collect();
            let inputs: Vec<&SampleInput> = batch_ex.iter().map(|e| &e.input).collect();
            let batch = build_batch(&inputs, n_points, avail, |inp| {
                rng::rng_for(cfg.seed, stream::RESAMPLE, inp.key ^ (epoch as u64).rotate_left(48))
            });
            let mut dropout_rng = rng::rng_for(cfg.seed, stream::DROPOUT, step);
            let (y, trace) = nn::forward(&model.params, cfg.variant, &batch, Dropout::Sample(&mut dropout_rng))?;
            let targets: Vec<&Pose3D> = batch_ex.iter().map(|e| &e.target).collect();
            let betas: Vec<&[f64; NUM_JOINTS]> = batch_ex.iter().map(|e| &e.beta).collect();
            let (loss, dy) = batch_loss(&y, &targets, &betas)?;
            loss_sum += loss * chunk.len() as f64;
            let grad = nn::backward(&model.params, &trace, &dy)?;
            adam_step(model.params.values_mut(), &grad, &mut adam, lr)?;
            step += 1;
        }
        let val_mpjpe_cm = match &val_inputs {
            Some((inputs, samples)) => {
                let preds = model.predict_inputs(inputs)?;
                let errors = samples
                    .iter()
                    .zip(&preds)
                    .map(|(s, p)| {
                        let gt = geometry::pose_to_box_frame(s.gt3d.as_ref().unwrap(), s);
                        let mut errors = [None; NUM_JOINTS];
                        for j in (0..NUM_JOINTS).filter(|&j| gt.valid[j]) {
                            errors[j] = Some((p.joints[j] - gt.joints[j]).norm());
                        }
                        eval::SampleErrors { id: s.id.clone(), errors }
                    })
                    .collect();
                Some(eval::EvalReport::from_errors("val", errors)?.overall_mpjpe_cm)
            }
            None => None,
        };
        let row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / examples.len() as f64,
            val_mpjpe_cm,
        };
        progress(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

pub fn train(data: &[Sample], val: Option<&[Sample]>, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(data, val, cfg, |_| {})
}

/// Settings for a whole-model gradient check on generated data.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub batch: usize,
    pub epsilon: f64,
    pub arch: Architecture,
    pub variant: Variant,
    /// Coordinates to check, drawn uniformly; 0 checks all of them.
    pub coords: usize,
    /// Doubles the largest analytic gradient component before comparing.
    pub inject_fault: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 42,
            batch: 8,
            epsilon: 1e-5,
            arch: Architecture::compact(),
            variant: Variant::Fusion,
            coords: 0,
            inject_fault: false,
        }
    }
}

/// Generates a nominal batch, initializes a model from the seed, freezes
/// one draw of dropout masks, and checks the gradient of the weighted MPJPE
/// loss (weights from the detector confidences) against central differences.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport, TrainError> {
    cfg.arch.validate()?;
    if cfg.batch == 0 {
        return Err(TrainError::Config("batch must be positive".into()));
    }
    let data = synth::generate_dataset(&SynthConfig::profile(NoiseProfile::Nominal, cfg.batch, cfg.seed))?;
    let mut targets = Vec::with_capacity(data.len());
    let mut betas = Vec::with_capacity(data.len());
    for s in &data {
        let mut t = geometry::pose_to_box_frame(s.gt3d.as_ref().unwrap(), s);
        let mut beta = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let c = s.keypoints2d.confidence[j];
            if c > 0.0 {
                beta[j] = confidence_weight(c.min(1.0))?;
            } else {
                t.valid[j] = false;
            }
        }
        targets.push(t);
        betas.push(beta);
    }
    let inputs: Vec<SampleInput> = data.iter().map(SampleInput::new).collect();
    let refs: Vec<&SampleInput> = inputs.iter().collect();
    let batch = build_batch(&refs, cfg.arch.num_points, vec![Availability::BOTH; refs.len()], |inp| {
        rng::rng_for(cfg.seed, stream::GRADCHECK, inp.key)
    });
    let params = nn::init_params(&cfg.arch, cfg.seed);
    let mut mask_rng = rng::rng_for(cfg.seed, stream::GRADCHECK, u64::MAX);
    let (_, trace) = nn::forward(&params, cfg.variant, &batch, Dropout::Sample(&mut mask_rng))?;
    let masks: DropoutMasks = trace.masks();
    let t_refs: Vec<&Pose3D> = targets.iter().collect();
    let b_refs: Vec<&[f64; NUM_JOINTS]> = betas.iter().collect();
    let loss = |y: &Tensor2| batch_loss(y, &t_refs, &b_refs).expect("targets have valid joints");

    let corrupt = if cfg.inject_fault {
        let (y, tr) = nn::forward(&params, cfg.variant, &batch, Dropout::Frozen(&masks))?;
        let g = nn::backward(&params, &tr, &loss(&y).1)?;
        (0..g.len()).max_by(|&i, &j| g[i].abs().total_cmp(&g[j].abs()))
    } else {
        None
    };
    let mut indices = Vec::new();
    if cfg.coords > 0 {
        let (y, tr) = nn::forward(&params, cfg.variant, &batch, Dropout::Frozen(&masks))?;
        let g = nn::backward(&params, &tr, &loss(&y).1)?;
        // Sample among coordinates the variant uses (nonzero gradient or not
        // all-zero layers), always including the corrupted one.
        let used: Vec<usize> = (0..params.len()).filter(|&i| g[i] != 0.0).collect();
        let mut r = rng::rng_for(cfg.seed, stream::GRADCHECK, 1);
        indices = rand::seq::index::sample(&mut r, used.len(), cfg.coords.min(used.len()))
            .into_iter()
            .map(|k| used[k])
            .collect();
        indices.sort_unstable();
        if let Some(c) = corrupt {
            if !indices.contains(&c) {
                indices.push(c);
            }
        }
    }
    Ok(nn::grad_check(&params, cfg.variant, &batch, &masks, &loss, cfg.epsilon, &indices, corrupt)?)
}
