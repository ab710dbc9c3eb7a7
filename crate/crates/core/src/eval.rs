//! Mean per-joint position error and report formatting.
//!
//! All poses are compared in the box-centered camera frame without any
//! alignment. Only joints valid in the ground truth are scored. Sums are
//! taken over sorted values with compensated summation, so a report does not
//! depend on the order of the test set.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry;
use crate::model::{JOINT_NAMES, NUM_JOINTS, Pose3D, Sample};
use crate::pseudolabel::{self, PseudoLabelConfig, Weighting};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth has no valid joint")]
    NoValidJoints,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("sample {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("prediction failed: {0}")]
    Prediction(String),
}

/// Mean distance in meters over joints valid in `gt`.
///
/// ```
/// # use fusionpose::eval::mpjpe;
/// # use fusionpose::model::Pose3D;
/// # use nalgebra::Vector3;
/// let gt = Pose3D::new([Vector3::zeros(); 13]);
/// let pred = gt.map(|j| j + Vector3::new(0.03, 0.0, 0.04));
/// assert!((mpjpe(&pred, &gt).unwrap() - 0.05).abs() < 1e-15);
/// ```
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64, EvalError> {
    let errors: Vec<f64> = (0..NUM_JOINTS)
        .filter(|&j| gt.valid[j])
        .map(|j| (pred.joints[j] - gt.joints[j]).norm())
        .collect();
    if errors.is_empty() {
        return Err(EvalError::NoValidJoints);
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Neumaier summation of the values in ascending order.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Produces box-frame poses for samples.
pub trait Predictor: Sync {
    fn label(&self) -> String;
    fn predict(&self, samples: &[Sample]) -> Result<Vec<Pose3D>, EvalError>;
}

/// Per-joint errors of one sample, in meters; `None` where gt is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleErrors {
    pub id: String,
    pub errors: [Option<f64>; NUM_JOINTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub overall_mpjpe_cm: f64,
    /// Zero for joints never scored; see `per_joint_counts`.
    pub per_joint_mpjpe_cm: [f64; NUM_JOINTS],
    pub per_joint_counts: [usize; NUM_JOINTS],
    pub n_samples: usize,
    pub n_valid_joints: usize,
    #[serde(skip)]
    pub per_sample: Vec<SampleErrors>,
}

impl EvalReport {
    /// Aggregates per-sample errors.
    pub fn from_errors(variant: &str, per_sample: Vec<SampleErrors>) -> Result<Self, EvalError> {
        if per_sample.is_empty() {
            return Err(EvalError::EmptyTestSet);
        }
        let mut per_joint_mpjpe_cm = [0.0; NUM_JOINTS];
        let mut per_joint_counts = [0; NUM_JOINTS];
        let mut all = Vec::new();
        for j in 0..NUM_JOINTS {
            let e: Vec<f64> = per_sample.iter().filter_map(|s| s.errors[j]).collect();
            per_joint_counts[j] = e.len();
            if !e.is_empty() {
                per_joint_mpjpe_cm[j] = stable_sum(&e) / e.len() as f64 * 100.0;
            }
            all.extend(e);
        }
        if all.is_empty() {
            return Err(EvalError::NoValidJoints);
        }
        Ok(EvalReport {
            variant: variant.to_string(),
            overall_mpjpe_cm: stable_sum(&all) / all.len() as f64 * 100.0,
            per_joint_mpjpe_cm,
            per_joint_counts,
            n_samples: per_sample.len(),
            n_valid_joints: all.len(),
            per_sample,
        })
    }

    pub fn csv_header() -> String {
        let mut h = String::from("variant,n_samples,n_valid_joints,overall_mpjpe_cm");
        for n in JOINT_NAMES {
            write!(h, ",{n}_cm").unwrap();
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{:.6}",
            self.variant, self.n_samples, self.n_valid_joints, self.overall_mpjpe_cm
        );
        for v in self.per_joint_mpjpe_cm {
            write!(r, ",{v:.6}").unwrap();
        }
        r
    }

    /// Header plus one row per report.
    pub fn to_csv(reports: &[EvalReport]) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Fixed-width table: one column per report, one row per joint.
    pub fn table(reports: &[EvalReport]) -> String {
        let mut out = format!("{:<16}", "MPJPE [cm]");
        for r in reports {
            write!(out, "{:>14}", r.variant).unwrap();
        }
        out.push('\n');
        for (j, name) in JOINT_NAMES.iter().enumerate() {
            write!(out, "{name:<16}").unwrap();
            for r in reports {
                if r.per_joint_counts[j] == 0 {
                    write!(out, "{:>14}", "-").unwrap();
                } else {
                    write!(out, "{:>14.2}", r.per_joint_mpjpe_cm[j]).unwrap();
                }
            }
            out.push('\n');
        }
        write!(out, "{:<16}", "overall").unwrap();
        for r in reports {
            write!(out, "{:>14.2}", r.overall_mpjpe_cm).unwrap();
        }
        out.push('\n');
        write!(out, "{:<16}", "scored joints").unwrap();
        for r in reports {
            write!(out, "{:>14}", r.n_valid_joints).unwrap();
        }
        out.push('\n');
        out
    }

    /// One JSON object per sample: id and per-joint errors in cm, null where
    /// unscored.
    pub fn per_sample_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.per_sample {
            let errors: Vec<Option<f64>> = s.errors.iter().map(|e| e.map(|m| m * 100.0)).collect();
            let line = serde_json::json!({ "id": s.id, "errors_cm": errors });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

fn gt_box_frame(s: &Sample) -> Result<Pose3D, EvalError> {
    let gt = s.gt3d.as_ref().ok_or_else(|| EvalError::MissingGroundTruth(s.id.clone()))?;
    Ok(geometry::pose_to_box_frame(gt, s))
}

fn sample_errors(id: &str, pred: &Pose3D, gt: &Pose3D, scored: impl Fn(usize) -> bool) -> SampleErrors {
    let mut errors = [None; NUM_JOINTS];
    for (j, e) in errors.iter_mut().enumerate() {
        if gt.valid[j] && scored(j) {
            *e = Some((pred.joints[j] - gt.joints[j]).norm());
        }
    }
    SampleErrors { id: id.to_string(), errors }
}

/// Scores a predictor on every gt-valid joint of the test set.
pub fn evaluate(predictor: &dyn Predictor, test: &[Sample]) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let gts = test.iter().map(gt_box_frame).collect::<Result<Vec<_>, _>>()?;
    let preds = predictor.predict(test)?;
    if preds.len() != test.len() {
        return Err(EvalError::Prediction(format!("{} predictions for {} samples", preds.len(), test.len())));
    }
    let errors = test
        .iter()
        .zip(&preds)
        .zip(&gts)
        .map(|((s, p), g)| sample_errors(&s.id, p, g, |_| true))
        .collect();
    EvalReport::from_errors(&predictor.label(), errors)
}

pub fn weighting_label(w: Weighting) -> &'static str {
    match w {
        Weighting::ThreeD => "pseudo_3d",
        Weighting::TwoDBaseline => "pseudo_2d",
    }
}

/// Scores freshly built pseudo-labels against ground truth, on joints that
/// are valid in both. Samples without any pseudo-labeled joint contribute
/// nothing but still count toward `n_samples`.
pub fn evaluate_pseudo_labels(test: &[Sample], cfg: &PseudoLabelConfig) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let errors = test
        .par_iter()
        .map(|s| {
            let gt = gt_box_frame(s)?;
            let pseudo = pseudolabel::make_pseudo_labels(s, cfg);
            Ok(sample_errors(&s.id, &pseudo, &gt, |j| pseudo.valid[j]))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    EvalReport::from_errors(weighting_label(cfg.weighting), errors)
}

/// Scores the `pseudo3d` poses stored in the samples (vehicle frame).
pub fn evaluate_stored_pseudo_labels(test: &[Sample], label: &str) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let errors = test
        .iter()
        .map(|s| {
            let gt = gt_box_frame(s)?;
            let pseudo = s
                .pseudo3d
                .as_ref()
                .map(|p| geometry::pose_to_box_frame(p, s))
                .unwrap_or_else(Pose3D::invalid);
            Ok(sample_errors(&s.id, &pseudo, &gt, |j| pseudo.valid[j]))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    EvalReport::from_errors(label, errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{NoiseProfile, SynthConfig, generate_dataset};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Oracle;
    impl Predictor for Oracle {
        fn label(&self) -> String {
            "oracle".into()
        }
        fn predict(&self, samples: &[Sample]) -> Result<Vec<Pose3D>, EvalError> {
            samples.iter().map(gt_box_frame).collect()
        }
    }

    struct Zero;
    impl Predictor for Zero {
        fn label(&self) -> String {
            "zero".into()
        }
        fn predict(&self, samples: &[Sample]) -> Result<Vec<Pose3D>, EvalError> {
            Ok(vec![Pose3D::new([Vector3::zeros(); NUM_JOINTS]); samples.len()])
        }
    }

    fn random_pose(r: &mut ChaCha8Rng) -> Pose3D {
        let mut p = Pose3D::new(std::array::from_fn(|_| Vector3::new(r.random(), r.random(), r.random())));
        for v in &mut p.valid {
            *v = r.random_bool(0.8);
        }
        p.valid[0] = true;
        p
    }

    #[test]
    fn mpjpe_examples() {
        let gt = Pose3D::new([Vector3::new(1.0, 2.0, 3.0); NUM_JOINTS]);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let off = gt.map(|j| j + Vector3::new(0.03, 0.0, 0.04));
        assert!((mpjpe(&off, &gt).unwrap() - 0.05).abs() < 1e-12);
        assert!(matches!(mpjpe(&gt, &Pose3D::invalid()), Err(EvalError::NoValidJoints)));
    }

    #[test]
    fn mpjpe_matches_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, b) = (random_pose(&mut r), random_pose(&mut r));
            let (mut sum, mut n) = (0.0, 0);
            for j in 0..NUM_JOINTS {
                if b.valid[j] {
                    let d = a.joints[j] - b.joints[j];
                    sum += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
                    n += 1;
                }
            }
            assert!((mpjpe(&a, &b).unwrap() - sum / n as f64).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mpjpe_is_symmetric_and_nonnegative(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut a = random_pose(&mut r);
            let mut b = random_pose(&mut r);
            a.valid = [true; NUM_JOINTS];
            b.valid = [true; NUM_JOINTS];
            let ab = mpjpe(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - mpjpe(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        }
    }

    fn data() -> Vec<Sample> {
        generate_dataset(&SynthConfig::profile(NoiseProfile::Nominal, 40, 11)).unwrap()
    }

    #[test]
    fn oracle_scores_zero_and_zero_predictor_scores_mean_norm() {
        let test = data();
        let r = evaluate(&Oracle, &test).unwrap();
        assert_eq!(r.overall_mpjpe_cm, 0.0);
        assert_eq!(r.n_samples, 40);

        let r = evaluate(&Zero, &test).unwrap();
        let (mut sum, mut n) = (0.0, 0);
        for s in &test {
            let g = gt_box_frame(s).unwrap();
            for j in 0..NUM_JOINTS {
                if g.valid[j] {
                    sum += g.joints[j].norm();
                    n += 1;
                }
            }
        }
        assert!((r.overall_mpjpe_cm - 100.0 * sum / n as f64).abs() < 1e-9);
        assert_eq!(r.n_valid_joints, n);

        // Overall is the count-weighted mean of the per-joint values.
        let weighted: f64 = (0..NUM_JOINTS)
            .map(|j| r.per_joint_mpjpe_cm[j] * r.per_joint_counts[j] as f64)
            .sum::<f64>()
            / n as f64;
        assert!((weighted - r.overall_mpjpe_cm).abs() < 1e-9);
    }

    #[test]
    fn report_is_order_invariant() {
        let test = data();
        let mut rev = test.clone();
        rev.reverse();
        let a = evaluate(&Zero, &test).unwrap();
        let b = evaluate(&Zero, &rev).unwrap();
        assert_eq!(a.overall_mpjpe_cm, b.overall_mpjpe_cm);
        assert_eq!(a.per_joint_mpjpe_cm, b.per_joint_mpjpe_cm);
        let p = PseudoLabelConfig::default();
        assert_eq!(
            evaluate_pseudo_labels(&test, &p).unwrap().overall_mpjpe_cm,
            evaluate_pseudo_labels(&rev, &p).unwrap().overall_mpjpe_cm
        );
    }

    #[test]
    fn empty_and_missing_inputs_are_errors() {
        assert!(matches!(evaluate(&Zero, &[]), Err(EvalError::EmptyTestSet)));
        let mut test = data();
        test[3].gt3d = None;
        assert!(matches!(evaluate(&Zero, &test), Err(EvalError::MissingGroundTruth(_))));
    }

    #[test]
    fn noiseless_pseudo_labels_stay_within_the_limb_bound() {
        // Hip and shoulder joints sit inside the torso capsule, so the bound
        // uses the thickest limb.
        let data = generate_dataset(&SynthConfig::profile(NoiseProfile::Clean, 200, 11)).unwrap();
        let cfg = PseudoLabelConfig {
            radius_px: 3.0,
            ..Default::default()
        };
        let report = evaluate_pseudo_labels(&data, &cfg).unwrap();
        let bound_cm = 1.5 * crate::synth::LimbRadii::default().max_limb() * 100.0;
        assert!(report.overall_mpjpe_cm < bound_cm, "{} vs {bound_cm}", report.overall_mpjpe_cm);
    }

    #[test]
    fn single_neighbor_weighting_is_irrelevant() {
        let test = data();
        let one = |weighting| PseudoLabelConfig {
            max_neighbors: 1,
            weighting,
            ..Default::default()
        };
        let a = evaluate_pseudo_labels(&test, &one(Weighting::ThreeD)).unwrap();
        let b = evaluate_pseudo_labels(&test, &one(Weighting::TwoDBaseline)).unwrap();
        assert_eq!(a.overall_mpjpe_cm, b.overall_mpjpe_cm);
        assert_eq!(a.per_joint_mpjpe_cm, b.per_joint_mpjpe_cm);
    }

    #[test]
    fn formats() {
        let r = evaluate(&Zero, &data()).unwrap();
        let csv = EvalReport::to_csv(std::slice::from_ref(&r));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 4 + NUM_JOINTS);
        assert_eq!(lines[1].split(',').count(), 4 + NUM_JOINTS);
        assert!(EvalReport::table(&[r.clone()]).contains("overall"));
        let dump = r.per_sample_jsonl();
        assert_eq!(dump.lines().count(), 40);
        let first: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
        assert_eq!(first["errors_cm"].as_array().unwrap().len(), NUM_JOINTS);
    }

    #[test]
    fn stable_sum_ignores_order() {
        let v = [1e16, 1.0, -1e16, 3.0, 0.1, 0.2];
        let mut w = v;
        w.reverse();
        assert_eq!(stable_sum(&v), stable_sum(&w));
        assert!((stable_sum(&v) - 4.3).abs() < 1e-12);
    }
}
