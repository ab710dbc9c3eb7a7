//! Synthetic pedestrian scenes.
//!
//! A body is a set of capsules hung on a 13-joint skeleton. Poses come from
//! forward kinematics over uniformly drawn joint angles. LiDAR returns are
//! sampled on the capsule surfaces that face the sensor and are not hidden by
//! another capsule; 2D keypoints are exact projections plus pixel noise, with
//! a confidence that falls as the injected error grows.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Rotation3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio;
use crate::geometry::{self, Projection};
use crate::model::{Camera, FilterThresholds, Joint, Keypoints2D, NUM_JOINTS, PointCloud, Pose3D, Sample, validate_sample};
use crate::rng::{self, stream};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("every LiDAR return was removed")]
    EmptyCloud,
    #[error("sample {index}: no usable cloud after {attempts} attempts")]
    RetryBudgetExhausted { index: usize, attempts: usize },
    #[error("invalid synth configuration: {0}")]
    InvalidConfig(String),
}

/// Inclusive interval of joint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub lo: f64,
    pub hi: f64,
}

impl AngleRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        AngleRange { lo, hi }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleLimits {
    pub torso_lean: AngleRange,
    pub torso_roll: AngleRange,
    pub torso_twist: AngleRange,
    pub head_pitch: AngleRange,
    pub shoulder_flex: AngleRange,
    pub shoulder_abduction: AngleRange,
    pub elbow_flex: AngleRange,
    pub hip_flex: AngleRange,
    pub hip_abduction: AngleRange,
    pub knee_flex: AngleRange,
}

impl AngleLimits {
    fn all(&self) -> [AngleRange; 10] {
        [
            self.torso_lean,
            self.torso_roll,
            self.torso_twist,
            self.head_pitch,
            self.shoulder_flex,
            self.shoulder_abduction,
            self.elbow_flex,
            self.hip_flex,
            self.hip_abduction,
            self.knee_flex,
        ]
    }
}

impl Default for AngleLimits {
    fn default() -> Self {
        AngleLimits {
            torso_lean: AngleRange::new(-0.1, 0.3),
            torso_roll: AngleRange::new(-0.08, 0.08),
            torso_twist: AngleRange::new(-0.3, 0.3),
            head_pitch: AngleRange::new(-0.3, 0.3),
            shoulder_flex: AngleRange::new(-0.6, 1.5),
            shoulder_abduction: AngleRange::new(0.0, 1.2),
            elbow_flex: AngleRange::new(0.0, 2.2),
            hip_flex: AngleRange::new(-0.4, 1.0),
            hip_abduction: AngleRange::new(-0.05, 0.35),
            knee_flex: AngleRange::new(0.0, 1.4),
        }
    }
}

/// Capsule radii in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbRadii {
    pub torso: f64,
    pub head: f64,
    pub shoulder_girdle: f64,
    pub hip_girdle: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
}

impl Default for LimbRadii {
    fn default() -> Self {
        LimbRadii {
            torso: 0.13,
            head: 0.09,
            shoulder_girdle: 0.05,
            hip_girdle: 0.08,
            upper_arm: 0.045,
            forearm: 0.038,
            thigh: 0.07,
            shin: 0.05,
        }
    }
}

impl LimbRadii {
    /// Largest radius among the arm and leg capsules.
    pub fn max_limb(&self) -> f64 {
        self.upper_arm.max(self.forearm).max(self.thigh).max(self.shin)
    }
}

/// Skeleton proportions, joint limits and capsule radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    /// Mid-hip to mid-shoulder.
    pub torso: f64,
    /// Mid-shoulder to nose.
    pub head: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
    /// Forward tilt of the neck-to-nose bone at rest.
    pub head_rest_tilt: f64,
    pub limits: AngleLimits,
    pub radii: LimbRadii,
}

impl Default for BodyModel {
    fn default() -> Self {
        BodyModel {
            torso: 0.52,
            head: 0.24,
            shoulder_width: 0.38,
            hip_width: 0.22,
            upper_arm: 0.29,
            forearm: 0.26,
            thigh: 0.43,
            shin: 0.42,
            head_rest_tilt: 0.35,
            limits: AngleLimits::default(),
            radii: LimbRadii::default(),
        }
    }
}

/// A skeleton edge between two joints whose length is fixed by the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bone {
    pub a: Joint,
    pub b: Joint,
    pub length: f64,
}

impl BodyModel {
    /// Uniformly scaled copy (bone lengths and radii).
    pub fn scaled(&self, s: f64) -> BodyModel {
        let r = &self.radii;
        BodyModel {
            torso: self.torso * s,
            head: self.head * s,
            shoulder_width: self.shoulder_width * s,
            hip_width: self.hip_width * s,
            upper_arm: self.upper_arm * s,
            forearm: self.forearm * s,
            thigh: self.thigh * s,
            shin: self.shin * s,
            head_rest_tilt: self.head_rest_tilt,
            limits: self.limits.clone(),
            radii: LimbRadii {
                torso: r.torso * s,
                head: r.head * s,
                shoulder_girdle: r.shoulder_girdle * s,
                hip_girdle: r.hip_girdle * s,
                upper_arm: r.upper_arm * s,
                forearm: r.forearm * s,
                thigh: r.thigh * s,
                shin: r.shin * s,
            },
        }
    }

    pub fn is_valid(&self) -> bool {
        let lengths = [
            self.torso,
            self.head,
            self.shoulder_width,
            self.hip_width,
            self.upper_arm,
            self.forearm,
            self.thigh,
            self.shin,
        ];
        let r = &self.radii;
        let radii = [
            r.torso,
            r.head,
            r.shoulder_girdle,
            r.hip_girdle,
            r.upper_arm,
            r.forearm,
            r.thigh,
            r.shin,
        ];
        lengths.iter().chain(&radii).all(|&v| v.is_finite() && v > 0.0)
            && self.limits.all().iter().all(AngleRange::is_valid)
    }

    /// Joint-to-joint edges with configured lengths.
    pub fn bones(&self) -> Vec<Bone> {
        use Joint::*;
        let b = |a, b, length| Bone { a, b, length };
        vec![
            b(LeftShoulder, RightShoulder, self.shoulder_width),
            b(LeftHip, RightHip, self.hip_width),
            b(LeftShoulder, LeftElbow, self.upper_arm),
            b(RightShoulder, RightElbow, self.upper_arm),
            b(LeftElbow, LeftWrist, self.forearm),
            b(RightElbow, RightWrist, self.forearm),
            b(LeftHip, LeftKnee, self.thigh),
            b(RightHip, RightKnee, self.thigh),
            b(LeftKnee, LeftAnkle, self.shin),
            b(RightKnee, RightAnkle, self.shin),
        ]
    }
}

/// Joint angles in radians. Index 0 is the left side, 1 the right side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseAngles {
    pub torso_lean: f64,
    pub torso_roll: f64,
    pub torso_twist: f64,
    pub head_pitch: f64,
    pub shoulder_flex: [f64; 2],
    pub shoulder_abduction: [f64; 2],
    pub elbow_flex: [f64; 2],
    pub hip_flex: [f64; 2],
    pub hip_abduction: [f64; 2],
    pub knee_flex: [f64; 2],
}

impl PoseAngles {
    /// Neutral standing pose, arms hanging.
    pub fn rest() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(limits: &AngleLimits, rng: &mut R) -> Self {
        let mut pair = |r: &AngleRange| [r.sample(rng), r.sample(rng)];
        let shoulder_flex = pair(&limits.shoulder_flex);
        let shoulder_abduction = pair(&limits.shoulder_abduction);
        let elbow_flex = pair(&limits.elbow_flex);
        let hip_flex = pair(&limits.hip_flex);
        let hip_abduction = pair(&limits.hip_abduction);
        let knee_flex = pair(&limits.knee_flex);
        PoseAngles {
            torso_lean: limits.torso_lean.sample(rng),
            torso_roll: limits.torso_roll.sample(rng),
            torso_twist: limits.torso_twist.sample(rng),
            head_pitch: limits.head_pitch.sample(rng),
            shoulder_flex,
            shoulder_abduction,
            elbow_flex,
            hip_flex,
            hip_abduction,
            knee_flex,
        }
    }
}

fn rx(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}
fn ry(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}
fn rz(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

/// Joint positions in the body frame: pelvis at the origin, `x` forward,
/// `y` left, `z` up.
pub fn forward_kinematics(model: &BodyModel, angles: &PoseAngles) -> [Vector3<f64>; NUM_JOINTS] {
    let down = -Vector3::z();
    let torso_rot = rz(angles.torso_twist) * ry(angles.torso_lean) * rx(angles.torso_roll);
    let neck = torso_rot * Vector3::new(0.0, 0.0, model.torso);
    let nose = neck + torso_rot * ry(model.head_rest_tilt + angles.head_pitch) * Vector3::z() * model.head;

    let mut j = [Vector3::zeros(); NUM_JOINTS];
    j[Joint::Nose.index()] = nose;
    for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        let (sh, el, wr, hip, kn, an) = if side == 0 {
            use Joint::*;
            (LeftShoulder, LeftElbow, LeftWrist, LeftHip, LeftKnee, LeftAnkle)
        } else {
            use Joint::*;
            (RightShoulder, RightElbow, RightWrist, RightHip, RightKnee, RightAnkle)
        };
        let shoulder = neck + torso_rot * Vector3::new(0.0, sign * model.shoulder_width / 2.0, 0.0);
        let upper = torso_rot
            * ry(-angles.shoulder_flex[side])
            * rx(sign * angles.shoulder_abduction[side]);
        let elbow = shoulder + upper * down * model.upper_arm;
        let lower = upper * ry(-angles.elbow_flex[side]);
        let wrist = elbow + lower * down * model.forearm;

        let hip_pt = Vector3::new(0.0, sign * model.hip_width / 2.0, 0.0);
        let thigh = ry(-angles.hip_flex[side]) * rx(sign * angles.hip_abduction[side]);
        let knee = hip_pt + thigh * down * model.thigh;
        let shin = thigh * ry(angles.knee_flex[side]);
        let ankle = knee + shin * down * model.shin;

        j[sh.index()] = shoulder;
        j[el.index()] = elbow;
        j[wr.index()] = wrist;
        j[hip.index()] = hip_pt;
        j[kn.index()] = knee;
        j[an.index()] = ankle;
    }
    j
}

/// A line segment swept by a sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn area(&self) -> f64 {
        2.0 * PI * self.radius * (self.b - self.a).norm() + 4.0 * PI * self.radius * self.radius
    }

    /// Distance from `p` to the capsule axis.
    pub fn axis_distance(&self, p: &Vector3<f64>) -> f64 {
        point_segment_distance(p, &self.a, &self.b)
    }

    /// Uniform point on the surface and its outward normal.
    fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vector3<f64>, Vector3<f64>) {
        let axis = self.b - self.a;
        let len = axis.norm();
        let side_area = 2.0 * PI * self.radius * len;
        let total = side_area + 4.0 * PI * self.radius * self.radius;
        if rng.random::<f64>() * total < side_area {
            let dir = axis / len;
            let (u, v) = orthonormal_pair(&dir);
            let theta = 2.0 * PI * rng.random::<f64>();
            let n = u * theta.cos() + v * theta.sin();
            let t: f64 = rng.random();
            (self.a + axis * t + n * self.radius, n)
        } else {
            let n = random_unit(rng);
            let center = if n.dot(&axis) > 0.0 { self.b } else { self.a };
            (center + n * self.radius, n)
        }
    }
}

fn orthonormal_pair(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = d.cross(&helper).normalize();
    let v = d.cross(&u);
    (u, v)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

pub fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let denom = ab.norm_squared();
    let t = if denom > 0.0 {
        ((p - a).dot(&ab) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Minimum distance between segments `p1 q1` and `p2 q2`.
pub fn segment_segment_distance(
    p1: &Vector3<f64>,
    q1: &Vector3<f64>,
    p2: &Vector3<f64>,
    q2: &Vector3<f64>,
) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-15;
    let (s, t);
    if a <= eps && e <= eps {
        return r.norm();
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

/// Capsules of a posed body. The first eight are the limbs.
pub fn body_capsules(pose: &Pose3D, model: &BodyModel) -> Vec<Capsule> {
    use Joint::*;
    let j = |x: Joint| pose.joint(x);
    let r = &model.radii;
    let mid_shoulder = (j(LeftShoulder) + j(RightShoulder)) / 2.0;
    let mid_hip = (j(LeftHip) + j(RightHip)) / 2.0;
    let head_base = mid_shoulder + (j(Nose) - mid_shoulder) * 0.4;
    let cap = |a, b, radius| Capsule { a, b, radius };
    vec![
        cap(j(LeftShoulder), j(LeftElbow), r.upper_arm),
        cap(j(RightShoulder), j(RightElbow), r.upper_arm),
        cap(j(LeftElbow), j(LeftWrist), r.forearm),
        cap(j(RightElbow), j(RightWrist), r.forearm),
        cap(j(LeftHip), j(LeftKnee), r.thigh),
        cap(j(RightHip), j(RightKnee), r.thigh),
        cap(j(LeftKnee), j(LeftAnkle), r.shin),
        cap(j(RightKnee), j(RightAnkle), r.shin),
        cap(mid_hip, mid_shoulder, r.torso),
        cap(head_base, j(Nose), r.head),
        cap(j(LeftShoulder), j(RightShoulder), r.shoulder_girdle),
        cap(j(LeftHip), j(RightHip), r.hip_girdle),
    ]
}

/// True if the open segment from `from` to `to` passes through any capsule
/// other than those listed in `skip`.
fn segment_blocked(from: &Vector3<f64>, to: &Vector3<f64>, capsules: &[Capsule], skip: &[usize]) -> bool {
    capsules.iter().enumerate().any(|(k, c)| {
        !skip.contains(&k) && segment_segment_distance(from, to, &c.a, &c.b) < c.radius
    })
}

/// Sensor rig and placement range shared by every generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    /// Camera center in the vehicle frame.
    pub camera_origin: Vector3<f64>,
    pub lidar_origin: Vector3<f64>,
    /// Bearing of the body root relative to the optical axis.
    pub max_bearing: f64,
}

impl Default for Scene {
    fn default() -> Self {
        let camera_origin = Vector3::new(1.5, 0.0, 1.6);
        // Vehicle x forward, y left, z up -> camera x right, y down, z forward.
        #[rustfmt::skip]
        let rot = nalgebra::Matrix3::new(
            0.0, -1.0, 0.0,
            0.0, 0.0, -1.0,
            1.0, 0.0, 0.0,
        );
        let t = -(rot * camera_origin);
        let mut extrinsics = Matrix4::identity();
        extrinsics.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        extrinsics.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Scene {
            camera: Camera {
                fx: 1400.0,
                fy: 1400.0,
                cx: 960.0,
                cy: 640.0,
                width: 1920.0,
                height: 1280.0,
                extrinsics,
            },
            camera_origin,
            lidar_origin: Vector3::new(1.2, 0.0, 1.9),
            max_bearing: 0.4,
        }
    }
}

/// Generation parameters. `dropout_prob`, `outlier_prob` and
/// `lidar_outlier_prob` are probabilities in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Clamp on the number of visible surface returns before dropout.
    pub points_per_body: (usize, usize),
    /// Visible returns at distance `d` are `point_density / d^2` before
    /// clamping.
    pub point_density: f64,
    pub lidar_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Probability that a return's range is corrupted along its beam.
    pub lidar_outlier_prob: f64,
    /// Magnitude range (meters) of a range corruption; the sign is random.
    pub lidar_outlier_range: (f64, f64),
    pub keypoint_noise_sigma: f64,
    pub outlier_prob: f64,
    pub outlier_shift: f64,
    /// Confidence is `exp(-(e / scale)^2)` for a pixel error `e`.
    pub confidence_scale_px: f64,
    /// Standard deviation of additive confidence noise.
    pub confidence_jitter: f64,
    /// Horizontal camera-to-root distance range in meters.
    pub distance_range: (f64, f64),
    pub body_scale_range: (f64, f64),
    pub rng_seed: u64,
    /// Fresh poses tried per sample when a cloud comes out empty or the
    /// sample fails the default filter.
    pub retry_budget: usize,
}

/// Named noise settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseProfile {
    Clean,
    Nominal,
    OutlierHeavy,
}

impl SynthConfig {
    pub fn profile(profile: NoiseProfile, n_samples: usize, rng_seed: u64) -> Self {
        let base = SynthConfig {
            n_samples,
            points_per_body: (100, 3000),
            point_density: 120_000.0,
            lidar_noise_sigma: 0.015,
            dropout_prob: 0.1,
            lidar_outlier_prob: 0.02,
            lidar_outlier_range: (0.3, 1.5),
            keypoint_noise_sigma: 2.0,
            outlier_prob: 0.03,
            outlier_shift: 40.0,
            confidence_scale_px: 8.0,
            confidence_jitter: 0.03,
            distance_range: (5.0, 30.0),
            body_scale_range: (0.88, 1.12),
            rng_seed,
            retry_budget: 16,
        };
        match profile {
            NoiseProfile::Nominal => base,
            NoiseProfile::Clean => SynthConfig {
                lidar_noise_sigma: 0.0,
                dropout_prob: 0.0,
                lidar_outlier_prob: 0.0,
                keypoint_noise_sigma: 0.0,
                outlier_prob: 0.0,
                confidence_jitter: 0.0,
                ..base
            },
            NoiseProfile::OutlierHeavy => SynthConfig {
                lidar_outlier_prob: 0.2,
                outlier_prob: 0.15,
                outlier_shift: 50.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let prob = |p: f64| (0.0..1.0).contains(&p);
        let bad = |msg: &str| Err(SynthError::InvalidConfig(msg.to_string()));
        if !prob(self.dropout_prob) || !prob(self.outlier_prob) || !prob(self.lidar_outlier_prob) {
            return bad("probabilities must lie in [0, 1)");
        }
        if !(self.lidar_noise_sigma >= 0.0) || !(self.keypoint_noise_sigma >= 0.0) || !(self.confidence_jitter >= 0.0) {
            return bad("noise sigmas must be non-negative");
        }
        if self.points_per_body.0 == 0 || self.points_per_body.0 > self.points_per_body.1 {
            return bad("points_per_body must be a non-empty positive range");
        }
        let (d0, d1) = self.distance_range;
        if !(d0 > 0.0 && d0 <= d1) {
            return bad("distance_range must be positive and ordered");
        }
        let (s0, s1) = self.body_scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad("body_scale_range must be positive and ordered");
        }
        if !(self.confidence_scale_px > 0.0) || !(self.point_density > 0.0) || !(self.outlier_shift >= 0.0) {
            return bad("confidence scale and point density must be positive");
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

/// Body-frame joints rotated by `yaw` about the vertical and moved so the
/// pelvis sits at `root` (height adjusted so the lowest ankle touches the
/// ground plane).
pub fn place_pose(
    body: &[Vector3<f64>; NUM_JOINTS],
    model: &BodyModel,
    yaw: f64,
    root: Vector2<f64>,
) -> Pose3D {
    let rot = rz(yaw);
    let rotated: [Vector3<f64>; NUM_JOINTS] = std::array::from_fn(|i| rot * body[i]);
    let lowest = [Joint::LeftAnkle, Joint::RightAnkle]
        .iter()
        .map(|a| rotated[a.index()].z)
        .fold(f64::INFINITY, f64::min);
    let lift = model.radii.shin - lowest;
    Pose3D::new(std::array::from_fn(|i| {
        rotated[i] + Vector3::new(root.x, root.y, lift)
    }))
}

/// Draws joint angles within limits, a random yaw, and a root position
/// `distance_range` meters from the camera within the scene's bearing range.
pub fn sample_pose<R: Rng + ?Sized>(
    model: &BodyModel,
    scene: &Scene,
    distance_range: (f64, f64),
    rng: &mut R,
) -> Pose3D {
    let angles = PoseAngles::sample(&model.limits, rng);
    let body = forward_kinematics(model, &angles);
    let yaw = uniform(rng, (-PI, PI));
    let dist = uniform(rng, distance_range);
    let bearing = uniform(rng, (-scene.max_bearing, scene.max_bearing));
    let root = Vector2::new(
        scene.camera_origin.x + dist * bearing.cos(),
        scene.camera_origin.y + dist * bearing.sin(),
    );
    place_pose(&body, model, yaw, root)
}

/// Heading of a placed pose, recovered from its hip axis.
pub fn pose_yaw(pose: &Pose3D) -> f64 {
    let d = pose.joint(Joint::LeftHip) - pose.joint(Joint::RightHip);
    d.y.atan2(d.x) - PI / 2.0
}

/// Center of the heading-aligned box enclosing every capsule.
pub fn bbox_center(pose: &Pose3D, model: &BodyModel) -> Vector3<f64> {
    let yaw = pose_yaw(pose);
    let to_body = rz(-yaw);
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for c in body_capsules(pose, model) {
        for end in [c.a, c.b] {
            let q = to_body * end;
            lo = lo.inf(&(q - Vector3::repeat(c.radius)));
            hi = hi.sup(&(q + Vector3::repeat(c.radius)));
        }
    }
    rz(yaw) * ((lo + hi) / 2.0)
}

/// A LiDAR return together with the capsule it was sampled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub point: Vector3<f64>,
    pub capsule: usize,
    /// True when the range was corrupted along the beam.
    pub outlier: bool,
}

/// Samples LiDAR returns on the visible body surface.
///
/// The number of visible returns is `point_density / d^2`, clamped to
/// `points_per_body`, where `d` is the sensor-to-box distance. Each return is
/// then dropped with `dropout_prob`, jittered by isotropic Gaussian noise and,
/// with `lidar_outlier_prob`, moved along its beam.
pub fn render_lidar_labeled<R: Rng + ?Sized>(
    pose: &Pose3D,
    model: &BodyModel,
    cfg: &SynthConfig,
    lidar_origin: &Vector3<f64>,
    rng: &mut R,
) -> Result<Vec<LabeledPoint>, SynthError> {
    let capsules = body_capsules(pose, model);
    let areas: Vec<f64> = capsules.iter().map(Capsule::area).collect();
    let total_area: f64 = areas.iter().sum();

    let d = (bbox_center(pose, model) - lidar_origin).norm();
    let n_visible = ((cfg.point_density / (d * d)).round() as usize)
        .clamp(cfg.points_per_body.0, cfg.points_per_body.1);
    let max_attempts = 50 * n_visible;

    let mut out = Vec::with_capacity(n_visible);
    let mut visible = 0;
    let mut attempts = 0;
    while visible < n_visible && attempts < max_attempts {
        attempts += 1;
        let mut pick = rng.random::<f64>() * total_area;
        let k = areas
            .iter()
            .position(|&a| {
                pick -= a;
                pick < 0.0
            })
            .unwrap_or(capsules.len() - 1);
        let (p, n) = capsules[k].sample_surface(rng);
        let to_sensor = lidar_origin - p;
        if n.dot(&to_sensor) <= 0.0 {
            continue;
        }
        let start = p + to_sensor.normalize() * 1e-9;
        if segment_blocked(&start, lidar_origin, &capsules, &[k]) {
            continue;
        }
        visible += 1;
        if rng.random::<f64>() < cfg.dropout_prob {
            continue;
        }
        let mut q = p;
        if cfg.lidar_noise_sigma > 0.0 {
            q += Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * cfg.lidar_noise_sigma;
        }
        let mut outlier = false;
        if cfg.lidar_outlier_prob > 0.0 && rng.random::<f64>() < cfg.lidar_outlier_prob {
            let beam = q - lidar_origin;
            let range = beam.norm();
            let mag = uniform(rng, cfg.lidar_outlier_range);
            let delta = if rng.random::<bool>() { mag } else { -mag };
            q = lidar_origin + beam * ((range + delta).max(0.1) / range);
            outlier = true;
        }
        out.push(LabeledPoint {
            point: q,
            capsule: k,
            outlier,
        });
    }
    if out.is_empty() {
        return Err(SynthError::EmptyCloud);
    }
    Ok(out)
}

pub fn render_lidar<R: Rng + ?Sized>(
    pose: &Pose3D,
    model: &BodyModel,
    cfg: &SynthConfig,
    lidar_origin: &Vector3<f64>,
    rng: &mut R,
) -> Result<PointCloud, SynthError> {
    let pts = render_lidar_labeled(pose, model, cfg, lidar_origin, rng)?;
    Ok(PointCloud::new(pts.into_iter().map(|p| p.point).collect()))
}

/// True if the joint is hidden from `eye` by a capsule that does not contain
/// the joint.
pub fn joint_occluded(pose: &Pose3D, model: &BodyModel, joint: Joint, eye: &Vector3<f64>) -> bool {
    let capsules = body_capsules(pose, model);
    let p = pose.joint(joint);
    let own: Vec<usize> = capsules
        .iter()
        .enumerate()
        .filter(|(_, c)| c.axis_distance(&p) <= c.radius)
        .map(|(k, _)| k)
        .collect();
    segment_blocked(&p, eye, &capsules, &own)
}

/// Confidence assigned to a detection with pixel error `err`.
pub fn confidence_for_error(err: f64, scale_px: f64) -> f64 {
    (-(err / scale_px).powi(2)).exp()
}

/// Emulated 2D detector output for a posed body.
///
/// Joints that are behind the camera, outside the image or occluded get
/// confidence 0 and zero coordinates.
pub fn render_keypoints<R: Rng + ?Sized>(
    pose: &Pose3D,
    model: &BodyModel,
    scene: &Scene,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Keypoints2D {
    let cam = &scene.camera;
    let mut joints = [Vector2::zeros(); NUM_JOINTS];
    let mut confidence = [0.0; NUM_JOINTS];
    for joint in Joint::ALL {
        let i = joint.index();
        let uv = match geometry::project_vehicle_point(&pose.joints[i], cam) {
            Projection::Pixel(uv) if geometry::in_image(&uv, cam) => uv,
            _ => continue,
        };
        if joint_occluded(pose, model, joint, &scene.camera_origin) {
            continue;
        }
        let mut offset = Vector2::zeros();
        if cfg.keypoint_noise_sigma > 0.0 {
            offset += Vector2::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * cfg.keypoint_noise_sigma;
        }
        if cfg.outlier_prob > 0.0 && rng.random::<f64>() < cfg.outlier_prob {
            let phi = 2.0 * PI * rng.random::<f64>();
            offset += Vector2::new(phi.cos(), phi.sin()) * cfg.outlier_shift;
        }
        let mut c = confidence_for_error(offset.norm(), cfg.confidence_scale_px);
        if cfg.confidence_jitter > 0.0 {
            c += cfg.confidence_jitter * rng.sample::<f64, _>(StandardNormal);
        }
        joints[i] = uv + offset;
        confidence[i] = c.clamp(0.01, 1.0);
    }
    Keypoints2D { joints, confidence }
}

/// Body scale range is sampled per person.
fn generate_one(cfg: &SynthConfig, model: &BodyModel, scene: &Scene, index: usize) -> Result<Sample, SynthError> {
    let mut rng = rng::rng_for(cfg.rng_seed, stream::SYNTH_SAMPLE, index as u64);
    for _ in 0..=cfg.retry_budget {
        let body = model.scaled(uniform(&mut rng, cfg.body_scale_range));
        let pose = sample_pose(&body, scene, cfg.distance_range, &mut rng);
        let cloud = match render_lidar(&pose, &body, cfg, &scene.lidar_origin, &mut rng) {
            Ok(c) => c,
            Err(SynthError::EmptyCloud) => continue,
            Err(e) => return Err(e),
        };
        let keypoints2d = render_keypoints(&pose, &body, scene, cfg, &mut rng);
        let sample = Sample {
            id: format!("synth-{}-{:06}", cfg.rng_seed, index),
            camera: scene.camera.clone(),
            bbox3d_center: bbox_center(&pose, &body),
            cloud,
            keypoints2d,
            gt3d: Some(pose),
            pseudo3d: None,
        };
        let sample = dataio::canonicalize(&sample);
        if validate_sample(&sample, &FilterThresholds::default()).accepted() {
            return Ok(sample);
        }
    }
    Err(SynthError::RetryBudgetExhausted {
        index,
        attempts: cfg.retry_budget + 1,
    })
}

/// Generates `cfg.n_samples` samples with ground truth.
///
/// Each sample draws from its own seeded stream, so the result is identical
/// for any thread count. Values are rounded to the interchange precision, so
/// a write/read cycle reproduces them exactly.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>, SynthError> {
    generate_dataset_with(cfg, &BodyModel::default(), &Scene::default())
}

pub fn generate_dataset_with(
    cfg: &SynthConfig,
    model: &BodyModel,
    scene: &Scene,
) -> Result<Vec<Sample>, SynthError> {
    cfg.validate()?;
    if !model.is_valid() {
        return Err(SynthError::InvalidConfig("body model has non-positive lengths or empty limits".into()));
    }
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| generate_one(cfg, model, scene, i))
        .collect()
}
