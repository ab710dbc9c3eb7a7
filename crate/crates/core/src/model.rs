//! Domain types shared by the whole pipeline, plus sample validation.
//!
//! All coordinates are `f64`. 3D quantities are in meters, image quantities in
//! pixels. Stored samples keep their point cloud and poses in the vehicle
//! frame; [`crate::geometry`] moves them into the box-centered camera frame
//! used for learning.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry;

/// Number of body joints in the skeleton.
pub const NUM_JOINTS: usize = 13;

/// Keypoints whose confidence exceeds this bar count as labeled when a sample
/// is validated.
pub const KEYPOINT_VALIDITY_BAR: f64 = 0.05;

/// The 13 body joints, in canonical order.
///
/// | index | joint            |
/// |-------|------------------|
/// | 0     | nose             |
/// | 1     | left shoulder    |
/// | 2     | right shoulder   |
/// | 3     | left elbow       |
/// | 4     | right elbow      |
/// | 5     | left wrist       |
/// | 6     | right wrist      |
/// | 7     | left hip         |
/// | 8     | right hip        |
/// | 9     | left knee        |
/// | 10    | right knee       |
/// | 11    | left ankle       |
/// | 12    | right ankle      |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Joint {
    Nose = 0,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Nose,
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftElbow,
        Joint::RightElbow,
        Joint::LeftWrist,
        Joint::RightWrist,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftAnkle,
        Joint::RightAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Joint> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        JOINT_NAMES[self.index()]
    }
}

/// Joint names in canonical order; written into dataset headers.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// A 3D body pose with a per-joint validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub joints: [Vector3<f64>; NUM_JOINTS],
    pub valid: [bool; NUM_JOINTS],
}

impl Pose3D {
    pub fn new(joints: [Vector3<f64>; NUM_JOINTS]) -> Self {
        Pose3D {
            joints,
            valid: [true; NUM_JOINTS],
        }
    }

    /// A pose with every joint invalid.
    pub fn invalid() -> Self {
        Pose3D {
            joints: [Vector3::zeros(); NUM_JOINTS],
            valid: [false; NUM_JOINTS],
        }
    }

    pub fn joint(&self, joint: Joint) -> Vector3<f64> {
        self.joints[joint.index()]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Row-major `13 x 3` flattening, the network output layout.
    pub fn to_flat(&self) -> [f64; 3 * NUM_JOINTS] {
        let mut out = [0.0; 3 * NUM_JOINTS];
        for (i, j) in self.joints.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(j.as_slice());
        }
        out
    }

    /// Inverse of [`Pose3D::to_flat`]; every joint is marked valid.
    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len(), 3 * NUM_JOINTS, "pose vector must hold 39 values");
        let joints =
            std::array::from_fn(|i| Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]));
        Pose3D::new(joints)
    }

    /// Applies `f` to every joint, keeping the mask.
    pub fn map(&self, mut f: impl FnMut(&Vector3<f64>) -> Vector3<f64>) -> Self {
        Pose3D {
            joints: std::array::from_fn(|i| f(&self.joints[i])),
            valid: self.valid,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.joints
            .iter()
            .zip(&self.valid)
            .all(|(j, &v)| !v || j.iter().all(|x| x.is_finite()))
    }
}

/// Image-plane joint detections in pixels with per-joint confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    pub joints: [Vector2<f64>; NUM_JOINTS],
    pub confidence: [f64; NUM_JOINTS],
}

impl Keypoints2D {
    /// Number of joints whose confidence is strictly above `bar`.
    pub fn count_above(&self, bar: f64) -> usize {
        self.confidence.iter().filter(|&&c| c > bar).count()
    }

    pub fn is_well_formed(&self) -> bool {
        self.confidence.iter().zip(&self.joints).all(|(&c, j)| {
            (0.0..=1.0).contains(&c) && (c == 0.0 || (j.x.is_finite() && j.y.is_finite()))
        })
    }
}

/// Unordered LiDAR returns in meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pinhole camera with a rigid vehicle-to-camera transform.
///
/// The camera frame has `x` to the right, `y` down and `z` along the optical
/// axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Maps homogeneous vehicle-frame points into the camera frame.
    pub extrinsics: Matrix4<f64>,
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn vehicle_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Intrinsics positive and finite, rotation block orthonormal with
    /// determinant one, bottom row `[0 0 0 1]`.
    pub fn is_valid(&self) -> bool {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.width, self.height]
            .iter()
            .all(|v| v.is_finite())
            && self.extrinsics.iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.width <= 0.0 || self.height <= 0.0
        {
            return false;
        }
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max() < 1e-6;
        let det = (r.determinant() - 1.0).abs() < 1e-6;
        let bottom = self.extrinsics.row(3);
        let affine = bottom[0] == 0.0 && bottom[1] == 0.0 && bottom[2] == 0.0 && bottom[3] == 1.0;
        ortho && det && affine
    }
}

/// One observed pedestrian.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub camera: Camera,
    /// Center of the 3D bounding box, vehicle frame.
    pub bbox3d_center: Vector3<f64>,
    /// LiDAR returns on the body, vehicle frame.
    pub cloud: PointCloud,
    pub keypoints2d: Keypoints2D,
    /// Ground-truth joints, vehicle frame.
    pub gt3d: Option<Pose3D>,
    /// Pseudo-label joints, vehicle frame.
    pub pseudo3d: Option<Pose3D>,
}

/// Why a sample was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewPoints,
    TooFewKeypoints,
    CameraOverlap,
    Malformed,
}

impl RejectReason {
    pub const ALL: [RejectReason; 4] = [
        RejectReason::TooFewPoints,
        RejectReason::TooFewKeypoints,
        RejectReason::CameraOverlap,
        RejectReason::Malformed,
    ];

    pub fn code(self) -> &'static str {
        match self {
            RejectReason::TooFewPoints => "too_few_points",
            RejectReason::TooFewKeypoints => "too_few_keypoints",
            RejectReason::CameraOverlap => "camera_overlap",
            RejectReason::Malformed => "malformed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidityReport {
    pub reasons: Vec<RejectReason>,
}

impl ValidityReport {
    pub fn accepted(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// Dataset cleaning thresholds. All comparisons are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_points: usize,
    pub min_keypoints: usize,
    pub min_projection_fraction: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_points: 75,
            min_keypoints: 7,
            min_projection_fraction: 0.75,
        }
    }
}

fn is_well_formed(s: &Sample) -> bool {
    s.camera.is_valid()
        && s.bbox3d_center.iter().all(|v| v.is_finite())
        && s.cloud.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
        && s.keypoints2d.is_well_formed()
        && s.gt3d.as_ref().is_none_or(Pose3D::is_finite)
        && s.pseudo3d.as_ref().is_none_or(Pose3D::is_finite)
}

/// Checks a sample against the cleaning rules.
///
/// A malformed sample (non-finite values, invalid camera) is reported with the
/// single reason [`RejectReason::Malformed`]; the other rules are only
/// evaluated on well-formed samples.
pub fn validate_sample(s: &Sample, thresholds: &FilterThresholds) -> ValidityReport {
    if !is_well_formed(s) {
        return ValidityReport {
            reasons: vec![RejectReason::Malformed],
        };
    }
    let mut reasons = Vec::new();
    if s.cloud.len() < thresholds.min_points {
        reasons.push(RejectReason::TooFewPoints);
    }
    if s.keypoints2d.count_above(KEYPOINT_VALIDITY_BAR) < thresholds.min_keypoints {
        reasons.push(RejectReason::TooFewKeypoints);
    }
    // An empty cloud has no overlap to speak of; it is already rejected above.
    if !s.cloud.is_empty()
        && geometry::in_frame_fraction(&s.cloud, &s.camera) < thresholds.min_projection_fraction
    {
        reasons.push(RejectReason::CameraOverlap);
    }
    ValidityReport { reasons }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Camera at the vehicle origin looking along vehicle `+x`, with `+y`
    /// left and `+z` up.
    pub(crate) fn forward_camera() -> Camera {
        #[rustfmt::skip]
        let extrinsics = Matrix4::new(
            0.0, -1.0, 0.0, 0.0,
            0.0, 0.0, -1.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        Camera {
            fx: 1000.0,
            fy: 1000.0,
            cx: 960.0,
            cy: 640.0,
            width: 1920.0,
            height: 1280.0,
            extrinsics,
        }
    }

    /// A well-formed sample 10 m ahead with `n_points` points projecting at
    /// the image center area and 13 confident keypoints.
    pub(crate) fn sample_with_points(n_points: usize) -> Sample {
        let points = (0..n_points)
            .map(|i| Vector3::new(10.0, 0.001 * i as f64, 0.0))
            .collect();
        Sample {
            id: "s".into(),
            camera: forward_camera(),
            bbox3d_center: Vector3::new(10.0, 0.0, 0.0),
            cloud: PointCloud::new(points),
            keypoints2d: Keypoints2D {
                joints: std::array::from_fn(|i| Vector2::new(900.0 + i as f64, 600.0 + 5.0 * i as f64)),
                confidence: [1.0; NUM_JOINTS],
            },
            gt3d: None,
            pseudo3d: None,
        }
    }

    #[test]
    fn joint_table_is_consistent() {
        for (i, j) in Joint::ALL.iter().enumerate() {
            assert_eq!(j.index(), i);
            assert_eq!(Joint::from_index(i), Some(*j));
        }
        assert_eq!(Joint::from_index(13), None);
        assert_eq!(Joint::RightAnkle.name(), "right_ankle");
    }

    #[test]
    fn flat_round_trip() {
        let pose = Pose3D::new(std::array::from_fn(|i| Vector3::new(i as f64, -(i as f64), 0.5)));
        assert_eq!(Pose3D::from_flat(&pose.to_flat()), pose);
    }

    #[test]
    fn seventy_four_points_rejected() {
        let r = validate_sample(&sample_with_points(74), &FilterThresholds::default());
        assert_eq!(r.reasons, vec![RejectReason::TooFewPoints]);
        assert!(!r.accepted());
    }

    #[test]
    fn seventy_five_points_accepted() {
        let r = validate_sample(&sample_with_points(75), &FilterThresholds::default());
        assert!(r.accepted(), "{:?}", r);
    }

    #[test]
    fn seventy_percent_in_frame_rejected() {
        let mut s = sample_with_points(100);
        // 30 points behind the camera never project into the image.
        for p in s.cloud.points.iter_mut().take(30) {
            p.x = -5.0;
        }
        let r = validate_sample(&s, &FilterThresholds::default());
        assert_eq!(r.reasons, vec![RejectReason::CameraOverlap]);
    }

    #[test]
    fn keypoint_bar_is_strict() {
        let mut s = sample_with_points(80);
        s.keypoints2d.confidence = [0.0; NUM_JOINTS];
        for c in s.keypoints2d.confidence.iter_mut().take(7) {
            *c = KEYPOINT_VALIDITY_BAR;
        }
        let r = validate_sample(&s, &FilterThresholds::default());
        assert_eq!(r.reasons, vec![RejectReason::TooFewKeypoints]);
        s.keypoints2d.confidence[0] = 0.5;
        s.keypoints2d.confidence[1..7].fill(0.9);
        assert!(validate_sample(&s, &FilterThresholds::default()).accepted());
    }

    #[test]
    fn non_finite_is_malformed() {
        let mut s = sample_with_points(80);
        s.cloud.points[3].y = f64::NAN;
        let r = validate_sample(&s, &FilterThresholds::default());
        assert_eq!(r.reasons, vec![RejectReason::Malformed]);

        let mut s = sample_with_points(80);
        s.camera.fx = 0.0;
        assert_eq!(
            validate_sample(&s, &FilterThresholds::default()).reasons,
            vec![RejectReason::Malformed]
        );

        let mut s = sample_with_points(80);
        s.keypoints2d.joints[2].x = f64::INFINITY;
        assert_eq!(
            validate_sample(&s, &FilterThresholds::default()).reasons,
            vec![RejectReason::Malformed]
        );
        // Undetected joints may carry any coordinates.
        s.keypoints2d.confidence[2] = 0.0;
        assert!(validate_sample(&s, &FilterThresholds::default()).accepted());
    }

    #[test]
    fn camera_validity() {
        let cam = forward_camera();
        assert!(cam.is_valid());
        let mut skewed = cam.clone();
        skewed.extrinsics[(0, 0)] = 0.1;
        assert!(!skewed.is_valid());
        let mut reflected = cam;
        reflected.extrinsics[(2, 0)] = -1.0;
        assert!(!reflected.is_valid());
    }
}
