//! Pinhole projection, the box-centered camera frame, and 2D keypoint
//! normalization.

use nalgebra::{Matrix4, Vector2, Vector3};
use thiserror::Error;

use crate::model::{Camera, Keypoints2D, NUM_JOINTS, PointCloud, Pose3D, Sample};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("keypoint box is degenerate (height {0})")]
    DegenerateBox(f64),
}

/// Result of projecting a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel(Vector2<f64>),
    /// The point lies on or behind the image plane (`z <= 0`).
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<Vector2<f64>> {
        match self {
            Projection::Pixel(uv) => Some(uv),
            Projection::BehindCamera => None,
        }
    }
}

/// Projects a camera-frame point with the camera's intrinsics.
pub fn project_to_image(p: &Vector3<f64>, cam: &Camera) -> Projection {
    if p.z <= 0.0 {
        return Projection::BehindCamera;
    }
    Projection::Pixel(Vector2::new(
        cam.fx * p.x / p.z + cam.cx,
        cam.fy * p.y / p.z + cam.cy,
    ))
}

/// Camera-frame point at depth `z` whose projection is `uv`.
pub fn back_project(uv: &Vector2<f64>, z: f64, cam: &Camera) -> Vector3<f64> {
    Vector3::new((uv.x - cam.cx) * z / cam.fx, (uv.y - cam.cy) * z / cam.fy, z)
}

/// Vehicle-frame point to pixels, through the full extrinsic transform.
pub fn project_vehicle_point(p: &Vector3<f64>, cam: &Camera) -> Projection {
    project_to_image(&cam.vehicle_to_camera(p), cam)
}

/// True if `uv` lies inside `[0, width) x [0, height)`.
pub fn in_image(uv: &Vector2<f64>, cam: &Camera) -> bool {
    uv.x >= 0.0 && uv.x < cam.width && uv.y >= 0.0 && uv.y < cam.height
}

/// Fraction of the cloud's points that land inside the image.
pub fn in_frame_fraction(cloud: &PointCloud, cam: &Camera) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let inside = cloud
        .points
        .iter()
        .filter(|p| {
            project_vehicle_point(p, cam)
                .pixel()
                .is_some_and(|uv| in_image(&uv, cam))
        })
        .count();
    inside as f64 / cloud.len() as f64
}

/// Maps a vehicle-frame point into the box-centered camera frame,
/// `A_ext p - A_ext c`.
///
/// The translation of the extrinsics cancels in the difference, so only the
/// rotation block acts on `p - c`.
pub fn to_camera_box_frame(
    p: &Vector3<f64>,
    bbox3d_center: &Vector3<f64>,
    ext: &Matrix4<f64>,
) -> Vector3<f64> {
    let rot = ext.fixed_view::<3, 3>(0, 0);
    rot * (p - bbox3d_center)
}

/// Inverse of [`to_camera_box_frame`].
pub fn from_camera_box_frame(
    q: &Vector3<f64>,
    bbox3d_center: &Vector3<f64>,
    ext: &Matrix4<f64>,
) -> Vector3<f64> {
    let rot = ext.fixed_view::<3, 3>(0, 0);
    rot.transpose() * q + bbox3d_center
}

pub fn pose_to_box_frame(pose: &Pose3D, sample: &Sample) -> Pose3D {
    pose.map(|j| to_camera_box_frame(j, &sample.bbox3d_center, &sample.camera.extrinsics))
}

pub fn pose_from_box_frame(pose: &Pose3D, sample: &Sample) -> Pose3D {
    pose.map(|j| from_camera_box_frame(j, &sample.bbox3d_center, &sample.camera.extrinsics))
}

pub fn cloud_to_box_frame(sample: &Sample) -> Vec<Vector3<f64>> {
    sample
        .cloud
        .points
        .iter()
        .map(|p| to_camera_box_frame(p, &sample.bbox3d_center, &sample.camera.extrinsics))
        .collect()
}

/// Height-normalized keypoints: vertical range `[-1, 1]`, aspect ratio kept.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedKeypoints {
    pub joints: [Vector2<f64>; NUM_JOINTS],
    pub confidence: [f64; NUM_JOINTS],
}

impl NormalizedKeypoints {
    /// Row-major `13 x 2` flattening, the lifting-branch input.
    pub fn to_input(&self) -> [f64; 2 * NUM_JOINTS] {
        let mut out = [0.0; 2 * NUM_JOINTS];
        for (i, j) in self.joints.iter().enumerate() {
            out[2 * i] = j.x;
            out[2 * i + 1] = j.y;
        }
        out
    }
}

/// Normalizes detected keypoints by the height of their tight box.
///
/// Joints with positive confidence are valid. With the box origin at its min
/// corner, width `w` and height `h`, a valid joint `x` maps to
/// `2 x / h - (w / h, 1)`. Invalid joints map to the origin with confidence 0.
///
/// ```
/// # use fusionpose::model::{Keypoints2D, NUM_JOINTS};
/// # use fusionpose::geometry::normalize_keypoints;
/// # use nalgebra::Vector2;
/// let mut confidence = [0.0; NUM_JOINTS];
/// confidence[..3].fill(1.0);
/// let mut joints = [Vector2::zeros(); NUM_JOINTS];
/// joints[0] = Vector2::new(10.0, 20.0);
/// joints[1] = Vector2::new(110.0, 220.0);
/// joints[2] = Vector2::new(35.0, 170.0);
/// let n = normalize_keypoints(&Keypoints2D { joints, confidence }).unwrap();
/// assert!((n.joints[2] - Vector2::new(-0.25, 0.5)).norm() < 1e-12);
/// ```
pub fn normalize_keypoints(k: &Keypoints2D) -> Result<NormalizedKeypoints, GeometryError> {
    let valid = |i: usize| k.confidence[i] > 0.0;
    let mut min = Vector2::repeat(f64::INFINITY);
    let mut max = Vector2::repeat(f64::NEG_INFINITY);
    for i in (0..NUM_JOINTS).filter(|&i| valid(i)) {
        min = min.inf(&k.joints[i]);
        max = max.sup(&k.joints[i]);
    }
    let h = max.y - min.y;
    if !(h > 0.0) || !h.is_finite() {
        return Err(GeometryError::DegenerateBox(if h.is_finite() { h } else { 0.0 }));
    }
    let aspect = (max.x - min.x) / h;
    let mut joints = [Vector2::zeros(); NUM_JOINTS];
    let mut confidence = [0.0; NUM_JOINTS];
    for i in (0..NUM_JOINTS).filter(|&i| valid(i)) {
        let rel = k.joints[i] - min;
        joints[i] = Vector2::new(2.0 * rel.x / h - aspect, 2.0 * rel.y / h - 1.0);
        confidence[i] = k.confidence[i];
    }
    Ok(NormalizedKeypoints { joints, confidence })
}
