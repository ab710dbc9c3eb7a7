//! 3D pseudo-labels from 2D detections and projected LiDAR returns.
//!
//! For each confident joint the projected returns nearest to the detection
//! are collected, weighted, and averaged into a 3D joint. Two weightings are
//! available:
//!
//! * [`Weighting::ThreeD`]: a softmax over the negative 3D distance of each
//!   return to the mean of the selected returns, in meters, with no
//!   temperature.
//! * [`Weighting::TwoDBaseline`]: a softmax over the negative pixel distance
//!   to the detection, divided by `radius_px`. This reconstructs the
//!   image-space weighting of earlier work and serves as the comparison
//!   baseline.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{self, Projection};
use crate::model::{NUM_JOINTS, Pose3D, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Weighting {
    #[serde(rename = "3d")]
    #[value(name = "3d")]
    ThreeD,
    #[serde(rename = "2d")]
    #[value(name = "2d")]
    TwoDBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub radius_px: f64,
    pub max_neighbors: usize,
    pub min_neighbors: usize,
    pub weighting: Weighting,
    /// Joints below this detector confidence get no label.
    pub confidence_threshold: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            radius_px: 10.0,
            max_neighbors: 20,
            min_neighbors: 1,
            weighting: Weighting::ThreeD,
            confidence_threshold: 0.8,
        }
    }
}

impl PseudoLabelConfig {
    pub fn is_valid(&self) -> bool {
        self.radius_px > 0.0 && self.min_neighbors >= 1 && self.max_neighbors >= self.min_neighbors
    }
}

/// A projected LiDAR return near a joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Index into the sample's cloud.
    pub index: usize,
    pub pixel: Vector2<f64>,
    pub distance_px: f64,
}

/// Per-joint neighbors, sorted by pixel distance. A joint may have none.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    pub joints: [Vec<Neighbor>; NUM_JOINTS],
}

/// Collects, for every joint at or above the confidence threshold, the
/// `max_neighbors` in-frame projections closest to the detection within
/// `radius_px`. Joints with fewer than `min_neighbors` candidates get an
/// empty set. Ties in distance are broken by cloud index.
pub fn select_neighbors(s: &Sample, cfg: &PseudoLabelConfig) -> NeighborSet {
    let cam = &s.camera;
    let projected: Vec<(usize, Vector2<f64>)> = s
        .cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match geometry::project_vehicle_point(p, cam) {
            Projection::Pixel(uv) if geometry::in_image(&uv, cam) => Some((i, uv)),
            _ => None,
        })
        .collect();

    let mut out = NeighborSet::default();
    for j in 0..NUM_JOINTS {
        let c = s.keypoints2d.confidence[j];
        if !(c > 0.0 && c >= cfg.confidence_threshold) {
            continue;
        }
        let kp = s.keypoints2d.joints[j];
        let mut near: Vec<Neighbor> = projected
            .iter()
            .map(|&(index, pixel)| Neighbor {
                index,
                pixel,
                distance_px: (pixel - kp).norm(),
            })
            .filter(|n| n.distance_px <= cfg.radius_px)
            .collect();
        near.sort_by(|a, b| a.distance_px.total_cmp(&b.distance_px).then(a.index.cmp(&b.index)));
        near.truncate(cfg.max_neighbors);
        if near.len() >= cfg.min_neighbors {
            out.joints[j] = near;
        }
    }
    out
}

/// Softmax of `-scores`, shifted by the minimum for stability.
fn softmin(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = scores.iter().map(|s| (-(s - lo)).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Weights from the 3D distance of each point to the set's mean.
///
/// ```
/// # use fusionpose::pseudolabel::weights_3d;
/// # use nalgebra::Vector3;
/// let w = weights_3d(&[Vector3::zeros(), Vector3::x(), 2.0 * Vector3::x()]);
/// assert!((w[1] - 1.0 / (1.0 + 2.0 * (-1f64).exp())).abs() < 1e-12);
/// ```
pub fn weights_3d(points: &[Vector3<f64>]) -> Vec<f64> {
    assert!(!points.is_empty(), "weights need at least one point");
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let dist: Vec<f64> = points.iter().map(|p| (p - mean).norm()).collect();
    softmin(&dist)
}

/// Weights from distances in the image plane, already divided by the
/// neighborhood radius.
pub fn weights_2d_baseline(scaled_distances: &[f64]) -> Vec<f64> {
    assert!(!scaled_distances.is_empty(), "weights need at least one distance");
    softmin(scaled_distances)
}

/// Weighted sum of points.
pub fn weighted_joint(points: &[Vector3<f64>], weights: &[f64]) -> Vector3<f64> {
    points.iter().zip(weights).map(|(p, w)| p * *w).sum()
}

/// Pseudo-label joints in the vehicle frame.
pub fn pseudo_labels_vehicle_frame(s: &Sample, cfg: &PseudoLabelConfig) -> Pose3D {
    let neighbors = select_neighbors(s, cfg);
    let mut pose = Pose3D::invalid();
    for (j, set) in neighbors.joints.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let pts: Vec<Vector3<f64>> = set.iter().map(|n| s.cloud.points[n.index]).collect();
        let w = match cfg.weighting {
            Weighting::ThreeD => weights_3d(&pts),
            Weighting::TwoDBaseline => {
                let d: Vec<f64> = set.iter().map(|n| n.distance_px / cfg.radius_px).collect();
                weights_2d_baseline(&d)
            }
        };
        pose.joints[j] = weighted_joint(&pts, &w);
        pose.valid[j] = true;
    }
    pose
}

/// Pseudo-label joints in the box-centered camera frame. Joints without
/// neighbors are invalid; a pose with no valid joint means the sample yields
/// no supervision.
pub fn make_pseudo_labels(s: &Sample, cfg: &PseudoLabelConfig) -> Pose3D {
    geometry::pose_to_box_frame(&pseudo_labels_vehicle_frame(s, cfg), s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::sample_with_points;
    use crate::model::PointCloud;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn weights_3d_examples() {
        assert_eq!(weights_3d(&[Vector3::new(1.0, 2.0, 3.0)]), vec![1.0]);

        // Square corners are equidistant from their mean.
        let sq = [
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(-1.0, 1.0, 0.0),
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(1.0, -1.0, 0.0),
        ];
        for w in weights_3d(&sq) {
            assert!(close(w, 0.25, 1e-15));
        }

        // Collinear points: distances (1, 0, 1) from the mean (1, 0, 0).
        let w = weights_3d(&[Vector3::zeros(), Vector3::x(), 2.0 * Vector3::x()]);
        let e = (-1f64).exp();
        let (side, mid) = (e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e));
        assert!(close(w[0], side, 1e-12) && close(w[1], mid, 1e-12) && close(w[2], side, 1e-12));
        assert!(close(w[0], 0.2119, 1e-4) && close(w[1], 0.5761, 1e-4));
    }

    #[test]
    fn weights_2d_examples() {
        assert_eq!(weights_2d_baseline(&[0.3]), vec![1.0]);
        assert_eq!(weights_2d_baseline(&[0.4, 0.4]), vec![0.5, 0.5]);
        let w = weights_2d_baseline(&[0.0, 1.0]);
        let e = (-1f64).exp();
        assert!(close(w[0], 1.0 / (1.0 + e), 1e-12));
        assert!(close(w[1], e / (1.0 + e), 1e-12));
        assert!(close(w[0], 0.7311, 1e-4) && close(w[1], 0.2689, 1e-4));
    }

    #[test]
    fn weighted_joint_examples() {
        let p = Vector3::new(0.3, -2.0, 5.0);
        assert_eq!(weighted_joint(&[p], &weights_3d(&[p])), p);
        let pts = [Vector3::zeros(), Vector3::x(), 2.0 * Vector3::x()];
        let y = weighted_joint(&pts, &weights_3d(&pts));
        assert!((y - Vector3::x()).norm() < 1e-12);
    }

    /// Sample whose cloud projects to chosen pixels at chosen depths, with a
    /// single confident joint at `kp`.
    fn sample_with_projections(kp: Vector2<f64>, pixels: &[(Vector2<f64>, f64)]) -> Sample {
        let mut s = sample_with_points(1);
        let cam = s.camera.clone();
        s.cloud = PointCloud::new(
            pixels
                .iter()
                .map(|(uv, depth)| {
                    let pc = geometry::back_project(uv, *depth, &cam);
                    cam.rotation().transpose() * (pc - cam.translation())
                })
                .collect(),
        );
        s.keypoints2d.confidence = [0.0; NUM_JOINTS];
        s.keypoints2d.confidence[0] = 0.95;
        s.keypoints2d.joints[0] = kp;
        s
    }

    #[test]
    fn neighbor_examples() {
        let kp = Vector2::new(500.0, 400.0);
        let cfg = PseudoLabelConfig::default();
        let s = sample_with_projections(kp, &[(kp, 10.0), (kp + Vector2::new(30.0, 0.0), 10.0)]);
        let n = select_neighbors(&s, &cfg);
        assert_eq!(n.joints[0].len(), 1);
        assert_eq!(n.joints[0][0].index, 0);
        assert!(n.joints[0][0].distance_px < 1e-9);
        for j in 1..NUM_JOINTS {
            assert!(n.joints[j].is_empty());
        }

        let far = sample_with_projections(kp, &[(kp + Vector2::new(10.5, 0.0), 10.0)]);
        assert!(select_neighbors(&far, &cfg).joints[0].is_empty());

        // Below threshold: no neighbors even with a point on top.
        let mut low = s.clone();
        low.keypoints2d.confidence[0] = 0.5;
        assert!(select_neighbors(&low, &cfg).joints[0].is_empty());
    }

    #[test]
    fn nearest_twenty_of_thirty_match_brute_force() {
        let kp = Vector2::new(700.0, 300.0);
        let pixels: Vec<(Vector2<f64>, f64)> = (0..30)
            .map(|i| {
                let a = i as f64 * 2.399;
                let r = 0.3 * i as f64;
                (kp + Vector2::new(a.cos(), a.sin()) * r, 8.0 + 0.01 * i as f64)
            })
            .collect();
        let s = sample_with_projections(kp, &pixels);
        let n = select_neighbors(&s, &PseudoLabelConfig::default());

        // Oracle: project every point, sort all distances exhaustively.
        let mut all: Vec<(f64, usize)> = s
            .cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let uv = geometry::project_vehicle_point(p, &s.camera).pixel().unwrap();
                ((uv - kp).norm(), i)
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<usize> = all.iter().take(20).map(|&(_, i)| i).collect();
        let got: Vec<usize> = n.joints[0].iter().map(|x| x.index).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn min_neighbors_empties_sparse_joints() {
        let kp = Vector2::new(500.0, 400.0);
        let s = sample_with_projections(kp, &[(kp, 10.0), (kp + Vector2::new(1.0, 0.0), 10.0)]);
        let cfg = PseudoLabelConfig {
            min_neighbors: 3,
            max_neighbors: 5,
            ..Default::default()
        };
        assert!(select_neighbors(&s, &cfg).joints[0].is_empty());
        assert_eq!(make_pseudo_labels(&s, &cfg).n_valid(), 0);
    }

    #[test]
    fn single_neighbor_label_is_that_point() {
        let kp = Vector2::new(500.0, 400.0);
        let s = sample_with_projections(kp, &[(kp + Vector2::new(2.0, 1.0), 12.0)]);
        for weighting in [Weighting::ThreeD, Weighting::TwoDBaseline] {
            let cfg = PseudoLabelConfig {
                weighting,
                ..Default::default()
            };
            let v = pseudo_labels_vehicle_frame(&s, &cfg);
            assert!(v.valid[0]);
            assert!((v.joints[0] - s.cloud.points[0]).norm() < 1e-12);
            assert_eq!(v.n_valid(), 1);
            let b = make_pseudo_labels(&s, &cfg);
            let want = geometry::to_camera_box_frame(&s.cloud.points[0], &s.bbox3d_center, &s.camera.extrinsics);
            assert!((b.joints[0] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn outlier_in_depth_hurts_2d_more() {
        // Five returns on the limb around 10 m, one stray return 2 m behind
        // that projects right onto the detection.
        let kp = Vector2::new(800.0, 500.0);
        let mut pixels: Vec<(Vector2<f64>, f64)> = (0..5)
            .map(|i| {
                let a = i as f64 * 1.2566;
                (kp + Vector2::new(a.cos(), a.sin()) * 4.0, 10.0)
            })
            .collect();
        pixels.push((kp, 12.0));
        let s = sample_with_projections(kp, &pixels);
        let centroid: Vector3<f64> = s.cloud.points[..5].iter().sum::<Vector3<f64>>() / 5.0;
        let err = |w| {
            let cfg = PseudoLabelConfig {
                weighting: w,
                ..Default::default()
            };
            (pseudo_labels_vehicle_frame(&s, &cfg).joints[0] - centroid).norm()
        };
        assert!(err(Weighting::ThreeD) < err(Weighting::TwoDBaseline));
    }

    mod properties {
        use super::*;
        use crate::model::tests::forward_camera;
        use crate::synth::{generate_dataset, NoiseProfile, SynthConfig};
        use nalgebra::{Matrix4, Rotation3};
        use proptest::prelude::*;

        fn points_strategy() -> impl Strategy<Value = Vec<Vector3<f64>>> {
            prop::collection::vec(prop::array::uniform3(-100.0..100.0f64), 1..40)
                .prop_map(|v| v.into_iter().map(Vector3::from).collect())
        }

        fn synthetic_sample(seed: u64) -> Sample {
            generate_dataset(&SynthConfig::profile(NoiseProfile::Nominal, 1, seed)).unwrap().remove(0)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn weights_are_normalized(pts in points_strategy(), d in prop::collection::vec(0.0..1.0f64, 1..40)) {
                let w = weights_3d(&pts);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let w = weights_2d_baseline(&d);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn label_lies_in_the_convex_hull(pts in points_strategy(), dirs in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 8)) {
                let y = weighted_joint(&pts, &weights_3d(&pts));
                // A point outside the hull is separated by some direction;
                // probe the axes and random directions.
                let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
                for d in axes.into_iter().chain(dirs.into_iter().map(Vector3::from)) {
                    let proj: Vec<f64> = pts.iter().map(|p| p.dot(&d)).collect();
                    let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(y.dot(&d) >= lo - 1e-9 && y.dot(&d) <= hi + 1e-9);
                }
            }

            #[test]
            fn rigid_motion_equivariance(
                seed in 0..10_000u64,
                axis in prop::array::uniform3(-3.0..3.0f64),
                t in prop::array::uniform3(-50.0..50.0f64),
                three_d in any::<bool>(),
            ) {
                let s = synthetic_sample(seed);
                let rot = Rotation3::from_scaled_axis(Vector3::from(axis));
                let t = Vector3::from(t);
                let motion = |p: &Vector3<f64>| rot * p + t;
                let mut inv = Matrix4::identity();
                inv.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.inverse().matrix());
                inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&-(rot.inverse() * t));

                let mut moved = s.clone();
                moved.cloud.points = s.cloud.points.iter().map(motion).collect();
                moved.bbox3d_center = motion(&s.bbox3d_center);
                moved.camera.extrinsics = s.camera.extrinsics * inv;

                let cfg = PseudoLabelConfig {
                    weighting: if three_d { Weighting::ThreeD } else { Weighting::TwoDBaseline },
                    ..Default::default()
                };
                let (a, b) = (pseudo_labels_vehicle_frame(&s, &cfg), pseudo_labels_vehicle_frame(&moved, &cfg));
                prop_assert_eq!(a.valid, b.valid);
                prop_assert!(a.n_valid() > 0);
                let (ba, bb) = (make_pseudo_labels(&s, &cfg), make_pseudo_labels(&moved, &cfg));
                for j in 0..NUM_JOINTS {
                    if a.valid[j] {
                        prop_assert!((motion(&a.joints[j]) - b.joints[j]).norm() < 1e-9);
                        prop_assert!((ba.joints[j] - bb.joints[j]).norm() < 1e-9);
                    }
                }
            }

            #[test]
            fn noiseless_surface_recovers_the_joint(
                depth in 5.0..30.0f64,
                lateral in prop::array::uniform2(-2.0..2.0f64),
                dir in prop::array::uniform3(-1.0..1.0f64),
                radius in 0.03..0.13f64,
                end_joint in any::<bool>(),
            ) {
                // One capsule, joint on its axis, surface sampled on a fine
                // grid and culled to the camera-facing side. A limb seen
                // end-on stacks its whole side into the joint's pixel disc,
                // so the axis stays at least 60 degrees off the ray.
                let mut dir = Vector3::from(dir);
                prop_assume!(dir.norm() > 0.1);
                dir.normalize_mut();
                let joint = Vector3::new(depth, lateral[0], lateral[1]);
                prop_assume!(dir.dot(&joint.normalize()).abs() <= 0.5);
                let (a, b) = if end_joint { (joint - 0.4 * dir, joint) } else { (joint - 0.2 * dir, joint + 0.2 * dir) };
                let eye = Vector3::zeros();
                let u = dir.cross(&Vector3::z()).try_normalize(1e-9).unwrap_or_else(|| dir.cross(&Vector3::x()).normalize());
                let v = dir.cross(&u);
                let mut pts = Vec::new();
                for i in 0..=60 {
                    let along = -radius + (0.4 + 2.0 * radius) * i as f64 / 60.0;
                    for k in 0..72 {
                        let phi = k as f64 * std::f64::consts::TAU / 72.0;
                        let axis_t = along.clamp(0.0, 0.4);
                        let base = a + dir * axis_t;
                        let out = along - axis_t;
                        let h = (radius * radius - out * out).max(0.0).sqrt();
                        let normal_dir = u * phi.cos() + v * phi.sin();
                        let p = base + dir * out + normal_dir * h;
                        let normal = (p - base).normalize();
                        if normal.dot(&(eye - p)) > 0.0 && point_segment_distance(&p, &a, &b) > radius - 1e-9 {
                            pts.push(p);
                        }
                    }
                }
                let cam = forward_camera();
                let mut s = crate::model::tests::sample_with_points(1);
                s.camera = cam.clone();
                s.cloud = crate::model::PointCloud::new(pts);
                s.keypoints2d.confidence = [0.0; NUM_JOINTS];
                s.keypoints2d.confidence[0] = 1.0;
                let proj = geometry::project_vehicle_point(&joint, &cam).pixel();
                prop_assume!(proj.is_some());
                s.keypoints2d.joints[0] = proj.unwrap();
                let cfg = PseudoLabelConfig { radius_px: cam.fx * radius / depth, ..Default::default() };
                let label = pseudo_labels_vehicle_frame(&s, &cfg);
                prop_assume!(label.valid[0]);
                prop_assert!((label.joints[0] - joint).norm() <= 1.5 * radius);
            }
        }

        use crate::synth::point_segment_distance;
    }
}

