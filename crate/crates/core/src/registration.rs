//! Registering a moving image to a fixed one from detected keypoints.
//!
//! The transform is solved from the fixed keypoints onto the moving ones, so
//! it carries fixed-grid coordinates into the moving image; the moving image
//! is then sampled there. Solving in the other direction would produce the
//! inverse map and misplace every voxel of a non-trivial registration.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::KeypointDetector;
use crate::error::Result;
use crate::eval::{compute_metrics, MetricsBundle};
use crate::transforms::{solve_transform, KeypointSet, TransformKind, TransformParams};
use crate::warp::{warp_image, warp_labels, Image, LabelMap};

/// Solves the transform for a moving/fixed keypoint pair.
pub fn solve_registration(kind: TransformKind, moving_kp: &KeypointSet, fixed_kp: &KeypointSet) -> Result<TransformParams> {
    solve_transform(kind, fixed_kp, moving_kp)
}

/// Output of one registration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: TransformParams,
    pub moving_keypoints: KeypointSet,
    pub fixed_keypoints: KeypointSet,
    #[serde(skip)]
    pub warped: Option<Image>,
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricsBundle>,
    pub timing_ms: f64,
}

impl RegistrationResult {
    pub fn warp_labels(&self, labels: &LabelMap, out_shape: &[usize]) -> Result<LabelMap> {
        warp_labels(labels, &self.transform, out_shape)
    }

    /// Largest distance between a mapped fixed keypoint and its moving
    /// partner, in normalized units.
    pub fn control_point_residual(&self) -> Result<f64> {
        Ok(self.transform.apply(&self.fixed_keypoints)?.max_distance(&self.moving_keypoints))
    }

    /// Fills [`Self::metrics`] from the moving and fixed label maps.
    pub fn score(&mut self, moving_labels: &LabelMap, fixed_labels: &LabelMap) -> Result<&MetricsBundle> {
        let warped = self.warp_labels(moving_labels, fixed_labels.spatial())?;
        Ok(self.metrics.insert(compute_metrics(&warped, fixed_labels, &self.transform)?))
    }
}

/// Registers with keypoints that are already known.
pub fn register_keypoints(
    kind: TransformKind,
    moving: &Image,
    moving_kp: KeypointSet,
    fixed_shape: &[usize],
    fixed_kp: KeypointSet,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    let transform = solve_registration(kind, &moving_kp, &fixed_kp)?;
    let warped = warp_image(moving, &transform, fixed_shape)?;
    Ok(RegistrationResult {
        lambda: transform.lambda(),
        transform,
        moving_keypoints: moving_kp,
        fixed_keypoints: fixed_kp,
        warped: Some(warped),
        metrics: None,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Detects keypoints in both images and registers `moving` onto `fixed`.
pub fn register(
    detector: &dyn KeypointDetector,
    moving: &Image,
    fixed: &Image,
    kind: TransformKind,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    let p = detector.detect_keypoints(moving)?;
    let q = detector.detect_keypoints(fixed)?;
    let mut r = register_keypoints(kind, moving, p, fixed.spatial(), q)?;
    r.timing_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NdTensor;
    use crate::transforms::{apply_affine, AffineParams};
    use crate::warp::normalized_coord;

    fn blob_image(n: usize) -> Image {
        let mut d = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let (y, x) = (normalized_coord(r, n), normalized_coord(c, n));
                d[r * n + c] = (-((x - 0.2) * (x - 0.2) * 6.0 + (y + 0.1) * (y + 0.1) * 14.0)).exp();
            }
        }
        Image::from_spatial(NdTensor::new(vec![n, n], d).unwrap()).unwrap()
    }

    fn interior_mse(a: &Image, b: &Image, n: usize, margin: usize) -> f64 {
        let mut s = 0.0;
        let mut k = 0;
        for r in margin..n - margin {
            for c in margin..n - margin {
                let d = a.tensor().data()[r * n + c] - b.tensor().data()[r * n + c];
                s += d * d;
                k += 1;
            }
        }
        s / k as f64
    }

    #[test]
    fn known_affine_round_trip_depends_on_direction() {
        let n = 48;
        let fixed = blob_image(n);
        let a = crate::synthdata::rotation(2, 0, 1, 30.0).compose(&AffineParams::translation(&[0.1, 0.05])).unwrap();
        // moving(g) = fixed(A⁻¹ g): content at p in fixed sits at A p in moving
        let moving = warp_image(&fixed, &TransformParams::Affine(a.inverse().unwrap()), &[n, n]).unwrap();
        let q = KeypointSet::from_rows(&[
            vec![0.1, 0.2],
            vec![-0.3, 0.4],
            vec![0.5, -0.2],
            vec![-0.2, -0.5],
            vec![0.3, 0.3],
        ])
        .unwrap();
        let p = apply_affine(&a, &q).unwrap();

        let r = register_keypoints(TransformKind::Affine, &moving, p.clone(), &[n, n], q.clone()).unwrap();
        assert!(interior_mse(r.warped.as_ref().unwrap(), &fixed, n, 8) < 1e-3);

        let swapped = TransformParams::Affine(crate::transforms::solve_affine(&p, &q).unwrap());
        let wrong = warp_image(&moving, &swapped, &[n, n]).unwrap();
        assert!(interior_mse(&wrong, &fixed, n, 8) > 1e-2);

        // self-registration cannot tell the directions apart
        let r = register_keypoints(TransformKind::Affine, &fixed, q.clone(), &[n, n], q).unwrap();
        assert_eq!(r.warped.unwrap(), fixed);
    }
}
