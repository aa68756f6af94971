//! Registration metrics and the experiment harnesses built on them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectorWeights, KeypointDetector};
use crate::error::{shape_err, Error, Result};
use crate::registration::{register_keypoints, solve_registration, RegistrationResult};
use crate::synthdata::{pearson, rotation, SyntheticSubject};
use crate::tensor::NdTensor;
use crate::transforms::{apply_affine, solve_affine, AffineParams, KeypointSet, TransformKind, TransformParams};
use crate::warp::{grid_sample, grid_sample_forward, jacobian_field, warp_labels, Image, LabelMap, Padding, SampleMode};

/// Per-label Dice and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: BTreeMap<usize, f64>,
    /// Mean over labels present in at least one map; NaN when there are none.
    pub mean: f64,
}

fn label_counts(t: &NdTensor) -> Vec<usize> {
    let mut c = Vec::new();
    for &v in t.data() {
        let l = v as usize;
        if l >= c.len() {
            c.resize(l + 1, 0);
        }
        c[l] += 1;
    }
    c
}

pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<DiceScores> {
    if a.spatial() != b.spatial() {
        return Err(shape_err(format!("label maps {:?} and {:?}", a.spatial(), b.spatial())));
    }
    let (ca, cb) = (label_counts(a.tensor()), label_counts(b.tensor()));
    let mut inter = vec![0usize; ca.len().max(cb.len())];
    for (&x, &y) in a.tensor().data().iter().zip(b.tensor().data()) {
        if x == y {
            inter[x as usize] += 1;
        }
    }
    let mut per_label = BTreeMap::new();
    for l in 1..inter.len() {
        let total = ca.get(l).copied().unwrap_or(0) + cb.get(l).copied().unwrap_or(0);
        if total > 0 {
            per_label.insert(l, 2.0 * inter[l] as f64 / total as f64);
        }
    }
    let mean = if per_label.is_empty() { f64::NAN } else { per_label.values().sum::<f64>() / per_label.len() as f64 };
    Ok(DiceScores { per_label, mean })
}

/// Symmetric Hausdorff distance and its 95th-percentile variant, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HausdorffDistance {
    pub hd: f64,
    pub hd95: f64,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        st[a] = st[a + 1] * shape[a + 1];
    }
    st
}

fn unravel(mut j: usize, st: &[usize]) -> Vec<usize> {
    st.iter()
        .map(|&s| {
            let i = j / s;
            j %= s;
            i
        })
        .collect()
}

/// Foreground voxels with at least one background (or out-of-grid)
/// face-neighbor.
pub fn boundary_voxels(mask: &[bool], shape: &[usize]) -> Vec<Vec<usize>> {
    let st = strides(shape);
    let mut out = Vec::new();
    for (j, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let idx = unravel(j, &st);
        let edge = (0..shape.len()).any(|a| {
            idx[a] == 0 || idx[a] + 1 == shape[a] || !mask[j - st[a]] || !mask[j + st[a]]
        });
        if edge {
            out.push(idx);
        }
    }
    out
}

fn directed(from: &[Vec<usize>], to: &[Vec<usize>]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| p.iter().zip(q).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((0.95 * v.len() as f64).ceil() as usize).max(1);
    v[rank - 1]
}

/// Hausdorff distance between the boundaries of two binary masks.
pub fn hausdorff(a: &[bool], b: &[bool], shape: &[usize]) -> Result<HausdorffDistance> {
    let n: usize = shape.iter().product();
    if a.len() != n || b.len() != n {
        return Err(shape_err(format!("masks of {} and {} voxels for grid {shape:?}", a.len(), b.len())));
    }
    let (ba, bb) = (boundary_voxels(a, shape), boundary_voxels(b, shape));
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (dab, dba) = (directed(&ba, &bb), directed(&bb, &ba));
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(HausdorffDistance { hd: max(&dab).max(max(&dba)), hd95: percentile95(dab).max(percentile95(dba)) })
}

/// Hausdorff distance of the whole foreground (all nonzero labels).
pub fn hausdorff_labels(a: &LabelMap, b: &LabelMap) -> Result<HausdorffDistance> {
    if a.spatial() != b.spatial() {
        return Err(shape_err("label maps differ in shape"));
    }
    let fg = |m: &LabelMap| m.tensor().data().iter().map(|&v| v > 0.0).collect::<Vec<_>>();
    hausdorff(&fg(a), &fg(b), a.spatial())
}

/// Hausdorff distance per label; labels missing from either map are skipped.
pub fn hausdorff_per_label(a: &LabelMap, b: &LabelMap) -> Result<BTreeMap<usize, HausdorffDistance>> {
    if a.spatial() != b.spatial() {
        return Err(shape_err("label maps differ in shape"));
    }
    let mut out = BTreeMap::new();
    for l in 1..a.num_labels().max(b.num_labels()) {
        let m = |x: &LabelMap| x.tensor().data().iter().map(|&v| v as usize == l).collect::<Vec<_>>();
        match hausdorff(&m(a), &m(b), a.spatial()) {
            Ok(h) => {
                out.insert(l, h);
            }
            Err(Error::EmptyMask) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    pub std: f64,
    pub neg_frac: f64,
}

/// Population standard deviation and fraction of negative determinants.
pub fn jacobian_stats(dets: &[f64]) -> Result<JacobianStats> {
    if dets.is_empty() {
        return Err(Error::InvalidArgument("no determinants".into()));
    }
    let n = dets.len() as f64;
    let mean = dets.iter().sum::<f64>() / n;
    let var = dets.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let neg = dets.iter().filter(|&&d| d < 0.0).count() as f64;
    Ok(JacobianStats { std: var.sqrt(), neg_frac: neg / n })
}

/// Determinants of `transform` on `grid_shape`, dropping `margin` voxels at
/// every face.
pub fn interior_determinants(transform: &TransformParams, grid_shape: &[usize], margin: usize) -> Result<Vec<f64>> {
    let field = jacobian_field(transform, grid_shape)?;
    let st = strides(grid_shape);
    Ok(field
        .data()
        .iter()
        .enumerate()
        .filter(|(j, _)| unravel(*j, &st).iter().zip(grid_shape).all(|(&i, &n)| i >= margin && i + margin < n))
        .map(|(_, &d)| d)
        .collect())
}

/// Quality metrics of one registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub dice: DiceScores,
    pub hausdorff: f64,
    pub hd95: f64,
    pub jd_std: f64,
    pub jd_neg_frac: f64,
}

/// Interior margin (voxels) used for the Jacobian statistics.
pub const JACOBIAN_MARGIN: usize = 1;

pub fn compute_metrics(warped: &LabelMap, fixed: &LabelMap, transform: &TransformParams) -> Result<MetricsBundle> {
    let d = dice(warped, fixed)?;
    let h = hausdorff_labels(warped, fixed)?;
    let j = jacobian_stats(&interior_determinants(transform, fixed.spatial(), JACOBIAN_MARGIN)?)?;
    Ok(MetricsBundle { dice: d, hausdorff: h.hd, hd95: h.hd95, jd_std: j.std, jd_neg_frac: j.neg_frac })
}

/// Resamples `labels` at `A(T(g))`: the registration `T` reads from a
/// misaligned image that was itself `A` of the original.
fn warp_labels_composite(labels: &LabelMap, misalignment: &AffineParams, transform: &TransformParams, out: &[usize]) -> Result<LabelMap> {
    let coords = transform.dense_map(out)?.homogeneous().matmul(&misalignment.matrix().transpose())?;
    let mut shape = vec![1];
    shape.extend_from_slice(labels.spatial());
    let t = grid_sample_forward(&labels.tensor().reshape(&shape)?, &coords, out, SampleMode::Nearest, Padding::Zeros)?;
    LabelMap::new(t.reshape(out)?)
}

/// One test pair: indices into the subject list and the renders used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub moving: usize,
    pub fixed: usize,
    pub modality_m: usize,
    pub modality_f: usize,
}

/// Random distinct-subject pairs; modalities are drawn independently when
/// `cross_modality` is set and shared otherwise.
pub fn sample_pairs(num_subjects: usize, count: usize, num_modalities: usize, cross_modality: bool, seed: u64) -> Vec<EvalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let moving = rng.random_range(0..num_subjects);
            let mut fixed = rng.random_range(0..num_subjects - 1);
            if fixed >= moving {
                fixed += 1;
            }
            let modality_m = rng.random_range(0..num_modalities);
            let modality_f = if cross_modality { rng.random_range(0..num_modalities) } else { modality_m };
            EvalPair { moving, fixed, modality_m, modality_f }
        })
        .collect()
}

/// Mean Dice per misalignment angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub angles: Vec<f64>,
    pub dice: Vec<f64>,
    /// Dice of the misaligned moving labels without registration.
    pub baseline: Vec<f64>,
}

/// Rotation by exactly `deg` (random sign; random plane in 3D).
fn rotation_by(rng: &mut ChaCha8Rng, dim: usize, deg: f64) -> AffineParams {
    let s = if rng.random_bool(0.5) { deg } else { -deg };
    if dim == 2 {
        rotation(2, 0, 1, s)
    } else {
        let (a, b) = [(1, 2), (0, 2), (0, 1)][rng.random_range(0..3)];
        rotation(3, a, b, s)
    }
}

/// For every angle, rotates each moving render about the grid center,
/// registers it to its fixed partner and scores the warped labels.
pub fn robustness_sweep(
    detector: &dyn KeypointDetector,
    subjects: &[SyntheticSubject],
    pairs: &[EvalPair],
    angles: &[f64],
    kind: TransformKind,
    seed: u64,
) -> Result<RobustnessCurve> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = RobustnessCurve { angles: angles.to_vec(), dice: Vec::new(), baseline: Vec::new() };
    for &angle in angles {
        let (mut sum, mut base) = (0.0, 0.0);
        for p in pairs {
            let (sm, sf) = (&subjects[p.moving], &subjects[p.fixed]);
            let shape = sf.shape().to_vec();
            let a = if angle == 0.0 { AffineParams::identity(shape.len()) } else { rotation_by(&mut rng, shape.len(), angle) };
            let ta = TransformParams::Affine(a.clone());
            let coords = ta.dense_map(&shape)?;
            let moving = grid_sample(sm.modality(p.modality_m), &coords, &shape, SampleMode::Linear, Padding::Border)?;
            let pm = detector.detect_keypoints(&moving)?;
            let qf = detector.detect_keypoints(sf.modality(p.modality_f))?;
            let t = solve_registration(kind, &pm, &qf)?;
            let warped = warp_labels_composite(&sm.labels, &a, &t, &shape)?;
            sum += dice(&warped, &sf.labels)?.mean;
            base += dice(&warp_labels(&sm.labels, &ta, &shape)?, &sf.labels)?.mean;
        }
        curve.dice.push(sum / pairs.len() as f64);
        curve.baseline.push(base / pairs.len() as f64);
    }
    Ok(curve)
}

/// One entry of a λ sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub result: RegistrationResult,
    pub dice: Option<DiceScores>,
}

/// Registers one pair at every λ from a single detection per image.
pub fn lambda_sweep(
    detector: &dyn KeypointDetector,
    moving: &Image,
    fixed: &Image,
    lambdas: &[f64],
    labels: Option<(&LabelMap, &LabelMap)>,
) -> Result<Vec<SweepEntry>> {
    if let Some(&l) = lambdas.iter().find(|&&l| !(l >= 0.0)) {
        return Err(Error::InvalidArgument(format!("lambda {l} < 0")));
    }
    let p = detector.detect_keypoints(moving)?;
    let q = detector.detect_keypoints(fixed)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let result = register_keypoints(TransformKind::Tps { lambda }, moving, p.clone(), fixed.spatial(), q.clone())?;
            let dice = match labels {
                Some((lm, lf)) => Some(dice(&result.warp_labels(lm, fixed.spatial())?, lf)?),
                None => None,
            };
            Ok(SweepEntry { lambda, result, dice })
        })
        .collect()
}

/// `k` in voxel units along each axis of `shape`.
fn to_voxels(k: &[f64], shape: &[usize]) -> Vec<f64> {
    k.iter().zip(shape).map(|(v, &n)| v * n as f64 / 2.0).collect()
}

/// Mean distance in voxels between `a` and `b`, point by point.
pub fn keypoint_error_voxels(a: &KeypointSet, b: &KeypointSet, shape: &[usize]) -> f64 {
    let n = a.len();
    (0..n)
        .map(|i| {
            let (pa, pb) = (to_voxels(a.point(i), shape), to_voxels(b.point(i), shape));
            pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / n as f64
}

/// `img` moved so that content at `p` lands at `A p` (border extension).
pub fn transform_image(img: &Image, a: &AffineParams) -> Result<Image> {
    let coords = TransformParams::Affine(a.inverse()?).dense_map(img.spatial())?;
    grid_sample(img, &coords, img.spatial(), SampleMode::Linear, Padding::Border)
}

/// Mean over `transforms` of the voxel distance between keypoints of the
/// transformed image and transformed keypoints of the original.
pub fn repeatability(detector: &dyn KeypointDetector, img: &Image, transforms: &[AffineParams]) -> Result<f64> {
    if transforms.is_empty() {
        return Err(Error::InvalidArgument("no transforms".into()));
    }
    let k = detector.detect_keypoints(img)?;
    let mut total = 0.0;
    for a in transforms {
        let moved = detector.detect_keypoints(&transform_image(img, a)?)?;
        total += keypoint_error_voxels(&moved, &apply_affine(a, &k)?, img.spatial());
    }
    Ok(total / transforms.len() as f64)
}

/// Random rotations (any angle, in the plane of the first two axes)
/// combined with integer-voxel translations up to 15% of each extent.
pub fn repeatability_transforms(count: usize, shape: &[usize], seed: u64) -> Vec<AffineParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t: Vec<f64> = shape
                .iter()
                .map(|&n| {
                    let m = (0.15 * n as f64).floor() as i64;
                    rng.random_range(-m..=m) as f64 * 2.0 / n as f64
                })
                .collect();
            let r = rotation(shape.len(), 0, 1, rng.random_range(-180.0..=180.0));
            AffineParams::translation(&t).compose(&r).expect("same dimension")
        })
        .collect()
}

/// Subject-by-subject keypoint errors across two modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminability {
    pub matrix: Vec<Vec<f64>>,
    pub same_mean: f64,
    pub diff_mean: f64,
}

/// Mean squared residual of `target − A·source` after the best affine `A`.
pub fn affine_residual_mse(source: &KeypointSet, target: &KeypointSet) -> Result<f64> {
    let a = solve_affine(source, target)?;
    let r = apply_affine(&a, source)?.as_tensor().sub(target.as_tensor())?;
    Ok(r.data().iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

/// Entry `(i, j)` registers subject `j`'s modality-`b` keypoints affinely
/// onto subject `i`'s modality-`a` keypoints and keeps the residual MSE.
pub fn discriminability(detector: &dyn KeypointDetector, subjects: &[SyntheticSubject], modality_a: usize, modality_b: usize) -> Result<Discriminability> {
    let ka = subjects.iter().map(|s| detector.detect_keypoints(s.modality(modality_a))).collect::<Result<Vec<_>>>()?;
    let kb = subjects.iter().map(|s| detector.detect_keypoints(s.modality(modality_b))).collect::<Result<Vec<_>>>()?;
    let s = subjects.len();
    let mut matrix = vec![vec![0.0; s]; s];
    let (mut same, mut diff) = (0.0, 0.0);
    for i in 0..s {
        for j in 0..s {
            let e = affine_residual_mse(&kb[j], &ka[i])?;
            matrix[i][j] = e;
            if i == j {
                same += e;
            } else {
                diff += e;
            }
        }
    }
    let off = (s * s - s).max(1) as f64;
    Ok(Discriminability { matrix, same_mean: same / s as f64, diff_mean: diff / off })
}

/// Mean cross-modality Pearson correlation of one block's feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    /// NaN if no pair had a defined correlation.
    pub mean: f64,
    /// Some pair involved a constant map and was left out.
    pub degenerate: bool,
}

pub fn layer_correlation(weights: &DetectorWeights, renders: &[&Image]) -> Result<Vec<LayerCorrelation>> {
    let maps = renders.iter().map(|r| weights.feature_maps(r)).collect::<Result<Vec<_>>>()?;
    let layers = maps.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(layers);
    for layer in 0..layers {
        let (mut sum, mut count, mut degenerate) = (0.0, 0, false);
        for i in 0..maps.len() {
            for j in i + 1..maps.len() {
                match pearson(maps[i][layer].data(), maps[j][layer].data()) {
                    Some(r) => {
                        sum += r;
                        count += 1;
                    }
                    None => degenerate = true,
                }
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        out.push(LayerCorrelation { layer, mean, degenerate });
    }
    Ok(out)
}

/// SHA-256 of the JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Harness output of one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub curves: BTreeMap<String, RobustnessCurve>,
    pub matrices: BTreeMap<String, Discriminability>,
    pub metrics: BTreeMap<String, f64>,
}
