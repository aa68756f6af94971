//! Training the detector: self-supervised pretraining toward known
//! keypoints, then registration training (supervised soft-Dice, or the
//! unsupervised alternation of cross-subject intensity matching and
//! cross-modality keypoint agreement).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::detector::{DetectorConfig, DetectorWeights};
use crate::error::{shape_err, Error, Result};
use crate::synthdata::{rotation, SyntheticSubject};
use crate::tensor::NdTensor;
use crate::transforms::{AffineParams, KeypointSet, TapeTransform, TransformKind};
use crate::warp::{
    gaussian_smooth, grid_sample_forward, identity_grid, LabelMap, Padding, SampleMode,
};

/// Ranges of the random affine augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationRanges {
    pub rotation_deg: (f64, f64),
    pub translation_voxels: (f64, f64),
    pub scale: (f64, f64),
    pub shear: (f64, f64),
    /// Grid extent the voxel translations refer to.
    pub extent: usize,
}

impl Default for AugmentationRanges {
    fn default() -> Self {
        Self::for_extent(64)
    }
}

impl AugmentationRanges {
    /// Full-range augmentation with the ±15 voxel translation of a 256 grid
    /// rescaled to `extent`.
    pub fn for_extent(extent: usize) -> Self {
        let t = 15.0 / 256.0 * extent as f64;
        Self { rotation_deg: (-180.0, 180.0), translation_voxels: (-t, t), scale: (0.8, 1.2), shear: (-0.1, 0.1), extent }
    }

    pub fn identity() -> Self {
        Self { rotation_deg: (0.0, 0.0), translation_voxels: (0.0, 0.0), scale: (1.0, 1.0), shear: (0.0, 0.0), extent: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("rotation", self.rotation_deg),
            ("translation", self.translation_voxels),
            ("scale", self.scale),
            ("shear", self.shear),
        ] {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.scale.0 <= 0.0 || self.extent == 0 {
            return Err(Error::InvalidArgument("scale must be positive and extent nonzero".into()));
        }
        Ok(())
    }
}

/// Individual parameters of one augmentation draw.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationDraw {
    /// One angle in 2D; angles in the (1,2), (0,2), (0,1) planes in 3D.
    pub rotation_deg: Vec<f64>,
    pub shear: Vec<f64>,
    pub scale: Vec<f64>,
    pub translation_voxels: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

impl AugmentationDraw {
    pub fn sample(rng: &mut ChaCha8Rng, ranges: &AugmentationRanges, dim: usize) -> Result<Self> {
        ranges.validate()?;
        let planes = if dim == 2 { 1 } else { 3 };
        let pairs = dim * (dim - 1) / 2;
        Ok(Self {
            rotation_deg: (0..planes).map(|_| uniform(rng, ranges.rotation_deg)).collect(),
            shear: (0..pairs).map(|_| uniform(rng, ranges.shear)).collect(),
            scale: (0..dim).map(|_| uniform(rng, ranges.scale)).collect(),
            translation_voxels: (0..dim).map(|_| uniform(rng, ranges.translation_voxels)).collect(),
        })
    }

    /// `R · Sh · S` plus the translation, in normalized units.
    pub fn to_affine(&self, extent: usize) -> Result<AffineParams> {
        let dim = self.scale.len();
        let rot = if dim == 2 {
            rotation(2, 0, 1, self.rotation_deg[0])
        } else {
            rotation(3, 0, 1, self.rotation_deg[2])
                .compose(&rotation(3, 0, 2, self.rotation_deg[1]))?
                .compose(&rotation(3, 1, 2, self.rotation_deg[0]))?
        };
        let mut shear = NdTensor::identity(dim);
        let mut k = 0;
        for i in 0..dim {
            for j in i + 1..dim {
                shear.set2(i, j, self.shear[k]);
                k += 1;
            }
        }
        let mut scale = NdTensor::identity(dim);
        for i in 0..dim {
            scale.set2(i, i, self.scale[i]);
        }
        let linear = rot.linear().matmul(&shear)?.matmul(&scale)?;
        let t: Vec<f64> = self.translation_voxels.iter().map(|v| 2.0 * v / extent as f64).collect();
        AffineParams::from_parts(&linear, &t)
    }
}

/// Random affine composed of rotation, shear, scale and translation.
pub fn sample_augmentation(rng: &mut ChaCha8Rng, ranges: &AugmentationRanges, dim: usize) -> Result<AffineParams> {
    AugmentationDraw::sample(rng, ranges, dim)?.to_affine(ranges.extent)
}

/// Distribution of the TPS regularization weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaDistribution {
    Fixed { value: f64 },
    /// `10^u` with `u` uniform in `[exp_lo, exp_hi]`.
    LogUniform { exp_lo: f64, exp_hi: f64 },
}

impl Default for LambdaDistribution {
    fn default() -> Self {
        Self::LogUniform { exp_lo: -4.0, exp_hi: 1.0 }
    }
}

impl LambdaDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Fixed { value } if !(value >= 0.0) => Err(Error::InvalidArgument(format!("lambda {value} < 0"))),
            Self::LogUniform { exp_lo, exp_hi } if !(exp_lo < exp_hi) => {
                Err(Error::InvalidArgument(format!("empty exponent range [{exp_lo}, {exp_hi}]")))
            }
            _ => Ok(()),
        }
    }
}

pub fn sample_lambda(rng: &mut ChaCha8Rng, dist: &LambdaDistribution) -> f64 {
    match *dist {
        LambdaDistribution::Fixed { value } => value,
        LambdaDistribution::LogUniform { exp_lo, exp_hi } => 10f64.powf(rng.random_range(exp_lo..=exp_hi)),
    }
}

/// Transform family used during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformSpec {
    Affine,
    Tps { lambda_dist: LambdaDistribution },
}

impl TransformSpec {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> TransformKind {
        match self {
            Self::Affine => TransformKind::Affine,
            Self::Tps { lambda_dist } => TransformKind::Tps { lambda: sample_lambda(rng, lambda_dist) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    Mse,
    SoftDice,
}

/// Plain-value similarity; see [`Tape::mse`] and [`Tape::soft_dice`].
pub fn similarity_loss(pred: &NdTensor, target: &NdTensor, mode: SimilarityMode) -> Result<f64> {
    let mut tape = Tape::new();
    let (p, t) = (tape.constant(pred.clone()), tape.constant(target.clone()));
    let l = match mode {
        SimilarityMode::Mse => tape.mse(p, t)?,
        SimilarityMode::SoftDice => tape.soft_dice(p, t)?,
    };
    Ok(tape.scalar_value(l))
}

/// `‖k1 − k2‖_F`.
pub fn keypoint_consistency_loss(k1: &KeypointSet, k2: &KeypointSet) -> Result<f64> {
    if k1.as_tensor().shape() != k2.as_tensor().shape() {
        return Err(shape_err("keypoint sets differ in shape"));
    }
    Ok(k1.as_tensor().sub(k2.as_tensor())?.frobenius_norm())
}

/// Smooth displacement `u` stored channel-first as `[D, spatial..]` in
/// normalized units; the warp is `φ(x) = x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    field: NdTensor,
}

impl DisplacementField {
    pub fn zeros(spatial: &[usize]) -> Self {
        let mut shape = vec![spatial.len()];
        shape.extend_from_slice(spatial);
        Self { field: NdTensor::zeros(&shape) }
    }

    pub fn from_channels(field: NdTensor) -> Result<Self> {
        if field.ndim() < 3 || field.shape()[0] != field.ndim() - 1 {
            return Err(shape_err(format!("displacement must be [D, spatial..], got {:?}", field.shape())));
        }
        Ok(Self { field })
    }

    pub fn spatial(&self) -> &[usize] {
        &self.field.shape()[1..]
    }

    pub fn channels(&self) -> &NdTensor {
        &self.field
    }

    /// The field laid out as `spatial × D` (one displacement per voxel).
    pub fn to_grid_last(&self) -> NdTensor {
        let d = self.field.shape()[0];
        let per = self.field.len() / d;
        let mut out = vec![0.0; self.field.len()];
        for a in 0..d {
            for j in 0..per {
                out[j * d + a] = self.field.data()[a * per + j];
            }
        }
        let mut shape = self.spatial().to_vec();
        shape.push(d);
        NdTensor::new(shape, out).unwrap()
    }

    /// `u` at arbitrary normalized points (`[M, D]`), linear with border
    /// extension.
    pub fn sample(&self, points: &NdTensor) -> Result<NdTensor> {
        let m = points.shape()[0];
        let d = self.field.shape()[0];
        let s = grid_sample_forward(&self.field, points, &[m], SampleMode::Linear, Padding::Border)?;
        let mut out = vec![0.0; m * d];
        for a in 0..d {
            for j in 0..m {
                out[j * d + a] = s.data()[a * m + j];
            }
        }
        NdTensor::new(vec![m, d], out)
    }

    /// `φ(points)`.
    pub fn apply(&self, points: &NdTensor) -> Result<NdTensor> {
        points.add(&self.sample(points)?)
    }

    /// Displacement of `self ∘ other`: `u(x) = u_o(x) + u_s(x + u_o(x))`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        let grid = identity_grid(self.spatial());
        let moved = other.apply_grid(&grid)?;
        let us = self.sample(&moved)?;
        let total = moved.sub(&grid)?.add(&us)?;
        Ok(Self { field: grid_last_to_channels(&total, self.spatial()) })
    }

    fn apply_grid(&self, grid: &NdTensor) -> Result<NdTensor> {
        let d = self.field.shape()[0];
        let per = self.field.len() / d;
        let mut out = grid.clone();
        for j in 0..per {
            for a in 0..d {
                out.data_mut()[j * d + a] += self.field.data()[a * per + j];
            }
        }
        Ok(out)
    }

    pub fn max_norm(&self) -> f64 {
        let d = self.field.shape()[0];
        let per = self.field.len() / d;
        (0..per)
            .map(|j| (0..d).map(|a| self.field.data()[a * per + j].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Scaling and squaring of a stationary velocity field.
    pub fn integrate(velocity: &Self, steps: u32) -> Result<Self> {
        let mut u = Self { field: velocity.field.scale(1.0 / f64::powi(2.0, steps as i32)) };
        for _ in 0..steps {
            u = u.compose(&u)?;
        }
        Ok(u)
    }
}

fn grid_last_to_channels(t: &NdTensor, spatial: &[usize]) -> NdTensor {
    let d = spatial.len();
    let per: usize = spatial.iter().product();
    let mut out = vec![0.0; per * d];
    for j in 0..per {
        for a in 0..d {
            out[a * per + j] = t.data()[j * d + a];
        }
    }
    let mut shape = vec![d];
    shape.extend_from_slice(spatial);
    NdTensor::new(shape, out).unwrap()
}

pub const SVF_STEPS: u32 = 6;

/// Random smooth velocity field scaled to `max |v| = magnitude`.
pub fn random_velocity(rng: &mut ChaCha8Rng, grid_shape: &[usize], magnitude: f64, smoothness: f64) -> DisplacementField {
    let d = grid_shape.len();
    let per: usize = grid_shape.iter().product();
    let mut data = Vec::with_capacity(d * per);
    for _ in 0..d {
        let mut ch: Vec<f64> = (0..per).map(|_| StandardNormal.sample(rng)).collect();
        gaussian_smooth(&mut ch, grid_shape, smoothness);
        data.extend(ch);
    }
    let mut shape = vec![d];
    shape.extend_from_slice(grid_shape);
    let mut v = DisplacementField { field: NdTensor::new(shape, data).unwrap() };
    let m = v.max_norm();
    v.field = if m > 0.0 && magnitude > 0.0 { v.field.scale(magnitude / m) } else { v.field.scale(0.0) };
    v
}

/// A random diffeomorphic warp and its inverse.
#[derive(Debug, Clone)]
pub struct NonlinearWarp {
    pub forward: DisplacementField,
    pub inverse: DisplacementField,
}

/// Integrates a random stationary velocity field (and its negation for the
/// inverse) with [`SVF_STEPS`] squaring steps.
pub fn random_nonlinear_warp(
    rng: &mut ChaCha8Rng,
    grid_shape: &[usize],
    magnitude: f64,
    smoothness: f64,
) -> Result<NonlinearWarp> {
    if !(magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!("magnitude {magnitude} < 0")));
    }
    let v = random_velocity(rng, grid_shape, magnitude, smoothness);
    let neg = DisplacementField { field: v.field.scale(-1.0) };
    Ok(NonlinearWarp { forward: DisplacementField::integrate(&v, SVF_STEPS)?, inverse: DisplacementField::integrate(&neg, SVF_STEPS)? })
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<NdTensor>,
    v: Vec<NdTensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn update(&mut self, params: &mut [(String, NdTensor)], grads: &[NdTensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| NdTensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn image_input(img: &NdTensor) -> Result<NdTensor> {
    let per: usize = img.shape()[1..].iter().product();
    let mut shape = vec![1];
    shape.extend_from_slice(&img.shape()[1..]);
    NdTensor::new(shape, img.data()[..per].to_vec())
}

/// Samples `img` at `A(g)` for every voxel `g`, with border extension.
fn augment(img: &NdTensor, a: &AffineParams, padding: Padding) -> Result<NdTensor> {
    let spatial = img.shape()[1..].to_vec();
    let coords = identity_grid(&spatial).homogeneous().matmul(&a.matrix().transpose())?;
    grid_sample_forward(img, &coords, &spatial, SampleMode::Linear, padding)
}

fn augment_labels(labels: &LabelMap, a: &AffineParams) -> Result<NdTensor> {
    let spatial = labels.spatial().to_vec();
    let coords = identity_grid(&spatial).homogeneous().matmul(&a.matrix().transpose())?;
    grid_sample_forward(&labels.one_hot(labels.num_labels()), &coords, &spatial, SampleMode::Linear, Padding::Zeros)
}

/// One prepared pretraining example.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub augmentation: AffineParams,
    pub warp: NonlinearWarp,
    /// Deformed renders, `[1, spatial..]` each.
    pub images: Vec<NdTensor>,
    /// `φ(A · P0)`.
    pub targets: NdTensor,
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub augmentation: AugmentationRanges,
    pub warp_magnitude: f64,
    /// In voxels; zero means `extent / 16`.
    pub warp_smoothness: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { augmentation: AugmentationRanges::default(), warp_magnitude: 0.1, warp_smoothness: 0.0 }
    }
}

/// Base keypoints drawn uniformly from the voxels of `mask` with a nonzero
/// label (or from the whole grid without a mask).
pub fn sample_base_keypoints(rng: &mut ChaCha8Rng, n: usize, spatial: &[usize], mask: Option<&LabelMap>) -> Result<KeypointSet> {
    let grid = identity_grid(spatial);
    let d = spatial.len();
    let candidates: Vec<usize> = match mask {
        Some(m) => (0..grid.shape()[0]).filter(|&j| m.tensor().data()[j] > 0.0).collect(),
        None => (0..grid.shape()[0]).collect(),
    };
    if candidates.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let j = candidates[rng.random_range(0..candidates.len())];
        rows.push(grid.data()[j * d..(j + 1) * d].to_vec());
    }
    KeypointSet::from_rows(&rows)
}

/// Draws `A` and `φ`, deforms every render so that content at `p` moves to
/// `φ(A p)`, and maps `P0` alike.
pub fn prepare_pretrain_sample(
    rng: &mut ChaCha8Rng,
    renders: &[&NdTensor],
    base: &KeypointSet,
    cfg: &PretrainConfig,
) -> Result<PretrainSample> {
    let spatial = renders[0].shape()[1..].to_vec();
    let extent = spatial[0];
    let a = sample_augmentation(rng, &cfg.augmentation, spatial.len())?;
    let sigma = if cfg.warp_smoothness > 0.0 { cfg.warp_smoothness } else { extent as f64 / 16.0 };
    let warp = random_nonlinear_warp(rng, &spatial, cfg.warp_magnitude, sigma)?;
    // y(g) = x(A⁻¹ φ⁻¹(g))
    let grid = identity_grid(&spatial);
    let pre = warp.inverse.apply(&grid)?;
    let coords = pre.homogeneous().matmul(&a.inverse()?.matrix().transpose())?;
    let images = renders
        .iter()
        .map(|x| grid_sample_forward(x, &coords, &spatial, SampleMode::Linear, Padding::Border).and_then(|t| image_input(&t)))
        .collect::<Result<Vec<_>>>()?;
    let moved = base.as_tensor().homogeneous().matmul(&a.matrix().transpose())?;
    let targets = warp.forward.apply(&moved)?;
    Ok(PretrainSample { augmentation: a, warp, images, targets })
}

fn squared_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let s = tape.square(d);
    Ok(tape.sum(s))
}

/// `Σ_modalities ‖φ(A P0) − f_w(x')‖²` on the tape.
pub fn pretrain_loss(tape: &mut Tape, weights: &DetectorWeights, params: &[Var], sample: &PretrainSample) -> Result<Var> {
    let target = tape.constant(sample.targets.clone());
    let mut total: Option<Var> = None;
    for img in &sample.images {
        let x = tape.constant(img.clone());
        let kp = weights.forward(tape, params, x)?.keypoints;
        let l = squared_distance(tape, kp, target)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no renders".into()))
}

/// Training objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Supervised,
    Unsupervised,
}

/// How the two unsupervised objectives are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Odd and even steps take turns.
    Alternate,
    /// Both losses, equally weighted, every step.
    Sum,
}

/// A prepared training example.
#[derive(Debug, Clone)]
pub enum Batch {
    /// Cross-subject, same modality, scored by intensity MSE after warping.
    CrossSubject { moving: NdTensor, fixed: NdTensor },
    /// Same subject, two modalities. `augmented(g) = other(B(g))`, so the
    /// keypoints of `augmented` should be `B⁻¹` of those of `reference`.
    CrossModality { augmented: NdTensor, reference: NdTensor, inverse: AffineParams },
    /// Soft-Dice between warped moving labels and fixed labels.
    Supervised { moving: NdTensor, moving_labels: NdTensor, fixed: NdTensor, fixed_labels: NdTensor },
}

fn warp_on_tape(tape: &mut Tape, t: TapeTransform, img: Var, spatial: &[usize]) -> Result<Var> {
    let grid = tape.constant(identity_grid(spatial));
    let coords = t.map(tape, grid)?;
    tape.grid_sample(img, coords, spatial, SampleMode::Linear, Padding::Zeros)
}

/// Builds the loss of `batch` on the tape.
pub fn batch_loss(
    tape: &mut Tape,
    weights: &DetectorWeights,
    params: &[Var],
    batch: &Batch,
    kind: TransformKind,
) -> Result<Var> {
    match batch {
        Batch::CrossSubject { moving, fixed } => {
            let spatial = fixed.shape()[1..].to_vec();
            let (xm, xf) = (tape.constant(moving.clone()), tape.constant(fixed.clone()));
            let p = weights.forward(tape, params, xm)?.keypoints;
            let q = weights.forward(tape, params, xf)?.keypoints;
            let t = TapeTransform::solve(tape, kind, q, p)?;
            let warped = warp_on_tape(tape, t, xm, &spatial)?;
            tape.mse(warped, xf)
        }
        Batch::CrossModality { augmented, reference, inverse } => {
            let (xa, xr) = (tape.constant(augmented.clone()), tape.constant(reference.clone()));
            let ka = weights.forward(tape, params, xa)?.keypoints;
            let kr = weights.forward(tape, params, xr)?.keypoints;
            let binv = tape.constant(inverse.matrix().clone());
            let mapped = TapeTransform::Affine(binv).map(tape, kr)?;
            tape.frobenius_distance(ka, mapped)
        }
        Batch::Supervised { moving, moving_labels, fixed, fixed_labels } => {
            let spatial = fixed.shape()[1..].to_vec();
            let (xm, xf) = (tape.constant(moving.clone()), tape.constant(fixed.clone()));
            let p = weights.forward(tape, params, xm)?.keypoints;
            let q = weights.forward(tape, params, xf)?.keypoints;
            let t = TapeTransform::solve(tape, kind, q, p)?;
            let lm = tape.constant(moving_labels.clone());
            let warped = warp_on_tape(tape, t, lm, &spatial)?;
            let lf = tape.constant(fixed_labels.clone());
            tape.soft_dice(warped, lf)
        }
    }
}

/// Differentiates `loss` with respect to the weights and applies one update.
fn optimize(
    weights: &mut DetectorWeights,
    adam: &mut Adam,
    step: usize,
    build: impl Fn(&mut Tape, &DetectorWeights, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = weights.leaves(&mut tape);
    let root = build(&mut tape, weights, &params)?;
    let loss = tape.scalar_value(root);
    if !loss.is_finite() {
        return Err(Error::DivergedLoss { step, value: loss });
    }
    let grads = tape.backward(root)?;
    let g: Vec<NdTensor> = params.iter().map(|&p| grads.wrt(&tape, p)).collect();
    if g.iter().any(|t| !t.all_finite()) {
        return Err(Error::DivergedLoss { step, value: f64::NAN });
    }
    adam.update(&mut weights.params, &g);
    Ok(loss)
}

/// One optimizer update; the loss is the sum over `groups` of the mean
/// loss within each group.
pub fn train_step(
    weights: &mut DetectorWeights,
    adam: &mut Adam,
    groups: &[Vec<Batch>],
    spec: &TransformSpec,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<f64> {
    let kind = spec.sample(rng);
    optimize(weights, adam, step, |tape, w, params| {
        let mut total: Option<Var> = None;
        for group in groups {
            for b in group {
                let l = batch_loss(tape, w, params, b, kind)?;
                let l = tape.scale(l, 1.0 / group.len() as f64);
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
        }
        total.ok_or_else(|| Error::InvalidArgument("empty batch list".into()))
    })
}

/// Full training configuration, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub transform: TransformSpec,
    pub schedule: Schedule,
    pub pretrain_steps: usize,
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Examples per optimizer step, in both phases.
    pub batch_size: usize,
    pub augmentation: AugmentationRanges,
    pub pretrain: PretrainConfig,
    pub detector: DetectorConfig,
    pub dataset: Option<PathBuf>,
    /// Number of synthetic training subjects when no dataset is given.
    pub num_subjects: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Unsupervised,
            transform: TransformSpec::Affine,
            schedule: Schedule::Alternate,
            pretrain_steps: 200,
            steps: 500,
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 1,
            augmentation: AugmentationRanges::default(),
            pretrain: PretrainConfig::default(),
            detector: DetectorConfig::default(),
            dataset: None,
            num_subjects: 40,
            checkpoint_every: 0,
        }
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
}

/// Owns the weights, optimizer and random stream of one training run.
pub struct Trainer {
    pub weights: DetectorWeights,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub trace: Vec<TraceEntry>,
    checkpoint: Option<(PathBuf, usize)>,
}

impl Trainer {
    pub fn new(weights: DetectorWeights, learning_rate: f64, seed: u64) -> Self {
        Self { weights, adam: Adam::new(learning_rate), rng: ChaCha8Rng::seed_from_u64(seed), trace: Vec::new(), checkpoint: None }
    }

    /// Saves weights and the loss trace into `dir` every `every` steps.
    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>, every: usize) -> Self {
        if every > 0 {
            self.checkpoint = Some((dir.into(), every));
        }
        self
    }

    fn record(&mut self, phase: &str, step: usize, loss: f64) -> Result<()> {
        self.trace.push(TraceEntry { phase: phase.into(), step, loss });
        if let Some((dir, every)) = &self.checkpoint {
            if (step + 1) % every == 0 {
                save_checkpoint(dir, &format!("{phase}-{:06}", step + 1), &self.weights, &self.trace)?;
            }
        }
        Ok(())
    }

    /// Pretrains toward `φ(A · base)` on random subjects, `batch_size`
    /// samples per step; returns the losses.
    pub fn pretrain(
        &mut self,
        subjects: &[SyntheticSubject],
        base: &KeypointSet,
        steps: usize,
        batch_size: usize,
        cfg: &PretrainConfig,
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut samples = Vec::with_capacity(batch_size);
            for _ in 0..batch_size.max(1) {
                let s = &subjects[self.rng.random_range(0..subjects.len())];
                let renders: Vec<&NdTensor> = s.modalities.iter().map(|m| m.tensor()).collect();
                samples.push(prepare_pretrain_sample(&mut self.rng, &renders, base, cfg)?);
            }
            let loss = optimize(&mut self.weights, &mut self.adam, step, |t, w, p| {
                let mut total: Option<Var> = None;
                for sample in &samples {
                    let l = pretrain_loss(t, w, p, sample)?;
                    let l = t.scale(l, 1.0 / samples.len() as f64);
                    total = Some(match total {
                        Some(x) => t.add(x, l)?,
                        None => l,
                    });
                }
                Ok(total.expect("at least one sample"))
            })?;
            self.record("pretrain", step, loss)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Cross-subject pair in one random modality; the moving side is augmented.
    pub fn sample_cross_subject(&mut self, subjects: &[SyntheticSubject], aug: &AugmentationRanges) -> Result<Batch> {
        let i = self.rng.random_range(0..subjects.len());
        let mut j = self.rng.random_range(0..subjects.len() - 1);
        if j >= i {
            j += 1;
        }
        let k = self.rng.random_range(0..subjects[i].modalities.len());
        let b = sample_augmentation(&mut self.rng, aug, subjects[i].shape().len())?;
        let moving = augment(subjects[i].modality(k).tensor(), &b, Padding::Border)?;
        Ok(Batch::CrossSubject { moving: image_input(&moving)?, fixed: image_input(subjects[j].modality(k).tensor())? })
    }

    /// Same subject in two modalities, one side augmented by a known affine.
    pub fn sample_cross_modality(&mut self, subjects: &[SyntheticSubject], aug: &AugmentationRanges) -> Result<Batch> {
        let s = &subjects[self.rng.random_range(0..subjects.len())];
        let nm = s.modalities.len();
        let k1 = self.rng.random_range(0..nm);
        let k2 = (k1 + self.rng.random_range(1..nm)) % nm;
        let b = sample_augmentation(&mut self.rng, aug, s.shape().len())?;
        let augmented = augment(s.modality(k1).tensor(), &b, Padding::Border)?;
        Ok(Batch::CrossModality {
            augmented: image_input(&augmented)?,
            reference: image_input(s.modality(k2).tensor())?,
            inverse: b.inverse()?,
        })
    }

    /// Cross-subject pair with labels; the moving side is augmented.
    pub fn sample_supervised(&mut self, subjects: &[SyntheticSubject], aug: &AugmentationRanges) -> Result<Batch> {
        let i = self.rng.random_range(0..subjects.len());
        let mut j = self.rng.random_range(0..subjects.len() - 1);
        if j >= i {
            j += 1;
        }
        let k = self.rng.random_range(0..subjects[i].modalities.len());
        let b = sample_augmentation(&mut self.rng, aug, subjects[i].shape().len())?;
        let moving = image_input(&augment(subjects[i].modality(k).tensor(), &b, Padding::Border)?)?;
        let moving_labels = augment_labels(&subjects[i].labels, &b)?;
        let fixed = image_input(subjects[j].modality(k).tensor())?;
        let fixed_labels = subjects[j].labels.one_hot(moving_labels.shape()[0]);
        Ok(Batch::Supervised { moving, moving_labels, fixed, fixed_labels })
    }

    fn repeat(&mut self, n: usize, mut f: impl FnMut(&mut Self) -> Result<Batch>) -> Result<Vec<Batch>> {
        (0..n).map(|_| f(self)).collect()
    }

    /// Registration training; returns the per-step losses.
    pub fn train(&mut self, subjects: &[SyntheticSubject], cfg: &TrainConfig) -> Result<Vec<f64>> {
        if cfg.steps > 0 && subjects.len() < 2 {
            return Err(Error::InvalidArgument("training needs at least two subjects".into()));
        }
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let n = cfg.batch_size.max(1);
            let groups = match (cfg.variant, cfg.schedule) {
                (Variant::Supervised, _) => vec![self.repeat(n, |t| t.sample_supervised(subjects, &cfg.augmentation))?],
                (Variant::Unsupervised, Schedule::Alternate) if step % 2 == 0 => {
                    vec![self.repeat(n, |t| t.sample_cross_subject(subjects, &cfg.augmentation))?]
                }
                (Variant::Unsupervised, Schedule::Alternate) => {
                    vec![self.repeat(n, |t| t.sample_cross_modality(subjects, &cfg.augmentation))?]
                }
                (Variant::Unsupervised, Schedule::Sum) => vec![
                    self.repeat(n, |t| t.sample_cross_subject(subjects, &cfg.augmentation))?,
                    self.repeat(n, |t| t.sample_cross_modality(subjects, &cfg.augmentation))?,
                ],
            };
            let loss = train_step(&mut self.weights, &mut self.adam, &groups, &cfg.transform, &mut self.rng, step)?;
            self.record("train", step, loss)?;
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Fresh weights, pretraining and registration training as configured.
pub fn run_training(cfg: &TrainConfig, subjects: &[SyntheticSubject], checkpoints: Option<&Path>) -> Result<Trainer> {
    cfg.detector.validate()?;
    run_training_from(crate::detector::init_weights(&cfg.detector, cfg.seed)?, cfg, subjects, checkpoints)
}

/// Pretraining and registration training starting from `weights`. Base
/// keypoints are drawn from the foreground of the first subject.
pub fn run_training_from(
    weights: DetectorWeights,
    cfg: &TrainConfig,
    subjects: &[SyntheticSubject],
    checkpoints: Option<&Path>,
) -> Result<Trainer> {
    if let TransformSpec::Tps { lambda_dist } = &cfg.transform {
        lambda_dist.validate()?;
    }
    cfg.augmentation.validate()?;
    let mut trainer = Trainer::new(weights, cfg.learning_rate, cfg.seed);
    if let Some(dir) = checkpoints {
        trainer = trainer.with_checkpoints(dir, cfg.checkpoint_every);
    }
    if cfg.pretrain_steps > 0 {
        let first = subjects.first().ok_or_else(|| Error::InvalidArgument("no subjects".into()))?;
        let base = sample_base_keypoints(&mut trainer.rng, trainer.weights.config().num_keypoints, first.shape(), Some(&first.labels))?;
        trainer.pretrain(subjects, &base, cfg.pretrain_steps, cfg.batch_size, &cfg.pretrain)?;
    }
    trainer.train(subjects, cfg)?;
    Ok(trainer)
}

/// Writes `<dir>/<tag>.json` weights and `<dir>/<tag>.trace.json`.
pub fn save_checkpoint(dir: &Path, tag: &str, weights: &DetectorWeights, trace: &[TraceEntry]) -> Result<()> {
    fs::create_dir_all(dir)?;
    weights.save(dir.join(format!("{tag}.json")))?;
    fs::write(dir.join(format!("{tag}.trace.json")), serde_json::to_string(trace)?)?;
    Ok(())
}

/// Mean pairwise distance between keypoints of one set.
pub fn keypoint_spread(k: &KeypointSet) -> f64 {
    let n = k.len();
    let mut s = 0.0;
    let mut c = 0;
    for i in 0..n {
        for j in i + 1..n {
            s += k.point(i).iter().zip(k.point(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            c += 1;
        }
    }
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::detector::init_weights;
    use crate::synthdata::generate_cohort;

    #[test]
    fn similarity_losses_by_hand() {
        let a = NdTensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let b = NdTensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(similarity_loss(&a, &b, SimilarityMode::Mse).unwrap(), 1.0);
        assert_eq!(similarity_loss(&b, &b, SimilarityMode::Mse).unwrap(), 0.0);
        let m1 = NdTensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let m2 = NdTensor::new(vec![1, 4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(similarity_loss(&m1, &m1, SimilarityMode::SoftDice).unwrap().abs() < 1e-6);
        assert!((similarity_loss(&m1, &m2, SimilarityMode::SoftDice).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn keypoint_consistency_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k1 = KeypointSet::new(NdTensor::new(vec![6, 2], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        assert_eq!(keypoint_consistency_loss(&k1, &k1).unwrap(), 0.0);
        let shifted = KeypointSet::new(k1.as_tensor().map(|v| v + 0.1)).unwrap();
        assert!((keypoint_consistency_loss(&k1, &shifted).unwrap() - (12f64).sqrt() * 0.1).abs() < 1e-12);
        let k2 = KeypointSet::new(NdTensor::new(vec![6, 2], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        let mut s = 0.0;
        for i in 0..12 {
            s += (k1.as_tensor().data()[i] - k2.as_tensor().data()[i]).powi(2);
        }
        assert!((keypoint_consistency_loss(&k1, &k2).unwrap() - s.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn augmentation_ranges_are_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_augmentation(&mut rng, &AugmentationRanges::identity(), 2).unwrap(), AffineParams::identity(2));
        let rot_only = AugmentationRanges { rotation_deg: (-180.0, 180.0), ..AugmentationRanges::identity() };
        for _ in 0..100 {
            assert!((sample_augmentation(&mut rng, &rot_only, 2).unwrap().linear_det() - 1.0).abs() < 1e-9);
        }
        let r = AugmentationRanges::default();
        let mut lo = [f64::INFINITY; 4];
        let mut hi = [f64::NEG_INFINITY; 4];
        for _ in 0..10_000 {
            let d = AugmentationDraw::sample(&mut rng, &r, 2).unwrap();
            for (k, v) in [d.rotation_deg[0], d.translation_voxels[0], d.scale[0], d.shear[0]].into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        let ranges = [r.rotation_deg, r.translation_voxels, r.scale, r.shear];
        for k in 0..4 {
            assert!(lo[k] >= ranges[k].0 && hi[k] <= ranges[k].1);
            // the draws also reach close to both ends
            assert!(lo[k] - ranges[k].0 < 0.01 * (ranges[k].1 - ranges[k].0));
            assert!(ranges[k].1 - hi[k] < 0.01 * (ranges[k].1 - ranges[k].0));
        }
        assert!((r.translation_voxels.1 - 3.75).abs() < 1e-12);
    }

    #[test]
    fn lambda_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_lambda(&mut rng, &LambdaDistribution::Fixed { value: 0.0 }), 0.0);
        let dist = LambdaDistribution::default();
        let mut logs: Vec<f64> = (0..10_000).map(|_| sample_lambda(&mut rng, &dist)).inspect(|&l| assert!((1e-4..=10.0).contains(&l))).map(f64::log10).collect();
        logs.sort_by(f64::total_cmp);
        // Kolmogorov–Smirnov statistic against U(−4, 1)
        let n = logs.len() as f64;
        let ks = logs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x + 4.0) / 5.0;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "{ks}");
        assert!(LambdaDistribution::LogUniform { exp_lo: 1.0, exp_hi: 1.0 }.validate().is_err());
        assert!(LambdaDistribution::Fixed { value: -1.0 }.validate().is_err());
    }

    #[test]
    fn zero_magnitude_warp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_nonlinear_warp(&mut rng, &[16, 16], 0.0, 2.0).unwrap();
        assert_eq!(w.forward.channels().max_abs(), 0.0);
        assert_eq!(w.inverse.channels().max_abs(), 0.0);
    }

    #[test]
    fn svf_integration_is_a_semigroup() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_velocity(&mut rng, &[64, 64], 0.1, 4.0);
        let half = DisplacementField::from_channels(v.channels().scale(0.5)).unwrap();
        let full = DisplacementField::integrate(&v, SVF_STEPS).unwrap();
        let h = DisplacementField::integrate(&half, SVF_STEPS).unwrap();
        let twice = h.compose(&h).unwrap();
        let interior_max = |t: &NdTensor| {
            let mut m: f64 = 0.0;
            for r in 8..56 {
                for c in 8..56 {
                    for k in 0..2 {
                        m = m.max(t.data()[(r * 64 + c) * 2 + k].abs());
                    }
                }
            }
            m
        };
        let err = interior_max(&full.to_grid_last().sub(&twice.to_grid_last()).unwrap());
        assert!(err < 1e-2, "{err}");
        // the inverse warp undoes the forward one in the interior
        let w = NonlinearWarp { forward: full, inverse: DisplacementField::integrate(&DisplacementField::from_channels(v.channels().scale(-1.0)).unwrap(), SVF_STEPS).unwrap() };
        let round = w.forward.compose(&w.inverse).unwrap();
        let err = interior_max(&round.to_grid_last());
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn svf_is_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let magnitude = 0.1;
        let w = random_nonlinear_warp(&mut rng, &[64, 64], magnitude, 4.0).unwrap();
        let f = w.forward.channels();
        let mut g: f64 = 0.0;
        for k in 0..2 {
            for r in 0..64 {
                for c in 0..64 {
                    let v = f.data()[k * 4096 + r * 64 + c];
                    if r + 1 < 64 {
                        g = g.max((f.data()[k * 4096 + (r + 1) * 64 + c] - v).abs());
                    }
                    if c + 1 < 64 {
                        g = g.max((f.data()[k * 4096 + r * 64 + c + 1] - v).abs());
                    }
                }
            }
        }
        assert!(g < magnitude / 2.0, "{g}");
        assert!(w.forward.max_norm() > 0.5 * magnitude);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = vec![("w".to_string(), NdTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())];
        let mut adam = Adam::new(1e-3);
        adam.update(&mut params, &[NdTensor::new(vec![3], vec![0.5, -2.0, 0.0]).unwrap()]);
        let p = params[0].1.data();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 3.0);
    }

    fn tiny_config() -> DetectorConfig {
        DetectorConfig { num_keypoints: 6, num_blocks: 2, channels: vec![3, 4], input_shape: vec![16, 16], ..DetectorConfig::default() }
    }

    #[test]
    fn zero_pretrain_steps_leave_weights_unchanged() {
        let subjects = generate_cohort(0, 2, &[16, 16]).unwrap();
        let w = init_weights(&tiny_config(), 0).unwrap();
        let mut t = Trainer::new(w.clone(), 1e-3, 0);
        let base = sample_base_keypoints(&mut ChaCha8Rng::seed_from_u64(0), 6, &[16, 16], None).unwrap();
        assert!(t.pretrain(&subjects, &base, 0, 1, &PretrainConfig::default()).unwrap().is_empty());
        assert_eq!(t.weights, w);
    }

    #[test]
    fn full_step_gradient_matches_finite_differences() {
        let subjects = generate_cohort(0, 3, &[16, 16]).unwrap();
        let w = init_weights(&tiny_config(), 3).unwrap();
        let mut t = Trainer::new(w.clone(), 1e-3, 1);
        let aug = AugmentationRanges { rotation_deg: (-20.0, 20.0), ..AugmentationRanges::identity() };
        let batches = [t.sample_cross_subject(&subjects, &aug).unwrap(), t.sample_cross_modality(&subjects, &aug).unwrap()];
        for batch in &batches {
            for kind in [TransformKind::Affine, TransformKind::Tps { lambda: 0.1 }] {
                // differentiate with respect to the first conv kernel only
                let kernel = w.params[0].1.clone();
                let rest: Vec<NdTensor> = w.params[1..].iter().map(|(_, p)| p.clone()).collect();
                let rep = gradcheck(
                    |tape, v| {
                        let mut params = vec![v[0]];
                        params.extend(rest.iter().map(|p| tape.constant(p.clone())));
                        batch_loss(tape, &w, &params, batch, kind)
                    },
                    &[kernel],
                    1e-6,
                    1e-2,
                )
                .unwrap();
                assert!(rep.pass, "{rep:?}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let subjects = generate_cohort(0, 3, &[16, 16]).unwrap();
        let cfg = TrainConfig { steps: 4, detector: tiny_config(), augmentation: AugmentationRanges::for_extent(16), ..TrainConfig::default() };
        let run = || {
            let mut t = Trainer::new(init_weights(&cfg.detector, 0).unwrap(), 1e-3, 9);
            t.train(&subjects, &cfg).unwrap();
            t.weights
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TrainConfig { transform: TransformSpec::Tps { lambda_dist: LambdaDistribution::default() }, ..TrainConfig::default() };
        let s = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"steps": 3, "variant": "supervised"}"#).unwrap();
        assert_eq!(partial.steps, 3);
        assert_eq!(partial.variant, Variant::Supervised);
    }
}
