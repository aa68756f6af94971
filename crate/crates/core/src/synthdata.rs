//! Synthetic multi-modal phantoms.
//!
//! A subject is an elliptical ring enclosing a core with two round blobs of
//! different sizes (labels: 0 background, 1 ring, 2 large blob, 3 small blob,
//! 4 core). Every subject is rendered under three contrasts that share one
//! label map; per-subject jitter of shape and placement provides anatomical
//! variation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_kmt, DType};
use crate::tensor::NdTensor;
use crate::transforms::{AffineParams, TransformParams};
use crate::training::{sample_augmentation, AugmentationRanges};
use crate::warp::{gaussian_smooth, normalized_coord, warp_image, warp_labels, Image, LabelMap};

pub const NUM_LABELS: usize = 5;
pub const NUM_MODALITIES: usize = 3;

/// Intensity of each label (background, ring, large blob, small blob, core)
/// per modality. Modality 1 inverts the ring/core ordering and brightens the
/// background.
const CONTRAST: [[f64; NUM_LABELS]; NUM_MODALITIES] = [
    [0.05, 0.9, 0.25, 0.6, 0.45],
    [0.55, 0.1, 0.95, 0.3, 0.8],
    [0.15, 0.55, 0.75, 0.95, 0.3],
];

const NOISE_SIGMA: f64 = 0.02;
const BLUR_SIGMA: f64 = 0.6;
const BIAS_AMPLITUDE: f64 = 0.08;

/// Randomized shape parameters in normalized coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Geometry {
    center: Vec<f64>,
    /// Outer semi-axes of the ring.
    axes: Vec<f64>,
    /// In-plane orientation of the ring (radians, axes 0/1).
    angle: f64,
    /// Ring inner boundary as a fraction of the outer one.
    inner: f64,
    blob_centers: [Vec<f64>; 2],
    blob_radii: [f64; 2],
}

impl Geometry {
    fn sample(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let mut j = |s: f64| rng.random_range(-s..s);
        let base_axes = [0.62, 0.55, 0.58];
        let center: Vec<f64> = (0..dim).map(|_| j(0.03)).collect();
        let axes = (0..dim).map(|a| base_axes[a] * (1.0 + j(0.05))).collect();
        let angle = j(0.25);
        let inner = 0.7 + j(0.02);
        let b0 = [-0.12, 0.14, 0.05];
        let b1 = [0.17, -0.13, -0.08];
        let blob_centers = [
            (0..dim).map(|a| b0[a] + j(0.03)).collect(),
            (0..dim).map(|a| b1[a] + j(0.03)).collect(),
        ];
        let blob_radii = [0.15 * (1.0 + j(0.1)), 0.09 * (1.0 + j(0.1))];
        Self { center, axes, angle, inner, blob_centers, blob_radii }
    }

    fn label_at(&self, x: &[f64]) -> usize {
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let (s, c) = self.angle.sin_cos();
        let mut r = d.clone();
        r[0] = c * d[0] + s * d[1];
        r[1] = -s * d[0] + c * d[1];
        let e: f64 = r.iter().zip(&self.axes).map(|(v, a)| (v / a) * (v / a)).sum();
        if e > 1.0 {
            return 0;
        }
        if e > self.inner * self.inner {
            return 1;
        }
        for (k, (bc, br)) in self.blob_centers.iter().zip(self.blob_radii).enumerate() {
            let q: f64 = d.iter().zip(bc).map(|(v, b)| (v - b) * (v - b)).sum();
            if q <= br * br {
                return 2 + k;
            }
        }
        4
    }
}

/// One phantom with its shared labels and three renders.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubject {
    pub id: String,
    pub seed: u64,
    pub labels: LabelMap,
    pub modalities: Vec<Image>,
}

impl SyntheticSubject {
    pub fn shape(&self) -> &[usize] {
        self.labels.spatial()
    }

    pub fn modality(&self, k: usize) -> &Image {
        &self.modalities[k]
    }
}

pub fn subject_id(seed: u64) -> String {
    format!("s{seed:04}")
}

fn for_each_voxel(shape: &[usize], mut f: impl FnMut(usize, &[f64])) {
    let m: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut x = vec![0.0; shape.len()];
    for j in 0..m {
        for a in 0..shape.len() {
            x[a] = normalized_coord(idx[a], shape[a]);
        }
        f(j, &x);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Deterministic phantom for `seed` on a grid of `shape` (2 or 3 axes).
pub fn generate_subject(seed: u64, shape: &[usize]) -> Result<SyntheticSubject> {
    if !(2..=3).contains(&shape.len()) || shape.iter().any(|&n| n < 8) {
        return Err(Error::InvalidArgument(format!("phantom shape {shape:?} must be 2D/3D, extents ≥ 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::sample(&mut rng, shape.len());
    let m: usize = shape.iter().product();
    let mut labels = vec![0.0; m];
    for_each_voxel(shape, |j, x| labels[j] = geo.label_at(x) as f64);
    let labels = LabelMap::new(NdTensor::new(shape.to_vec(), labels)?)?;
    let modalities = (0..NUM_MODALITIES)
        .map(|k| render_modality(&labels, seed, k))
        .collect::<Result<_>>()?;
    Ok(SyntheticSubject { id: subject_id(seed), seed, labels, modalities })
}

/// Renders `labels` under contrast `modality` with blur, a smooth
/// multiplicative bias field and Gaussian noise, clipped to `[0, 1]`.
pub fn render_modality(labels: &LabelMap, seed: u64, modality: usize) -> Result<Image> {
    if modality >= NUM_MODALITIES {
        return Err(Error::InvalidArgument(format!("modality {modality} ≥ {NUM_MODALITIES}")));
    }
    let shape = labels.spatial().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(modality as u64 + 1)));
    let mut data: Vec<f64> =
        labels.tensor().data().iter().map(|&l| CONTRAST[modality][l as usize]).collect();
    gaussian_smooth(&mut data, &shape, BLUR_SIGMA);
    let coef: Vec<f64> = (0..2 * shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let d = shape.len();
    for_each_voxel(&shape, |j, x| {
        let mut b = 0.0;
        for a in 0..d {
            b += coef[a] * x[a] + coef[d + a] * (x[a] * x[a] - 1.0 / 3.0);
        }
        let v = data[j] * (1.0 + BIAS_AMPLITUDE * b / d as f64) + noise.sample(&mut rng);
        data[j] = v.clamp(0.0, 1.0);
    });
    Image::new(NdTensor::new(std::iter::once(1).chain(shape.iter().copied()).collect(), data)?)
}

/// Rotation by `deg` degrees in the plane of axes `a` and `b`.
pub fn rotation(dim: usize, a: usize, b: usize, deg: f64) -> AffineParams {
    let (s, c) = deg.to_radians().sin_cos();
    let mut m = NdTensor::identity(dim);
    m.set2(a, a, c);
    m.set2(a, b, -s);
    m.set2(b, a, s);
    m.set2(b, b, c);
    AffineParams::from_parts(&m, &vec![0.0; dim]).expect("square block")
}

/// Random rotation of up to `rotation_deg` (one in-plane angle in 2D; one to
/// three axes in 3D), optionally composed with an extra random affine.
pub fn sample_misalignment(
    dim: usize,
    rotation_deg: f64,
    extra: Option<&AugmentationRanges>,
    rng: &mut ChaCha8Rng,
) -> Result<AffineParams> {
    if !(0.0..=180.0).contains(&rotation_deg) {
        return Err(Error::InvalidArgument(format!("rotation {rotation_deg} outside [0, 180]")));
    }
    let draw = |rng: &mut ChaCha8Rng| {
        if rotation_deg > 0.0 {
            rng.random_range(-rotation_deg..=rotation_deg)
        } else {
            0.0
        }
    };
    let mut a = AffineParams::identity(dim);
    if dim == 2 {
        a = rotation(2, 0, 1, draw(rng));
    } else {
        let planes = [(1, 2), (0, 2), (0, 1)];
        let count = rng.random_range(1..=3);
        let mut order = [0, 1, 2];
        order.shuffle(rng);
        for &p in &order[..count] {
            let (i, j) = planes[p];
            a = rotation(3, i, j, draw(rng)).compose(&a)?;
        }
    }
    if let Some(r) = extra {
        a = sample_augmentation(rng, r, dim)?.compose(&a)?;
    }
    Ok(a)
}

/// Misaligns one render of `subject`: the returned image is
/// `warp_image(x, A)` for the returned ground-truth affine `A`, and the
/// labels are warped alike.
pub fn misalign(
    subject: &SyntheticSubject,
    modality: usize,
    rotation_deg: f64,
    extra: Option<&AugmentationRanges>,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, LabelMap, AffineParams)> {
    let shape = subject.shape().to_vec();
    let a = sample_misalignment(shape.len(), rotation_deg, extra, rng)?;
    let t = TransformParams::Affine(a.clone());
    let img = warp_image(subject.modality(modality), &t, &shape)?;
    let labels = warp_labels(&subject.labels, &t, &shape)?;
    Ok((img, labels, a))
}

#[derive(Debug, Serialize, Deserialize)]
struct SubjectMeta {
    id: String,
    seed: u64,
    shape: Vec<usize>,
    modalities: usize,
}

/// Writes `subjects/<id>/{mod<k>.kmt, labels.kmt, meta.json}` under `root`.
pub fn write_dataset(root: impl AsRef<Path>, subjects: &[SyntheticSubject]) -> Result<()> {
    for s in subjects {
        let dir = root.as_ref().join("subjects").join(&s.id);
        fs::create_dir_all(&dir)?;
        for (k, img) in s.modalities.iter().enumerate() {
            write_kmt(dir.join(format!("mod{k}.kmt")), &img.first_channel(), DType::F32)?;
        }
        write_kmt(dir.join("labels.kmt"), s.labels.tensor(), DType::U8)?;
        let meta = SubjectMeta { id: s.id.clone(), seed: s.seed, shape: s.shape().to_vec(), modalities: s.modalities.len() };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

/// Subject ids present under `root/subjects`, sorted.
pub fn list_subjects(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root.as_ref().join("subjects"))? {
        let entry = entry?;
        if entry.path().join("meta.json").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_subject(root: impl AsRef<Path>, id: &str) -> Result<SyntheticSubject> {
    let dir = root.as_ref().join("subjects").join(id);
    let meta: SubjectMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let labels = LabelMap::load(dir.join("labels.kmt"))?;
    let modalities = (0..meta.modalities)
        .map(|k| Image::load(dir.join(format!("mod{k}.kmt"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSubject { id: meta.id, seed: meta.seed, labels, modalities })
}

pub fn generate_cohort(first_seed: u64, count: usize, shape: &[usize]) -> Result<Vec<SyntheticSubject>> {
    (first_seed..first_seed + count as u64).map(|s| generate_subject(s, shape)).collect()
}

/// Partitions `ids` into (train, val, test) as a pure function of `seed`.
pub fn split<T: Clone>(ids: &[T], seed: u64, train: usize, val: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    let train = train.min(ids.len());
    let val = val.min(ids.len() - train);
    (pick(&order[..train]), pick(&order[train..train + val]), pick(&order[train + val..]))
}

/// Pearson correlation of two equally sized buffers; `None` if either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}
