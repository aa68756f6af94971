//! The keypoint detector: strided convolution blocks with instance
//! normalization, then a 1×1 convolution to `N` channels and a
//! center-of-mass head (or a fully connected head for comparison).
//!
//! Each block is `conv3 → IN → ReLU → conv3/2 → IN → ReLU`, halving every
//! spatial extent once.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::io::{encode_kmt, read_kmt, write_kmt, DType};
use crate::tensor::NdTensor;
use crate::transforms::KeypointSet;
use crate::warp::Image;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Com,
    Fc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub dim: usize,
    pub num_keypoints: usize,
    pub num_blocks: usize,
    pub channels: Vec<usize>,
    pub head: Head,
    pub com_temperature: f64,
    /// Spatial extents of the inputs; only the fc head depends on them.
    pub input_shape: Vec<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            num_keypoints: 16,
            num_blocks: 3,
            channels: vec![8, 16, 32],
            head: Head::Com,
            com_temperature: 1.0,
            input_shape: vec![64, 64],
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(2..=3).contains(&self.dim) {
            return bad(format!("dim {} must be 2 or 3", self.dim));
        }
        if self.num_keypoints == 0 || self.num_blocks == 0 {
            return bad("need at least one keypoint and one block".into());
        }
        if self.channels.len() != self.num_blocks || self.channels.contains(&0) {
            return bad(format!("{} channel widths for {} blocks", self.channels.len(), self.num_blocks));
        }
        if !(self.com_temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if self.input_shape.len() != self.dim {
            return bad(format!("input shape {:?} is not {}D", self.input_shape, self.dim));
        }
        self.check_extents(&self.input_shape)
    }

    fn check_extents(&self, spatial: &[usize]) -> Result<()> {
        let f = 1usize << self.num_blocks;
        if spatial.len() != self.dim || spatial.iter().any(|&n| n == 0 || n % f != 0) {
            return Err(shape_err(format!(
                "input extents {spatial:?} must be {}D and divisible by {f}",
                self.dim
            )));
        }
        Ok(())
    }

    fn kernel_shape(&self, cout: usize, cin: usize, k: usize) -> Vec<usize> {
        let mut s = vec![cout, cin];
        s.extend(std::iter::repeat_n(k, self.dim));
        s
    }

    /// Parameter names and shapes in forward order. Block convolutions carry
    /// no bias since instance normalization removes any per-channel offset.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for (b, &c) in self.channels.iter().enumerate() {
            out.push((format!("block{b}.conv1.weight"), self.kernel_shape(c, cin, 3)));
            out.push((format!("block{b}.conv2.weight"), self.kernel_shape(c, c, 3)));
            cin = c;
        }
        match self.head {
            Head::Com => {
                out.push(("head.weight".into(), self.kernel_shape(self.num_keypoints, cin, 1)));
                out.push(("head.bias".into(), vec![self.num_keypoints]));
            }
            Head::Fc => {
                let cells: usize = self.input_shape.iter().map(|n| n >> self.num_blocks).product();
                let outputs = self.num_keypoints * self.dim;
                out.push(("head.weight".into(), vec![cin * cells, outputs]));
                out.push(("head.bias".into(), vec![1, outputs]));
            }
        }
        out
    }
}

/// Named detector parameters in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorWeights {
    pub config: DetectorConfig,
    pub seed: u64,
    pub params: Vec<(String, NdTensor)>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DetectorConfig,
    seed: u64,
    params: Vec<ManifestEntry>,
}

/// Fan-in scaled uniform initialization, deterministic in `seed`.
pub fn init_weights(config: &DetectorConfig, seed: u64) -> Result<DetectorWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut fan_in = 1;
    for (name, shape) in config.manifest() {
        let n: usize = shape.iter().product();
        let bound = if name.ends_with("weight") {
            fan_in = if config.head == Head::Fc && name == "head.weight" {
                shape[0]
            } else {
                shape[1..].iter().product()
            };
            (6.0 / fan_in as f64).sqrt()
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        params.push((name, NdTensor::new(shape, data)?));
    }
    Ok(DetectorWeights { config: config.clone(), seed, params })
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `N×D` keypoints.
    pub keypoints: Var,
    /// Output of each block, `[C_b, spatial..]`.
    pub features: Vec<Var>,
}

impl DetectorWeights {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&NdTensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    /// Places every parameter on the tape as a constant.
    pub fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    /// Runs the network on a single-channel `[1, spatial..]` input.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Forward> {
        let cfg = &self.config;
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != cfg.dim + 1 || shape[0] != 1 {
            return Err(shape_err(format!("detector expects [1, {}D spatial], got {shape:?}", cfg.dim)));
        }
        cfg.check_extents(&shape[1..])?;
        if cfg.head == Head::Fc && shape[1..] != cfg.input_shape[..] {
            return Err(shape_err("fc head requires the configured input shape"));
        }
        let mut x = input;
        let mut features = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let zero = tape.constant(NdTensor::zeros(&[cfg.channels[b]]));
            x = tape.conv(x, params[2 * b], zero, 1)?;
            x = tape.instance_norm(x, INSTANCE_NORM_EPS);
            x = tape.relu(x);
            x = tape.conv(x, params[2 * b + 1], zero, 2)?;
            x = tape.instance_norm(x, INSTANCE_NORM_EPS);
            x = tape.relu(x);
            features.push(x);
        }
        let (hw, hb) = (params[2 * cfg.num_blocks], params[2 * cfg.num_blocks + 1]);
        let keypoints = match cfg.head {
            Head::Com => {
                let act = tape.conv(x, hw, hb, 1)?;
                tape.center_of_mass(act, cfg.com_temperature)?
            }
            Head::Fc => {
                let n = tape.value(x).len();
                let flat = tape.reshape(x, &[1, n])?;
                let y = tape.matmul(flat, hw)?;
                let y = tape.add(y, hb)?;
                tape.reshape(y, &[cfg.num_keypoints, cfg.dim])?
            }
        };
        Ok(Forward { keypoints, features })
    }

    fn input_tensor(&self, img: &Image) -> Result<NdTensor> {
        if img.dim() != self.config.dim {
            return Err(shape_err(format!("{}D image for a {}D detector", img.dim(), self.config.dim)));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(img.spatial());
        Ok(NdTensor::new(shape, img.first_channel().into_data())?)
    }

    /// Keypoints of the first channel of `img`, in normalized coordinates.
    pub fn detect(&self, img: &Image) -> Result<KeypointSet> {
        let mut tape = Tape::new();
        let params = self.constants(&mut tape);
        let x = tape.constant(self.input_tensor(img)?);
        let f = self.forward(&mut tape, &params, x)?;
        KeypointSet::new(tape.value(f.keypoints).clone())
    }

    /// Per-block feature maps of the first channel of `img`.
    pub fn feature_maps(&self, img: &Image) -> Result<Vec<NdTensor>> {
        let mut tape = Tape::new();
        let params = self.constants(&mut tape);
        let x = tape.constant(self.input_tensor(img)?);
        let f = self.forward(&mut tape, &params, x)?;
        Ok(f.features.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Writes `path` (JSON manifest) and one KMT file per parameter next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (name, t) in &self.params {
            let file = format!("{stem}.{name}.kmt");
            write_kmt(dir.join(&file), t, DType::F32)?;
            entries.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), file });
        }
        let manifest = Manifest { config: self.config.clone(), seed: self.seed, params: entries };
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        manifest.config.validate()?;
        let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let expected = manifest.config.manifest();
        if expected.len() != manifest.params.len() {
            return Err(Error::Format("manifest parameter count does not match config".into()));
        }
        let mut params = Vec::new();
        for ((name, shape), entry) in expected.into_iter().zip(manifest.params) {
            let t = read_kmt(dir.join(&entry.file))?;
            if entry.name != name || t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    entry.name,
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Format(format!("parameter {name} has non-finite values")));
            }
            params.push((name, t));
        }
        Ok(Self { config: manifest.config, seed: manifest.seed, params })
    }

    /// SHA-256 over the config and the on-disk (f32) parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update(encode_kmt(t, DType::F32));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Anything that turns an image into keypoints.
pub trait KeypointDetector {
    fn detect_keypoints(&self, img: &Image) -> Result<KeypointSet>;
}

impl KeypointDetector for DetectorWeights {
    fn detect_keypoints(&self, img: &Image) -> Result<KeypointSet> {
        self.detect(img)
    }
}
