//! Image resampling at normalized coordinates.
//!
//! Voxel `i` on an axis of extent `n` sits at `−1 + 2(i + 0.5)/n`. Coordinate
//! component `d` indexes spatial axis `d` in tensor order. A registered image
//! is `x_r(g) = x_m(T(g))`: the transform maps fixed-grid points into the
//! moving image, which is then sampled there.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::io::{read_kmt, read_png_gray};
use crate::nn::grid_coordinates;
use crate::tensor::NdTensor;
use crate::transforms::{det_small, TransformParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Linear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Border,
}

#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * (i as f64 + 0.5) / n as f64
}

/// Inverse of [`normalized_coord`] as a continuous voxel index. Values within
/// 1e-9 of an integer are snapped so voxel centers sample exactly.
#[inline]
pub fn voxel_index(c: f64, n: usize) -> f64 {
    let u = (c + 1.0) * n as f64 / 2.0 - 0.5;
    let r = u.round();
    if (u - r).abs() < 1e-9 {
        r
    } else {
        u
    }
}

/// Intensity volume `[C, spatial..]` with per-axis voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    tensor: NdTensor,
    spacing: Vec<f64>,
}

impl Image {
    /// `tensor` must carry a leading channel axis.
    pub fn new(tensor: NdTensor) -> Result<Self> {
        if tensor.ndim() < 2 || tensor.ndim() > 4 {
            return Err(shape_err(format!("image must be [C, 1..=3 spatial], got {:?}", tensor.shape())));
        }
        if !tensor.all_finite() {
            return Err(Error::InvalidArgument("image has non-finite values".into()));
        }
        let d = tensor.ndim() - 1;
        Ok(Self { tensor, spacing: vec![1.0; d] })
    }

    /// Wraps a single-channel spatial tensor.
    pub fn from_spatial(t: NdTensor) -> Result<Self> {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        Self::new(t.reshape(&shape)?)
    }

    pub fn with_spacing(mut self, spacing: Vec<f64>) -> Result<Self> {
        if spacing.len() != self.dim() || spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!("bad spacing {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Reads a KMT file (a bare spatial tensor) or an 8-bit grayscale PNG.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let t = if is_png { read_png_gray(path)? } else { read_kmt(path)? };
        Self::from_spatial(t)
    }

    pub fn tensor(&self) -> &NdTensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> NdTensor {
        self.tensor
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.tensor.shape()[1..]
    }

    pub fn dim(&self) -> usize {
        self.tensor.ndim() - 1
    }

    /// The first channel as a bare spatial tensor.
    pub fn first_channel(&self) -> NdTensor {
        let per: usize = self.spatial().iter().product();
        NdTensor::new(self.spatial().to_vec(), self.tensor.data()[..per].to_vec()).unwrap()
    }
}

/// Integer labels over a spatial grid, 0 being background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    tensor: NdTensor,
}

impl LabelMap {
    pub fn new(tensor: NdTensor) -> Result<Self> {
        if tensor.data().iter().any(|&v| v < 0.0 || v.fract() != 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("labels must be nonnegative integers".into()));
        }
        Ok(Self { tensor })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_kmt(path)?)
    }

    pub fn tensor(&self) -> &NdTensor {
        &self.tensor
    }

    pub fn spatial(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn num_labels(&self) -> usize {
        self.tensor.data().iter().fold(0.0f64, |m, &v| m.max(v)) as usize + 1
    }

    /// `[L, spatial..]` indicator channels.
    pub fn one_hot(&self, num_labels: usize) -> NdTensor {
        let per = self.tensor.len();
        let mut shape = vec![num_labels];
        shape.extend_from_slice(self.spatial());
        let mut out = NdTensor::zeros(&shape);
        for (j, &v) in self.tensor.data().iter().enumerate() {
            let l = v as usize;
            if l < num_labels {
                out.data_mut()[l * per + j] = 1.0;
            }
        }
        out
    }

    /// Per-voxel argmax over channels of `[L, spatial..]`.
    pub fn from_scores(scores: &NdTensor) -> Result<Self> {
        let l = scores.shape()[0];
        let per = scores.len() / l;
        let data = (0..per)
            .map(|j| {
                let mut best = 0;
                for c in 1..l {
                    if scores.data()[c * per + j] > scores.data()[best * per + j] {
                        best = c;
                    }
                }
                best as f64
            })
            .collect();
        Self::new(NdTensor::new(scores.shape()[1..].to_vec(), data)?)
    }
}

/// Interpolation stencil of one sample point: up to `2^D` corners.
struct Stencil {
    n: usize,
    offset: [usize; 8],
    weight: [f64; 8],
    /// `∂weight/∂coord` per axis.
    dweight: [[f64; 3]; 8],
}

fn strides(spatial: &[usize]) -> Vec<usize> {
    let mut s = vec![1; spatial.len()];
    for a in (0..spatial.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * spatial[a + 1];
    }
    s
}

fn linear_stencil(c: &[f64], spatial: &[usize], strides: &[usize], padding: Padding) -> Stencil {
    let d = spatial.len();
    // per axis: two candidate indices with weights and derivatives
    let mut idx = [[0i64; 2]; 3];
    let mut w = [[0.0; 2]; 3];
    let mut dw = [[0.0; 2]; 3];
    for a in 0..d {
        let n = spatial[a];
        let mut u = voxel_index(c[a], n);
        let mut du = n as f64 / 2.0;
        if padding == Padding::Border {
            let hi = (n - 1) as f64;
            if u <= 0.0 || u >= hi {
                u = u.clamp(0.0, hi);
                du = 0.0;
            }
        }
        let i0 = u.floor();
        let f = u - i0;
        idx[a] = [i0 as i64, i0 as i64 + 1];
        w[a] = [1.0 - f, f];
        dw[a] = [-du, du];
    }
    let mut st = Stencil { n: 0, offset: [0; 8], weight: [0.0; 8], dweight: [[0.0; 3]; 8] };
    'corner: for mask in 0..(1usize << d) {
        let mut off = 0;
        let mut weight = 1.0;
        for a in 0..d {
            let b = (mask >> a) & 1;
            let i = idx[a][b];
            if i < 0 || i >= spatial[a] as i64 {
                continue 'corner;
            }
            off += i as usize * strides[a];
            weight *= w[a][b];
        }
        let mut dweight = [0.0; 3];
        for (a, dwa) in dweight.iter_mut().enumerate().take(d) {
            let mut p = dw[a][(mask >> a) & 1];
            for b in 0..d {
                if b != a {
                    p *= w[b][(mask >> b) & 1];
                }
            }
            *dwa = p;
        }
        st.offset[st.n] = off;
        st.weight[st.n] = weight;
        st.dweight[st.n] = dweight;
        st.n += 1;
    }
    st
}

fn nearest_offset(c: &[f64], spatial: &[usize], strides: &[usize], padding: Padding) -> Option<usize> {
    let mut off = 0;
    for a in 0..spatial.len() {
        let n = spatial[a] as f64;
        let mut i = voxel_index(c[a], spatial[a]).round();
        if padding == Padding::Border {
            i = i.clamp(0.0, n - 1.0);
        } else if i < 0.0 || i >= n {
            return None;
        }
        off += i as usize * strides[a];
    }
    Some(off)
}

fn check_sample_shapes(img: &NdTensor, coords: &NdTensor, out_spatial: &[usize]) -> Result<(usize, usize, usize)> {
    if img.ndim() < 2 {
        return Err(shape_err(format!("grid_sample image must be [C, spatial..], got {:?}", img.shape())));
    }
    let d = img.ndim() - 1;
    if d > 3 {
        return Err(shape_err("at most 3 spatial axes"));
    }
    let m: usize = out_spatial.iter().product();
    if coords.shape() != [m, d] {
        return Err(shape_err(format!(
            "coords {:?} do not match {} output points in {d}D",
            coords.shape(),
            m
        )));
    }
    Ok((img.shape()[0], img.len() / img.shape()[0], d))
}

/// Samples `img` (`[C, spatial..]`) at `coords` (`[M, D]`, `M = prod(out_spatial)`).
pub fn grid_sample_forward(
    img: &NdTensor,
    coords: &NdTensor,
    out_spatial: &[usize],
    mode: SampleMode,
    padding: Padding,
) -> Result<NdTensor> {
    let (ch, per, d) = check_sample_shapes(img, coords, out_spatial)?;
    let spatial = &img.shape()[1..];
    let st = strides(spatial);
    let m = coords.shape()[0];
    let mut out = vec![0.0; ch * m];
    let x = img.data();
    for j in 0..m {
        let c = &coords.data()[j * d..(j + 1) * d];
        match mode {
            SampleMode::Linear => {
                let s = linear_stencil(c, spatial, &st, padding);
                for k in 0..ch {
                    let base = k * per;
                    let mut v = 0.0;
                    for t in 0..s.n {
                        v += s.weight[t] * x[base + s.offset[t]];
                    }
                    out[k * m + j] = v;
                }
            }
            SampleMode::Nearest => {
                if let Some(off) = nearest_offset(c, spatial, &st, padding) {
                    for k in 0..ch {
                        out[k * m + j] = x[k * per + off];
                    }
                }
            }
        }
    }
    let mut shape = vec![ch];
    shape.extend_from_slice(out_spatial);
    NdTensor::new(shape, out)
}

/// Gradients of [`grid_sample_forward`] given the output cotangent `g`.
/// Nearest mode scatters to the image and has zero coordinate gradient.
#[allow(clippy::too_many_arguments)]
pub fn grid_sample_backward(
    img: &NdTensor,
    coords: &NdTensor,
    out_spatial: &[usize],
    mode: SampleMode,
    padding: Padding,
    g: &NdTensor,
    need_img: bool,
    need_coords: bool,
) -> Result<(Option<NdTensor>, Option<NdTensor>)> {
    let (ch, per, d) = check_sample_shapes(img, coords, out_spatial)?;
    let spatial = &img.shape()[1..];
    let st = strides(spatial);
    let m = coords.shape()[0];
    let mut dimg = if need_img { Some(NdTensor::zeros(img.shape())) } else { None };
    let mut dcoords = if need_coords { Some(NdTensor::zeros(coords.shape())) } else { None };
    let x = img.data();
    let gd = g.data();
    for j in 0..m {
        let c = &coords.data()[j * d..(j + 1) * d];
        match mode {
            SampleMode::Linear => {
                let s = linear_stencil(c, spatial, &st, padding);
                if let Some(di) = dimg.as_mut() {
                    let di = di.data_mut();
                    for k in 0..ch {
                        let gk = gd[k * m + j];
                        for t in 0..s.n {
                            di[k * per + s.offset[t]] += s.weight[t] * gk;
                        }
                    }
                }
                if let Some(dc) = dcoords.as_mut() {
                    let dc = dc.data_mut();
                    for k in 0..ch {
                        let gk = gd[k * m + j];
                        for t in 0..s.n {
                            let v = x[k * per + s.offset[t]] * gk;
                            for a in 0..d {
                                dc[j * d + a] += s.dweight[t][a] * v;
                            }
                        }
                    }
                }
            }
            SampleMode::Nearest => {
                if let (Some(di), Some(off)) = (dimg.as_mut(), nearest_offset(c, spatial, &st, padding)) {
                    for k in 0..ch {
                        di.data_mut()[k * per + off] += gd[k * m + j];
                    }
                }
            }
        }
    }
    Ok((dimg, dcoords))
}

/// `[M, D]` normalized coordinates of every voxel of `spatial`.
pub fn identity_grid(spatial: &[usize]) -> NdTensor {
    let m: usize = spatial.iter().product();
    NdTensor::new(vec![m, spatial.len()], grid_coordinates(spatial)).unwrap()
}

pub fn grid_sample(img: &Image, coords: &NdTensor, out_spatial: &[usize], mode: SampleMode, padding: Padding) -> Result<Image> {
    Image::new(grid_sample_forward(img.tensor(), coords, out_spatial, mode, padding)?)
}

/// `x_r(g) = x_m(T(g))` on a grid of `out_shape`, linear with zero fill.
pub fn warp_image(x_m: &Image, transform: &TransformParams, out_shape: &[usize]) -> Result<Image> {
    if transform.dim() != x_m.dim() {
        return Err(shape_err(format!("{}D transform for a {}D image", transform.dim(), x_m.dim())));
    }
    let coords = transform.dense_map(out_shape)?;
    grid_sample(x_m, &coords, out_shape, SampleMode::Linear, Padding::Zeros)
}

/// Nearest-neighbor label resampling with background fill.
pub fn warp_labels(l_m: &LabelMap, transform: &TransformParams, out_shape: &[usize]) -> Result<LabelMap> {
    if transform.dim() != l_m.spatial().len() {
        return Err(shape_err("transform and label map dimensions differ"));
    }
    let coords = transform.dense_map(out_shape)?;
    let mut shape = vec![1];
    shape.extend_from_slice(l_m.spatial());
    let t = l_m.tensor().reshape(&shape)?;
    let out = grid_sample_forward(&t, &coords, out_shape, SampleMode::Nearest, Padding::Zeros)?;
    LabelMap::new(out.reshape(out_shape)?)
}

/// `det(∂T/∂g)` per voxel from finite differences of the dense map: central
/// in the interior, one-sided on the border.
pub fn jacobian_field(transform: &TransformParams, grid_shape: &[usize]) -> Result<NdTensor> {
    let d = grid_shape.len();
    if !(2..=3).contains(&d) || transform.dim() != d {
        return Err(shape_err(format!("jacobian of a {}D transform on {grid_shape:?}", transform.dim())));
    }
    if let Some(&n) = grid_shape.iter().find(|&&n| n < 3) {
        return Err(Error::GridTooSmall(n));
    }
    let map = transform.dense_map(grid_shape)?;
    let st = strides(grid_shape);
    let m = map.shape()[0];
    let md = map.data();
    let mut out = vec![0.0; m];
    let mut idx = vec![0usize; d];
    for (j, o) in out.iter_mut().enumerate() {
        let mut rem = j;
        for a in 0..d {
            idx[a] = rem / st[a];
            rem %= st[a];
        }
        let mut jac = NdTensor::zeros(&[d, d]);
        for b in 0..d {
            let n = grid_shape[b];
            let h = 2.0 / n as f64;
            let (lo, hi) = if idx[b] == 0 {
                (j, j + st[b])
            } else if idx[b] == n - 1 {
                (j - st[b], j)
            } else {
                (j - st[b], j + st[b])
            };
            let span = (if idx[b] == 0 || idx[b] == n - 1 { 1.0 } else { 2.0 }) * h;
            for a in 0..d {
                jac.set2(a, b, (md[hi * d + a] - md[lo * d + a]) / span);
            }
        }
        *o = det_small(&jac);
    }
    NdTensor::new(grid_shape.to_vec(), out)
}

/// In-place separable Gaussian smoothing of a row-major spatial buffer with
/// replicated borders.
pub fn gaussian_smooth(data: &mut [f64], shape: &[usize], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / z).collect();
    let st = strides(shape);
    let mut tmp = data.to_vec();
    for a in 0..shape.len() {
        let n = shape[a] as i64;
        for (j, out) in tmp.iter_mut().enumerate() {
            let i = (j / st[a]) as i64 % n;
            let mut v = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let q = (i + t as i64 - radius).clamp(0, n - 1);
                v += k * data[(j as i64 + (q - i) * st[a] as i64) as usize];
            }
            *out = v;
        }
        data.copy_from_slice(&tmp);
    }
}

/// Circularly shifts every channel by `shift` voxels per spatial axis.
pub fn roll(img: &NdTensor, shift: &[i64]) -> Result<NdTensor> {
    let spatial = &img.shape()[1..];
    if shift.len() != spatial.len() {
        return Err(shape_err("one shift per spatial axis"));
    }
    let st = strides(spatial);
    let per: usize = spatial.iter().product();
    let mut out = NdTensor::zeros(img.shape());
    for j in 0..per {
        let mut rem = j;
        let mut dst = 0;
        for a in 0..spatial.len() {
            let i = (rem / st[a]) as i64;
            rem %= st[a];
            let n = spatial[a] as i64;
            dst += ((i + shift[a]).rem_euclid(n)) as usize * st[a];
        }
        for c in 0..img.shape()[0] {
            out.data_mut()[c * per + dst] = img.data()[c * per + j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::transforms::{AffineParams, TapeTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotation(deg: f64) -> AffineParams {
        let (s, c) = deg.to_radians().sin_cos();
        AffineParams::new(NdTensor::from_rows(&[vec![c, -s, 0.0], vec![s, c, 0.0]]).unwrap()).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, spatial: &[usize]) -> Image {
        let n = spatial.iter().product();
        Image::from_spatial(
            NdTensor::new(spatial.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn coordinate_convention_round_trips() {
        for n in [1, 4, 7, 64] {
            for i in 0..n {
                assert_eq!(voxel_index(normalized_coord(i, n), n), i as f64);
            }
        }
        assert_eq!(normalized_coord(0, 4), -0.75);
        assert_eq!(normalized_coord(3, 4), 0.75);
    }

    #[test]
    fn identity_grid_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spatial in [vec![9, 7], vec![5, 4, 6]] {
            let img = random_image(&mut rng, &spatial);
            let out = grid_sample(&img, &identity_grid(&spatial), &spatial, SampleMode::Linear, Padding::Zeros)
                .unwrap();
            assert_eq!(out.tensor().data(), img.tensor().data());
        }
    }

    #[test]
    fn integer_translation_shifts_with_zero_fill() {
        let img = Image::from_spatial(NdTensor::new(vec![1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()).unwrap();
        let mut c = identity_grid(&[1, 5]);
        for r in 0..5 {
            c.data_mut()[r * 2 + 1] -= 2.0 * 2.0 / 5.0;
        }
        let out = grid_sample(&img, &c, &[1, 5], SampleMode::Linear, Padding::Zeros).unwrap();
        assert_eq!(out.tensor().data(), &[0.0, 0.0, 1.0, 2.0, 3.0]);
        let out = grid_sample(&img, &c, &[1, 5], SampleMode::Nearest, Padding::Zeros).unwrap();
        assert_eq!(out.tensor().data(), &[0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn half_voxel_shift_of_ramp() {
        let img = NdTensor::new(vec![1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let coords = NdTensor::new(vec![4, 1], (0..4).map(|i| normalized_coord(i, 4) + 0.25).collect()).unwrap();
        let out = grid_sample_forward(&img, &coords, &[4], SampleMode::Linear, Padding::Border).unwrap();
        let want = [0.5, 1.5, 2.5, 3.0];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_sampling_reproduces_affine_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n0, n1) = (12, 10);
        let f = |u: f64, v: f64| 0.3 + 0.05 * u - 0.02 * v;
        let data = (0..n0 * n1).map(|j| f((j / n1) as f64, (j % n1) as f64)).collect();
        let img = NdTensor::new(vec![1, n0, n1], data).unwrap();
        let pts: Vec<f64> = (0..200)
            .flat_map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
            .collect();
        let out = grid_sample_forward(&img, &NdTensor::new(vec![200, 2], pts.clone()).unwrap(), &[200], SampleMode::Linear, Padding::Zeros)
            .unwrap();
        for j in 0..200 {
            let u = (pts[2 * j] + 1.0) * n0 as f64 / 2.0 - 0.5;
            let v = (pts[2 * j + 1] + 1.0) * n1 as f64 / 2.0 - 0.5;
            assert!((out.data()[j] - f(u, v)).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_identity_and_translation_of_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = LabelMap::new(
            NdTensor::new(vec![8, 8], (0..64).map(|_| rng.random_range(0..4) as f64).collect()).unwrap(),
        )
        .unwrap();
        let id = TransformParams::Affine(AffineParams::identity(2));
        assert_eq!(warp_labels(&labels, &id, &[8, 8]).unwrap(), labels);
        let img = random_image(&mut rng, &[8, 8]);
        assert_eq!(warp_image(&img, &id, &[8, 8]).unwrap(), img);

        // sampling at g − 2 voxels along axis 1 moves content by +2
        let t = TransformParams::Affine(AffineParams::translation(&[0.0, -0.5]));
        let moved = warp_labels(&labels, &t, &[8, 8]).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = if c < 2 { 0.0 } else { labels.tensor().get2(r, c - 2) };
                assert_eq!(moved.tensor().get2(r, c), want);
            }
        }
    }

    #[test]
    fn soft_one_hot_warp_agrees_with_nearest() {
        let n = 32;
        let mut data = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let (y, x) = (normalized_coord(r, n), normalized_coord(c, n));
                data[r * n + c] = if x * x + y * y < 0.3 {
                    1.0
                } else if (x - 0.5).abs() < 0.3 && (y + 0.4).abs() < 0.2 {
                    2.0
                } else {
                    0.0
                };
            }
        }
        let labels = LabelMap::new(NdTensor::new(vec![n, n], data).unwrap()).unwrap();
        for deg in [2.0, 5.0, -8.0] {
            let t = TransformParams::Affine(rotation(deg));
            let hard = warp_labels(&labels, &t, &[n, n]).unwrap();
            let soft = grid_sample_forward(&labels.one_hot(3), &t.dense_map(&[n, n]).unwrap(), &[n, n], SampleMode::Linear, Padding::Zeros)
                .unwrap();
            let arg = LabelMap::from_scores(&soft).unwrap();
            let agree = arg.tensor().data().iter().zip(hard.tensor().data()).filter(|(a, b)| a == b).count();
            assert!(agree as f64 >= 0.95 * (n * n) as f64, "{agree}");
        }
    }

    #[test]
    fn affine_round_trip_recovers_image() {
        let n = 48;
        let mut data = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let (y, x) = (normalized_coord(r, n), normalized_coord(c, n));
                data[r * n + c] = (-(x * x + 2.0 * y * y) * 3.0).exp();
            }
        }
        let img = Image::from_spatial(NdTensor::new(vec![n, n], data).unwrap()).unwrap();
        let a = rotation(20.0).compose(&AffineParams::translation(&[0.05, -0.1])).unwrap();
        let there = warp_image(&img, &TransformParams::Affine(a.clone()), &[n, n]).unwrap();
        let back = warp_image(&there, &TransformParams::Affine(a.inverse().unwrap()), &[n, n]).unwrap();
        let mut se = 0.0;
        let mut cnt = 0;
        for r in 8..n - 8 {
            for c in 8..n - 8 {
                let d = back.tensor().data()[r * n + c] - img.tensor().data()[r * n + c];
                se += d * d;
                cnt += 1;
            }
        }
        assert!(se / (cnt as f64) < 1e-3);
    }

    #[test]
    fn jacobian_of_rotation_and_scale() {
        let j = jacobian_field(&TransformParams::Affine(rotation(37.0)), &[10, 12]).unwrap();
        assert!(j.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let s = AffineParams::new(NdTensor::from_rows(&[vec![1.1, 0.0, 0.0], vec![0.0, 1.1, 0.0]]).unwrap()).unwrap();
        let j = jacobian_field(&TransformParams::Affine(s), &[8, 8]).unwrap();
        assert!(j.data().iter().all(|v| (v - 1.21).abs() < 1e-9));
        let id3 = TransformParams::Affine(AffineParams::identity(3));
        assert!(jacobian_field(&id3, &[4, 4, 4]).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(matches!(
            jacobian_field(&TransformParams::Affine(AffineParams::identity(2)), &[2, 8]),
            Err(Error::GridTooSmall(2))
        ));
    }

    #[test]
    fn warp_gradient_wrt_translation_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, &[10, 10]);
        let a0 = rotation(10.0).compose(&AffineParams::translation(&[0.03, -0.07])).unwrap();
        let loss = |a: &NdTensor| -> f64 {
            let t = TransformParams::Affine(AffineParams::new(a.clone()).unwrap());
            warp_image(&img, &t, &[10, 10]).unwrap().tensor().sum()
        };
        let mut tape = Tape::new();
        let av = tape.leaf(a0.matrix().clone());
        let x = tape.constant(img.tensor().clone());
        let g = tape.constant(identity_grid(&[10, 10]));
        let coords = TapeTransform::Affine(av).map(&mut tape, g).unwrap();
        let out = tape.grid_sample(x, coords, &[10, 10], SampleMode::Linear, Padding::Zeros).unwrap();
        let s = tape.sum(out);
        let grads = tape.backward(s).unwrap().wrt(&tape, av);
        for row in 0..2 {
            let h = 1e-6;
            let mut p = a0.matrix().clone();
            p.set2(row, 2, p.get2(row, 2) + h);
            let mut m = a0.matrix().clone();
            m.set2(row, 2, m.get2(row, 2) - h);
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = grads.get2(row, 2);
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-8), "{fd} vs {an}");
        }
    }

    #[test]
    fn roll_wraps_around() {
        let t = NdTensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(roll(&t, &[0, 1]).unwrap().data(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(roll(&t, &[0, -1]).unwrap().data(), &[2.0, 3.0, 4.0, 1.0]);
    }
}
