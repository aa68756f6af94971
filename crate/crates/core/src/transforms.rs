//! Closed-form coordinate transformations from corresponding keypoints.
//!
//! Two families are supported: affine maps solved by least squares, and
//! thin-plate splines solved from the block system
//! `[[K + λI, L], [Lᵀ, 0]] [W; A] = [Q; 0]` with kernel `U(r) = r² ln r`
//! (used for 2D and 3D alike). All coordinates are normalized to `[-1, 1]`
//! per axis; see [`crate::warp::normalized_coord`].
//!
//! Each solver has a plain `f64` form and a tape form (`*_on_tape`) sharing
//! the same forward kernels so training can differentiate through it.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::grid_coordinates;
use crate::tensor::{solve_linear, NdTensor};

/// Two TPS source points closer than this are duplicates when `λ = 0`.
pub const DUPLICATE_TOLERANCE: f64 = 1e-9;

/// `N` corresponding points, one per row, `D ∈ {2, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: NdTensor,
}

impl KeypointSet {
    pub fn new(points: NdTensor) -> Result<Self> {
        if points.ndim() != 2 || !(2..=3).contains(&points.shape()[1]) {
            return Err(shape_err(format!("keypoints must be N×2 or N×3, got {:?}", points.shape())));
        }
        if !points.all_finite() {
            return Err(Error::InvalidArgument("keypoints must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(NdTensor::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn as_tensor(&self) -> &NdTensor {
        &self.points
    }

    pub fn into_tensor(self) -> NdTensor {
        self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points.data()[i * d..(i + 1) * d]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.points.to_rows()
    }

    /// Largest Euclidean distance between corresponding rows.
    pub fn max_distance(&self, other: &Self) -> f64 {
        (0..self.len())
            .map(|i| dist2(self.point(i), other.point(i)).sqrt())
            .fold(0.0, f64::max)
    }

    /// Mean of the per-point Euclidean distances.
    pub fn mean_distance(&self, other: &Self) -> f64 {
        (0..self.len()).map(|i| dist2(self.point(i), other.point(i)).sqrt()).sum::<f64>()
            / self.len() as f64
    }
}

impl Serialize for KeypointSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.points.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeypointSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        KeypointSet::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

mod matrix_rows {
    use super::*;

    pub fn serialize<S: Serializer>(t: &NdTensor, s: S) -> Result<S::Ok, S::Error> {
        t.to_rows().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NdTensor, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        NdTensor::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `U(r) = r² ln r` written in terms of `s = r²`, with `U(0) = 0`.
#[inline]
pub fn tps_kernel_sq(s: f64) -> f64 {
    if s > 0.0 {
        0.5 * s * s.ln()
    } else {
        0.0
    }
}

/// `∂U/∂p = (ln s + 1)(p − c)`; this is the scalar factor `(ln s + 1)`,
/// taken as 0 at `s = 0` where the full product vanishes.
#[inline]
fn tps_kernel_grad_factor(s: f64) -> f64 {
    if s > 0.0 {
        s.ln() + 1.0
    } else {
        0.0
    }
}

/// `A` of shape `D×(D+1)` acting on homogeneous points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    #[serde(rename = "A", with = "matrix_rows")]
    a: NdTensor,
}

impl AffineParams {
    pub fn new(a: NdTensor) -> Result<Self> {
        if a.ndim() != 2 || !(2..=3).contains(&a.shape()[0]) || a.shape()[1] != a.shape()[0] + 1 {
            return Err(shape_err(format!("affine matrix must be D×(D+1), got {:?}", a.shape())));
        }
        Ok(Self { a })
    }

    pub fn identity(d: usize) -> Self {
        let mut a = NdTensor::zeros(&[d, d + 1]);
        for i in 0..d {
            a.set2(i, i, 1.0);
        }
        Self { a }
    }

    pub fn translation(t: &[f64]) -> Self {
        let mut p = Self::identity(t.len());
        for (i, &v) in t.iter().enumerate() {
            p.a.set2(i, t.len(), v);
        }
        p
    }

    /// Builds `[M | t]` from a `D×D` linear part and a translation.
    pub fn from_parts(linear: &NdTensor, t: &[f64]) -> Result<Self> {
        let d = t.len();
        if linear.shape() != [d, d] {
            return Err(shape_err("linear part must be D×D"));
        }
        let mut a = NdTensor::zeros(&[d, d + 1]);
        for i in 0..d {
            for j in 0..d {
                a.set2(i, j, linear.get2(i, j));
            }
            a.set2(i, d, t[i]);
        }
        Self::new(a)
    }

    pub fn dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn matrix(&self) -> &NdTensor {
        &self.a
    }

    pub fn linear(&self) -> NdTensor {
        let d = self.dim();
        let mut m = NdTensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                m.set2(i, j, self.a.get2(i, j));
            }
        }
        m
    }

    pub fn translation_part(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| self.a.get2(i, d)).collect()
    }

    /// Determinant of the linear block.
    pub fn linear_det(&self) -> f64 {
        det(&self.linear())
    }

    fn homogeneous_square(&self) -> NdTensor {
        let d = self.dim();
        let mut h = NdTensor::zeros(&[d + 1, d + 1]);
        for i in 0..d {
            for j in 0..=d {
                h.set2(i, j, self.a.get2(i, j));
            }
        }
        h.set2(d, d, 1.0);
        h
    }

    fn from_homogeneous_square(h: &NdTensor) -> Self {
        let d = h.shape()[0] - 1;
        Self { a: h.slice_rows(0, d) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(shape_err("composing affines of different dimension"));
        }
        let h = self.homogeneous_square().matmul(&other.homogeneous_square())?;
        Ok(Self::from_homogeneous_square(&h))
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.dim();
        let h = solve_linear(&self.homogeneous_square(), &NdTensor::identity(d + 1))
            .map_err(|_| Error::DegenerateConfiguration("affine map is not invertible".into()))?;
        Ok(Self::from_homogeneous_square(&h))
    }

    fn apply_raw(&self, pts: &NdTensor) -> Result<NdTensor> {
        if pts.ndim() != 2 || pts.shape()[1] != self.dim() {
            return Err(shape_err(format!(
                "{}D affine applied to points {:?}",
                self.dim(),
                pts.shape()
            )));
        }
        pts.homogeneous().matmul(&self.a.transpose())
    }
}

fn det(m: &NdTensor) -> f64 {
    match m.shape()[0] {
        1 => m.get2(0, 0),
        2 => m.get2(0, 0) * m.get2(1, 1) - m.get2(0, 1) * m.get2(1, 0),
        3 => {
            let g = |i, j| m.get2(i, j);
            g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1))
                - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
                + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0))
        }
        _ => unreachable!("only 1..=3 dimensional determinants are needed"),
    }
}

pub(crate) fn det_small(m: &NdTensor) -> f64 {
    det(m)
}

pub fn apply_affine(a: &AffineParams, pts: &KeypointSet) -> Result<KeypointSet> {
    KeypointSet::new(a.apply_raw(pts.as_tensor())?)
}

fn check_pair(p: &KeypointSet, q: &KeypointSet) -> Result<()> {
    if p.len() != q.len() || p.dim() != q.dim() {
        return Err(shape_err(format!(
            "keypoint sets {}×{} and {}×{} do not correspond",
            p.len(),
            p.dim(),
            q.len(),
            q.dim()
        )));
    }
    Ok(())
}

/// Least-squares affine map taking `p` onto `q`: `A = Q P̃ᵀ (P̃ P̃ᵀ)⁻¹`.
pub fn solve_affine(p: &KeypointSet, q: &KeypointSet) -> Result<AffineParams> {
    check_pair(p, q)?;
    let d = p.dim();
    if p.len() <= d {
        return Err(Error::DegenerateConfiguration(format!("{} points in {d}D", p.len())));
    }
    let ph = p.as_tensor().homogeneous();
    let pht = ph.transpose();
    let gram = pht.matmul(&ph)?;
    let rhs = pht.matmul(q.as_tensor())?;
    let at = solve_linear(&gram, &rhs).map_err(|_| {
        Error::DegenerateConfiguration("P̃P̃ᵀ is singular (collinear or coplanar points)".into())
    })?;
    AffineParams::new(at.transpose())
}

/// Thin-plate-spline parameters: `w` (N×D), affine block `a` ((D+1)×D)
/// anchored at `control_points`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsParams {
    #[serde(rename = "W", with = "matrix_rows")]
    w: NdTensor,
    #[serde(rename = "A", with = "matrix_rows")]
    a: NdTensor,
    control_points: KeypointSet,
    lambda: f64,
}

impl TpsParams {
    pub fn new(w: NdTensor, a: NdTensor, control_points: KeypointSet, lambda: f64) -> Result<Self> {
        let (n, d) = (control_points.len(), control_points.dim());
        if w.shape() != [n, d] || a.shape() != [d + 1, d] {
            return Err(shape_err(format!(
                "TPS blocks {:?} and {:?} for {n} control points in {d}D",
                w.shape(),
                a.shape()
            )));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} must be nonnegative")));
        }
        Ok(Self { w, a, control_points, lambda })
    }

    pub fn w(&self) -> &NdTensor {
        &self.w
    }

    pub fn affine_block(&self) -> &NdTensor {
        &self.a
    }

    /// The affine block as a `D×(D+1)` [`AffineParams`].
    pub fn affine_part(&self) -> AffineParams {
        AffineParams { a: self.a.transpose() }
    }

    pub fn control_points(&self) -> &KeypointSet {
        &self.control_points
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.control_points.dim()
    }
}

/// `Ψ` and `Z` of the TPS block system.
#[derive(Debug, Clone)]
pub struct TpsSystem {
    pub psi: NdTensor,
    pub z: NdTensor,
}

/// `K + λI` bordered by the homogeneous lift `L` of the source points.
pub fn tps_system_matrix(points: &NdTensor, lambda: f64) -> Result<NdTensor> {
    if points.ndim() != 2 {
        return Err(shape_err("TPS source points must be a matrix"));
    }
    let (n, d) = points.dims2();
    let m = n + d + 1;
    let mut psi = NdTensor::zeros(&[m, m]);
    let p = points.data();
    for i in 0..n {
        for j in i + 1..n {
            let k = tps_kernel_sq(dist2(&p[i * d..(i + 1) * d], &p[j * d..(j + 1) * d]));
            psi.set2(i, j, k);
            psi.set2(j, i, k);
        }
        psi.set2(i, i, lambda);
        for e in 0..d {
            psi.set2(i, n + e, p[i * d + e]);
            psi.set2(n + e, i, p[i * d + e]);
        }
        psi.set2(i, n + d, 1.0);
        psi.set2(n + d, i, 1.0);
    }
    Ok(psi)
}

/// Gradient of a scalar with respect to the source points given `dΨ`.
pub fn tps_system_backward(points: &NdTensor, dpsi: &NdTensor) -> NdTensor {
    let (n, d) = points.dims2();
    let p = points.data();
    let mut dp = NdTensor::zeros(&[n, d]);
    for i in 0..n {
        for j in i + 1..n {
            let (pi, pj) = (&p[i * d..(i + 1) * d], &p[j * d..(j + 1) * d]);
            let f = tps_kernel_grad_factor(dist2(pi, pj)) * (dpsi.get2(i, j) + dpsi.get2(j, i));
            for e in 0..d {
                let g = f * (pi[e] - pj[e]);
                dp.data_mut()[i * d + e] += g;
                dp.data_mut()[j * d + e] -= g;
            }
        }
        for e in 0..d {
            dp.data_mut()[i * d + e] += dpsi.get2(i, n + e) + dpsi.get2(n + e, i);
        }
    }
    dp
}

pub fn tps_eval_forward(w: &NdTensor, a: &NdTensor, control: &NdTensor, query: &NdTensor) -> Result<NdTensor> {
    let (n, d) = control.dims2();
    if w.shape() != [n, d] || a.shape() != [d + 1, d] || query.ndim() != 2 || query.shape()[1] != d {
        return Err(shape_err(format!(
            "TPS evaluation: w {:?}, a {:?}, control {:?}, query {:?}",
            w.shape(),
            a.shape(),
            control.shape(),
            query.shape()
        )));
    }
    let m = query.shape()[0];
    let (c, x, wd, ad) = (control.data(), query.data(), w.data(), a.data());
    let mut out = vec![0.0; m * d];
    for r in 0..m {
        let xr = &x[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for k in 0..d {
            let mut v = ad[d * d + k];
            for e in 0..d {
                v += xr[e] * ad[e * d + k];
            }
            o[k] = v;
        }
        for i in 0..n {
            let u = tps_kernel_sq(dist2(&c[i * d..(i + 1) * d], xr));
            if u != 0.0 {
                for k in 0..d {
                    o[k] += wd[i * d + k] * u;
                }
            }
        }
    }
    NdTensor::new(vec![m, d], out)
}

pub struct TpsEvalGrads {
    pub dw: NdTensor,
    pub da: NdTensor,
    pub dcontrol: Option<NdTensor>,
    pub dquery: Option<NdTensor>,
}

pub fn tps_eval_backward(
    w: &NdTensor,
    a: &NdTensor,
    control: &NdTensor,
    query: &NdTensor,
    dout: &NdTensor,
    need_control: bool,
    need_query: bool,
) -> Result<TpsEvalGrads> {
    let (n, d) = control.dims2();
    let m = query.shape()[0];
    let (c, x, wd, ad, g) = (control.data(), query.data(), w.data(), a.data(), dout.data());
    let mut dw = vec![0.0; n * d];
    let mut da = vec![0.0; (d + 1) * d];
    let mut dc = vec![0.0; if need_control { n * d } else { 0 }];
    let mut dq = vec![0.0; if need_query { m * d } else { 0 }];
    for r in 0..m {
        let xr = &x[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        for k in 0..d {
            for e in 0..d {
                da[e * d + k] += xr[e] * gr[k];
            }
            da[d * d + k] += gr[k];
        }
        if need_query {
            for e in 0..d {
                dq[r * d + e] += (0..d).map(|k| ad[e * d + k] * gr[k]).sum::<f64>();
            }
        }
        for i in 0..n {
            let ci = &c[i * d..(i + 1) * d];
            let s = dist2(ci, xr);
            let u = tps_kernel_sq(s);
            let mut wg = 0.0;
            for k in 0..d {
                dw[i * d + k] += u * gr[k];
                wg += wd[i * d + k] * gr[k];
            }
            if (need_control || need_query) && s > 0.0 {
                let f = wg * tps_kernel_grad_factor(s);
                for e in 0..d {
                    let v = f * (ci[e] - xr[e]);
                    if need_control {
                        dc[i * d + e] += v;
                    }
                    if need_query {
                        dq[r * d + e] -= v;
                    }
                }
            }
        }
    }
    Ok(TpsEvalGrads {
        dw: NdTensor::new(vec![n, d], dw)?,
        da: NdTensor::new(vec![d + 1, d], da)?,
        dcontrol: if need_control { Some(NdTensor::new(vec![n, d], dc)?) } else { None },
        dquery: if need_query { Some(NdTensor::new(vec![m, d], dq)?) } else { None },
    })
}

fn check_tps_inputs(p: &KeypointSet, q: &KeypointSet, lambda: f64) -> Result<()> {
    check_pair(p, q)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be finite and ≥ 0")));
    }
    if p.len() <= p.dim() {
        return Err(Error::DegenerateConfiguration(format!("{} points in {}D", p.len(), p.dim())));
    }
    if lambda == 0.0 {
        let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                if dist2(p.point(i), p.point(j)) <= tol2 {
                    return Err(Error::DuplicatePoints(i, j));
                }
            }
        }
    }
    Ok(())
}

pub fn build_tps_system(p: &KeypointSet, q: &KeypointSet, lambda: f64) -> Result<TpsSystem> {
    check_tps_inputs(p, q, lambda)?;
    let psi = tps_system_matrix(p.as_tensor(), lambda)?;
    let z = q.as_tensor().pad_rows(p.dim() + 1);
    Ok(TpsSystem { psi, z })
}

/// TPS taking `p` onto `q` (exactly when `λ = 0`).
pub fn solve_tps(p: &KeypointSet, q: &KeypointSet, lambda: f64) -> Result<TpsParams> {
    let sys = build_tps_system(p, q, lambda)?;
    let theta = solve_linear(&sys.psi, &sys.z)
        .map_err(|e| Error::DegenerateConfiguration(format!("TPS system: {e}")))?;
    let n = p.len();
    TpsParams::new(
        theta.slice_rows(0, n),
        theta.slice_rows(n, n + p.dim() + 1),
        p.clone(),
        lambda,
    )
}

pub fn tps_apply(theta: &TpsParams, pts: &KeypointSet) -> Result<KeypointSet> {
    if pts.dim() != theta.dim() {
        return Err(shape_err(format!("{}D points through a {}D TPS", pts.dim(), theta.dim())));
    }
    KeypointSet::new(tps_eval_forward(
        &theta.w,
        &theta.a,
        theta.control_points.as_tensor(),
        pts.as_tensor(),
    )?)
}

/// `trace(Wᵀ K W)` with `K` built at `λ = 0`, clamped at zero.
pub fn bending_energy(theta: &TpsParams) -> f64 {
    let (n, d) = theta.w.dims2();
    let c = theta.control_points.as_tensor().data();
    let w = theta.w.data();
    let mut e = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let k = tps_kernel_sq(dist2(&c[i * d..(i + 1) * d], &c[j * d..(j + 1) * d]));
            let dot: f64 = (0..d).map(|a| w[i * d + a] * w[j * d + a]).sum();
            e += 2.0 * k * dot;
        }
    }
    e.max(0.0)
}

/// Either closed-form family, serialized as `{"kind": "affine" | "tps", ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformParams {
    Affine(AffineParams),
    Tps(TpsParams),
}

impl TransformParams {
    pub fn dim(&self) -> usize {
        match self {
            Self::Affine(a) => a.dim(),
            Self::Tps(t) => t.dim(),
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Self::Affine(_) => None,
            Self::Tps(t) => Some(t.lambda),
        }
    }

    /// Maps an `M×D` point matrix.
    pub fn map_points(&self, pts: &NdTensor) -> Result<NdTensor> {
        match self {
            Self::Affine(a) => a.apply_raw(pts),
            Self::Tps(t) => {
                if pts.ndim() != 2 || pts.shape()[1] != t.dim() {
                    return Err(shape_err("points do not match TPS dimension"));
                }
                tps_eval_forward(&t.w, &t.a, t.control_points.as_tensor(), pts)
            }
        }
    }

    pub fn apply(&self, pts: &KeypointSet) -> Result<KeypointSet> {
        KeypointSet::new(self.map_points(pts.as_tensor())?)
    }

    /// `T(g)` for every voxel `g` of a grid, as `[prod(grid), D]`.
    pub fn dense_map(&self, grid_shape: &[usize]) -> Result<NdTensor> {
        if grid_shape.len() != self.dim() {
            return Err(shape_err(format!(
                "{}D grid for a {}D transform",
                grid_shape.len(),
                self.dim()
            )));
        }
        let m: usize = grid_shape.iter().product();
        let g = NdTensor::new(vec![m, grid_shape.len()], grid_coordinates(grid_shape))?;
        self.map_points(&g)
    }
}

/// Per-voxel `T(g) − g`, shaped `grid_shape × D`.
pub fn dense_displacement(transform: &TransformParams, grid_shape: &[usize]) -> Result<NdTensor> {
    let mapped = transform.dense_map(grid_shape)?;
    let g = grid_coordinates(grid_shape);
    let mut shape = grid_shape.to_vec();
    shape.push(grid_shape.len());
    let data = mapped.data().iter().zip(&g).map(|(t, x)| t - x).collect();
    NdTensor::new(shape, data)
}

/// A transform solved on a tape, ready to map query points differentiably.
#[derive(Debug, Clone, Copy)]
pub enum TapeTransform {
    /// `D×(D+1)` matrix.
    Affine(Var),
    Tps { w: Var, a: Var, control: Var },
}

/// Differentiable least-squares affine from `p` (N×D) to `q` (N×D).
pub fn solve_affine_on_tape(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let (n, d) = tape.value(p).dims2();
    if tape.value(q).shape() != [n, d] {
        return Err(shape_err("keypoint sets do not correspond"));
    }
    if n <= d {
        return Err(Error::DegenerateConfiguration(format!("{n} points in {d}D")));
    }
    let ph = tape.homogeneous(p)?;
    let pht = tape.transpose(ph)?;
    let gram = tape.matmul(pht, ph)?;
    let rhs = tape.matmul(pht, q)?;
    let at = tape.solve(gram, rhs).map_err(|_| {
        Error::DegenerateConfiguration("P̃P̃ᵀ is singular (collinear or coplanar points)".into())
    })?;
    tape.transpose(at)
}

/// Differentiable TPS from `p` onto `q`; returns `(W, A)`.
pub fn solve_tps_on_tape(tape: &mut Tape, p: Var, q: Var, lambda: f64) -> Result<(Var, Var)> {
    let pk = KeypointSet::new(tape.value(p).clone())?;
    let qk = KeypointSet::new(tape.value(q).clone())?;
    check_tps_inputs(&pk, &qk, lambda)?;
    let (n, d) = tape.value(p).dims2();
    let psi = tape.tps_system(p, lambda)?;
    let z = tape.pad_rows(q, d + 1)?;
    let theta = tape
        .solve(psi, z)
        .map_err(|e| Error::DegenerateConfiguration(format!("TPS system: {e}")))?;
    let w = tape.slice_rows(theta, 0, n)?;
    let a = tape.slice_rows(theta, n, n + d + 1)?;
    Ok((w, a))
}

/// Transform family requested by a caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformKind {
    Affine,
    Tps { lambda: f64 },
}

impl TapeTransform {
    /// Solves the transform mapping `source` points onto `target` points.
    pub fn solve(tape: &mut Tape, kind: TransformKind, source: Var, target: Var) -> Result<Self> {
        Ok(match kind {
            TransformKind::Affine => Self::Affine(solve_affine_on_tape(tape, source, target)?),
            TransformKind::Tps { lambda } => {
                let (w, a) = solve_tps_on_tape(tape, source, target, lambda)?;
                Self::Tps { w, a, control: source }
            }
        })
    }

    /// Maps `query` (M×D) through the transform.
    pub fn map(&self, tape: &mut Tape, query: Var) -> Result<Var> {
        match *self {
            Self::Affine(a) => {
                let qh = tape.homogeneous(query)?;
                let at = tape.transpose(a)?;
                tape.matmul(qh, at)
            }
            Self::Tps { w, a, control } => tape.tps_eval(w, a, control, query),
        }
    }

    /// Extracts plain parameters from the tape values.
    pub fn params(&self, tape: &Tape, kind: TransformKind) -> Result<TransformParams> {
        Ok(match (*self, kind) {
            (Self::Affine(a), _) => TransformParams::Affine(AffineParams::new(tape.value(a).clone())?),
            (Self::Tps { w, a, control }, TransformKind::Tps { lambda }) => TransformParams::Tps(TpsParams::new(
                tape.value(w).clone(),
                tape.value(a).clone(),
                KeypointSet::new(tape.value(control).clone())?,
                lambda,
            )?),
            (Self::Tps { .. }, TransformKind::Affine) => {
                return Err(Error::InvalidArgument("kind does not match tape transform".into()))
            }
        })
    }
}

/// Solves the requested family from `source` onto `target`.
pub fn solve_transform(kind: TransformKind, source: &KeypointSet, target: &KeypointSet) -> Result<TransformParams> {
    Ok(match kind {
        TransformKind::Affine => TransformParams::Affine(solve_affine(source, target)?),
        TransformKind::Tps { lambda } => TransformParams::Tps(solve_tps(source, target, lambda)?),
    })
}
