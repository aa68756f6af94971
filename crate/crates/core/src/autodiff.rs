//! Reverse-mode differentiation over a Wengert tape.
//!
//! Operations are recorded in creation order, which is already a topological
//! order, so `backward` is a single reverse sweep. Each node keeps its value;
//! backward rules recompute whatever else they need from parent values.
//!
//! The closed-form solves are differentiated with the adjoint rule
//! (`dB = M⁻ᵀ dX`, `dM = −dB Xᵀ`) rather than through the factorization.

use crate::error::{shape_err, Error, Result};
use crate::nn;
use crate::tensor::{LuFactors, NdTensor};
use crate::transforms;
use crate::warp::{self, Padding, SampleMode};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Sin(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Homogeneous(Var),
    SliceRows(Var, usize),
    PadRows(Var),
    Solve { m: Var, b: Var, lu: Box<LuFactors> },
    TpsSystem(Var),
    TpsEval { w: Var, a: Var, control: Var, query: Var },
    GridSample { img: Var, coords: Var, mode: SampleMode, padding: Padding },
    Conv { input: Var, weight: Var, bias: Var, stride: usize },
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    Com { act: Var, temperature: f64, weights: NdTensor },
    Mse(Var, Var),
    SoftDice(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: NdTensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph under construction. Confined to one thread; build a
/// fresh tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Smoothing constant of the soft-Dice ratio.
pub const SOFT_DICE_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: NdTensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: NdTensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &NdTensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: NdTensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: NdTensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.derived(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.derived(v, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.derived(v, Op::Sqrt(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.derived(v, Op::Sin(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.derived(v, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = NdTensor::scalar(self.value(a).sum());
        self.derived(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = NdTensor::scalar(t.sum() / t.len() as f64);
        self.derived(v, Op::Mean(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() != 2 {
            return Err(shape_err("transpose needs a matrix"));
        }
        let v = self.value(a).transpose();
        Ok(self.derived(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.derived(v, Op::Reshape(a), &[a]))
    }

    /// Appends a column of ones to an `N×D` point matrix.
    pub fn homogeneous(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() != 2 {
            return Err(shape_err("homogeneous lift needs a matrix"));
        }
        let v = self.value(a).homogeneous();
        Ok(self.derived(v, Op::Homogeneous(a), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 || start >= end || end > t.shape()[0] {
            return Err(shape_err(format!("rows {start}..{end} of {:?}", t.shape())));
        }
        let v = t.slice_rows(start, end);
        Ok(self.derived(v, Op::SliceRows(a, start), &[a]))
    }

    /// Appends `extra` zero rows.
    pub fn pad_rows(&mut self, a: Var, extra: usize) -> Result<Var> {
        if self.value(a).ndim() != 2 {
            return Err(shape_err("pad_rows needs a matrix"));
        }
        let v = self.value(a).pad_rows(extra);
        Ok(self.derived(v, Op::PadRows(a), &[a]))
    }

    /// `M⁻¹ B` via partial-pivot LU.
    pub fn solve(&mut self, m: Var, b: Var) -> Result<Var> {
        let lu = LuFactors::factor(self.value(m))?;
        let x = lu.solve(self.value(b))?;
        Ok(self.derived(x, Op::Solve { m, b, lu: Box::new(lu) }, &[m, b]))
    }

    /// The TPS block matrix `[[K + λI, L], [Lᵀ, 0]]` built from source points.
    pub fn tps_system(&mut self, points: Var, lambda: f64) -> Result<Var> {
        let v = transforms::tps_system_matrix(self.value(points), lambda)?;
        Ok(self.derived(v, Op::TpsSystem(points), &[points]))
    }

    /// Evaluates a TPS (`w`: N×D, `a`: (D+1)×D, anchored at `control`) at
    /// `query` points (M×D).
    pub fn tps_eval(&mut self, w: Var, a: Var, control: Var, query: Var) -> Result<Var> {
        let v = transforms::tps_eval_forward(
            self.value(w),
            self.value(a),
            self.value(control),
            self.value(query),
        )?;
        Ok(self.derived(v, Op::TpsEval { w, a, control, query }, &[w, a, control, query]))
    }

    /// Samples `img` (`[C, spatial..]`) at normalized `coords` (`[M, D]`),
    /// producing `[C, out_spatial..]`.
    pub fn grid_sample(
        &mut self,
        img: Var,
        coords: Var,
        out_spatial: &[usize],
        mode: SampleMode,
        padding: Padding,
    ) -> Result<Var> {
        let v = warp::grid_sample_forward(
            self.value(img),
            self.value(coords),
            out_spatial,
            mode,
            padding,
        )?;
        Ok(self.derived(v, Op::GridSample { img, coords, mode, padding }, &[img, coords]))
    }

    /// Zero-padded convolution, `input` `[Cin, spatial..]`, `weight`
    /// `[Cout, Cin, k..]`, `bias` `[Cout]`.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let v = nn::conv_forward(self.value(input), self.value(weight), self.value(bias), stride)?;
        Ok(self.derived(v, Op::Conv { input, weight, bias, stride }, &[input, weight, bias]))
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (v, inv_std) = nn::instance_norm_forward(self.value(x), eps);
        self.derived(v, Op::InstanceNorm { x, inv_std }, &[x])
    }

    /// Spatial-softmax center of mass: `[N, spatial..]` to `N×D` keypoints.
    pub fn center_of_mass(&mut self, act: Var, temperature: f64) -> Result<Var> {
        let (kp, weights) = nn::com_forward(self.value(act), temperature)?;
        Ok(self.derived(kp, Op::Com { act, temperature, weights }, &[act]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = NdTensor::scalar(s / ta.len() as f64);
        Ok(self.derived(v, Op::Mse(a, b), &[a, b]))
    }

    /// `1 − mean_l (2Σpg + ε)/(Σp + Σg + ε)` over the leading (label) axis.
    pub fn soft_dice(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target)?;
        let (p, g) = (self.value(pred), self.value(target));
        let dice = soft_dice_terms(p, g)
            .iter()
            .map(|&(num, den)| num / den)
            .sum::<f64>()
            / p.shape()[0] as f64;
        Ok(self.derived(NdTensor::scalar(1.0 - dice), Op::SoftDice(pred, target), &[pred, target]))
    }

    /// Frobenius norm of `a − b`.
    pub fn frobenius_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        let s = self.sum(sq);
        Ok(self.sqrt(s))
    }

    /// Runs the reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<NdTensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(NdTensor::filled(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<NdTensor>], v: Var, g: NdTensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign_scaled(&g, 1.0),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &NdTensor, grads: &mut [Option<NdTensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Square(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| 2.0 * x * d)?)
            }
            Op::Sqrt(a) => {
                // d sqrt(x) at x = 0 is taken as 0
                let gv = g.zip_map(&node.value, |d, y| if y > 0.0 { d / (2.0 * y) } else { 0.0 })?;
                self.accumulate(grads, *a, gv)
            }
            Op::Sin(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| d * x.cos())?),
            Op::Relu(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })?)
            }
            Op::Sum(a) => {
                let t = NdTensor::filled(self.value(*a).shape(), g.data()[0]);
                self.accumulate(grads, *a, t)
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let t = NdTensor::filled(self.value(*a).shape(), g.data()[0] / n);
                self.accumulate(grads, *a, t)
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(&self.value(*b).transpose())?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).transpose().matmul(g)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => self.accumulate(grads, *a, g.reshape(self.value(*a).shape())?),
            Op::Homogeneous(a) => {
                let (r, c) = g.dims2();
                let mut out = Vec::with_capacity(r * (c - 1));
                for i in 0..r {
                    out.extend_from_slice(&g.data()[i * c..i * c + c - 1]);
                }
                self.accumulate(grads, *a, NdTensor::new(vec![r, c - 1], out)?)
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let cols = src.shape()[1];
                let mut out = NdTensor::zeros(src.shape());
                out.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, out)
            }
            Op::PadRows(a) => {
                let (r, _) = self.value(*a).dims2();
                self.accumulate(grads, *a, g.slice_rows(0, r))
            }
            Op::Solve { m, b, lu } => {
                let db = lu.solve_transposed(g)?;
                if self.needs(*m) {
                    let dm = db.matmul(&node.value.transpose())?.scale(-1.0);
                    self.accumulate(grads, *m, dm);
                }
                self.accumulate(grads, *b, db);
            }
            Op::TpsSystem(p) => {
                let dp = transforms::tps_system_backward(self.value(*p), g);
                self.accumulate(grads, *p, dp)
            }
            Op::TpsEval { w, a, control, query } => {
                let bw = transforms::tps_eval_backward(
                    self.value(*w),
                    self.value(*a),
                    self.value(*control),
                    self.value(*query),
                    g,
                    self.needs(*control),
                    self.needs(*query),
                )?;
                self.accumulate(grads, *w, bw.dw);
                self.accumulate(grads, *a, bw.da);
                if let Some(dc) = bw.dcontrol {
                    self.accumulate(grads, *control, dc);
                }
                if let Some(dq) = bw.dquery {
                    self.accumulate(grads, *query, dq);
                }
            }
            Op::GridSample { img, coords, mode, padding } => {
                let (dimg, dcoords) = warp::grid_sample_backward(
                    self.value(*img),
                    self.value(*coords),
                    &node.value.shape()[1..],
                    *mode,
                    *padding,
                    g,
                    self.needs(*img),
                    self.needs(*coords),
                )?;
                if let Some(d) = dimg {
                    self.accumulate(grads, *img, d);
                }
                if let Some(d) = dcoords {
                    self.accumulate(grads, *coords, d);
                }
            }
            Op::Conv { input, weight, bias, stride } => {
                let bw = nn::conv_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    g,
                    self.needs(*input),
                )?;
                if let Some(d) = bw.dinput {
                    self.accumulate(grads, *input, d);
                }
                self.accumulate(grads, *weight, bw.dweight);
                self.accumulate(grads, *bias, bw.dbias);
            }
            Op::InstanceNorm { x, inv_std } => {
                let dx = nn::instance_norm_backward(&node.value, inv_std, g);
                self.accumulate(grads, *x, dx)
            }
            Op::Com { act, temperature, weights } => {
                let da = nn::com_backward(weights, *temperature, g);
                self.accumulate(grads, *act, da)
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.data()[0] / ta.len() as f64;
                let d = ta.zip_map(tb, |x, y| k * (x - y))?;
                if self.needs(*b) {
                    self.accumulate(grads, *b, d.scale(-1.0));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftDice(p, t) => {
                let (tp, tg) = (self.value(*p), self.value(*t));
                let terms = soft_dice_terms(tp, tg);
                let labels = tp.shape()[0];
                let per = tp.len() / labels;
                let k = -g.data()[0] / labels as f64;
                // d(num/den)/dp_j = (2 g_j den − num) / den²
                let partial = |own: &NdTensor, other: &NdTensor| {
                    let mut out = NdTensor::zeros(own.shape());
                    for (l, &(num, den)) in terms.iter().enumerate() {
                        for j in l * per..(l + 1) * per {
                            out.data_mut()[j] = k * (2.0 * other.data()[j] * den - num) / (den * den);
                        }
                    }
                    out
                };
                if self.needs(*p) {
                    self.accumulate(grads, *p, partial(tp, tg));
                }
                if self.needs(*t) {
                    self.accumulate(grads, *t, partial(tg, tp));
                }
            }
        }
        Ok(())
    }
}

/// Per-label `(2Σpg + ε, Σp + Σg + ε)`.
fn soft_dice_terms(p: &NdTensor, g: &NdTensor) -> Vec<(f64, f64)> {
    let labels = p.shape()[0];
    let per = p.len() / labels;
    (0..labels)
        .map(|l| {
            let r = l * per..(l + 1) * per;
            let (mut pg, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for (a, b) in p.data()[r.clone()].iter().zip(&g.data()[r]) {
                pg += a * b;
                sp += a;
                sg += b;
            }
            (2.0 * pg + SOFT_DICE_EPS, sp + sg + SOFT_DICE_EPS)
        })
        .collect()
}

/// Gradients of a root with respect to every node that influenced it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NdTensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zero when `v` was unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> NdTensor {
        self.get(v).cloned().unwrap_or_else(|| NdTensor::zeros(tape.value(v).shape()))
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// `(input, element)` with the largest error.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
}

/// Compares analytic gradients of `f` against central differences with step
/// `h`. Relative error per element is `|a − n| / max(|a|, |n|, 1e-6)`; the
/// floor keeps difference roundoff on vanishing gradients from counting.
pub fn gradcheck<F>(f: F, inputs: &[NdTensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let eval = |xs: &[NdTensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NondeterministicFunction { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradcheckReport { max_rel_err: 0.0, pass: true, worst: (0, 0), worst_values: (0.0, 0.0) };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (i, j);
                report.worst_values = (a, numeric);
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdTensor {
        let n = shape.iter().product();
        NdTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.square(x);
        let root = tape.sum(sq);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdTensor::zeros(&[4]));
        let c = tape.constant(NdTensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(&tape, x), NdTensor::zeros(&[4]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdTensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdTensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gradcheck_sin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[7]);
        let rep = gradcheck(
            |t, v| {
                let s = t.sin(v[0]);
                Ok(t.sum(s))
            },
            &[x],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn gradcheck_rejects_bad_step() {
        let x = NdTensor::zeros(&[1]);
        let r = gradcheck(|t, v| Ok(t.sum(v[0])), &[x], 1e-2, 1e-3);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gradcheck_detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = NdTensor::zeros(&[1]);
        let r = gradcheck(
            |t, v| {
                calls.set(calls.get() + 1.0);
                Ok(t.add_scalar(v[0], calls.get()))
            },
            &[x],
            1e-4,
            1e-3,
        );
        assert!(matches!(r, Err(Error::NondeterministicFunction { .. })));
    }

    #[test]
    fn solve_adjoint_matches_formula_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = rand_tensor(&mut rng, &[4, 4]);
        for i in 0..4 {
            m.set2(i, i, m.get2(i, i) + 3.0);
        }
        let b = rand_tensor(&mut rng, &[4, 2]);
        let wts = rand_tensor(&mut rng, &[4, 2]);
        let build = |t: &mut Tape, v: &[Var]| {
            let x = t.solve(v[0], v[1])?;
            let w = t.constant(wts.clone());
            let p = t.mul(x, w)?;
            Ok(t.sum(p))
        };
        let rep = gradcheck(build, &[m.clone(), b.clone()], 1e-5, 1e-6).unwrap();
        assert!(rep.pass, "{rep:?}");

        // explicit adjoint: dB = M⁻ᵀ W, dM = −dB Xᵀ
        let mut tape = Tape::new();
        let (mv, bv) = (tape.leaf(m.clone()), tape.leaf(b.clone()));
        let root = build(&mut tape, &[mv, bv]).unwrap();
        let g = tape.backward(root).unwrap();
        let db = crate::tensor::solve_linear(&m.transpose(), &wts).unwrap();
        let x = crate::tensor::solve_linear(&m, &b).unwrap();
        let dm = db.matmul(&x.transpose()).unwrap().scale(-1.0);
        assert!(g.wrt(&tape, bv).max_abs_diff(&db) < 1e-12);
        assert!(g.wrt(&tape, mv).max_abs_diff(&dm) < 1e-12);
    }

    #[test]
    fn gradient_is_linear_in_the_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_tensor(&mut rng, &[5]);
        let grad_of = |a: f64, b: f64| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let s = t.sin(x);
            let f = t.sum(s);
            let sq = t.square(x);
            let gq = t.mean(sq);
            let fa = t.scale(f, a);
            let gb = t.scale(gq, b);
            let root = t.add(fa, gb).unwrap();
            t.backward(root).unwrap().wrt(&t, x)
        };
        let (a, b) = (1.7, -0.4);
        let combined = grad_of(a, b);
        let parts = grad_of(1.0, 0.0).scale(a).add(&grad_of(0.0, 1.0).scale(b)).unwrap();
        assert!(combined.max_abs_diff(&parts) < 1e-14);
    }

    #[test]
    fn soft_dice_gradcheck() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_tensor(&mut rng, &[2, 4, 4]).map(|x| 0.5 + 0.4 * x);
            let q = rand_tensor(&mut rng, &[2, 4, 4]).map(|x| 0.5 + 0.4 * x);
            let rep = gradcheck(|t, v| t.soft_dice(v[0], v[1]), &[p, q], 1e-5, 1e-3).unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }

    #[test]
    fn mse_and_matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = rand_tensor(&mut rng, &[3, 2]);
        let rep = gradcheck(
            |t, v| {
                let ab = t.matmul(v[0], v[1])?;
                let tr = t.transpose(ab)?;
                let tt = t.transpose(tr)?;
                t.mse(tt, v[2])
            },
            &[a, b, c],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
