//! Layer kernels of the keypoint detector: zero-padded convolution, instance
//! normalization and the spatial-softmax center-of-mass head. Forward and
//! backward passes both live here; the tape in [`crate::autodiff`] wires
//! them together.
//!
//! Activations are `[C, spatial..]` with 2 or 3 spatial axes. Two-dimensional
//! data is handled as depth-1 volumes with depth-1 kernels.

use crate::error::{shape_err, Error, Result};
use crate::tensor::NdTensor;
use crate::warp::normalized_coord;

/// Spatial extents padded to three axes, plus the kernel extent per axis.
#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

fn geometry(input: &NdTensor, weight: &NdTensor, stride: usize) -> Result<Geom> {
    let sd = input.ndim().checked_sub(1).filter(|d| (2..=3).contains(d));
    let Some(sd) = sd else {
        return Err(shape_err(format!("conv input must be [C, 2 or 3 spatial], got {:?}", input.shape())));
    };
    if weight.ndim() != sd + 2 || weight.shape()[1] != input.shape()[0] {
        return Err(shape_err(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    let mut inp = [1; 3];
    let mut k = [1; 3];
    let mut st = [1; 3];
    let mut pad = [0; 3];
    for d in 0..sd {
        inp[3 - sd + d] = input.shape()[1 + d];
        k[3 - sd + d] = weight.shape()[2 + d];
        st[3 - sd + d] = stride;
        pad[3 - sd + d] = weight.shape()[2 + d] / 2;
    }
    let mut out = [1; 3];
    for a in 0..3 {
        if inp[a] + 2 * pad[a] < k[a] {
            return Err(shape_err("kernel larger than padded input"));
        }
        out[a] = (inp[a] + 2 * pad[a] - k[a]) / st[a] + 1;
    }
    Ok(Geom { cin: input.shape()[0], cout: weight.shape()[0], inp, out, k, stride: st, pad })
}

/// Output positions `o` along one axis for which `o·s + kk − p` is inside `[0, n)`.
fn valid_range(n_in: usize, n_out: usize, kk: usize, s: usize, p: usize) -> (usize, usize) {
    // o·s + kk ≥ p  and  o·s + kk − p ≤ n_in − 1
    let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
    let hi = if n_in + p > kk { ((n_in + p - kk - 1) / s + 1).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

fn out_shape(g: &Geom, sd: usize) -> Vec<usize> {
    let mut s = vec![g.cout];
    s.extend_from_slice(&g.out[3 - sd..]);
    s
}

pub fn conv_forward(input: &NdTensor, weight: &NdTensor, bias: &NdTensor, stride: usize) -> Result<NdTensor> {
    let g = geometry(input, weight, stride)?;
    if bias.len() != g.cout {
        return Err(shape_err(format!("bias has {} entries for {} channels", bias.len(), g.cout)));
    }
    let sd = input.ndim() - 1;
    let [id, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    let ospatial = od * oh * ow;
    let mut out = vec![0.0; g.cout * ospatial];
    let (x, w) = (input.data(), weight.data());
    let ksz = g.k[0] * g.k[1] * g.k[2];
    for co in 0..g.cout {
        let o = &mut out[co * ospatial..(co + 1) * ospatial];
        o.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..g.cin {
            let xin = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
            for kz in 0..g.k[0] {
                let (z0, z1) = valid_range(id, od, kz, g.stride[0], g.pad[0]);
                for ky in 0..g.k[1] {
                    let (y0, y1) = valid_range(ih, oh, ky, g.stride[1], g.pad[1]);
                    for kx in 0..g.k[2] {
                        let (x0, x1) = valid_range(iw, ow, kx, g.stride[2], g.pad[2]);
                        let wv = w[(co * g.cin + ci) * ksz + (kz * g.k[1] + ky) * g.k[2] + kx];
                        for oz in z0..z1 {
                            let iz = oz * g.stride[0] + kz - g.pad[0];
                            for oy in y0..y1 {
                                let iy = oy * g.stride[1] + ky - g.pad[1];
                                let orow = &mut o[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let irow = &xin[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                                let s = g.stride[2];
                                for ox in x0..x1 {
                                    orow[ox] += wv * irow[ox * s + kx - g.pad[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    NdTensor::new(out_shape(&g, sd), out)
}

pub struct ConvGrads {
    pub dinput: Option<NdTensor>,
    pub dweight: NdTensor,
    pub dbias: NdTensor,
}

pub fn conv_backward(
    input: &NdTensor,
    weight: &NdTensor,
    stride: usize,
    dout: &NdTensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = geometry(input, weight, stride)?;
    let [id, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    let ospatial = od * oh * ow;
    let ispatial = id * ih * iw;
    let ksz = g.k[0] * g.k[1] * g.k[2];
    let (x, w, dy) = (input.data(), weight.data(), dout.data());
    let mut dx = if need_input { vec![0.0; input.len()] } else { Vec::new() };
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.cout];
    for co in 0..g.cout {
        let gy = &dy[co * ospatial..(co + 1) * ospatial];
        db[co] = gy.iter().sum();
        for ci in 0..g.cin {
            let xin = &x[ci * ispatial..(ci + 1) * ispatial];
            for kz in 0..g.k[0] {
                let (z0, z1) = valid_range(id, od, kz, g.stride[0], g.pad[0]);
                for ky in 0..g.k[1] {
                    let (y0, y1) = valid_range(ih, oh, ky, g.stride[1], g.pad[1]);
                    for kx in 0..g.k[2] {
                        let (x0, x1) = valid_range(iw, ow, kx, g.stride[2], g.pad[2]);
                        let widx = (co * g.cin + ci) * ksz + (kz * g.k[1] + ky) * g.k[2] + kx;
                        let wv = w[widx];
                        let s = g.stride[2];
                        let mut acc = 0.0;
                        for oz in z0..z1 {
                            let iz = oz * g.stride[0] + kz - g.pad[0];
                            for oy in y0..y1 {
                                let iy = oy * g.stride[1] + ky - g.pad[1];
                                let grow = &gy[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                let ibase = (iz * ih + iy) * iw;
                                let irow = &xin[ibase..ibase + iw];
                                for ox in x0..x1 {
                                    acc += grow[ox] * irow[ox * s + kx - g.pad[2]];
                                }
                                if need_input {
                                    let drow = &mut dx[ci * ispatial + ibase..ci * ispatial + ibase + iw];
                                    for ox in x0..x1 {
                                        drow[ox * s + kx - g.pad[2]] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dinput: if need_input { Some(NdTensor::new(input.shape().to_vec(), dx)?) } else { None },
        dweight: NdTensor::new(weight.shape().to_vec(), dw)?,
        dbias: NdTensor::new(vec![g.cout], db)?,
    })
}

/// Per-channel normalization over all spatial positions (no learned affine).
/// Returns the output and the per-channel `1/σ`.
pub fn instance_norm_forward(x: &NdTensor, eps: f64) -> (NdTensor, Vec<f64>) {
    let c = x.shape()[0];
    let per = x.len() / c;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(c);
    for ch in out.data_mut().chunks_exact_mut(per) {
        let mean = ch.iter().sum::<f64>() / per as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let is = 1.0 / (var + eps).sqrt();
        ch.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    (out, inv_std)
}

/// `dx = (1/σ)(dy − mean(dy) − y·mean(dy·y))` per channel.
pub fn instance_norm_backward(y: &NdTensor, inv_std: &[f64], dy: &NdTensor) -> NdTensor {
    let c = y.shape()[0];
    let per = y.len() / c;
    let mut dx = NdTensor::zeros(y.shape());
    for ch in 0..c {
        let r = ch * per..(ch + 1) * per;
        let (ys, gs) = (&y.data()[r.clone()], &dy.data()[r.clone()]);
        let mg = gs.iter().sum::<f64>() / per as f64;
        let mgy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / per as f64;
        for ((d, g), yv) in dx.data_mut()[r].iter_mut().zip(gs).zip(ys) {
            *d = inv_std[ch] * (g - mg - yv * mgy);
        }
    }
    dx
}

/// Normalized cell-centered coordinates of every position of a spatial grid,
/// as a `[prod(spatial), D]` row-major list (last axis fastest).
pub fn grid_coordinates(spatial: &[usize]) -> Vec<f64> {
    let d = spatial.len();
    let m: usize = spatial.iter().product();
    let mut out = vec![0.0; m * d];
    let mut idx = vec![0usize; d];
    for j in 0..m {
        for a in 0..d {
            out[j * d + a] = normalized_coord(idx[a], spatial[a]);
        }
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < spatial[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

/// Center of mass of each channel of `[N, spatial..]` under softmax weights
/// `softmax(temperature·a)`. Returns the `N×D` keypoints and the weights.
pub fn com_forward(act: &NdTensor, temperature: f64) -> Result<(NdTensor, NdTensor)> {
    if act.ndim() < 2 {
        return Err(shape_err(format!("CoM needs [N, spatial..], got {:?}", act.shape())));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let n = act.shape()[0];
    let spatial = &act.shape()[1..];
    let d = spatial.len();
    let per = act.len() / n;
    let coords = grid_coordinates(spatial);
    let mut weights = act.clone();
    let mut kp = vec![0.0; n * d];
    for (c, ch) in weights.data_mut().chunks_exact_mut(per).enumerate() {
        if ch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation(c));
        }
        let mx = ch.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(temperature * v));
        let mut z = 0.0;
        for v in ch.iter_mut() {
            *v = (temperature * *v - mx).exp();
            z += *v;
        }
        for (j, v) in ch.iter_mut().enumerate() {
            *v /= z;
            for a in 0..d {
                kp[c * d + a] += *v * coords[j * d + a];
            }
        }
    }
    Ok((NdTensor::new(vec![n, d], kp)?, weights))
}

pub fn com_backward(weights: &NdTensor, temperature: f64, dkp: &NdTensor) -> NdTensor {
    let n = weights.shape()[0];
    let spatial = &weights.shape()[1..];
    let d = spatial.len();
    let per = weights.len() / n;
    let coords = grid_coordinates(spatial);
    let mut da = NdTensor::zeros(weights.shape());
    for c in 0..n {
        let w = &weights.data()[c * per..(c + 1) * per];
        let g = &dkp.data()[c * d..(c + 1) * d];
        // dL/dw_j = g · coord_j ; softmax Jacobian: w_j (dw_j − Σ w dw)
        let dw: Vec<f64> =
            (0..per).map(|j| (0..d).map(|a| g[a] * coords[j * d + a]).sum()).collect();
        let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        for (j, out) in da.data_mut()[c * per..(c + 1) * per].iter_mut().enumerate() {
            *out = temperature * w[j] * (dw[j] - mean);
        }
    }
    da
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdTensor {
        let n = shape.iter().product();
        NdTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct definition of a zero-padded strided convolution, one output at a time.
    fn conv_reference_2d(x: &NdTensor, w: &NdTensor, b: &NdTensor, s: usize) -> NdTensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let p = k / 2;
        let (oh, ow) = ((h + 2 * p - k) / s + 1, (wd + 2 * p - k) / s + 1);
        let mut out = NdTensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                    * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, s, k) in [(8, 1, 3), (8, 2, 3), (7, 2, 3), (6, 1, 1)] {
            let x = rand_tensor(&mut rng, &[3, h, h + 1]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let b = rand_tensor(&mut rng, &[4]);
            let got = conv_forward(&x, &w, &b, s).unwrap();
            let want = conv_reference_2d(&x, &w, &b, s);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_3d_with_depth_one_kernel_matches_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 6, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let y2 = conv_forward(&x, &w, &b, 2).unwrap();
        let x3 = x.reshape(&[2, 1, 6, 6]).unwrap();
        let w3 = w.reshape(&[3, 2, 1, 3, 3]).unwrap();
        let y3 = conv_forward(&x3, &w3, &b, 1).unwrap();
        // stride 1 in 3D vs stride 2 in 2D differ; compare stride-1 2D instead
        let y2s1 = conv_forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y3.data(), y2s1.data());
        assert_eq!(y2.shape(), &[3, 3, 3]);
    }

    #[test]
    fn conv_gradcheck() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 5, 6]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            let probe = rand_tensor(&mut rng, &[3, 3, 3]);
            let rep = gradcheck(
                |t, v| {
                    let y = t.conv(v[0], v[1], v[2], 2)?;
                    let p = t.constant(probe.clone());
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &[x, w, b],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }

    #[test]
    fn conv_3d_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[1, 4, 4, 4]);
        let w = rand_tensor(&mut rng, &[2, 1, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        let rep = gradcheck(
            |t, v| {
                let y = t.conv(v[0], v[1], v[2], 2)?;
                let s = t.square(y);
                Ok(t.sum(s))
            },
            &[x, w, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn instance_norm_normalizes_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let (y, _) = instance_norm_forward(&x, 1e-5);
        for ch in y.data().chunks(16) {
            let m: f64 = ch.iter().sum::<f64>() / 16.0;
            let v: f64 = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        let probe = rand_tensor(&mut rng, &[3, 4, 4]);
        let rep = gradcheck(
            |t, v| {
                let y = t.instance_norm(v[0], 1e-5);
                let p = t.constant(probe.clone());
                let m = t.mul(y, p)?;
                Ok(t.sum(m))
            },
            &[x],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn com_uniform_map_lands_on_centroid() {
        let act = NdTensor::filled(&[2, 8, 8], 0.3);
        let (kp, _) = com_forward(&act, 1.0).unwrap();
        assert!(kp.max_abs() < 1e-12);
    }

    #[test]
    fn com_spike_and_midpoint() {
        let mut act = NdTensor::zeros(&[1, 16, 16]);
        act.data_mut()[3 * 16 + 11] = 50.0;
        let (kp, _) = com_forward(&act, 1.0).unwrap();
        let want = [normalized_coord(3, 16), normalized_coord(11, 16)];
        assert!((kp.data()[0] - want[0]).abs() < 1e-4);
        assert!((kp.data()[1] - want[1]).abs() < 1e-4);

        let mut act = NdTensor::zeros(&[1, 16, 16]);
        act.data_mut()[2 * 16 + 2] = 50.0;
        act.data_mut()[9 * 16 + 13] = 50.0;
        let (kp, _) = com_forward(&act, 1.0).unwrap();
        let mid = [
            0.5 * (normalized_coord(2, 16) + normalized_coord(9, 16)),
            0.5 * (normalized_coord(2, 16) + normalized_coord(13, 16)),
        ];
        assert!((kp.data()[0] - mid[0]).abs() < 1e-6);
        assert!((kp.data()[1] - mid[1]).abs() < 1e-6);
    }

    #[test]
    fn com_rejects_non_finite() {
        let mut act = NdTensor::zeros(&[2, 4, 4]);
        act.data_mut()[20] = f64::NAN;
        assert!(matches!(com_forward(&act, 1.0), Err(Error::NonFiniteActivation(1))));
    }

    #[test]
    fn com_gradcheck() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let act = rand_tensor(&mut rng, &[3, 5, 4]).scale(3.0);
            let probe = rand_tensor(&mut rng, &[3, 2]);
            let rep = gradcheck(
                |t, v| {
                    let k = t.center_of_mass(v[0], 1.7)?;
                    let p = t.constant(probe.clone());
                    let m = t.mul(k, p)?;
                    Ok(t.sum(m))
                },
                &[act],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }
}
