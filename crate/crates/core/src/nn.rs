//! Volumetric building blocks recorded as custom tape ops.
//!
//! Feature volumes are channel-last `[H, W, D, C]` tensors for a single case.
//! Convolution weights are `[kh, kw, kd, C_in, C_out]`; depthwise weights are
//! `[kh, kw, kd, C]`.

use crate::error::{Error, Result};
use crate::tensor::{cast, Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvGeometry {
            stride: [1; 3],
            padding: kernel.map(|k| k / 2),
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// `floor((in + 2 pad - k) / stride) + 1` per axis.
    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for ax in 0..3 {
            let padded = input[ax] + 2 * self.padding[ax];
            if self.stride[ax] == 0 {
                return Err(Error::invalid("conv3d", "stride must be positive"));
            }
            if kernel[ax] > padded {
                return Err(Error::invalid(
                    "conv3d",
                    format!(
                        "kernel extent {} exceeds padded input extent {padded} on axis {ax}",
                        kernel[ax]
                    ),
                ));
            }
            out[ax] = (padded - kernel[ax]) / self.stride[ax] + 1;
        }
        Ok(out)
    }
}

/// Weights of a (general or depthwise) 3D convolution on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

fn volume_dims(op: &'static str, shape: &[usize]) -> Result<([usize; 3], usize)> {
    match shape {
        &[h, w, d, c] => Ok(([h, w, d], c)),
        _ => Err(Error::invalid(op, format!("expected an [H, W, D, C] volume, got {shape:?}"))),
    }
}

/// General cross-correlation with zero padding.
pub fn conv3d<T: Element>(tape: &mut Tape<T>, x: Var, p: &ConvParams) -> Result<Var> {
    let (dims, cin) = volume_dims("conv3d", tape.shape(x))?;
    let wshape = tape.shape(p.weight).to_vec();
    let &[kh, kw, kd, wcin, cout] = wshape.as_slice() else {
        return Err(Error::invalid("conv3d", format!("weight must be 5-D, got {wshape:?}")));
    };
    if wcin != cin {
        return Err(Error::shape("conv3d", tape.shape(x), &wshape));
    }
    if let Some(b) = p.bias {
        if tape.shape(b) != [cout] {
            return Err(Error::shape("conv3d", tape.shape(b), &[cout]));
        }
    }
    let kernel = [kh, kw, kd];
    let geom = p.geometry;
    let odims = geom.output_dims(dims, kernel)?;
    let plan = ConvPlan {
        dims,
        odims,
        kernel,
        geom,
        cin,
        cout,
    };

    let mut out = vec![T::zero(); odims.iter().product::<usize>() * cout];
    if let Some(b) = p.bias {
        let bias = tape.value(b).data();
        out.chunks_exact_mut(cout).for_each(|row| row.copy_from_slice(bias));
    }
    {
        let (xd, wd) = (tape.value(x).data(), tape.value(p.weight).data());
        plan.for_each_tap(|o, i, k| {
            let xrow = &xd[i * cin..(i + 1) * cin];
            let orow = &mut out[o * cout..(o + 1) * cout];
            let wblock = &wd[k * cin * cout..(k + 1) * cin * cout];
            for (ci, &xv) in xrow.iter().enumerate() {
                orow.iter_mut()
                    .zip(&wblock[ci * cout..(ci + 1) * cout])
                    .for_each(|(o, &w)| *o += xv * w);
            }
        });
    }

    let mut out_shape = odims.to_vec();
    out_shape.push(cout);
    let mut inputs = vec![x, p.weight];
    inputs.extend(p.bias);
    tape.record("conv3d", Tensor::from_parts(out_shape, out), &inputs, move |ctx| {
        let (xd, wd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let gx = ctx.needs(0).then(|| {
            let mut gx = vec![T::zero(); xd.len()];
            plan.for_each_tap(|o, i, k| {
                let grow = &g[o * cout..(o + 1) * cout];
                let wblock = &wd[k * cin * cout..(k + 1) * cin * cout];
                let gxrow = &mut gx[i * cin..(i + 1) * cin];
                for (ci, dst) in gxrow.iter_mut().enumerate() {
                    *dst += grow
                        .iter()
                        .zip(&wblock[ci * cout..(ci + 1) * cout])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                }
            });
            gx
        });
        let gw = ctx.needs(1).then(|| {
            let mut gw = vec![T::zero(); wd.len()];
            plan.for_each_tap(|o, i, k| {
                let grow = &g[o * cout..(o + 1) * cout];
                let xrow = &xd[i * cin..(i + 1) * cin];
                let gblock = &mut gw[k * cin * cout..(k + 1) * cin * cout];
                for (ci, &xv) in xrow.iter().enumerate() {
                    gblock[ci * cout..(ci + 1) * cout]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(dst, &gv)| *dst += xv * gv);
                }
            });
            gw
        });
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs(2).then(|| {
                let mut gb = vec![T::zero(); cout];
                g.chunks_exact(cout)
                    .for_each(|row| gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b));
                gb
            }));
        }
        grads
    })
}

/// Per-channel convolution, stride 1, "same" zero padding; channel count is
/// preserved.
pub fn dwconv3d<T: Element>(tape: &mut Tape<T>, x: Var, p: &ConvParams) -> Result<Var> {
    let (dims, c) = volume_dims("dwconv3d", tape.shape(x))?;
    let wshape = tape.shape(p.weight).to_vec();
    let &[kh, kw, kd, wc] = wshape.as_slice() else {
        return Err(Error::invalid("dwconv3d", format!("weight must be 4-D, got {wshape:?}")));
    };
    if wc != c {
        return Err(Error::shape("dwconv3d", tape.shape(x), &wshape));
    }
    if let Some(b) = p.bias {
        if tape.shape(b) != [c] {
            return Err(Error::shape("dwconv3d", tape.shape(b), &[c]));
        }
    }
    let kernel = [kh, kw, kd];
    let geom = p.geometry;
    let odims = geom.output_dims(dims, kernel)?;
    if odims != dims {
        return Err(Error::invalid(
            "dwconv3d",
            format!("geometry {geom:?} does not preserve spatial dims {dims:?}"),
        ));
    }
    let plan = ConvPlan {
        dims,
        odims,
        kernel,
        geom,
        cin: c,
        cout: c,
    };
    let mut out = vec![T::zero(); dims.iter().product::<usize>() * c];
    if let Some(b) = p.bias {
        let bias = tape.value(b).data();
        out.chunks_exact_mut(c).for_each(|row| row.copy_from_slice(bias));
    }
    {
        let (xd, wd) = (tape.value(x).data(), tape.value(p.weight).data());
        plan.for_each_tap(|o, i, k| {
            let xrow = &xd[i * c..(i + 1) * c];
            let wrow = &wd[k * c..(k + 1) * c];
            out[o * c..(o + 1) * c]
                .iter_mut()
                .zip(xrow.iter().zip(wrow))
                .for_each(|(o, (&xv, &w))| *o += xv * w);
        });
    }
    let mut out_shape = dims.to_vec();
    out_shape.push(c);
    let mut inputs = vec![x, p.weight];
    inputs.extend(p.bias);
    tape.record("dwconv3d", Tensor::from_parts(out_shape, out), &inputs, move |ctx| {
        let (xd, wd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let gx = ctx.needs(0).then(|| {
            let mut gx = vec![T::zero(); xd.len()];
            plan.for_each_tap(|o, i, k| {
                let grow = &g[o * c..(o + 1) * c];
                let wrow = &wd[k * c..(k + 1) * c];
                gx[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(grow.iter().zip(wrow))
                    .for_each(|(dst, (&gv, &w))| *dst += gv * w);
            });
            gx
        });
        let gw = ctx.needs(1).then(|| {
            let mut gw = vec![T::zero(); wd.len()];
            plan.for_each_tap(|o, i, k| {
                let grow = &g[o * c..(o + 1) * c];
                let xrow = &xd[i * c..(i + 1) * c];
                gw[k * c..(k + 1) * c]
                    .iter_mut()
                    .zip(grow.iter().zip(xrow))
                    .for_each(|(dst, (&gv, &xv))| *dst += gv * xv);
            });
            gw
        });
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs(2).then(|| {
                let mut gb = vec![T::zero(); c];
                g.chunks_exact(c)
                    .for_each(|row| gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b));
                gb
            }));
        }
        grads
    })
}

/// Index bookkeeping shared by the convolution kernels.
#[derive(Debug, Clone, Copy)]
struct ConvPlan {
    dims: [usize; 3],
    odims: [usize; 3],
    kernel: [usize; 3],
    geom: ConvGeometry,
    cin: usize,
    cout: usize,
}

impl ConvPlan {
    /// Calls `f(output voxel, input voxel, kernel tap)` for every in-bounds
    /// tap, with all three as flat spatial indices.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [h, w, d] = self.dims;
        let [oh, ow, od] = self.odims;
        let [kh, kw, kd] = self.kernel;
        let [sh, sw, sd] = self.geom.stride;
        let [ph, pw, pd] = self.geom.padding;
        debug_assert!(self.cin > 0 && self.cout > 0);
        for a in 0..oh {
            for b in 0..ow {
                for c in 0..od {
                    let o = (a * ow + b) * od + c;
                    for i in 0..kh {
                        let Some(x) = (a * sh + i).checked_sub(ph).filter(|&x| x < h) else { continue };
                        for j in 0..kw {
                            let Some(y) = (b * sw + j).checked_sub(pw).filter(|&y| y < w) else { continue };
                            for k in 0..kd {
                                let Some(z) = (c * sd + k).checked_sub(pd).filter(|&z| z < d) else {
                                    continue;
                                };
                                f(o, (x * w + y) * d + z, (i * kw + j) * kd + k);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds a per-channel bias along the last axis.
pub fn add_bias<T: Element>(tape: &mut Tape<T>, x: Var, bias: Var) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap_or(&0);
    if tape.shape(bias) != [c] {
        return Err(Error::shape("add_bias", tape.shape(x), tape.shape(bias)));
    }
    let b = tape.value(bias).data();
    let mut out = tape.value(x).to_vec();
    out.chunks_exact_mut(c)
        .for_each(|row| row.iter_mut().zip(b).for_each(|(o, &v)| *o += v));
    let shape = tape.shape(x).to_vec();
    tape.record("add_bias", Tensor::from_parts(shape, out), &[x, bias], move |ctx| {
        let mut gb = vec![T::zero(); c];
        ctx.grad
            .chunks_exact(c)
            .for_each(|row| gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g));
        vec![Some(ctx.grad.to_vec()), Some(gb)]
    })
}

/// `x [N, C_in] . W [C_in, C_out] + b`.
pub fn linear<T: Element>(tape: &mut Tape<T>, x: Var, p: &LinearParams) -> Result<Var> {
    let y = tape.matmul(x, p.weight)?;
    match p.bias {
        Some(b) => add_bias(tape, y, b),
        None => Ok(y),
    }
}

/// Normalizes each position over the last (channel) axis, then applies the
/// per-channel affine map.
pub fn layer_norm<T: Element>(tape: &mut Tape<T>, x: Var, p: &NormParams) -> Result<Var> {
    if p.eps <= 0.0 {
        return Err(Error::invalid("layer_norm", "epsilon must be positive"));
    }
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "rank 0 input"))?;
    for v in [p.gamma, p.beta] {
        if tape.shape(v) != [c] {
            return Err(Error::shape("layer_norm", &shape, tape.shape(v)));
        }
    }
    let eps = cast::<T>(p.eps);
    let inv_c = cast::<T>(1.0 / c as f64);
    let xd = tape.value(x).data();
    let (gamma, beta) = (tape.value(p.gamma).data(), tape.value(p.beta).data());
    let rows = xd.len() / c;
    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); rows];
    let mut out = vec![T::zero(); xd.len()];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let s = (var + eps).sqrt().recip();
        rstd[r] = s;
        for j in 0..c {
            let h = (row[j] - mean) * s;
            xhat[r * c + j] = h;
            out[r * c + j] = gamma[j] * h + beta[j];
        }
    }
    tape.record("layer_norm", Tensor::from_parts(shape, out), &[x, p.gamma, p.beta], move |ctx| {
        let g = ctx.grad;
        let gamma = ctx.inputs[1].data();
        let mut gx = vec![T::zero(); g.len()];
        let mut gg = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for r in 0..rows {
            let grow = &g[r * c..(r + 1) * c];
            let hrow = &xhat[r * c..(r + 1) * c];
            let mut sum_dh = T::zero();
            let mut sum_dh_h = T::zero();
            for j in 0..c {
                let dh = grow[j] * gamma[j];
                sum_dh += dh;
                sum_dh_h += dh * hrow[j];
                gg[j] += grow[j] * hrow[j];
                gbeta[j] += grow[j];
            }
            for j in 0..c {
                let dh = grow[j] * gamma[j];
                gx[r * c + j] = rstd[r] * (dh - inv_c * sum_dh - hrow[j] * inv_c * sum_dh_h);
            }
        }
        vec![Some(gx), Some(gg), Some(gbeta)]
    })
}

/// Two pointwise layers with a gelu between, over the last axis. The hidden
/// width is fixed by the parameter shapes (ratio x C).
pub fn mlp_block<T: Element>(tape: &mut Tape<T>, x: Var, p: &MlpParams) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().ok_or_else(|| Error::invalid("mlp_block", "rank 0 input"))?;
    let rows = tape.value(x).numel() / c;
    let flat = tape.reshape(x, &[rows, c])?;
    let h = linear(tape, flat, &p.fc1)?;
    let h = tape.gelu(h)?;
    let y = linear(tape, h, &p.fc2)?;
    if tape.shape(y)[1] != c {
        return Err(Error::shape("mlp_block", &shape, tape.shape(y)));
    }
    tape.reshape(y, &shape)
}

/// Trilinear interpolation by integer factors with aligned corners: output
/// voxel `i` samples input coordinate `i (n - 1) / (n f - 1)`.
pub fn trilinear_upsample<T: Element>(tape: &mut Tape<T>, x: Var, factor: [usize; 3]) -> Result<Var> {
    volume_dims("trilinear_upsample", tape.shape(x))?;
    if let Some(f) = factor.iter().find(|&&f| f < 2) {
        return Err(Error::invalid("trilinear_upsample", format!("factor {f} < 2")));
    }
    let mut y = x;
    for (axis, &f) in factor.iter().enumerate() {
        y = upsample_axis(tape, y, axis, f)?;
    }
    Ok(y)
}

fn upsample_axis<T: Element>(tape: &mut Tape<T>, x: Var, axis: usize, factor: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = shape[axis];
    let m = n * factor;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    // (low index, high index, weight of high)
    let taps: Vec<(usize, usize, T)> = (0..m)
        .map(|i| {
            if n == 1 {
                return (0, 0, T::zero());
            }
            let src = i as f64 * (n - 1) as f64 / (m - 1) as f64;
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, cast::<T>(src - lo as f64))
        })
        .collect();
    let xd = tape.value(x).data();
    let mut out = vec![T::zero(); outer * m * inner];
    for o in 0..outer {
        for (i, &(lo, hi, t)) in taps.iter().enumerate() {
            let dst = &mut out[(o * m + i) * inner..(o * m + i + 1) * inner];
            let a = &xd[(o * n + lo) * inner..(o * n + lo + 1) * inner];
            let b = &xd[(o * n + hi) * inner..(o * n + hi + 1) * inner];
            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
                *d = av * (T::one() - t) + bv * t;
            }
        }
    }
    let mut out_shape = shape;
    out_shape[axis] = m;
    tape.record("upsample", Tensor::from_parts(out_shape, out), &[x], move |ctx| {
        let mut gx = vec![T::zero(); outer * n * inner];
        for o in 0..outer {
            for (i, &(lo, hi, t)) in taps.iter().enumerate() {
                let g = &ctx.grad[(o * m + i) * inner..(o * m + i + 1) * inner];
                for (j, &gv) in g.iter().enumerate() {
                    gx[(o * n + lo) * inner + j] += gv * (T::one() - t);
                    gx[(o * n + hi) * inner + j] += gv * t;
                }
            }
        }
        vec![Some(gx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Straight from the definition of zero-padded cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let out_dim = |n: usize, k: usize| (n + 2 * pad - k) / stride + 1;
        let od = [out_dim(xs[0], ws[0]), out_dim(xs[1], ws[1]), out_dim(xs[2], ws[2])];
        let cout = ws[4];
        let mut out = vec![0.0; od[0] * od[1] * od[2] * cout];
        for a in 0..od[0] {
            for bb in 0..od[1] {
                for c in 0..od[2] {
                    for co in 0..cout {
                        let mut acc = b[co];
                        for i in 0..ws[0] {
                            for j in 0..ws[1] {
                                for k in 0..ws[2] {
                                    let xi = (a * stride + i) as isize - pad as isize;
                                    let yi = (bb * stride + j) as isize - pad as isize;
                                    let zi = (c * stride + k) as isize - pad as isize;
                                    if xi < 0 || yi < 0 || zi < 0 {
                                        continue;
                                    }
                                    let (xi, yi, zi) = (xi as usize, yi as usize, zi as usize);
                                    if xi >= xs[0] || yi >= xs[1] || zi >= xs[2] {
                                        continue;
                                    }
                                    for ci in 0..xs[3] {
                                        acc += x.get(&[xi, yi, zi, ci]) * w.get(&[i, j, k, ci, co]);
                                    }
                                }
                            }
                        }
                        out[((a * od[1] + bb) * od[2] + c) * cout + co] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![od[0], od[1], od[2], cout], out).unwrap()
    }

    fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, geom: ConvGeometry) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = ConvParams {
            weight: tape.constant(w.clone()),
            bias: Some(tape.constant(b.clone())),
            geometry: geom,
        };
        let y = conv3d(&mut tape, xv, &p).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn delta_kernel_dwconv_is_identity() {
        let x = rand_tensor(&[4, 4, 4, 3], 1);
        let mut w = vec![0.0; 27 * 3];
        for c in 0..3 {
            w[13 * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = ConvParams {
            weight: tape.constant(Tensor::new([3, 3, 3, 3], w).unwrap()),
            bias: None,
            geometry: ConvGeometry::same([3; 3]),
        };
        let y = dwconv3d(&mut tape, xv, &p).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn ones_kernel_on_constant_volume_interior() {
        let v: f64 = 0.75;
        let x = Tensor::<f64>::full([5, 5, 5, 1], v).unwrap();
        let w = Tensor::ones([3, 3, 3, 1]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = ConvParams {
            weight: tape.constant(w),
            bias: None,
            geometry: ConvGeometry::same([3; 3]),
        };
        let y = dwconv3d(&mut tape, xv, &p).unwrap();
        assert!((tape.value(y).get(&[2, 2, 2, 0]) - 27.0 * v).abs() < 1e-12);
        // a corner voxel only sees 8 in-bounds taps
        assert!((tape.value(y).get(&[0, 0, 0, 0]) - 8.0 * v).abs() < 1e-12);
    }

    #[test]
    fn dwconv_channel_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([4, 4, 4, 2]).unwrap());
        let p = ConvParams {
            weight: tape.constant(Tensor::zeros([3, 3, 3, 3]).unwrap()),
            bias: None,
            geometry: ConvGeometry::same([3; 3]),
        };
        assert!(dwconv3d(&mut tape, x, &p).is_err());
    }

    #[test]
    fn pointwise_identity_mixing_copies_channels() {
        let x = rand_tensor(&[3, 2, 4, 3], 2);
        let w = Tensor::eye(3).unwrap().reshape([1, 1, 1, 3, 3]).unwrap();
        let y = run_conv(&x, &w, &Tensor::zeros([3]).unwrap(), ConvGeometry::strided(1, 0));
        assert_eq!(y, x);
    }

    #[test]
    fn strided_output_extents() {
        let x = Tensor::zeros([8, 8, 8, 1]).unwrap();
        let w = Tensor::zeros([3, 3, 3, 1, 2]).unwrap();
        let y = run_conv(&x, &w, &Tensor::zeros([2]).unwrap(), ConvGeometry::strided(2, 1));
        assert_eq!(y.shape(), &[4, 4, 4, 2]);
    }

    #[test]
    fn kernel_larger_than_padded_input_errors() {
        let geom = ConvGeometry::strided(1, 0);
        assert!(geom.output_dims([2, 4, 4], [3, 3, 3]).is_err());
    }

    #[test]
    fn dwconv_equals_block_diagonal_conv() {
        let c = 3;
        let x = rand_tensor(&[4, 3, 5, c], 3);
        let wd = rand_tensor(&[3, 3, 3, c], 4);
        let b = rand_tensor(&[c], 5);
        let mut full = vec![0.0; 27 * c * c];
        for k in 0..27 {
            for ch in 0..c {
                full[(k * c + ch) * c + ch] = wd.data()[k * c + ch];
            }
        }
        let wfull = Tensor::new([3, 3, 3, c, c], full).unwrap();
        let expected = run_conv(&x, &wfull, &b, ConvGeometry::same([3; 3]));
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = ConvParams {
            weight: tape.constant(wd),
            bias: Some(tape.constant(b)),
            geometry: ConvGeometry::same([3; 3]),
        };
        let y = dwconv3d(&mut tape, xv, &p).unwrap();
        assert!(tape.value(y).max_abs_diff(&expected).unwrap() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn conv_matches_naive_oracle(
            h in 1usize..=6, w in 1usize..=6, d in 1usize..=6,
            cin in 1usize..=4, cout in 1usize..=4,
            k in 1usize..=3, stride in 1usize..=2, seed in any::<u64>(),
        ) {
            let pad = k / 2;
            prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k && d + 2 * pad >= k);
            let x = rand_tensor(&[h, w, d, cin], seed);
            let wt = rand_tensor(&[k, k, k, cin, cout], seed ^ 1);
            let b = rand_tensor(&[cout], seed ^ 2);
            let got = run_conv(&x, &wt, &b, ConvGeometry::strided(stride, pad));
            let want = naive_conv(&x, &wt, b.data(), stride, pad);
            prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
        }

        #[test]
        fn upsample_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
            let x = rand_tensor(&[2, 3, 2, 2], seed);
            let y = rand_tensor(&[2, 3, 2, 2], seed ^ 7);
            let combo = Tensor::new(
                [2, 3, 2, 2],
                x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
            ).unwrap();
            let up = |t: &Tensor<f64>| {
                let mut tape = Tape::new();
                let v = tape.constant(t.clone());
                let u = trilinear_upsample(&mut tape, v, [2, 2, 2]).unwrap();
                tape.value(u).clone()
            };
            let (ux, uy, uc) = (up(&x), up(&y), up(&combo));
            for ((&p, &q), &r) in ux.data().iter().zip(uy.data()).zip(uc.data()) {
                prop_assert!((a * p + b * q - r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ramp_upsamples_with_aligned_corners() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 1, 1, 1], vec![0.0, 1.0]).unwrap());
        let y = upsample_axis(&mut tape, x, 0, 2).unwrap();
        let got: Vec<f64> = tape.value(y).data().to_vec();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{got:?}");
        }
    }

    #[test]
    fn constant_volume_upsamples_to_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::full([2, 3, 1, 2], 1.25).unwrap());
        let y = trilinear_upsample(&mut tape, x, [2, 2, 2]).unwrap();
        assert_eq!(tape.shape(y), &[4, 6, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_constant_row_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 3], vec![4.0, 4.0, 4.0, 1.0, 2.0, 3.0]).unwrap());
        let p = NormParams {
            gamma: tape.constant(Tensor::ones([3]).unwrap()),
            beta: tape.constant(Tensor::zeros([3]).unwrap()),
            eps: 1e-5,
        };
        let y = layer_norm(&mut tape, x, &p).unwrap();
        let v = tape.value(y).data();
        assert!(v[..3].iter().all(|&a| a == 0.0));
        assert!(v[3..].iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn layer_norm_mean_equals_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[5, 4], 9));
        let beta = [0.5, -1.0, 2.0, 0.25];
        let p = NormParams {
            gamma: tape.constant(rand_tensor(&[4], 10)),
            beta: tape.constant(Tensor::new([4], beta.to_vec()).unwrap()),
            eps: 1e-5,
        };
        let y = layer_norm(&mut tape, x, &p).unwrap();
        // with gamma = 1 the per-position mean is exactly mean(beta)
        let p1 = NormParams {
            gamma: tape.constant(Tensor::ones([4]).unwrap()),
            ..p
        };
        let y1 = layer_norm(&mut tape, x, &p1).unwrap();
        let mean_beta = beta.iter().sum::<f64>() / 4.0;
        for row in tape.value(y1).data().chunks(4) {
            assert!((row.iter().sum::<f64>() / 4.0 - mean_beta).abs() < 1e-12);
        }
        assert_eq!(tape.shape(y), &[5, 4]);
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2, 2, 2, 4], 11));
        let p = MlpParams {
            fc1: LinearParams {
                weight: tape.constant(Tensor::zeros([4, 8]).unwrap()),
                bias: Some(tape.constant(Tensor::zeros([8]).unwrap())),
            },
            fc2: LinearParams {
                weight: tape.constant(Tensor::zeros([8, 4]).unwrap()),
                bias: Some(tape.constant(Tensor::zeros([4]).unwrap())),
            },
        };
        let y = mlp_block(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_mlp_applies_gelu_once() {
        // ratio 1, identity weights: output = gelu(x) channel-wise
        let xs = [1.0, 2.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2], xs.to_vec()).unwrap());
        let p = MlpParams {
            fc1: LinearParams {
                weight: tape.constant(Tensor::eye(2).unwrap()),
                bias: None,
            },
            fc2: LinearParams {
                weight: tape.constant(Tensor::eye(2).unwrap()),
                bias: None,
            },
        };
        let y = mlp_block(&mut tape, x, &p).unwrap();
        // hand evaluation of 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
        let gelu = |v: f64| {
            0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        let got = tape.value(y).data();
        assert!((got[0] - gelu(1.0)).abs() < 1e-15 && (got[0] - 0.841192).abs() < 1e-6);
        assert!((got[1] - gelu(2.0)).abs() < 1e-15 && (got[1] - 1.954598).abs() < 1e-6);
    }

    #[test]
    fn ops_pass_finite_difference_checks() {
        let x = rand_tensor(&[4, 4, 4, 2], 20);
        let r = rand_tensor(&[4, 4, 4, 2], 21);
        let weigh = move |t: &mut Tape<f64>, y: Var| {
            let rv = t.constant(r.clone());
            let m = t.mul(y, rv)?;
            t.sum_all(m)
        };
        type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);
        let cases: Vec<Case> = vec![
            (
                "dwconv3d",
                vec![x.clone(), rand_tensor(&[3, 3, 3, 2], 22), rand_tensor(&[2], 23)],
                Box::new({
                    let weigh = weigh.clone();
                    move |t, v| {
                        let p = ConvParams { weight: v[1], bias: Some(v[2]), geometry: ConvGeometry::same([3; 3]) };
                        let y = dwconv3d(t, v[0], &p)?;
                        weigh(t, y)
                    }
                }),
            ),
            (
                "conv3d",
                vec![x.clone(), rand_tensor(&[3, 3, 3, 2, 2], 24), rand_tensor(&[2], 25)],
                Box::new({
                    let weigh = weigh.clone();
                    move |t, v| {
                        let p = ConvParams { weight: v[1], bias: Some(v[2]), geometry: ConvGeometry::same([3; 3]) };
                        let y = conv3d(t, v[0], &p)?;
                        weigh(t, y)
                    }
                }),
            ),
            (
                "layer_norm",
                vec![rand_tensor(&[2, 2, 2, 4], 34), rand_tensor(&[4], 26), rand_tensor(&[4], 27)],
                Box::new(move |t, v| {
                    let y = layer_norm(t, v[0], &NormParams { gamma: v[1], beta: v[2], eps: 1e-5 })?;
                    let rv = t.constant(rand_tensor(&[2, 2, 2, 4], 35));
                    let m = t.mul(y, rv)?;
                    t.sum_all(m)
                }),
            ),
            (
                "mlp_block",
                vec![x.clone(), rand_tensor(&[2, 4], 28), rand_tensor(&[4], 29), rand_tensor(&[4, 2], 30), rand_tensor(&[2], 31)],
                Box::new({
                    let weigh = weigh.clone();
                    move |t, v| {
                        let p = MlpParams {
                            fc1: LinearParams { weight: v[1], bias: Some(v[2]) },
                            fc2: LinearParams { weight: v[3], bias: Some(v[4]) },
                        };
                        let y = mlp_block(t, v[0], &p)?;
                        weigh(t, y)
                    }
                }),
            ),
        ];
        for (name, inputs, f) in cases {
            let report = grad_check(|t, v| f(t, v), &inputs, 1e-6).unwrap();
            assert!(report.passed(1e-5), "{name}: {report:?}");
        }

        let small = rand_tensor(&[2, 2, 2, 2], 32);
        let r8 = rand_tensor(&[4, 4, 4, 2], 33);
        let report = grad_check(
            |t, v| {
                let y = trilinear_upsample(t, v[0], [2, 2, 2])?;
                let rv = t.constant(r8.clone());
                let m = t.mul(y, rv)?;
                t.sum_all(m)
            },
            &[small],
            1e-6,
        )
        .unwrap();
        assert!(report.passed(1e-5), "upsample: {report:?}");
    }
}
