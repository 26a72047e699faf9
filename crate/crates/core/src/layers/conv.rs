//! Temporal, depthwise-spatial and separable convolutions on channels-last
//! tensors laid out as `[batch, electrodes, time, maps]`.
//!
//! "Same" padding along time uses `left = (k - 1) / 2`, `right = k - 1 - left`,
//! so the 16-tap separable kernel pads 7 samples before and 8 after.

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn same_padding(k: usize) -> (usize, usize) {
    let left = (k - 1) / 2;
    (left, k - 1 - left)
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, h, t, f] => Ok([b, h, t, f]),
        _ => Err(Error::invalid(
            op,
            format!("expected [batch, electrodes, time, maps], got {shape:?}"),
        )),
    }
}

struct TemporalConv {
    dims: [usize; 4],
    k: usize,
    f_out: usize,
}

/// `y += a * x`.
#[inline]
fn axpy<F: Scalar>(a: F, x: &[F], y: &mut [F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: F = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .fold(F::zero(), |s, v| s + v);
    let mut acc = [F::zero(); 8];
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().fold(F::zero(), |s, &v| s + v) + tail
}

/// `[t, f]` interleaved to `[f, t]` planar.
fn planar<F: Scalar>(src: &[F], t: usize, f: usize, dst: &mut [F]) {
    for (ti, frame) in src.chunks_exact(f).enumerate().take(t) {
        for (c, &v) in frame.iter().enumerate() {
            dst[c * t + ti] = v;
        }
    }
}

fn interleaved<F: Scalar>(src: &[F], t: usize, f: usize, dst: &mut [F]) {
    for (ti, frame) in dst.chunks_exact_mut(f).enumerate().take(t) {
        for (c, v) in frame.iter_mut().enumerate() {
            *v = src[c * t + ti];
        }
    }
}

/// Output samples `lo..hi` that read input `lo + j - pl .. hi + j - pl`.
#[inline]
fn tap_range(j: usize, pl: usize, t: usize) -> (usize, usize) {
    (pl.saturating_sub(j), (t + pl).saturating_sub(j).min(t))
}

impl<F: Scalar> Function<F> for TemporalConv {
    fn name(&self) -> &'static str {
        "conv_temporal"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let [b, h, t, fi] = self.dims;
        let (k, fo) = (self.k, self.f_out);
        let (pl, _) = same_padding(k);
        let g = grad.data();
        let mut gx = vec![F::zero(); x.len()];
        let mut gw = vec![F::zero(); w.len()];
        let mut xp = vec![F::zero(); fi * t];
        let mut gp = vec![F::zero(); fo * t];
        let mut gxp = vec![F::zero(); fi * t];
        for row in 0..b * h {
            planar(&x[row * t * fi..(row + 1) * t * fi], t, fi, &mut xp);
            planar(&g[row * t * fo..(row + 1) * t * fo], t, fo, &mut gp);
            gxp.iter_mut().for_each(|v| *v = F::zero());
            for c in 0..fi {
                for j in 0..k {
                    let (lo, hi) = tap_range(j, pl, t);
                    if lo >= hi {
                        continue;
                    }
                    let (s0, s1) = (lo + j - pl, hi + j - pl);
                    for o in 0..fo {
                        let wi = (j * fi + c) * fo + o;
                        let go = &gp[o * t + lo..o * t + hi];
                        gw[wi] += dot(&xp[c * t + s0..c * t + s1], go);
                        axpy(w[wi], go, &mut gxp[c * t + s0..c * t + s1]);
                    }
                }
            }
            interleaved(&gxp, t, fi, &mut gx[row * t * fi..(row + 1) * t * fi]);
        }
        Ok(vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
        ])
    }
}

/// Cross-correlation along time with kernel `[k, maps_in, maps_out]`, the same
/// weights applied on every electrode row. `k` must be odd and no longer than
/// the signal.
pub fn conv_temporal<F: Scalar>(g: &mut Graph<F>, x: Var, kernel: Var) -> Result<Var> {
    let [b, h, t, fi] = dims4("conv_temporal", g.shape(x))?;
    let (k, kfi, fo) = match *g.shape(kernel) {
        [k, kfi, fo] => (k, kfi, fo),
        ref s => {
            return Err(Error::invalid(
                "conv_temporal",
                format!("kernel must be [k, in, out], got {s:?}"),
            ))
        }
    };
    if kfi != fi {
        return Err(Error::shape("conv_temporal", g.shape(x), g.shape(kernel)));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(
            "conv_temporal",
            format!("kernel length {k} must be odd"),
        ));
    }
    if k > t {
        return Err(Error::invalid(
            "conv_temporal",
            format!("kernel length {k} exceeds signal length {t}"),
        ));
    }
    let out = temporal_forward(
        g.value(x).data(),
        g.value(kernel).data(),
        [b, h, t, fi],
        k,
        fo,
    );
    g.record(
        Tensor::from_parts(vec![b, h, t, fo], out),
        &[x, kernel],
        Box::new(TemporalConv {
            dims: [b, h, t, fi],
            k,
            f_out: fo,
        }),
    )
}

fn temporal_forward<F: Scalar>(x: &[F], w: &[F], dims: [usize; 4], k: usize, fo: usize) -> Vec<F> {
    let [b, h, t, fi] = dims;
    let (pl, _) = same_padding(k);
    let mut out = vec![F::zero(); b * h * t * fo];
    let mut xp = vec![F::zero(); fi * t];
    let mut yp = vec![F::zero(); fo * t];
    for row in 0..b * h {
        planar(&x[row * t * fi..(row + 1) * t * fi], t, fi, &mut xp);
        yp.iter_mut().for_each(|v| *v = F::zero());
        for c in 0..fi {
            for j in 0..k {
                let (lo, hi) = tap_range(j, pl, t);
                if lo >= hi {
                    continue;
                }
                let xs = &xp[c * t + lo + j - pl..c * t + hi + j - pl];
                for o in 0..fo {
                    axpy(
                        w[(j * fi + c) * fo + o],
                        xs,
                        &mut yp[o * t + lo..o * t + hi],
                    );
                }
            }
        }
        interleaved(&yp, t, fo, &mut out[row * t * fo..(row + 1) * t * fo]);
    }
    out
}

struct DepthwiseSpatial {
    dims: [usize; 4],
    depth: usize,
}

impl<F: Scalar> Function<F> for DepthwiseSpatial {
    fn name(&self) -> &'static str {
        "depthwise_conv_spatial"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let [b, c, t, fi] = self.dims;
        let d = self.depth;
        let fo = fi * d;
        let g = grad.data();
        let mut gx = vec![F::zero(); x.len()];
        let mut gw = vec![F::zero(); w.len()];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let xo = ((bi * c + ci) * t + ti) * fi;
                    let go = (bi * t + ti) * fo;
                    for f in 0..fi {
                        let xv = x[xo + f];
                        let mut acc = F::zero();
                        for di in 0..d {
                            let gv = g[go + f * d + di];
                            let wi = (ci * fi + f) * d + di;
                            acc += gv * w[wi];
                            gw[wi] += xv * gv;
                        }
                        gx[xo + f] += acc;
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
        ])
    }
}

/// Depthwise convolution whose kernel spans all electrodes: kernel
/// `[electrodes, maps_in, depth]`, output `[batch, 1, time, maps_in * depth]`
/// with output map `f * depth + d`.
pub fn depthwise_conv_spatial<F: Scalar>(g: &mut Graph<F>, x: Var, kernel: Var) -> Result<Var> {
    let [b, c, t, fi] = dims4("depthwise_conv_spatial", g.shape(x))?;
    let (kc, kfi, d) = match *g.shape(kernel) {
        [kc, kfi, d] => (kc, kfi, d),
        ref s => {
            return Err(Error::invalid(
                "depthwise_conv_spatial",
                format!("kernel must be [electrodes, in, depth], got {s:?}"),
            ))
        }
    };
    if d < 1 {
        return Err(Error::invalid(
            "depthwise_conv_spatial",
            "depth multiplier must be >= 1",
        ));
    }
    if kc != c || kfi != fi {
        return Err(Error::shape(
            "depthwise_conv_spatial",
            g.shape(x),
            g.shape(kernel),
        ));
    }
    let (xs, w) = (g.value(x).data(), g.value(kernel).data());
    let fo = fi * d;
    let mut out = vec![F::zero(); b * t * fo];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                let xo = ((bi * c + ci) * t + ti) * fi;
                let oo = (bi * t + ti) * fo;
                for f in 0..fi {
                    let xv = xs[xo + f];
                    for di in 0..d {
                        out[oo + f * d + di] += xv * w[(ci * fi + f) * d + di];
                    }
                }
            }
        }
    }
    g.record(
        Tensor::from_parts(vec![b, 1, t, fo], out),
        &[x, kernel],
        Box::new(DepthwiseSpatial {
            dims: [b, c, t, fi],
            depth: d,
        }),
    )
}

struct DepthwiseTemporal {
    dims: [usize; 4],
    k: usize,
}

impl<F: Scalar> Function<F> for DepthwiseTemporal {
    fn name(&self) -> &'static str {
        "depthwise_conv_temporal"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let [b, h, t, f] = self.dims;
        let k = self.k;
        let (pl, _) = same_padding(k);
        let g = grad.data();
        let mut gx = vec![F::zero(); x.len()];
        let mut gw = vec![F::zero(); w.len()];
        for row in 0..b * h {
            let base = row * t * f;
            for ti in 0..t {
                let j0 = pl.saturating_sub(ti);
                let j1 = k.min(t + pl - ti);
                for j in j0..j1 {
                    let s = ti + j - pl;
                    for c in 0..f {
                        let gv = g[base + ti * f + c];
                        gx[base + s * f + c] += gv * w[j * f + c];
                        gw[j * f + c] += gv * x[base + s * f + c];
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
        ])
    }
}

/// One temporal kernel per map (`[k, maps]`), same padding, any `k <= time`.
pub fn depthwise_conv_temporal<F: Scalar>(g: &mut Graph<F>, x: Var, kernel: Var) -> Result<Var> {
    let [b, h, t, f] = dims4("depthwise_conv_temporal", g.shape(x))?;
    let (k, kf) = match *g.shape(kernel) {
        [k, kf] => (k, kf),
        ref s => {
            return Err(Error::invalid(
                "depthwise_conv_temporal",
                format!("kernel must be [k, maps], got {s:?}"),
            ))
        }
    };
    if kf != f {
        return Err(Error::shape(
            "depthwise_conv_temporal",
            g.shape(x),
            g.shape(kernel),
        ));
    }
    if k > t {
        return Err(Error::invalid(
            "depthwise_conv_temporal",
            format!("kernel length {k} exceeds signal length {t}"),
        ));
    }
    let (pl, _) = same_padding(k);
    let (xs, w) = (g.value(x).data(), g.value(kernel).data());
    let mut out = vec![F::zero(); xs.len()];
    for row in 0..b * h {
        let base = row * t * f;
        for ti in 0..t {
            let j0 = pl.saturating_sub(ti);
            let j1 = k.min(t + pl - ti);
            for j in j0..j1 {
                let s = ti + j - pl;
                for c in 0..f {
                    out[base + ti * f + c] += xs[base + s * f + c] * w[j * f + c];
                }
            }
        }
    }
    g.record(
        Tensor::from_parts(vec![b, h, t, f], out),
        &[x, kernel],
        Box::new(DepthwiseTemporal {
            dims: [b, h, t, f],
            k,
        }),
    )
}

/// Depthwise temporal stage followed by a 1x1 pointwise projection
/// (`[maps_in, maps_out]`), both without bias.
pub fn separable_conv_temporal<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    depthwise: Var,
    pointwise: Var,
) -> Result<Var> {
    let dw = depthwise_conv_temporal(g, x, depthwise)?;
    g.matmul(dw, pointwise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn padding_convention() {
        assert_eq!(same_padding(16), (7, 8));
        assert_eq!(same_padding(5), (2, 2));
        assert_eq!(same_padding(1), (0, 0));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = random(&[1, 3, 9, 2], &mut rng);
        // k = 5, centre tap identity mixing
        let mut w = vec![0.0; 5 * 2 * 2];
        w[(2 * 2) * 2] = 1.0;
        w[(2 * 2 + 1) * 2 + 1] = 1.0;
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(xv.clone());
        let k = g.constant(Tensor::new(vec![5, 2, 2], w).unwrap());
        let y = conv_temporal(&mut g, x, k).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn rejects_even_or_long_kernels() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::zeros(&[1, 2, 6, 1]));
        let even = g.constant(Tensor::zeros(&[4, 1, 2]));
        assert!(conv_temporal(&mut g, x, even).is_err());
        let long = g.constant(Tensor::zeros(&[7, 1, 2]));
        assert!(conv_temporal(&mut g, x, long).is_err());
        let sep = g.constant(Tensor::zeros(&[16, 1]));
        assert!(depthwise_conv_temporal(&mut g, x, sep).is_err());
    }

    #[test]
    fn depthwise_summation_kernel() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::ones(&[1, 32, 4, 1]));
        let k = g.constant(Tensor::ones(&[32, 1, 1]));
        let y = depthwise_conv_spatial(&mut g, x, k).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 32.0));
    }

    #[test]
    fn depthwise_rejects_electrode_mismatch() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::ones(&[1, 2, 4, 1]));
        let k = g.constant(Tensor::ones(&[3, 1, 1]));
        assert!(depthwise_conv_spatial(&mut g, x, k).is_err());
    }

    #[test]
    fn separable_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = random(&[2, 1, 20, 3], &mut rng);
        let mut dw = vec![0.0; 16 * 3];
        for c in 0..3 {
            dw[7 * 3 + c] = 1.0;
        }
        let mut pw = vec![0.0; 9];
        for c in 0..3 {
            pw[c * 3 + c] = 1.0;
        }
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(xv.clone());
        let d = g.constant(Tensor::new(vec![16, 3], dw).unwrap());
        let p = g.constant(Tensor::new(vec![3, 3], pw).unwrap());
        let y = separable_conv_temporal(&mut g, x, d, p).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 2, 7, 2], &mut rng);
        let w = random(&[3, 2, 3], &mut rng);
        let err = grad_check(
            |g, xv| {
                let k = g.constant(w.clone());
                let y = conv_temporal(g, xv, k)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "input grad {err}");
        let err = grad_check(
            |g, wv| {
                let xc = g.constant(x.clone());
                let y = conv_temporal(g, xc, wv)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "kernel grad {err}");

        let ws = random(&[2, 2, 2], &mut rng);
        let err = grad_check(
            |g, xv| {
                let k = g.constant(ws.clone());
                let y = depthwise_conv_spatial(g, xv, k)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "depthwise input grad {err}");
        let err = grad_check(
            |g, kv| {
                let xc = g.constant(x.clone());
                let y = depthwise_conv_spatial(g, xc, kv)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &ws,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "depthwise kernel grad {err}");

        let wd = random(&[4, 2], &mut rng);
        let err = grad_check(
            |g, kv| {
                let xc = g.constant(x.clone());
                let y = depthwise_conv_temporal(g, xc, kv)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &wd,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "depthwise temporal kernel grad {err}");
        let err = grad_check(
            |g, xv| {
                let k = g.constant(wd.clone());
                let y = depthwise_conv_temporal(g, xv, k)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "depthwise temporal input grad {err}");
    }
}
