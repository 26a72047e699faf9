//! Batch normalization (per feature map) and layer normalization (last axis).

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BATCH_NORM_MOMENTUM: f64 = 0.99;
pub const BATCH_NORM_EPS: f64 = 1e-3;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalization over the last axis with per-row or per-column statistics.
///
/// The backward rule is shared: with `xhat` the normalized input and
/// `gh = grad * gamma`, `dx = inv_std * (gh - mean(gh) - xhat * mean(gh * xhat))`
/// where means run over the elements that share one set of statistics.
/// When the statistics are fixed (batch norm at inference), `dx = gh * inv_std`.
struct Normalize<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    features: usize,
    /// Statistics per column (batch norm) rather than per row (layer norm).
    per_feature: bool,
    frozen_stats: bool,
}

impl<F: Scalar> Function<F> for Normalize<F> {
    fn name(&self) -> &'static str {
        if self.per_feature {
            "batch_norm"
        } else {
            "layer_norm"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let f = self.features;
        let gamma = inputs[1].data();
        let g = grad.data();
        let rows = g.len() / f;
        let mut ggamma = vec![F::zero(); f];
        let mut gbeta = vec![F::zero(); f];
        for r in 0..rows {
            for c in 0..f {
                let i = r * f + c;
                ggamma[c] += g[i] * self.xhat[i];
                gbeta[c] += g[i];
            }
        }
        let mut gx = vec![F::zero(); g.len()];
        if self.frozen_stats {
            for (i, gxv) in gx.iter_mut().enumerate() {
                let c = i % f;
                *gxv = g[i] * gamma[c] * self.inv_std[c];
            }
        } else if self.per_feature {
            let n = F::lit(rows as f64);
            let mut mean_gh = vec![F::zero(); f];
            let mut mean_ghx = vec![F::zero(); f];
            for r in 0..rows {
                for c in 0..f {
                    let i = r * f + c;
                    let gh = g[i] * gamma[c];
                    mean_gh[c] += gh;
                    mean_ghx[c] += gh * self.xhat[i];
                }
            }
            for c in 0..f {
                mean_gh[c] /= n;
                mean_ghx[c] /= n;
            }
            for r in 0..rows {
                for c in 0..f {
                    let i = r * f + c;
                    let gh = g[i] * gamma[c];
                    gx[i] = self.inv_std[c] * (gh - mean_gh[c] - self.xhat[i] * mean_ghx[c]);
                }
            }
        } else {
            let n = F::lit(f as f64);
            for r in 0..rows {
                let sl = r * f..(r + 1) * f;
                let mut mgh = F::zero();
                let mut mghx = F::zero();
                for (c, i) in sl.clone().enumerate() {
                    let gh = g[i] * gamma[c];
                    mgh += gh;
                    mghx += gh * self.xhat[i];
                }
                mgh /= n;
                mghx /= n;
                for (c, i) in sl.enumerate() {
                    let gh = g[i] * gamma[c];
                    gx[i] = self.inv_std[r] * (gh - mgh - self.xhat[i] * mghx);
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), ggamma)),
            Some(Tensor::from_parts(inputs[2].shape().to_vec(), gbeta)),
        ])
    }
}

fn check_affine<F: Scalar>(
    op: &'static str,
    g: &Graph<F>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<usize> {
    let f = *g.shape(x).last().expect("non-empty shape");
    if g.shape(gamma) != [f] || g.shape(beta) != [f] {
        return Err(Error::shape(op, g.shape(x), g.shape(gamma)));
    }
    Ok(f)
}

/// Batch moments of one training step.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Training-mode batch normalization: statistics pooled over every axis but
/// the last (batch, electrodes, time).
pub fn batch_norm_train<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: F,
) -> Result<(Var, BatchStats<F>)> {
    let f = check_affine("batch_norm", g, x, gamma, beta)?;
    let xs = g.value(x).data();
    let rows = xs.len() / f;
    let n = F::lit(rows as f64);
    let mut mean = vec![F::zero(); f];
    for row in xs.chunks(f) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![F::zero(); f];
    for row in xs.chunks(f) {
        for c in 0..f {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let (gm, bt) = (g.value(gamma).data(), g.value(beta).data());
    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for (i, &v) in xs.iter().enumerate() {
        let c = i % f;
        let h = (v - mean[c]) * inv_std[c];
        xhat.push(h);
        out.push(h * gm[c] + bt[c]);
    }
    let value = Tensor::from_parts(g.shape(x).to_vec(), out);
    let y = g.record(
        value,
        &[x, gamma, beta],
        Box::new(Normalize {
            xhat,
            inv_std,
            features: f,
            per_feature: true,
            frozen_stats: false,
        }),
    )?;
    Ok((y, BatchStats { mean, var }))
}

/// Inference-mode batch normalization with fixed moments.
pub fn batch_norm_infer<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[F],
    running_var: &[F],
    eps: F,
) -> Result<Var> {
    let f = check_affine("batch_norm", g, x, gamma, beta)?;
    if running_mean.len() != f || running_var.len() != f {
        return Err(Error::invalid(
            "batch_norm",
            "running moments do not match feature count",
        ));
    }
    let inv_std: Vec<F> = running_var
        .iter()
        .map(|&v| F::one() / (v + eps).sqrt())
        .collect();
    let xs = g.value(x).data();
    let (gm, bt) = (g.value(gamma).data(), g.value(beta).data());
    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for (i, &v) in xs.iter().enumerate() {
        let c = i % f;
        let h = (v - running_mean[c]) * inv_std[c];
        xhat.push(h);
        out.push(h * gm[c] + bt[c]);
    }
    let value = Tensor::from_parts(g.shape(x).to_vec(), out);
    g.record(
        value,
        &[x, gamma, beta],
        Box::new(Normalize {
            xhat,
            inv_std,
            features: f,
            per_feature: true,
            frozen_stats: true,
        }),
    )
}

/// Exponential moving update `running = m * running + (1 - m) * batch`.
pub fn update_running<F: Scalar>(running: &mut [F], batch: &[F], momentum: F) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = momentum * *r + (F::one() - momentum) * b;
    }
}

/// Layer normalization over the last axis followed by a per-feature affine.
pub fn layer_norm<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: F,
) -> Result<Var> {
    let f = check_affine("layer_norm", g, x, gamma, beta)?;
    let xs = g.value(x).data();
    let n = F::lit(f as f64);
    let (gm, bt) = (g.value(gamma).data(), g.value(beta).data());
    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    let mut inv_std = Vec::with_capacity(xs.len() / f);
    for row in xs.chunks(f) {
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (c, &v) in row.iter().enumerate() {
            let h = (v - mean) * is;
            xhat.push(h);
            out.push(h * gm[c] + bt[c]);
        }
    }
    let value = Tensor::from_parts(g.shape(x).to_vec(), out);
    g.record(
        value,
        &[x, gamma, beta],
        Box::new(Normalize {
            xhat,
            inv_std,
            features: f,
            per_feature: false,
            frozen_stats: false,
        }),
    )
}
