//! Finite-difference verification suite: every layer at small shapes, then
//! the full model at 4 electrodes × 32 samples with respect to both its input
//! and every trainable parameter. Batch norms run frozen (inference mode) in
//! the model checks and dropout is disabled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_projected_with, relative_error, Stencil};
use crate::layers::{self, GeluKind, Mode};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::training::cross_entropy;

pub const LAYER_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// The reduced model used for end-to-end checks.
pub fn small_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        channels: 4,
        samples: 32,
        branch_kernels: vec![3, 5, 9, 13, 17, 29],
        single_scale_kernel: 9,
        eegnet_kernel: 15,
        separable_kernel: 4,
        pool1: 2,
        pool2: 4,
        variant,
        ..ModelConfig::default()
    }
}

fn random<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| F::lit(rng.random_range(lo..hi))).collect(),
    )
    .expect("sized")
}

struct Suite<F: Scalar> {
    rng: ChaCha8Rng,
    epsilon: f64,
    stencil: Stencil,
    out: Vec<CheckResult>,
    _f: std::marker::PhantomData<F>,
}

impl<F: Scalar> Suite<F> {
    fn check(
        &mut self,
        name: &str,
        x: &Tensor<F>,
        out_shape: &[usize],
        f: impl Fn(&mut Graph<F>, Var) -> Result<Var>,
    ) -> Result<()> {
        let r = random::<F>(&mut self.rng, out_shape, -1.0, 1.0);
        let err = grad_check_projected_with(f, x, &r, self.epsilon, self.stencil)?;
        self.out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            tolerance: LAYER_TOLERANCE,
        });
        Ok(())
    }
}

/// Per-layer checks (inputs and weights), each as a vector-Jacobian product
/// against a fixed random cotangent, with central differences.
pub fn layer_checks<F: Scalar>(seed: u64, epsilon: f64) -> Result<Vec<CheckResult>> {
    layer_checks_with::<F>(seed, epsilon, Stencil::Central)
}

pub fn layer_checks_with<F: Scalar>(
    seed: u64,
    epsilon: f64,
    stencil: Stencil,
) -> Result<Vec<CheckResult>> {
    let mut s = Suite::<F> {
        rng: ChaCha8Rng::seed_from_u64(seed),
        epsilon,
        stencil,
        out: Vec::new(),
        _f: std::marker::PhantomData,
    };
    let rng = &mut s.rng;
    let x = random::<F>(rng, &[2, 3, 7, 2], -1.0, 1.0);
    let k = random::<F>(rng, &[3, 2, 2], -1.0, 1.0);
    let (x2, k2) = (x.clone(), k.clone());
    s.check("conv_temporal/input", &x, &[2, 3, 7, 2], |g, v| {
        let w = g.constant(k2.clone());
        layers::conv_temporal(g, v, w)
    })?;
    s.check("conv_temporal/kernel", &k, &[2, 3, 7, 2], |g, w| {
        let v = g.constant(x2.clone());
        layers::conv_temporal(g, v, w)
    })?;

    let x = random::<F>(&mut s.rng, &[2, 3, 5, 2], -1.0, 1.0);
    let k = random::<F>(&mut s.rng, &[3, 2, 2], -1.0, 1.0);
    let (x2, k2) = (x.clone(), k.clone());
    s.check("depthwise_conv_spatial/input", &x, &[2, 1, 5, 4], |g, v| {
        let w = g.constant(k2.clone());
        layers::depthwise_conv_spatial(g, v, w)
    })?;
    s.check(
        "depthwise_conv_spatial/kernel",
        &k,
        &[2, 1, 5, 4],
        |g, w| {
            let v = g.constant(x2.clone());
            layers::depthwise_conv_spatial(g, v, w)
        },
    )?;

    let x = random::<F>(&mut s.rng, &[2, 1, 16, 3], -1.0, 1.0);
    let dw = random::<F>(&mut s.rng, &[4, 3], -1.0, 1.0);
    let pw = random::<F>(&mut s.rng, &[3, 2], -1.0, 1.0);
    let (xa, dwa, pwa) = (x.clone(), dw.clone(), pw.clone());
    s.check(
        "separable_conv_temporal/input",
        &x,
        &[2, 1, 16, 2],
        |g, v| {
            let (d, p) = (g.constant(dwa.clone()), g.constant(pwa.clone()));
            layers::separable_conv_temporal(g, v, d, p)
        },
    )?;
    let (xa, pwa) = (xa.clone(), pwa.clone());
    s.check(
        "separable_conv_temporal/depthwise",
        &dw,
        &[2, 1, 16, 2],
        |g, d| {
            let (v, p) = (g.constant(xa.clone()), g.constant(pwa.clone()));
            layers::separable_conv_temporal(g, v, d, p)
        },
    )?;
    let (xa, dwa) = (x.clone(), dw.clone());
    s.check(
        "separable_conv_temporal/pointwise",
        &pw,
        &[2, 1, 16, 2],
        |g, p| {
            let (v, d) = (g.constant(xa.clone()), g.constant(dwa.clone()));
            layers::separable_conv_temporal(g, v, d, p)
        },
    )?;

    let x = random::<F>(&mut s.rng, &[4, 2, 3, 3], -2.0, 2.0);
    let gamma = random::<F>(&mut s.rng, &[3], 0.75, 1.25);
    let beta = random::<F>(&mut s.rng, &[3], -0.5, 0.5);
    let (ga, ba) = (gamma.clone(), beta.clone());
    s.check("batch_norm/train", &x, &[4, 2, 3, 3], |g, v| {
        let (gm, bt) = (g.constant(ga.clone()), g.constant(ba.clone()));
        Ok(layers::batch_norm_train(g, v, gm, bt, F::lit(layers::norm::BATCH_NORM_EPS))?.0)
    })?;
    let rm = random::<F>(&mut s.rng, &[3], -0.5, 0.5);
    let rv = random::<F>(&mut s.rng, &[3], 0.5, 1.5);
    s.check("batch_norm/infer", &x, &[4, 2, 3, 3], |g, v| {
        let (gm, bt) = (g.constant(ga.clone()), g.constant(ba.clone()));
        layers::batch_norm_infer(
            g,
            v,
            gm,
            bt,
            rm.data(),
            rv.data(),
            F::lit(layers::norm::BATCH_NORM_EPS),
        )
    })?;

    let x = random::<F>(&mut s.rng, &[4, 6], -2.0, 2.0);
    let gamma = random::<F>(&mut s.rng, &[6], 0.75, 1.25);
    let beta = random::<F>(&mut s.rng, &[6], -0.5, 0.5);
    s.check("layer_norm", &x, &[4, 6], |g, v| {
        let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        layers::layer_norm(g, v, gm, bt, F::lit(layers::norm::LAYER_NORM_EPS))
    })?;

    // Kept away from 0, where ELU's second derivative jumps.
    let x = {
        let t = random::<F>(&mut s.rng, &[3, 5], 0.1, 2.0);
        let signs: Vec<F> = (0..15)
            .map(|i| if i % 2 == 0 { F::one() } else { -F::one() })
            .collect();
        t.zip_map(&Tensor::new(vec![3, 5], signs)?, |a, b| a * b)
    };
    s.check("elu", &x, &[3, 5], |g, v| layers::elu(g, v))?;
    s.check("gelu/erf", &x, &[3, 5], |g, v| {
        layers::gelu(g, v, GeluKind::Erf)
    })?;
    s.check("gelu/tanh", &x, &[3, 5], |g, v| {
        layers::gelu(g, v, GeluKind::Tanh)
    })?;
    s.check("softmax", &x, &[3, 5], |g, v| layers::softmax(g, v))?;

    let x = random::<F>(&mut s.rng, &[2, 1, 9, 3], -1.0, 1.0);
    s.check("avg_pool_temporal", &x, &[2, 1, 2, 3], |g, v| {
        layers::avg_pool_temporal(g, v, 4)
    })?;

    let x = random::<F>(&mut s.rng, &[3, 5], -1.0, 1.0);
    let w = random::<F>(&mut s.rng, &[5, 2], -1.0, 1.0);
    let b = random::<F>(&mut s.rng, &[2], -1.0, 1.0);
    let (wa, ba, xa) = (w.clone(), b.clone(), x.clone());
    s.check("dense/input", &x, &[3, 2], |g, v| {
        let (wv, bv) = (g.constant(wa.clone()), g.constant(ba.clone()));
        layers::dense(g, v, wv, bv)
    })?;
    s.check("dense/weight", &w, &[3, 2], |g, wv| {
        let (v, bv) = (g.constant(xa.clone()), g.constant(b.clone()));
        layers::dense(g, v, wv, bv)
    })?;

    let mut store = ParamStore::<F>::new();
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mha = layers::MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut init)?;
    let tokens = random::<F>(&mut s.rng, &[2, 3, 4], -1.0, 1.0);
    s.check("multi_head_attention", &tokens, &[2, 3, 4], |g, v| {
        mha.forward(g, &store, v)
    })?;

    let logits = random::<F>(&mut s.rng, &[3, 2], -2.0, 2.0);
    s.check("softmax_cross_entropy", &logits, &[1], |g, v| {
        let p = layers::softmax(g, v)?;
        cross_entropy(g, p, &[0, 1, 1])
    })?;
    Ok(s.out)
}

/// A model with non-trivial running moments, so frozen batch norms are not
/// identities.
pub fn warmed_model<F: Scalar>(variant: Variant, seed: u64) -> Result<Model<F>> {
    let mut model = Model::<F>::new(small_model_config(variant), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let batch = random::<F>(&mut rng, &[4, 4, 32, 1], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.input(batch);
    let out = model.forward(&mut g, x, Mode::Train, &mut rng)?;
    model.commit(&out.pending);
    Ok(model)
}

fn model_loss<F: Scalar>(model: &Model<F>, g: &mut Graph<F>, x: Var, labels: &[u8]) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(g, x, Mode::Infer, &mut rng)?;
    cross_entropy(g, out.probs, labels)
}

/// Input gradient of the inference-mode loss.
pub fn model_input_check<F: Scalar>(model: &Model<F>, seed: u64, epsilon: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.config();
    let x = random::<F>(&mut rng, &[2, c.channels, c.samples, 1], -1.0, 1.0);
    grad_check(|g, v| model_loss(model, g, v, &[0, 1]), &x, epsilon)
}

/// Ceiling on both the analytic and the numeric derivative of parameters
/// whose gradient is identically zero.
pub const STRUCTURAL_ZERO_TOLERANCE: f64 = 1e-8;

/// Attention key biases add the same `q·b` to every score of a query, which
/// softmax cancels; their gradient is zero and relative error is undefined.
pub fn is_structurally_zero(name: &str) -> bool {
    name.ends_with(".key.bias")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst: String,
    /// Largest `max(|analytic|, |numeric|)` over structurally zero elements.
    pub structural_zero_max_abs: Option<f64>,
}

/// Gradient of the same loss with respect to every trainable parameter
/// element, against central differences.
pub fn model_param_check<F: Scalar>(
    model: &Model<F>,
    seed: u64,
    epsilon: f64,
) -> Result<ParamCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.config();
    let x = random::<F>(&mut rng, &[2, c.channels, c.samples, 1], -1.0, 1.0);
    let labels = [0u8, 1];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let root = model_loss(model, &mut g, xv, &labels)?;
    let grads = g.backward(root)?;

    let eval = |m: &Model<F>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let l = model_loss(m, &mut g, xv, &labels)?;
        Ok(g.value(l).item().as_f64())
    };
    let mut probe = model.clone();
    let eps = F::lit(epsilon);
    let mut out = ParamCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        structural_zero_max_abs: None,
    };
    let ids: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let name = &model.params().get(id).name;
        let zero = is_structurally_zero(name);
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.params().value(id).shape()));
        for i in 0..analytic.len() {
            let orig = probe.params().value(id).data()[i];
            probe.params_mut().get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.params_mut().get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let (a, n) = (
                analytic.data()[i].as_f64(),
                (plus - minus) / (2.0 * epsilon),
            );
            if zero {
                let m = a.abs().max(n.abs());
                out.structural_zero_max_abs =
                    Some(out.structural_zero_max_abs.map_or(m, |v| v.max(m)));
                continue;
            }
            let e = relative_error(a, n);
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst = name.clone();
            }
        }
    }
    Ok(out)
}

/// Layer checks followed by input and parameter checks of every variant.
pub fn full_suite<F: Scalar>(seed: u64, epsilon: f64) -> Result<Vec<CheckResult>> {
    let mut out = layer_checks::<F>(seed, epsilon)?;
    for variant in Variant::ALL {
        let model = warmed_model::<F>(variant, seed)?;
        out.push(CheckResult {
            name: format!("model[{variant}]/input"),
            max_rel_error: model_input_check(&model, seed, epsilon)?,
            tolerance: MODEL_TOLERANCE,
        });
        let p = model_param_check(&model, seed, epsilon)?;
        out.push(CheckResult {
            name: format!("model[{variant}]/parameters"),
            max_rel_error: p.max_rel_error,
            tolerance: MODEL_TOLERANCE,
        });
        if let Some(m) = p.structural_zero_max_abs {
            // Absolute, not relative: both derivatives must vanish.
            out.push(CheckResult {
                name: format!("model[{variant}]/key-bias |grad|"),
                max_rel_error: m,
                tolerance: STRUCTURAL_ZERO_TOLERANCE,
            });
        }
    }
    Ok(out)
}
