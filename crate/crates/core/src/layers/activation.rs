use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// GELU formulation; one switch per model so every call site agrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluKind {
    #[default]
    Erf,
    Tanh,
}

struct Elu;

impl<F: Scalar> Function<F> for Elu {
    fn name(&self) -> &'static str {
        "elu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let x = inputs[0].data();
        let y = output.data();
        let g: Vec<F> = grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| {
                if x[i] > F::zero() {
                    gv
                } else {
                    gv * (y[i] + F::one())
                }
            })
            .collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), g))])
    }
}

/// ELU with alpha = 1.
pub fn elu<F: Scalar>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let y = g
        .value(x)
        .map(|v| if v > F::zero() { v } else { v.exp() - F::one() });
    g.record(y, &[x], Box::new(Elu))
}

const GELU_TANH_COEF: f64 = 0.044715;

struct Gelu(GeluKind);

impl<F: Scalar> Function<F> for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let half = F::lit(0.5);
        let d = match self.0 {
            GeluKind::Erf => {
                let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                inputs[0].map(|x| {
                    half * (F::one() + (x * inv_sqrt2).erf())
                        + x * inv_sqrt_2pi * (-(x * x) * half).exp()
                })
            }
            GeluKind::Tanh => {
                let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
                let a = F::lit(GELU_TANH_COEF);
                let three_a = F::lit(3.0 * GELU_TANH_COEF);
                inputs[0].map(|x| {
                    let th = (c * (x + a * x * x * x)).tanh();
                    half * (F::one() + th)
                        + half * x * (F::one() - th * th) * c * (F::one() + three_a * x * x)
                })
            }
        };
        Ok(vec![Some(grad.zip_map(&d, |g, d| g * d))])
    }
}

pub fn gelu<F: Scalar>(g: &mut Graph<F>, x: Var, kind: GeluKind) -> Result<Var> {
    let half = F::lit(0.5);
    let y = match kind {
        GeluKind::Erf => {
            let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
            g.value(x)
                .map(|v| half * v * (F::one() + (v * inv_sqrt2).erf()))
        }
        GeluKind::Tanh => {
            let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
            let a = F::lit(GELU_TANH_COEF);
            g.value(x)
                .map(|v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
        }
    };
    g.record(y, &[x], Box::new(Gelu(kind)))
}

struct Softmax {
    n: usize,
}

impl<F: Scalar> Function<F> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let mut out = Vec::with_capacity(grad.len());
        for (y, gr) in output.data().chunks(self.n).zip(grad.data().chunks(self.n)) {
            let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            out.extend(y.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
        }
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), out))])
    }
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax<F: Scalar>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let n = *g.shape(x).last().expect("non-empty shape");
    let mut out = Vec::with_capacity(g.value(x).len());
    for row in g.value(x).data().chunks(n) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let s: F = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    let value = Tensor::from_parts(g.shape(x).to_vec(), out);
    g.record(value, &[x], Box::new(Softmax { n }))
}
