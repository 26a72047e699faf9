use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutStyle {
    /// Independent per element.
    Element,
    /// Whole feature maps (last axis) per trial (first axis).
    Spatial,
}

struct Mask<F> {
    mask: Vec<F>,
}

impl<F: Scalar> Function<F> for Mask<F> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let g: Vec<F> = grad
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&a, &m)| a * m)
            .collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), g))])
    }
}

/// Inverted dropout; identity in inference mode or at rate 0.
pub fn dropout<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    x: Var,
    rate: f64,
    mode: Mode,
    style: DropoutStyle,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate {rate} outside [0, 1)"),
        ));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n = g.value(x).len();
    let keep = F::lit(1.0 / (1.0 - rate));
    let mask: Vec<F> = match style {
        DropoutStyle::Element => (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect(),
        DropoutStyle::Spatial => {
            let batch = shape[0];
            let maps = *shape.last().expect("non-empty shape");
            let per_trial = n / batch;
            let draws: Vec<F> = (0..batch * maps)
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        F::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            (0..n)
                .map(|i| draws[(i / per_trial) * maps + i % maps])
                .collect()
        }
    };
    let y: Vec<F> = g
        .value(x)
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m)
        .collect();
    g.record(Tensor::from_parts(shape, y), &[x], Box::new(Mask { mask }))
}
