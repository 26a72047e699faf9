use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct AvgPool {
    dims: [usize; 4],
    p: usize,
}

impl<F: Scalar> Function<F> for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool_temporal"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let [b, h, t, f] = self.dims;
        let p = self.p;
        let to = t / p;
        let scale = F::one() / F::lit(p as f64);
        let gd = grad.data();
        let mut gx = vec![F::zero(); inputs[0].len()];
        for row in 0..b * h {
            for w in 0..to {
                for j in 0..p {
                    let ti = w * p + j;
                    for c in 0..f {
                        gx[(row * t + ti) * f + c] = gd[(row * to + w) * f + c] * scale;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            gx,
        ))])
    }
}

/// Non-overlapping mean pooling of length `p` along time (axis 2 of
/// `[batch, electrodes, time, maps]`); trailing samples that do not fill a
/// window are dropped.
pub fn avg_pool_temporal<F: Scalar>(g: &mut Graph<F>, x: Var, p: usize) -> Result<Var> {
    let [b, h, t, f] = match *g.shape(x) {
        [b, h, t, f] => [b, h, t, f],
        ref s => {
            return Err(Error::invalid(
                "avg_pool_temporal",
                format!("expected 4-D input, got {s:?}"),
            ))
        }
    };
    if p == 0 || p > t {
        return Err(Error::invalid(
            "avg_pool_temporal",
            format!("pool length {p} invalid for {t} samples"),
        ));
    }
    let to = t / p;
    let scale = F::one() / F::lit(p as f64);
    let xs = g.value(x).data();
    let mut out = vec![F::zero(); b * h * to * f];
    for row in 0..b * h {
        for w in 0..to {
            for j in 0..p {
                let ti = w * p + j;
                for c in 0..f {
                    out[(row * to + w) * f + c] += xs[(row * t + ti) * f + c];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    g.record(
        Tensor::from_parts(vec![b, h, to, f], out),
        &[x],
        Box::new(AvgPool {
            dims: [b, h, t, f],
            p,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    #[test]
    fn pool_cases() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::from_f64(&[1, 1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = avg_pool_temporal(&mut g, x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 3.5]);

        let c = g.constant(Tensor::full(&[2, 3, 1000, 2], 4.5));
        let y = avg_pool_temporal(&mut g, c, 4).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 250, 2]);
        let y = avg_pool_temporal(&mut g, y, 8).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 31, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 4.5));

        assert!(avg_pool_temporal(&mut g, x, 5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::<f64>::from_f64(
            &[1, 2, 7, 2],
            &(0..28).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>(),
        )
        .unwrap();
        let err = grad_check(
            |g, v| {
                let y = avg_pool_temporal(g, v, 3)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6);
    }
}
