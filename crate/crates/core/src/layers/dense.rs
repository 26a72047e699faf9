use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `x @ weight + bias` over the last axis; weight is `[in, out]`.
pub fn dense<F: Scalar>(g: &mut Graph<F>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = if g.shape(x).len() == 1 {
        let n = g.shape(x)[0];
        let x2 = g.reshape(x, &[1, n])?;
        let y = g.matmul(x2, weight)?;
        let out = g.shape(y)[1];
        g.reshape(y, &[out])?
    } else {
        g.matmul(x, weight)?
    };
    g.add(y, bias)
}

/// Rescales each column (one output unit's incoming weights) of a `[in, out]`
/// matrix to L2 norm at most `max_norm`.
pub fn project_max_norm<F: Scalar>(weight: &mut Tensor<F>, max_norm: f64) -> Result<()> {
    let (rows, cols) = match *weight.shape() {
        [r, c] => (r, c),
        ref s => {
            return Err(Error::invalid(
                "max_norm",
                format!("expected 2-D weight, got {s:?}"),
            ))
        }
    };
    let c = F::lit(max_norm);
    let data = weight.data_mut();
    for j in 0..cols {
        let norm = (0..rows)
            .map(|i| data[i * cols + j] * data[i * cols + j])
            .sum::<F>()
            .sqrt();
        if norm > c {
            let s = c / norm;
            for i in 0..rows {
                data[i * cols + j] *= s;
            }
        }
    }
    Ok(())
}

pub fn column_norms<F: Scalar>(weight: &Tensor<F>) -> Vec<f64> {
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| weight.data()[i * cols + j].as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    #[test]
    fn projection_cases() {
        // column 0 has norm 1, column 1 has norm 0.1
        let mut w = Tensor::<f64>::from_f64(&[2, 2], &[0.6, 0.1, 0.8, 0.0]).unwrap();
        project_max_norm(&mut w, 0.25).unwrap();
        let norms = column_norms(&w);
        assert!((norms[0] - 0.25).abs() < 1e-12);
        assert_eq!(w.data()[1], 0.1);
        assert!((w.data()[0] - 0.15).abs() < 1e-12 && (w.data()[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::zeros(&[3]));
        let w = g.constant(Tensor::ones(&[3, 2]));
        let b = g.constant(Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap());
        let y = dense(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = Tensor::<f64>::from_f64(&[3, 2], &[0.1, -0.4, 0.3, 0.2, -0.5, 0.7]).unwrap();
        let x = Tensor::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 0.3, 0.9, -1.1]).unwrap();
        let err = grad_check(
            |g, wv| {
                let xv = g.constant(x.clone());
                let b = g.constant(Tensor::from_f64(&[2], &[0.1, 0.2]).unwrap());
                let y = dense(g, xv, wv, b)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6);
    }
}
