use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities below this are clamped before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

struct CrossEntropy {
    labels: Vec<usize>,
}

impl<F: Scalar> Function<F> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let probs = inputs[0];
        let n = probs.shape()[1];
        let b = self.labels.len();
        let scale = grad.item() / F::lit(b as f64);
        let floor = F::lit(PROB_FLOOR);
        let mut out = vec![F::zero(); probs.len()];
        for (i, &y) in self.labels.iter().enumerate() {
            let p = probs.data()[i * n + y];
            // The clamp is flat below the floor.
            if p >= floor {
                out[i * n + y] = -scale / p;
            }
        }
        Ok(vec![Some(Tensor::from_parts(probs.shape().to_vec(), out))])
    }
}

/// Mean over the batch of `-ln max(p[true], 1e-12)` for `[B, N]` probabilities.
pub fn cross_entropy<F: Scalar>(g: &mut Graph<F>, probs: Var, labels: &[u8]) -> Result<Var> {
    let labels = check_labels(g.value(probs), labels)?;
    let value = cross_entropy_value(g.value(probs), &labels);
    let out = Tensor::scalar(F::lit(value));
    g.record(out, &[probs], Box::new(CrossEntropy { labels }))
}

fn check_labels<F: Scalar>(probs: &Tensor<F>, labels: &[u8]) -> Result<Vec<usize>> {
    let (b, n) = match *probs.shape() {
        [b, n] => (b, n),
        ref s => {
            return Err(Error::invalid(
                "cross_entropy",
                format!("expected [B, N] probabilities, got {s:?}"),
            ))
        }
    };
    if labels.len() != b {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    labels
        .iter()
        .map(|&l| {
            if (l as usize) < n {
                Ok(l as usize)
            } else {
                Err(Error::invalid(
                    "cross_entropy",
                    format!("label {l} outside 0..{n}"),
                ))
            }
        })
        .collect()
}

fn cross_entropy_value<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> f64 {
    let n = probs.shape()[1];
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.data()[i * n + y].as_f64().max(PROB_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

/// Loss value without recording.
pub fn cross_entropy_of<F: Scalar>(probs: &Tensor<F>, labels: &[u8]) -> Result<f64> {
    let labels = check_labels(probs, labels)?;
    Ok(cross_entropy_value(probs, &labels))
}

/// Index of the first maximum, so exact ties resolve to the lower class.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
