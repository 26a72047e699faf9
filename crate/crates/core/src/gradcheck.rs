//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn eval_scalar<F: Scalar>(
    f: &impl Fn(&mut Graph<F>, Var) -> Result<Var>,
    x: Tensor<F>,
) -> Result<F> {
    let mut g = Graph::no_grad();
    let xv = g.input(x);
    let root = f(&mut g, xv)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(Error::GradCheck(format!(
            "function output has shape {:?}, expected scalar",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Maximum relative error between the tape gradient of `f` at `x` and a central
/// difference with step `epsilon`.
///
/// `f` must be deterministic; two evaluations at `x` that differ bitwise are
/// reported as an error.
pub fn grad_check<F, Fun>(f: Fun, x: &Tensor<F>, epsilon: f64) -> Result<f64>
where
    F: Scalar,
    Fun: Fn(&mut Graph<F>, Var) -> Result<Var>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::GradCheck(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::GradCheck("input contains non-finite values".into()));
    }
    let first = eval_scalar(&f, x.clone())?;
    let second = eval_scalar(&f, x.clone())?;
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic ({first} vs {second})"
        )));
    }

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let root = f(&mut g, xv)?;
    let grads = g.backward(root)?;
    let analytic = grads
        .input(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eps = F::lit(epsilon);
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?).as_f64() / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

fn eval_tensor<F: Scalar>(
    f: &impl Fn(&mut Graph<F>, Var) -> Result<Var>,
    x: Tensor<F>,
) -> Result<Tensor<F>> {
    let mut g = Graph::no_grad();
    let xv = g.input(x);
    let root = f(&mut g, xv)?;
    Ok(g.value(root).clone())
}

/// Finite-difference formula for the numeric side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+ε) - f(x-ε)) / 2ε`, truncation error `O(ε²)`.
    Central,
    /// `(4 D(ε/2) - D(ε)) / 3` over central differences `D`, truncation
    /// error `O(ε⁴)`. Stays accurate where the derivative nearly vanishes,
    /// e.g. around the GELU minimum, while allowing a step large enough to
    /// keep rounding error small.
    Richardson,
}

/// Checks the vector-Jacobian product `rᵀ J` of a tensor-valued `f` at `x`
/// with central differences.
pub fn grad_check_projected<F, Fun>(
    f: Fun,
    x: &Tensor<F>,
    r: &Tensor<F>,
    epsilon: f64,
) -> Result<f64>
where
    F: Scalar,
    Fun: Fn(&mut Graph<F>, Var) -> Result<Var>,
{
    grad_check_projected_with(f, x, r, epsilon, Stencil::Central)
}

/// [`grad_check_projected`] with a chosen stencil. The numeric side
/// differences outputs elementwise before projecting onto `r` in f64, so
/// outputs the perturbation does not reach cancel exactly.
pub fn grad_check_projected_with<F, Fun>(
    f: Fun,
    x: &Tensor<F>,
    r: &Tensor<F>,
    epsilon: f64,
    stencil: Stencil,
) -> Result<f64>
where
    F: Scalar,
    Fun: Fn(&mut Graph<F>, Var) -> Result<Var>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::GradCheck(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::GradCheck("input contains non-finite values".into()));
    }
    let first = eval_tensor(&f, x.clone())?;
    if first.shape() != r.shape() {
        return Err(Error::GradCheck(format!(
            "cotangent shape {:?} does not match output {:?}",
            r.shape(),
            first.shape()
        )));
    }
    let second = eval_tensor(&f, x.clone())?;
    if first
        .data()
        .iter()
        .zip(second.data())
        .any(|(a, b)| a.as_f64().to_bits() != b.as_f64().to_bits())
    {
        return Err(Error::GradCheck("function is not deterministic".into()));
    }

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    let w = g.constant(r.clone());
    let p = g.mul(y, w)?;
    let root = g.sum(p)?;
    let grads = g.backward(root)?;
    let analytic = grads
        .input(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let central = |i: usize, h: f64| -> Result<f64> {
        let mut plus = x.clone();
        plus.data_mut()[i] += F::lit(h);
        let mut minus = x.clone();
        minus.data_mut()[i] -= F::lit(h);
        let (yp, ym) = (eval_tensor(&f, plus)?, eval_tensor(&f, minus)?);
        Ok(yp
            .data()
            .iter()
            .zip(ym.data())
            .zip(r.data())
            .map(|((a, b), w)| (*a - *b).as_f64() * w.as_f64())
            .sum::<f64>()
            / (2.0 * h))
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let numeric = match stencil {
            Stencil::Central => central(i, epsilon)?,
            Stencil::Richardson => (4.0 * central(i, epsilon / 2.0)? - central(i, epsilon)?) / 3.0,
        };
        worst = worst.max(relative_error(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let err = grad_check(|g, x| g.sum(x), &random(&[3, 4], 1), 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_two_logits() {
        // closed form: d/dz of -log softmax(z)_0 = softmax(z) - onehot(0)
        let z = Tensor::from_f64(&[2], &[0.3, -1.2]).unwrap();
        let f = |g: &mut Graph<f64>, x: Var| {
            let e = g.exp(x)?;
            let s = g.sum(e)?;
            let ls = g.log(s)?;
            let z0 = g.slice(x, 0, 0, 1)?;
            g.sub(ls, z0)
        };
        let err = grad_check(f, &z, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");

        let mut g = Graph::new();
        let x = g.input(z.clone());
        let loss = f(&mut g, x).unwrap();
        let grads = g.backward(loss).unwrap();
        let (a, b) = (0.3f64.exp(), (-1.2f64).exp());
        let expected = [a / (a + b) - 1.0, b / (a + b)];
        for (got, want) in grads.input(x).unwrap().data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let f = |g: &mut Graph<f64>, x: Var| {
            calls.set(calls.get() + 1);
            let s = g.sum(x)?;
            g.add_scalar(s, calls.get() as f64)
        };
        assert!(matches!(
            grad_check(f, &random(&[2], 3), 1e-5),
            Err(Error::GradCheck(_))
        ));
    }

    #[test]
    fn projected_matches_closed_form() {
        // y = x ⊙ x, so rᵀJ = 2 r ⊙ x
        let x = random(&[3, 4], 5);
        let r = random(&[3, 4], 6);
        let err = grad_check_projected(|g, v| g.mul(v, v), &x, &r, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
        assert!(grad_check_projected(|g, v| g.mul(v, v), &x, &random(&[4, 3], 6), 1e-5).is_err());
    }

    #[test]
    fn richardson_cancels_second_order_error() {
        // y = x³ at x = 0.1 with ε = 0.01: the central difference is off by
        // ε² = 1e-4 against 3x² = 0.03, the extrapolation by rounding only
        let x = Tensor::from_f64(&[1], &[0.1]).unwrap();
        let r = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let cube = |g: &mut Graph<f64>, v: Var| {
            let sq = g.mul(v, v)?;
            g.mul(sq, v)
        };
        let central = grad_check_projected(cube, &x, &r, 1e-2).unwrap();
        assert!((central - 1e-4 / 0.0301).abs() < 1e-6, "{central}");
        let rich = grad_check_projected_with(cube, &x, &r, 1e-2, Stencil::Richardson).unwrap();
        assert!(rich < 1e-12, "{rich}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        assert!(grad_check(|g, x| g.sum(x), &random(&[2], 3), 0.0).is_err());
    }

    #[test]
    fn three_layer_composite() {
        // tanh(W2 tanh(W1 x)) summed, gradient w.r.t. x
        for seed in 0..5 {
            let w1 = random(&[4, 5], 100 + seed);
            let w2 = random(&[5, 3], 200 + seed);
            let w3 = random(&[3, 1], 300 + seed);
            let f = |g: &mut Graph<f64>, x: Var| {
                let a = g.constant(w1.clone());
                let b = g.constant(w2.clone());
                let c = g.constant(w3.clone());
                let h = g.matmul(x, a)?;
                let h = g.tanh(h)?;
                let h = g.matmul(h, b)?;
                let h = g.erf(h)?;
                let h = g.matmul(h, c)?;
                let h = g.exp(h)?;
                g.mean(h)
            };
            let err = grad_check(f, &random(&[2, 4], seed), 1e-5).unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }
}
