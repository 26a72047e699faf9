//! Multi-head self-attention over time-step tokens.
//!
//! Every head owns its query/key/value projections (`[d, head_dim]` plus bias);
//! head outputs are concatenated and mixed by a `[d, d]` output projection with
//! bias. Scores are scaled by `1/sqrt(head_dim)`. No positional encoding.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::layers::activation::softmax;
use crate::layers::dense::dense;
use crate::layers::init;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            init::truncated_normal(&[fan_in, fan_out], fan_in, fan_out, rng),
            true,
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), true);
        Self { weight, bias }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let w = store.var(g, self.weight);
        let b = store.var(g, self.bias);
        dense(g, x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: Vec<Head>,
    pub output: Projection,
    pub model_dim: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        model_dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::invalid(
                "multi_head_attention",
                format!("model dim {model_dim} not divisible by {num_heads} heads"),
            ));
        }
        let head_dim = model_dim / num_heads;
        let heads = (0..num_heads)
            .map(|h| Head {
                query: Projection::new(
                    store,
                    &format!("{prefix}.head{h}.query"),
                    model_dim,
                    head_dim,
                    rng,
                ),
                key: Projection::new(
                    store,
                    &format!("{prefix}.head{h}.key"),
                    model_dim,
                    head_dim,
                    rng,
                ),
                value: Projection::new(
                    store,
                    &format!("{prefix}.head{h}.value"),
                    model_dim,
                    head_dim,
                    rng,
                ),
            })
            .collect();
        let output = Projection::new(
            store,
            &format!("{prefix}.output"),
            model_dim,
            model_dim,
            rng,
        );
        Ok(Self {
            heads,
            output,
            model_dim,
            head_dim,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        tokens: Var,
    ) -> Result<Var> {
        self.forward_with_weights(g, store, tokens).map(|(y, _)| y)
    }

    /// Also returns each head's attention matrix (`[batch, T, T]`, rows over
    /// keys).
    pub fn forward_with_weights<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        tokens: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(tokens).to_vec();
        let x = match *shape {
            [t, d] => g.reshape(tokens, &[1, t, d])?,
            [_, _, _] => tokens,
            _ => {
                return Err(Error::invalid(
                    "multi_head_attention",
                    format!("tokens must be [T, d] or [batch, T, d], got {shape:?}"),
                ))
            }
        };
        if *shape.last().expect("checked") != self.model_dim {
            return Err(Error::invalid(
                "multi_head_attention",
                format!(
                    "token width {} != model dim {}",
                    shape.last().unwrap(),
                    self.model_dim
                ),
            ));
        }
        let scale = F::one() / F::lit(self.head_dim as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.forward(g, store, x)?;
            let k = head.key.forward(g, store, x)?;
            let v = head.value.forward(g, store, x)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.mul_scalar(scores, scale)?;
            let attn = softmax(g, scores)?;
            contexts.push(g.matmul(attn, v)?);
            weights.push(attn);
        }
        let ctx = g.concat(&contexts, 2)?;
        let y = self.output.forward(g, store, ctx)?;
        let y = if shape.len() == 2 {
            g.reshape(y, &shape)?
        } else {
            y
        };
        Ok((y, weights))
    }
}
