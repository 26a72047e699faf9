//! Layer primitives with forward and backward rules, plus the small
//! parameter-owning wrappers the model is assembled from.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod init;
pub mod norm;
pub mod pool;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub use activation::{elu, gelu, softmax, GeluKind};
pub use attention::{MultiHeadAttention, Projection};
pub use conv::{
    conv_temporal, depthwise_conv_spatial, depthwise_conv_temporal, separable_conv_temporal,
};
pub use dense::{dense, project_max_norm};
pub use dropout::{dropout, DropoutStyle};
pub use norm::{batch_norm_infer, batch_norm_train, layer_norm, BatchStats};
pub use pool::avg_pool_temporal;

/// Governs dropout and batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch normalization over the last axis with running moments kept in the
/// parameter store as non-trainable buffers.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[features]), true),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[features]), true),
            running_mean: store.add(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[features]),
                false,
            ),
            running_var: store.add(
                format!("{prefix}.running_var"),
                Tensor::ones(&[features]),
                false,
            ),
        }
    }

    /// In training mode the running moments are updated in place.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &mut ParamStore<F>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (y, stats) = self.forward_deferred(g, store, x, mode)?;
        if let Some(stats) = stats {
            self.commit(store, &stats);
        }
        Ok(y)
    }

    /// Like [`BatchNorm::forward`] but hands the batch moments back instead of
    /// folding them into the running averages; pass them to
    /// [`BatchNorm::commit`].
    pub fn forward_deferred<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        let eps = F::lit(norm::BATCH_NORM_EPS);
        match mode {
            Mode::Train => {
                let (y, stats) = batch_norm_train(g, x, gamma, beta, eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Infer => {
                let y = batch_norm_infer(
                    g,
                    x,
                    gamma,
                    beta,
                    store.value(self.running_mean).data(),
                    store.value(self.running_var).data(),
                    eps,
                )?;
                Ok((y, None))
            }
        }
    }

    pub fn commit<F: Scalar>(&self, store: &mut ParamStore<F>, stats: &BatchStats<F>) {
        let m = F::lit(norm::BATCH_NORM_MOMENTUM);
        norm::update_running(
            store.get_mut(self.running_mean).value.data_mut(),
            &stats.mean,
            m,
        );
        norm::update_running(
            store.get_mut(self.running_var).value.data_mut(),
            &stats.var,
            m,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, features: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[features]), true),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[features]), true),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        layer_norm(g, x, gamma, beta, F::lit(norm::LAYER_NORM_EPS))
    }
}

/// Builds a kernel parameter with Glorot-scaled truncated-normal values.
pub fn kernel_param<F: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    name: impl Into<String>,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ParamId {
    store.add(
        name,
        init::truncated_normal(shape, fan_in, fan_out, rng),
        true,
    )
}
