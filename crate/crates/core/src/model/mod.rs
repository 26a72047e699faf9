//! The assembled decoder: a multi-scale convolution stream and a single-layer
//! Transformer stream, fused by concatenation, followed by depthwise spatial
//! filtering, a separable convolution and a max-norm dense head.
//!
//! Input batches are `[batch, electrodes, samples, 1]`. Every variant builds
//! its parameters in a fixed order from a seeded generator, so equal seeds give
//! bit-identical weights.

pub mod checkpoint;
pub mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::layers::{
    avg_pool_temporal, conv_temporal, depthwise_conv_spatial, dropout, elu, gelu, kernel_param,
    separable_conv_temporal, softmax, BatchNorm, BatchStats, DropoutStyle, GeluKind, LayerNorm,
    Mode, MultiHeadAttention, Projection,
};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{ModelConfig, Variant};

/// Batch moments produced by a training-mode pass, not yet folded into the
/// running averages.
pub type PendingStats<F> = Vec<(BatchNorm, BatchStats<F>)>;

fn scalar_param<F: Scalar>(store: &mut ParamStore<F>, name: String) -> ParamId {
    store.add(name, Tensor::ones(&[1]), true)
}

#[derive(Debug, Clone, Copy)]
pub struct Branch {
    pub kernel_size: usize,
    pub kernel: ParamId,
    pub norm: BatchNorm,
    pub scale: ParamId,
}

/// Parallel temporal convolution branches, each conv → batch norm → ELU →
/// spatial dropout → branch scalar, concatenated along the map axis.
#[derive(Debug, Clone)]
pub struct MultiScaleBlock {
    pub branches: Vec<Branch>,
    pub filters: usize,
    pub dropout: f64,
}

impl MultiScaleBlock {
    /// Scalars are registered separately (see [`MultiScaleBlock::attach_scales`])
    /// so that they sit with the other fusion weights in the parameter order.
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        kernels: &[usize],
        filters: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let branches = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let kernel = kernel_param(
                    store,
                    format!("branch{i}.kernel"),
                    &[k, 1, filters],
                    k,
                    k * filters,
                    rng,
                );
                let norm = BatchNorm::new(store, &format!("branch{i}.bn"), filters);
                Branch {
                    kernel_size: k,
                    kernel,
                    norm,
                    scale: ParamId(usize::MAX),
                }
            })
            .collect();
        Self {
            branches,
            filters,
            dropout,
        }
    }

    fn attach_scales<F: Scalar>(&mut self, store: &mut ParamStore<F>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.scale = scalar_param(store, format!("fusion.branch{i}.scale"));
        }
    }

    pub fn maps(&self) -> usize {
        self.branches.len() * self.filters
    }

    /// `[B, C, T, 1]` → `[B, C, T, branches * filters]`.
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        mode: Mode,
        rng: &mut R,
        pending: &mut PendingStats<F>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let k = store.var(g, b.kernel);
            let y = conv_temporal(g, x, k)?;
            let (y, stats) = b.norm.forward_deferred(g, store, y, mode)?;
            if let Some(s) = stats {
                pending.push((b.norm, s));
            }
            let y = elu(g, y)?;
            let y = dropout(g, y, self.dropout, mode, DropoutStyle::Spatial, rng)?;
            let s = store.var(g, b.scale);
            outs.push(g.scale_by(y, s)?);
        }
        g.concat(&outs, 3)
    }
}

/// One encoder layer over time-step tokens whose features are the electrodes.
#[derive(Debug, Clone)]
pub struct TransformerStream {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Projection,
    pub ff2: Projection,
    pub norm2: LayerNorm,
    pub dropout: f64,
    pub gelu: GeluKind,
}

impl TransformerStream {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        electrodes: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
        gelu: GeluKind,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = MultiHeadAttention::new(
            store,
            &format!("{prefix}.attention"),
            electrodes,
            heads,
            rng,
        )?;
        let norm1 = LayerNorm::new(store, &format!("{prefix}.norm1"), electrodes);
        let ff1 = Projection::new(store, &format!("{prefix}.ff1"), electrodes, ff_dim, rng);
        let ff2 = Projection::new(store, &format!("{prefix}.ff2"), ff_dim, electrodes, rng);
        let norm2 = LayerNorm::new(store, &format!("{prefix}.norm2"), electrodes);
        Ok(Self {
            attention,
            norm1,
            ff1,
            ff2,
            norm2,
            dropout,
            gelu,
        })
    }

    /// `[B, C, T, 1]` → `[B, C, T, 1]` (unscaled).
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (b, c, t) = match *g.shape(x) {
            [b, c, t, 1] => (b, c, t),
            ref s => {
                return Err(Error::invalid(
                    "transformer_stream",
                    format!("expected [B, C, T, 1], got {s:?}"),
                ))
            }
        };
        let rows = g.reshape(x, &[b, c, t])?;
        let tokens = g.transpose(rows)?;
        let a = self.attention.forward(g, store, tokens)?;
        let a = dropout(g, a, self.dropout, mode, DropoutStyle::Element, rng)?;
        let h = g.add(tokens, a)?;
        let h = self.norm1.forward(g, store, h)?;
        let f = self.ff1.forward(g, store, h)?;
        let f = gelu(g, f, self.gelu)?;
        let f = dropout(g, f, self.dropout, mode, DropoutStyle::Element, rng)?;
        let f = self.ff2.forward(g, store, f)?;
        let h = g.add(h, f)?;
        let h = self.norm2.forward(g, store, h)?;
        let back = g.transpose(h)?;
        g.reshape(back, &[b, c, t, 1])
    }
}

#[derive(Debug, Clone)]
enum Frontend {
    /// Multi-scale and/or Transformer streams joined by layer norm.
    Fused {
        multiscale: MultiScaleBlock,
        multiscale_scale: Option<ParamId>,
        transformer: Option<(TransformerStream, ParamId)>,
        norm: LayerNorm,
    },
    /// Single temporal conv + batch norm.
    Temporal { kernel: ParamId, norm: BatchNorm },
}

#[derive(Debug, Clone, Copy)]
struct Backend {
    spatial: ParamId,
    spatial_norm: BatchNorm,
    separable_depthwise: ParamId,
    separable_pointwise: ParamId,
    separable_norm: BatchNorm,
    classifier: Projection,
}

/// Intermediate activations of one pass, for shape checks and analysis.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Scaled multi-scale stream output `[B, C, T, maps]`.
    pub multiscale: Option<Var>,
    /// Scaled Transformer stream output `[B, C, T, 1]`.
    pub transformer: Option<Var>,
    /// Normalized fusion (or the baseline's temporal block) `[B, C, T, F]`.
    pub fused: Var,
    /// After the depthwise spatial stage and first pooling `[B, 1, T/p1, F*D]`.
    pub spatial: Var,
    /// After the separable stage and second pooling `[B, 1, T/p1/p2, F2]`.
    pub separable: Var,
    /// Flattened features `[B, F2 * T/p1/p2]`.
    pub features: Var,
}

#[derive(Debug, Clone)]
pub struct Forward<F: Scalar> {
    pub logits: Var,
    pub probs: Var,
    pub trace: Trace,
    pub pending: PendingStats<F>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub non_trainable: usize,
    pub breakdown: Vec<ParamEntry>,
}

impl ParamCount {
    /// Trainable total of parameters whose name starts with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> usize {
        self.breakdown
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.count)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    params: ParamStore<F>,
    frontend: Frontend,
    backend: Backend,
}

pub fn build_model<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<F>> {
    Model::new(config.clone(), seed)
}

/// Same hyperparameters as `base` with one architectural component removed.
pub fn build_ablation<F: Scalar>(
    base: &ModelConfig,
    variant: Variant,
    seed: u64,
) -> Result<Model<F>> {
    if variant == Variant::Full {
        return Err(Error::Config(
            "ablation variant must remove a component; got full".into(),
        ));
    }
    Model::new(base.clone().with_variant(variant), seed)
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let frontend = match config.variant {
            Variant::EegnetBaseline => {
                let k = config.eegnet_kernel;
                let f = config.branch_filters;
                let kernel = kernel_param(
                    &mut store,
                    "temporal.kernel",
                    &[k, 1, f],
                    k,
                    k * f,
                    &mut rng,
                );
                let norm = BatchNorm::new(&mut store, "temporal.bn", f);
                Frontend::Temporal { kernel, norm }
            }
            v => {
                let mut multiscale = MultiScaleBlock::new(
                    &mut store,
                    &config.active_kernels(),
                    config.branch_filters,
                    config.branch_dropout,
                    &mut rng,
                );
                let transformer = if v.has_transformer() {
                    Some(TransformerStream::new(
                        &mut store,
                        "transformer",
                        c,
                        config.attention_heads,
                        config.transformer_ff_dim,
                        config.transformer_dropout,
                        config.gelu,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                multiscale.attach_scales(&mut store);
                let multiscale_scale =
                    Some(scalar_param(&mut store, "fusion.multiscale.scale".into()));
                let transformer = transformer.map(|t| {
                    (
                        t,
                        scalar_param(&mut store, "fusion.transformer.scale".into()),
                    )
                });
                let norm = LayerNorm::new(&mut store, "fusion.norm", config.fused_maps());
                Frontend::Fused {
                    multiscale,
                    multiscale_scale,
                    transformer,
                    norm,
                }
            }
        };
        let fused = config.fused_maps();
        let d = config.depth_multiplier;
        let wide = fused * d;
        let sk = config.separable_kernel;
        let f2 = config.separable_filters;
        let spatial = kernel_param(
            &mut store,
            "spatial.kernel",
            &[c, fused, d],
            c,
            c * d,
            &mut rng,
        );
        let spatial_norm = BatchNorm::new(&mut store, "spatial.bn", wide);
        let separable_depthwise = kernel_param(
            &mut store,
            "separable.depthwise",
            &[sk, wide],
            sk,
            sk,
            &mut rng,
        );
        let separable_pointwise = kernel_param(
            &mut store,
            "separable.pointwise",
            &[wide, f2],
            wide,
            f2,
            &mut rng,
        );
        let separable_norm = BatchNorm::new(&mut store, "separable.bn", f2);
        let classifier = Projection::new(
            &mut store,
            "classifier",
            config.flat_features(),
            config.classes,
            &mut rng,
        );
        store.get_mut(classifier.weight).max_norm = Some(config.dense_max_norm);
        let mut model = Self {
            config,
            params: store,
            frontend,
            backend: Backend {
                spatial,
                spatial_norm,
                separable_depthwise,
                separable_pointwise,
                separable_norm,
                classifier,
            },
        };
        // Initial weights already satisfy the head's constraint.
        model.project_constraints()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn multiscale(&self) -> Option<&MultiScaleBlock> {
        match &self.frontend {
            Frontend::Fused { multiscale, .. } => Some(multiscale),
            Frontend::Temporal { .. } => None,
        }
    }

    pub fn transformer(&self) -> Option<&TransformerStream> {
        match &self.frontend {
            Frontend::Fused { transformer, .. } => transformer.as_ref().map(|(t, _)| t),
            Frontend::Temporal { .. } => None,
        }
    }

    /// Applies every parameter's max-norm bound.
    pub fn project_constraints(&mut self) -> Result<()> {
        for (_, p) in self.params.iter_mut() {
            if let Some(c) = p.max_norm {
                crate::layers::project_max_norm(&mut p.value, c)?;
            }
        }
        Ok(())
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut trainable = 0;
        let mut non_trainable = 0;
        let breakdown = self
            .params
            .iter()
            .map(|(_, p)| {
                let count = p.value.len();
                if p.trainable {
                    trainable += count;
                } else {
                    non_trainable += count;
                }
                ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    count,
                    trainable: p.trainable,
                }
            })
            .collect();
        ParamCount {
            trainable,
            non_trainable,
            breakdown,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match *shape {
            [b, ch, t, 1] if b > 0 && ch == c.channels && t == c.samples => Ok(()),
            _ => Err(Error::invalid(
                "forward",
                format!(
                    "expected [batch, {}, {}, 1], got {shape:?}",
                    c.channels, c.samples
                ),
            )),
        }
    }

    /// Full pass; batch-norm moments of a training pass are returned in
    /// `pending` and only take effect after [`Model::commit`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<F>> {
        self.check_input(g.shape(x))?;
        let mut pending = Vec::new();
        let p = &self.params;
        let (multiscale_out, transformer_out, fused) = match &self.frontend {
            Frontend::Temporal { kernel, norm } => {
                let k = p.var(g, *kernel);
                let y = conv_temporal(g, x, k)?;
                let (y, stats) = norm.forward_deferred(g, p, y, mode)?;
                if let Some(s) = stats {
                    pending.push((*norm, s));
                }
                (None, None, y)
            }
            Frontend::Fused {
                multiscale,
                multiscale_scale,
                transformer,
                norm,
            } => {
                let mut m = multiscale.forward(g, p, x, mode, rng, &mut pending)?;
                if let Some(s) = multiscale_scale {
                    let s = p.var(g, *s);
                    m = g.scale_by(m, s)?;
                }
                let t = match transformer {
                    Some((stream, scale)) => {
                        let y = stream.forward(g, p, x, mode, rng)?;
                        let s = p.var(g, *scale);
                        Some(g.scale_by(y, s)?)
                    }
                    None => None,
                };
                let mut parts = vec![m];
                parts.extend(t);
                let joined = g.concat(&parts, 3)?;
                let fused = norm.forward(g, p, joined)?;
                (Some(m), t, fused)
            }
        };
        let (logits, spatial, separable, features) =
            self.backend_forward(g, fused, mode, rng, &mut pending)?;
        let probs = softmax(g, logits)?;
        Ok(Forward {
            logits,
            probs,
            trace: Trace {
                multiscale: multiscale_out,
                transformer: transformer_out,
                fused,
                spatial,
                separable,
                features,
            },
            pending,
        })
    }

    /// Fusion and everything after it, applied to already-computed stream
    /// outputs (concatenated in the given order). Only meaningful for the
    /// fused variants; the widths must add up to the configured fused width.
    pub fn classify_streams<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        streams: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<F>> {
        let Frontend::Fused { norm, .. } = &self.frontend else {
            return Err(Error::invalid(
                "classify_streams",
                "the baseline has no fusion stage",
            ));
        };
        let joined = g.concat(streams, 3)?;
        let width = *g.shape(joined).last().expect("4-d");
        if width != self.config.fused_maps() {
            return Err(Error::invalid(
                "classify_streams",
                format!(
                    "stream widths sum to {width}, model fuses {}",
                    self.config.fused_maps()
                ),
            ));
        }
        let fused = norm.forward(g, &self.params, joined)?;
        let mut pending = Vec::new();
        let (logits, spatial, separable, features) =
            self.backend_forward(g, fused, mode, rng, &mut pending)?;
        let probs = softmax(g, logits)?;
        Ok(Forward {
            logits,
            probs,
            trace: Trace {
                multiscale: None,
                transformer: None,
                fused,
                spatial,
                separable,
                features,
            },
            pending,
        })
    }

    fn backend_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        fused: Var,
        mode: Mode,
        rng: &mut R,
        pending: &mut PendingStats<F>,
    ) -> Result<(Var, Var, Var, Var)> {
        let p = &self.params;
        let be = &self.backend;
        let cfg = &self.config;
        let mut bn = |g: &mut Graph<F>, norm: &BatchNorm, y: Var| -> Result<Var> {
            let (y, stats) = norm.forward_deferred(g, p, y, mode)?;
            if let Some(s) = stats {
                pending.push((*norm, s));
            }
            Ok(y)
        };
        let k = p.var(g, be.spatial);
        let y = depthwise_conv_spatial(g, fused, k)?;
        let y = bn(g, &be.spatial_norm, y)?;
        let y = elu(g, y)?;
        let y = avg_pool_temporal(g, y, cfg.pool1)?;
        let spatial = dropout(g, y, cfg.spatial_dropout, mode, DropoutStyle::Element, rng)?;
        let dw = p.var(g, be.separable_depthwise);
        let pw = p.var(g, be.separable_pointwise);
        let y = separable_conv_temporal(g, spatial, dw, pw)?;
        let y = bn(g, &be.separable_norm, y)?;
        let y = elu(g, y)?;
        let y = avg_pool_temporal(g, y, cfg.pool2)?;
        let separable = dropout(g, y, cfg.spatial_dropout, mode, DropoutStyle::Element, rng)?;
        let batch = g.shape(separable)[0];
        let features = g.reshape(separable, &[batch, cfg.flat_features()])?;
        let logits = be.classifier.forward(g, p, features)?;
        Ok((logits, spatial, separable, features))
    }

    /// Folds batch moments from a training pass into the running averages.
    pub fn commit(&mut self, pending: &PendingStats<F>) {
        for (norm, stats) in pending {
            norm.commit(&mut self.params, stats);
        }
    }

    /// Inference-mode logits for `[B, C, T]` or `[B, C, T, 1]` input.
    pub fn logits(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        self.infer(batch).map(|(l, _)| l)
    }

    /// Inference-mode class probabilities `[B, N]`.
    pub fn predict(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        self.infer(batch).map(|(_, p)| p)
    }

    fn infer(&self, batch: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let x = as_model_input(batch)?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        // Dropout is the identity in inference mode, so the generator is never drawn.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, xv, Mode::Infer, &mut rng)?;
        Ok((g.value(out.logits).clone(), g.value(out.probs).clone()))
    }

    /// Copies every parameter of `src` with a matching name. Parameters whose
    /// extents shrink (e.g. fusion-width dependent ones when a stream is
    /// removed) receive the leading sub-block. Returns the number copied.
    pub fn transfer_shared(&mut self, src: &Model<F>) -> Result<usize> {
        let mut copied = 0;
        for (_, dst) in self.params.iter_mut() {
            let Some(s) = src.params.by_name(&dst.name) else {
                continue;
            };
            let ds = dst.value.shape().to_vec();
            let ss = s.value.shape();
            if ds == ss {
                dst.value = s.value.clone();
            } else if ds.len() == ss.len() && ds.iter().zip(ss).all(|(a, b)| a <= b) {
                dst.value = leading_block(&s.value, &ds);
            } else {
                return Err(Error::Inconsistent(format!(
                    "parameter {} has shape {ds:?}, source {ss:?}",
                    dst.name
                )));
            }
            copied += 1;
        }
        Ok(copied)
    }
}

fn leading_block<F: Scalar>(src: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    let ss = src.strides();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&ss).map(|(i, s)| i * s).sum();
        out.push(src.data()[off]);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("sized above")
}

/// Accepts `[B, C, T]` or `[B, C, T, 1]` and returns the 4-d model layout.
pub fn as_model_input<F: Scalar>(batch: &Tensor<F>) -> Result<Tensor<F>> {
    match *batch.shape() {
        [b, c, t] => batch.reshape(&[b, c, t, 1]),
        [_, _, _, 1] => Ok(batch.clone()),
        ref s => Err(Error::invalid(
            "forward",
            format!("expected [B, C, T] or [B, C, T, 1], got {s:?}"),
        )),
    }
}
