//! Decoder-only transformer over multimodal slot sequences.
//!
//! Each input row is `content + segment_embedding[seg] + position_embedding[pos]`
//! where `content` is a token embedding row or the output of one of two linear
//! feature adapters (video, bbox). Blocks are pre-layer-norm GPT-2 style with
//! causal multi-head attention and a GELU MLP; the LM head is tied to the token
//! embedding. Forward and backward passes are hand-derived and generic over
//! `f32` / `f64`.

mod backward;
mod checkpoint;
mod forward;
pub(crate) mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assembly::Segment;
use crate::data::FeatureDims;
use crate::error::{Error, Result};
use crate::tokenizer::NUM_SPECIALS;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, DynModel};
pub use forward::{cross_entropy, loss, ForwardTrace, Mode};
pub use ops::log_softmax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Floating-point element type of a model.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + 'static
{
    const PRECISION: Precision;

    /// `C = alpha * A * B + beta * C` over strided views.
    ///
    /// # Safety
    /// Every strided index must be in bounds for its pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub feature_dims: FeatureDims,
    pub dropout_rate: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 512,
            vocab_size: NUM_SPECIALS,
            feature_dims: FeatureDims::default(),
            dropout_rate: 0.1,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_ff < self.d_model {
            return bad("d_ff must be at least d_model");
        }
        if self.vocab_size < NUM_SPECIALS {
            return bad("vocab_size must be at least 13");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn num_parameters(&self) -> usize {
        param_layout(self).iter().map(|p| p.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Layer-norm gains and all biases are excluded from weight decay.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// Flat parameter order used by the optimizer and checkpoints.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamInfo> {
    let d = cfg.d_model;
    let p = |name: String, shape: Vec<usize>, kind| ParamInfo { name, shape, kind };
    use ParamKind::*;
    let mut out = vec![
        p("token_embedding".into(), vec![cfg.vocab_size, d], Weight),
        p("segment_embedding".into(), vec![Segment::COUNT, d], Weight),
        p("position_embedding".into(), vec![cfg.max_seq_len, d], Weight),
        p("video_adapter.weight".into(), vec![cfg.feature_dims.video, d], Weight),
        p("video_adapter.bias".into(), vec![d], Bias),
        p("bbox_adapter.weight".into(), vec![cfg.feature_dims.bbox, d], Weight),
        p("bbox_adapter.bias".into(), vec![d], Bias),
    ];
    for l in 0..cfg.n_layers {
        let b = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            p(b("ln1.gain"), vec![d], Gain),
            p(b("ln1.bias"), vec![d], Bias),
            p(b("attn.qkv.weight"), vec![d, 3 * d], Weight),
            p(b("attn.qkv.bias"), vec![3 * d], Bias),
            p(b("attn.out.weight"), vec![d, d], Weight),
            p(b("attn.out.bias"), vec![d], Bias),
            p(b("ln2.gain"), vec![d], Gain),
            p(b("ln2.bias"), vec![d], Bias),
            p(b("mlp.fc.weight"), vec![d, cfg.d_ff], Weight),
            p(b("mlp.fc.bias"), vec![cfg.d_ff], Bias),
            p(b("mlp.proj.weight"), vec![cfg.d_ff, d], Weight),
            p(b("mlp.proj.bias"), vec![d], Bias),
        ]);
    }
    out.push(p("ln_f.gain".into(), vec![d], Gain));
    out.push(p("ln_f.bias".into(), vec![d], Bias));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub token_embedding: Tensor<T>,
    pub segment_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub video_weight: Tensor<T>,
    pub video_bias: Tensor<T>,
    pub bbox_weight: Tensor<T>,
    pub bbox_bias: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_f_gain: Tensor<T>,
    pub ln_f_bias: Tensor<T>,
}

pub type Gradients<T> = Params<T>;

impl<T: Scalar> Params<T> {
    /// Builds parameters from tensors listed in `param_layout` order.
    fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Self {
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count matches layout");
        let token_embedding = next();
        let segment_embedding = next();
        let position_embedding = next();
        let video_weight = next();
        let video_bias = next();
        let bbox_weight = next();
        let bbox_bias = next();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_gain: next(),
                ln1_bias: next(),
                qkv_weight: next(),
                qkv_bias: next(),
                out_weight: next(),
                out_bias: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc_weight: next(),
                fc_bias: next(),
                proj_weight: next(),
                proj_bias: next(),
            })
            .collect();
        let ln_f_gain = next();
        let ln_f_bias = next();
        Self {
            token_embedding,
            segment_embedding,
            position_embedding,
            video_weight,
            video_bias,
            bbox_weight,
            bbox_bias,
            blocks,
            ln_f_gain,
            ln_f_bias,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = param_layout(cfg).iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Self::from_tensors(cfg, tensors)
    }

    /// Tensors in `param_layout` order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![
            &self.token_embedding,
            &self.segment_embedding,
            &self.position_embedding,
            &self.video_weight,
            &self.video_bias,
            &self.bbox_weight,
            &self.bbox_bias,
        ];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain,
                &b.ln1_bias,
                &b.qkv_weight,
                &b.qkv_bias,
                &b.out_weight,
                &b.out_bias,
                &b.ln2_gain,
                &b.ln2_bias,
                &b.fc_weight,
                &b.fc_bias,
                &b.proj_weight,
                &b.proj_bias,
            ]);
        }
        out.push(&self.ln_f_gain);
        out.push(&self.ln_f_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.segment_embedding,
            &mut self.position_embedding,
            &mut self.video_weight,
            &mut self.video_bias,
            &mut self.bbox_weight,
            &mut self.bbox_bias,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.qkv_weight,
                &mut b.qkv_bias,
                &mut b.out_weight,
                &mut b.out_bias,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.fc_weight,
                &mut b.fc_bias,
                &mut b.proj_weight,
                &mut b.proj_bias,
            ]);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Euclidean norm over every entry, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn convert<U: Scalar>(&self, cfg: &ModelConfig) -> Params<U> {
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| Tensor {
                shape: t.shape.clone(),
                data: t.data.iter().map(|x| U::lit(x.to_f64().unwrap())).collect(),
            })
            .collect();
        Params::from_tensors(cfg, tensors)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization: weights ~ N(0, 0.02²), biases 0, gains 1.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let tensors = param_layout(&config)
            .iter()
            .map(|info| {
                let mut t = Tensor::zeros(&info.shape);
                match info.kind {
                    ParamKind::Weight => t.data.iter_mut().for_each(|x| *x = T::lit(normal.sample(&mut rng))),
                    ParamKind::Gain => t.data.iter_mut().for_each(|x| *x = T::one()),
                    ParamKind::Bias => {}
                }
                t
            })
            .collect();
        let params = Params::from_tensors(&config, tensors);
        Ok(Self { config, params })
    }

    /// Builds a model from explicit parameters after checking shapes.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let tensors = params.tensors();
        if tensors.len() != layout.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (info, t) in layout.iter().zip(tensors) {
            if t.shape != info.shape || t.data.len() != info.numel() {
                return Err(Error::Shape(format!(
                    "{}: expected shape {:?}, found {:?}",
                    info.name, info.shape, t.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Params::zeros(&self.config)
    }
}

/// Alias retained for call sites that mirror the operation name.
pub fn init_model<T: Scalar>(cfg: ModelConfig) -> Result<Model<T>> {
    Model::new(cfg)
}
