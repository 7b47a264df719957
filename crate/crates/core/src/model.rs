//! Compact convolutional transformer backbone with quadruple blocks.
//!
//! Each layer carries four token streams — base self, target self,
//! target-to-base cross and base-to-target cross — through one shared set of
//! projection, normalization and MLP parameters. Cross streams keep their own
//! running state as queries while keys and values always come from the
//! same-depth self stream of the opposite domain; the first block seeds the
//! cross streams with the raw opposite-domain tokens.
//!
//! At inference the cross-attention inputs both come from the target domain,
//! which makes cross attention degenerate into self attention; the single
//! forward path exploits that by replicating the target embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Bound, GeluMode, Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Convolutional tokenizer layout: conv -> ReLU -> max-pool, repeated.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub conv_layers: usize,
    pub kernel: usize,
    pub conv_stride: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub pool_pad: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            conv_layers: 2,
            kernel: 7,
            conv_stride: 1,
            pool_window: 3,
            pool_stride: 2,
            pool_pad: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_res: usize,
    pub in_channels: usize,
    /// Token width d.
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub tokenizer: TokenizerConfig,
    /// Learnable positional embedding added after tokenization.
    pub pos_embed: bool,
    /// How many copies of the target embedding the single-domain path emits.
    pub replication: usize,
    pub gelu: GeluMode,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_res: 32,
            in_channels: 3,
            embed_dim: 384,
            blocks: 7,
            heads: 6,
            mlp_ratio: 2.0,
            tokenizer: TokenizerConfig::default(),
            pos_embed: true,
            replication: 4,
            gelu: GeluMode::Erf,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and laptop runs.
    pub fn desk() -> Self {
        ModelConfig {
            input_res: 16,
            embed_dim: 64,
            blocks: 2,
            heads: 2,
            tokenizer: TokenizerConfig { kernel: 3, ..TokenizerConfig::default() },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.blocks == 0 || self.heads == 0 {
            return Err(Error::Parameter("embed_dim, blocks and heads must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "embed_dim {} not divisible by head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.replication == 0 {
            return Err(Error::Parameter("replication must be at least 1".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Parameter("mlp_ratio must be positive".into()));
        }
        self.token_grid()?;
        Ok(())
    }

    /// Spatial grid after the conv/pool chain, from the standard floor formula.
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        let t = &self.tokenizer;
        let (mut h, mut w) = (self.input_res, self.input_res);
        let conv_pad = t.kernel / 2;
        for _ in 0..t.conv_layers {
            if t.kernel > h + 2 * conv_pad || t.kernel > w + 2 * conv_pad {
                return Err(Error::Shape(format!(
                    "kernel {} larger than padded input {h}x{w}",
                    t.kernel
                )));
            }
            h = (h + 2 * conv_pad - t.kernel) / t.conv_stride + 1;
            w = (w + 2 * conv_pad - t.kernel) / t.conv_stride + 1;
            if t.pool_window > h + 2 * t.pool_pad || t.pool_window > w + 2 * t.pool_pad {
                return Err(Error::Shape(format!(
                    "pool window {} larger than padded feature map {h}x{w}",
                    t.pool_window
                )));
            }
            h = (h + 2 * t.pool_pad - t.pool_window) / t.pool_stride + 1;
            w = (w + 2 * t.pool_pad - t.pool_window) / t.pool_stride + 1;
            if h == 0 || w == 0 {
                return Err(Error::Shape("tokenizer chain collapses the input to zero".into()));
            }
        }
        Ok((h, w))
    }

    pub fn token_count(&self) -> Result<usize> {
        let (h, w) = self.token_grid()?;
        Ok(h * w)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Width of the concatenated embedding the few-shot head consumes.
    pub fn replicated_dim(&self) -> usize {
        self.replication * self.embed_dim
    }
}

/// One transformer layer: shared Q/K/V/output projections, two norms and one
/// MLP serving all four streams.
#[derive(Clone, Debug)]
pub struct QuadrupleBlock {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    gelu: GeluMode,
    eps: f64,
}

/// The four token streams flowing through a stack of quadruple blocks.
#[derive(Clone, Copy, Debug)]
pub struct StreamQuad {
    /// Base self-attention stream.
    pub base: Var,
    /// Target-to-base cross stream (target queries, base keys/values).
    pub target_base: Var,
    /// Base-to-target cross stream.
    pub base_target: Var,
    /// Target self-attention stream.
    pub target: Var,
}

/// Pooled per-stream embeddings, each `[1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct QuadEmbedding {
    pub base: Var,
    pub target_base: Var,
    pub base_target: Var,
    pub target: Var,
}

struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

pub struct Backbone<F: Real> {
    cfg: ModelConfig,
    convs: Vec<ConvLayer>,
    pos_embed: Option<ParamId>,
    blocks: Vec<QuadrupleBlock>,
    pool_weight: ParamId,
    n_tokens: usize,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Real> Backbone<F> {
    /// Register a freshly initialized backbone into `store`. Parameter names
    /// are stable; they form the checkpoint manifest.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let n_tokens = cfg.token_count()?;

        let mut convs = Vec::new();
        let mut in_ch = cfg.in_channels;
        for layer in 0..cfg.tokenizer.conv_layers {
            let out_ch =
                if layer + 1 == cfg.tokenizer.conv_layers { d } else { (d / 2).max(4) };
            let k = cfg.tokenizer.kernel;
            let fan_in = in_ch * k * k;
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = store.register(
                format!("backbone.tokenizer.conv{layer}.weight"),
                Tensor::rand_normal(&[out_ch, in_ch, k, k], 0.0, std, rng),
            )?;
            let bias = store.register(
                format!("backbone.tokenizer.conv{layer}.bias"),
                Tensor::zeros(&[out_ch]),
            )?;
            convs.push(ConvLayer { weight, bias, stride: cfg.tokenizer.conv_stride, pad: k / 2 });
            in_ch = out_ch;
        }

        let pos_embed = if cfg.pos_embed {
            Some(store.register(
                "backbone.tokenizer.pos_embed",
                Tensor::rand_normal(&[n_tokens, d], 0.0, 0.02, rng),
            )?)
        } else {
            None
        };

        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            blocks.push(QuadrupleBlock::new(
                &format!("backbone.block{b}"),
                d,
                d,
                d,
                cfg.heads,
                cfg.mlp_hidden(),
                cfg.gelu,
                cfg.layer_norm_eps,
                store,
                rng,
            )?);
        }

        let pool_weight = store
            .register("backbone.seqpool.weight", Tensor::rand_normal(&[d, 1], 0.0, 0.02, rng))?;

        Ok(Backbone {
            cfg: cfg.clone(),
            convs,
            pos_embed,
            blocks,
            pool_weight,
            n_tokens,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn blocks(&self) -> &[QuadrupleBlock] {
        &self.blocks
    }

    /// conv -> ReLU -> max-pool chain, flattened to `[N, d]` tokens, plus the
    /// positional embedding when enabled.
    pub fn tokenize(&self, tape: &mut Tape<F>, bound: &Bound, image: &Tensor<F>) -> Result<Var> {
        let expect = [self.cfg.in_channels, self.cfg.input_res, self.cfg.input_res];
        if image.shape() != expect {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match configured {:?}",
                image.shape(),
                expect
            )));
        }
        tape.set_scope("tokenizer");
        let mut x = tape.constant(image.clone());
        for conv in &self.convs {
            x = tape.conv2d(x, bound.var(conv.weight), bound.var(conv.bias), conv.stride, conv.pad)?;
            x = tape.relu(x)?;
            x = tape.max_pool2d(
                x,
                self.cfg.tokenizer.pool_window,
                self.cfg.tokenizer.pool_stride,
                self.cfg.tokenizer.pool_pad,
            )?;
        }
        let d = self.cfg.embed_dim;
        let flat = tape.reshape(x, vec![d, self.n_tokens])?;
        let mut tokens = tape.transpose(flat)?;
        if let Some(pos) = self.pos_embed {
            tokens = tape.add(tokens, bound.var(pos))?;
        }
        Ok(tokens)
    }

    /// Attention-weighted pooling: `softmax(tokens . w)^T . tokens`.
    /// A bias on the score is a softmax no-op, so only a weight is learned.
    pub fn sequence_pool(&self, tape: &mut Tape<F>, bound: &Bound, tokens: Var) -> Result<Var> {
        tape.set_scope("seqpool");
        let scores = tape.matmul(tokens, bound.var(self.pool_weight))?;
        let weights = tape.softmax(scores, 0)?;
        let wt = tape.transpose(weights)?;
        tape.matmul(wt, tokens)
    }

    /// Full bidirectional forward: both domains in, four pooled embeddings out.
    pub fn forward_pair(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        image_base: &Tensor<F>,
        image_target: &Tensor<F>,
    ) -> Result<QuadEmbedding> {
        let tok_base = self.tokenize(tape, bound, image_base)?;
        let tok_target = self.tokenize(tape, bound, image_target)?;
        let mut quad = StreamQuad {
            base: tok_base,
            target_base: tok_target,
            base_target: tok_base,
            target: tok_target,
        };
        for block in &self.blocks {
            quad = block.forward(tape, bound, quad)?;
        }
        Ok(QuadEmbedding {
            base: self.sequence_pool(tape, bound, quad.base)?,
            target_base: self.sequence_pool(tape, bound, quad.target_base)?,
            base_target: self.sequence_pool(tape, bound, quad.base_target)?,
            target: self.sequence_pool(tape, bound, quad.target)?,
        })
    }

    /// Target-only embedding `[1, d]`: the self-attention path alone.
    pub fn embed_single(&self, tape: &mut Tape<F>, bound: &Bound, image: &Tensor<F>) -> Result<Var> {
        let mut tokens = self.tokenize(tape, bound, image)?;
        for block in &self.blocks {
            tokens = block.forward_self(tape, bound, tokens)?;
        }
        self.sequence_pool(tape, bound, tokens)
    }

    /// Single-domain inference: run the target path and replicate the pooled
    /// embedding, the degenerate form of the four-stream concatenation.
    pub fn forward_single(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        image: &Tensor<F>,
    ) -> Result<Var> {
        let z = self.embed_single(tape, bound, image)?;
        let copies = vec![z; self.cfg.replication];
        tape.concat(&copies, 1)
    }
}

impl QuadrupleBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real>(
        prefix: &str,
        d: usize,
        d_k: usize,
        d_v: usize,
        heads: usize,
        mlp_hidden: usize,
        gelu: GeluMode,
        eps: f64,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_k % heads != 0 || d_v % heads != 0 {
            return Err(Error::Parameter(format!(
                "projection dims {d_k}/{d_v} not divisible by {heads} heads"
            )));
        }
        let std = 0.02;
        let mut reg = |name: &str, shape: &[usize]| {
            store.register(format!("{prefix}.{name}"), Tensor::<F>::rand_normal(shape, 0.0, std, rng))
        };
        let wq = reg("attn.wq", &[d, d_k])?;
        let wk = reg("attn.wk", &[d, d_k])?;
        let wv = reg("attn.wv", &[d, d_v])?;
        let wo = reg("attn.wo", &[d_v, d])?;
        let mlp_w1 = reg("mlp.w1", &[d, mlp_hidden])?;
        let mlp_w2 = reg("mlp.w2", &[mlp_hidden, d])?;
        let bq = store.register(format!("{prefix}.attn.bq"), Tensor::zeros(&[d_k]))?;
        let bk = store.register(format!("{prefix}.attn.bk"), Tensor::zeros(&[d_k]))?;
        let bv = store.register(format!("{prefix}.attn.bv"), Tensor::zeros(&[d_v]))?;
        let bo = store.register(format!("{prefix}.attn.bo"), Tensor::zeros(&[d]))?;
        let mlp_b1 = store.register(format!("{prefix}.mlp.b1"), Tensor::zeros(&[mlp_hidden]))?;
        let mlp_b2 = store.register(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d]))?;
        let norm1_gain = store.register(format!("{prefix}.norm1.gain"), Tensor::full(&[d], F::one()))?;
        let norm1_bias = store.register(format!("{prefix}.norm1.bias"), Tensor::zeros(&[d]))?;
        let norm2_gain = store.register(format!("{prefix}.norm2.gain"), Tensor::full(&[d], F::one()))?;
        let norm2_bias = store.register(format!("{prefix}.norm2.bias"), Tensor::zeros(&[d]))?;
        Ok(QuadrupleBlock {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            norm1_gain,
            norm1_bias,
            norm2_gain,
            norm2_bias,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            heads,
            d_k,
            d_v,
            gelu,
            eps,
        })
    }

    /// Multi-head scaled dot-product attention with queries from `q_src` and
    /// keys/values from `kv_src`. Self attention is the `q_src == kv_src`
    /// special case and shares this exact code path, which is what makes the
    /// double-target degeneracy hold bitwise.
    pub fn attention<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        q_src: Var,
        kv_src: Var,
    ) -> Result<Var> {
        let q = tape.matmul(q_src, bound.var(self.wq))?;
        let q = tape.add_row(q, bound.var(self.bq))?;
        let k = tape.matmul(kv_src, bound.var(self.wk))?;
        let k = tape.add_row(k, bound.var(self.bk))?;
        let v = tape.matmul(kv_src, bound.var(self.wv))?;
        let v = tape.add_row(v, bound.var(self.bv))?;

        let dh_k = self.d_k / self.heads;
        let dh_v = self.d_v / self.heads;
        let scale = F::from_f64(1.0 / (dh_k as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh_k, dh_k)?;
            let kh = tape.slice_cols(k, h * dh_k, dh_k)?;
            let vh = tape.slice_cols(v, h * dh_v, dh_v)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale)?;
            let weights = tape.softmax(scaled, 1)?;
            head_outs.push(tape.matmul(weights, vh)?);
        }
        let merged = if head_outs.len() == 1 { head_outs[0] } else { tape.concat(&head_outs, 1)? };
        let out = tape.matmul(merged, bound.var(self.wo))?;
        tape.add_row(out, bound.var(self.bo))
    }

    pub fn self_attention<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
    ) -> Result<Var> {
        self.attention(tape, bound, x, x)
    }

    pub fn cross_attention<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        q_src: Var,
        kv_src: Var,
    ) -> Result<Var> {
        self.attention(tape, bound, q_src, kv_src)
    }

    fn norm1<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.norm1_gain), bound.var(self.norm1_bias), F::from_f64(self.eps))
    }

    fn mlp<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.mlp_w1))?;
        let h = tape.add_row(h, bound.var(self.mlp_b1))?;
        let h = tape.gelu(h, self.gelu)?;
        let out = tape.matmul(h, bound.var(self.mlp_w2))?;
        tape.add_row(out, bound.var(self.mlp_b2))
    }

    /// Pre-norm residual wiring: `y = x + attn(norm1(.))`, `out = y + mlp(norm2(y))`.
    fn residual_update<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        x: Var,
        q_normed: Var,
        kv_normed: Var,
    ) -> Result<Var> {
        let attn = self.attention(tape, bound, q_normed, kv_normed)?;
        let y = tape.add(x, attn)?;
        let yn = tape.layer_norm(
            y,
            bound.var(self.norm2_gain),
            bound.var(self.norm2_bias),
            F::from_f64(self.eps),
        )?;
        let m = self.mlp(tape, bound, yn)?;
        tape.add(y, m)
    }

    /// Advance all four streams one layer. Every update reads this block's
    /// input streams, so the four paths are order-independent.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        quad: StreamQuad,
    ) -> Result<StreamQuad> {
        tape.set_scope("blocks");
        let shapes: Vec<&[usize]> = [quad.base, quad.target_base, quad.base_target, quad.target]
            .iter()
            .map(|v| tape.value(*v).shape())
            .collect();
        if shapes.iter().any(|s| *s != shapes[0]) {
            return Err(Error::Shape(format!("stream shapes diverged: {shapes:?}")));
        }
        let nb = self.norm1(tape, bound, quad.base)?;
        let nt = self.norm1(tape, bound, quad.target)?;
        let ntb = self.norm1(tape, bound, quad.target_base)?;
        let nbt = self.norm1(tape, bound, quad.base_target)?;
        Ok(StreamQuad {
            base: self.residual_update(tape, bound, quad.base, nb, nb)?,
            target_base: self.residual_update(tape, bound, quad.target_base, ntb, nb)?,
            base_target: self.residual_update(tape, bound, quad.base_target, nbt, nt)?,
            target: self.residual_update(tape, bound, quad.target, nt, nt)?,
        })
    }

    /// The target self path alone, used by single-domain inference.
    pub fn forward_self<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        tape.set_scope("blocks");
        let n = self.norm1(tape, bound, x)?;
        self.residual_update(tape, bound, x, n, n)
    }
}
