use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_normal, Rng, Tensor};

/// Transformer dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_vocab: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_ctx: usize,
}

impl ModelConfig {
    /// The three-layer, eight-head reference model on 40-dimensional vectors.
    pub const fn paper() -> Self {
        Self { d_vocab: 40, d_model: 128, d_head: 64, d_mlp: 3072, n_heads: 8, n_layers: 3, n_ctx: 32 }
    }

    /// A laptop-sized model with the same depth.
    pub const fn desk() -> Self {
        Self { d_vocab: 8, d_model: 64, d_head: 16, d_mlp: 256, n_heads: 4, n_layers: 3, n_ctx: 32 }
    }

    /// Smallest config used for gradient and oracle checks.
    pub const fn tiny() -> Self {
        Self { d_vocab: 4, d_model: 8, d_head: 4, d_mlp: 16, n_heads: 2, n_layers: 2, n_ctx: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_vocab", self.d_vocab),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("n_ctx", self.n_ctx),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be positive")));
        }
        if self.d_model < 2 {
            return Err(Error::Argument("d_model must be at least 2 for layer norm".into()));
        }
        if self.n_ctx < crate::recurrence::MAX_LEN {
            return Err(Error::Argument(format!(
                "n_ctx {} is shorter than the longest sequence {}",
                self.n_ctx,
                crate::recurrence::MAX_LEN
            )));
        }
        Ok(())
    }
}

/// Identifies one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.head >= config.n_heads {
            return Err(Error::Argument(format!(
                "head {self} out of range for {} layers x {} heads",
                config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }

    pub fn all(config: &ModelConfig) -> Vec<HeadId> {
        (0..config.n_layers)
            .flat_map(|l| (0..config.n_heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.layer, self.head)
    }
}

impl std::str::FromStr for HeadId {
    type Err = Error;

    /// Parses `layer.head`, e.g. `2.0`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("head must look like LAYER.HEAD, got {s:?}"));
        let (l, h) = s.split_once('.').ok_or_else(bad)?;
        Ok(HeadId::new(l.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        Self { w: Tensor::filled(&[d], 1.0), b: Tensor::zeros(&[d]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub heads: Vec<HeadParams>,
    pub b_o: Tensor,
    pub ln2: LayerNormParams,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub w_e: Tensor,
    pub w_p: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_final: LayerNormParams,
    pub w_u: Tensor,
}

/// Weight decay applies to `Weight` tensors only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

impl ModelParams {
    /// All-zero weights with identity layer norms.
    pub fn zeros(config: ModelConfig) -> Self {
        let c = config;
        let head = || HeadParams {
            w_q: Tensor::zeros(&[c.d_model, c.d_head]),
            w_k: Tensor::zeros(&[c.d_model, c.d_head]),
            w_v: Tensor::zeros(&[c.d_model, c.d_head]),
            b_q: Tensor::zeros(&[c.d_head]),
            b_k: Tensor::zeros(&[c.d_head]),
            b_v: Tensor::zeros(&[c.d_head]),
            w_o: Tensor::zeros(&[c.d_head, c.d_model]),
        };
        let layer = || LayerParams {
            ln1: LayerNormParams::identity(c.d_model),
            heads: (0..c.n_heads).map(|_| head()).collect(),
            b_o: Tensor::zeros(&[c.d_model]),
            ln2: LayerNormParams::identity(c.d_model),
            w_in: Tensor::zeros(&[c.d_model, c.d_mlp]),
            b_in: Tensor::zeros(&[c.d_mlp]),
            w_out: Tensor::zeros(&[c.d_mlp, c.d_model]),
            b_out: Tensor::zeros(&[c.d_model]),
        };
        Self {
            config,
            w_e: Tensor::zeros(&[c.d_vocab, c.d_model]),
            w_p: Tensor::zeros(&[c.n_ctx, c.d_model]),
            layers: (0..c.n_layers).map(|_| layer()).collect(),
            ln_final: LayerNormParams::identity(c.d_model),
            w_u: Tensor::zeros(&[c.d_model, c.d_vocab]),
        }
    }

    /// Same structure, every entry zero (gradient and moment buffers).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, _, t| t.data_mut().fill(0.0));
        out
    }

    /// Weights `~ N(0, 1/fan_in)`, biases zero, layer norms identity.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        params.visit_mut(&mut |_, kind, t| {
            if kind == ParamKind::Weight {
                let fan_in = t.rows() as f64;
                let std = 1.0 / fan_in.sqrt();
                *t = sample_normal(rng, t.shape()).scale(std);
            }
        });
        Ok(params)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        use ParamKind::*;
        f("embed.W_E", Weight, &self.w_e);
        f("pos_embed.W_P", Weight, &self.w_p);
        for (l, layer) in self.layers.iter().enumerate() {
            f(&format!("blocks.{l}.ln1.w"), Norm, &layer.ln1.w);
            f(&format!("blocks.{l}.ln1.b"), Norm, &layer.ln1.b);
            for (h, head) in layer.heads.iter().enumerate() {
                f(&format!("blocks.{l}.attn.{h}.W_Q"), Weight, &head.w_q);
                f(&format!("blocks.{l}.attn.{h}.W_K"), Weight, &head.w_k);
                f(&format!("blocks.{l}.attn.{h}.W_V"), Weight, &head.w_v);
                f(&format!("blocks.{l}.attn.{h}.b_Q"), Bias, &head.b_q);
                f(&format!("blocks.{l}.attn.{h}.b_K"), Bias, &head.b_k);
                f(&format!("blocks.{l}.attn.{h}.b_V"), Bias, &head.b_v);
                f(&format!("blocks.{l}.attn.{h}.W_O"), Weight, &head.w_o);
            }
            f(&format!("blocks.{l}.attn.b_O"), Bias, &layer.b_o);
            f(&format!("blocks.{l}.ln2.w"), Norm, &layer.ln2.w);
            f(&format!("blocks.{l}.ln2.b"), Norm, &layer.ln2.b);
            f(&format!("blocks.{l}.mlp.W_in"), Weight, &layer.w_in);
            f(&format!("blocks.{l}.mlp.b_in"), Bias, &layer.b_in);
            f(&format!("blocks.{l}.mlp.W_out"), Weight, &layer.w_out);
            f(&format!("blocks.{l}.mlp.b_out"), Bias, &layer.b_out);
        }
        f("ln_final.w", Norm, &self.ln_final.w);
        f("ln_final.b", Norm, &self.ln_final.b);
        f("unembed.W_U", Weight, &self.w_u);
    }

    /// Mutable twin of [`visit`](Self::visit); same order and names.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        use ParamKind::*;
        f("embed.W_E", Weight, &mut self.w_e);
        f("pos_embed.W_P", Weight, &mut self.w_p);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("blocks.{l}.ln1.w"), Norm, &mut layer.ln1.w);
            f(&format!("blocks.{l}.ln1.b"), Norm, &mut layer.ln1.b);
            for (h, head) in layer.heads.iter_mut().enumerate() {
                f(&format!("blocks.{l}.attn.{h}.W_Q"), Weight, &mut head.w_q);
                f(&format!("blocks.{l}.attn.{h}.W_K"), Weight, &mut head.w_k);
                f(&format!("blocks.{l}.attn.{h}.W_V"), Weight, &mut head.w_v);
                f(&format!("blocks.{l}.attn.{h}.b_Q"), Bias, &mut head.b_q);
                f(&format!("blocks.{l}.attn.{h}.b_K"), Bias, &mut head.b_k);
                f(&format!("blocks.{l}.attn.{h}.b_V"), Bias, &mut head.b_v);
                f(&format!("blocks.{l}.attn.{h}.W_O"), Weight, &mut head.w_o);
            }
            f(&format!("blocks.{l}.attn.b_O"), Bias, &mut layer.b_o);
            f(&format!("blocks.{l}.ln2.w"), Norm, &mut layer.ln2.w);
            f(&format!("blocks.{l}.ln2.b"), Norm, &mut layer.ln2.b);
            f(&format!("blocks.{l}.mlp.W_in"), Weight, &mut layer.w_in);
            f(&format!("blocks.{l}.mlp.b_in"), Bias, &mut layer.b_in);
            f(&format!("blocks.{l}.mlp.W_out"), Weight, &mut layer.w_out);
            f(&format!("blocks.{l}.mlp.b_out"), Bias, &mut layer.b_out);
        }
        f("ln_final.w", Norm, &mut self.ln_final.w);
        f("ln_final.b", Norm, &mut self.ln_final.b);
        f("unembed.W_U", Weight, &mut self.w_u);
    }

    /// Owned copies of every tensor, in visit order.
    pub fn to_tensor_list(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, t| out.push(t.clone()));
        out
    }

    pub fn names(&self) -> Vec<(String, ParamKind, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, kind, t| out.push((name.to_string(), kind, t.shape().to_vec())));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, _, t| total += t.len());
        total
    }

    pub fn head(&self, id: HeadId) -> &HeadParams {
        &self.layers[id.layer].heads[id.head]
    }

    pub fn head_mut(&mut self, id: HeadId) -> &mut HeadParams {
        &mut self.layers[id.layer].heads[id.head]
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::zeros(self.config).names();
        let actual = self.names();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, _, es), (an, _, ashape)) in expected.iter().zip(&actual) {
            if en != an || es != ashape {
                return Err(Error::Shape(format!("{an}: expected {es:?}, found {ashape:?}")));
            }
        }
        let mut bad = None;
        self.visit(&mut |name, _, t| {
            if bad.is_none() && !t.all_finite() {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::NonFinite(name)),
            None => Ok(()),
        }
    }
}
