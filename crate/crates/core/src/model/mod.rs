//! The decoder-only transformer: parameters, forward pass, folding, checkpoints.

pub mod checkpoint;
mod fold;
mod forward;
mod params;

pub use checkpoint::{load, save};
pub use fold::fold;
pub use forward::{
    forward, forward_hooked, layer_norm, run, standardize, ActivationCache, HeadHook, LayerCache,
    NormCache, LN_EPS,
};
pub use params::{
    HeadId, HeadParams, LayerNormParams, LayerParams, ModelConfig, ModelParams, ParamKind,
};
