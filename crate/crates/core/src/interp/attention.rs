use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ActivationCache, HeadId};
use crate::numerics::Tensor;

/// Same-parity mass above this marks a head as checkerboard-like.
pub const CHECKERBOARD_THRESHOLD: f64 = 0.6;

/// Summary of one head's attention over every sample in a cache.
///
/// All statistics average over destinations `d ≥ 1`; destination 0 can only
/// attend to itself and would dilute every score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadAttentionStats {
    pub head: HeadId,
    /// Mean weight on source `d − 1`.
    pub prev_mass: f64,
    /// Mean weight on source position 1.
    pub pos1_mass: f64,
    /// Mean weight on sources with the same parity as the destination.
    pub alternation: f64,
    /// Fraction of rows whose largest weight sits on `d − 1`.
    pub prev_argmax_frac: f64,
    pub checkerboard: bool,
}

impl HeadAttentionStats {
    /// A previous-token head: most destinations attend hardest to `d − 1`.
    pub fn is_previous_token(&self) -> bool {
        self.prev_argmax_frac > 0.5
    }
}

/// Cached patterns of one sample at `layer`, `[n_heads × n × n]`.
pub fn attention_patterns(cache: &ActivationCache, layer: usize, sample: usize) -> Result<Tensor> {
    cache.attn_pattern(layer, sample)
}

pub fn attention_stats(cache: &ActivationCache, layer: usize) -> Result<Vec<HeadAttentionStats>> {
    let lc = cache
        .layers
        .get(layer)
        .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
    let n = cache.seq_len;
    if n < 2 {
        return Err(Error::Argument("attention statistics need at least two positions".into()));
    }
    let rows = (cache.batch * (n - 1)) as f64;
    Ok(lc
        .pattern
        .iter()
        .enumerate()
        .map(|(h, p)| {
            let (mut prev, mut pos1, mut alt, mut argmax_hits) = (0.0, 0.0, 0.0, 0usize);
            for s in 0..cache.batch {
                for d in 1..n {
                    let row = &p.row(s * n + d)[..=d];
                    prev += row[d - 1];
                    pos1 += row[1.min(d)];
                    alt += row.iter().enumerate().filter(|(src, _)| (d - src) % 2 == 0).map(|(_, a)| a).sum::<f64>();
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &a)| if a > acc.1 { (i, a) } else { acc })
                        .0;
                    if best == d - 1 {
                        argmax_hits += 1;
                    }
                }
            }
            let alternation = alt / rows;
            HeadAttentionStats {
                head: HeadId::new(layer, h),
                prev_mass: prev / rows,
                pos1_mass: pos1 / rows,
                alternation,
                prev_argmax_frac: argmax_hits as f64 / rows,
                checkerboard: alternation > CHECKERBOARD_THRESHOLD,
            }
        })
        .collect())
}

/// Per-head patterns averaged over every sample in the cache, `[n_heads × n × n]`.
pub fn mean_patterns(cache: &ActivationCache, layer: usize) -> Result<Tensor> {
    let mut acc = attention_patterns(cache, layer, 0)?;
    for s in 1..cache.batch {
        acc.add_assign(&attention_patterns(cache, layer, s)?)?;
    }
    Ok(acc.scale(1.0 / cache.batch as f64))
}
