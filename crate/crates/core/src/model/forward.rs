//! Forward pass with a full activation cache.
//!
//! Row-vector convention throughout: a residual stream vector `x` is a row,
//! and a linear map is `x·W + b`. Batches are flattened so that row
//! `s·n + i` is position `i` of sample `s`; the dense maps then run as one
//! matmul over the whole batch and only attention works per sample.

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_rows, Tensor};

use super::params::{HeadId, LayerNormParams, ModelParams};

pub const LN_EPS: f64 = 1e-5;

/// `((x − mean) / sqrt(var + ε))·γ + β` on a single vector.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let (xhat, _) = standardize(x);
    xhat.iter().zip(gamma).zip(beta).map(|((v, g), b)| v * g + b).collect()
}

/// Centered, scaled copy of `x` and the divisor `sqrt(var + ε)`.
pub fn standardize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - mean) / scale).collect(), scale)
}

/// Row-wise layer norm intermediates.
#[derive(Debug, Clone)]
pub struct NormCache {
    /// Per-row divisors `sqrt(var + ε)`.
    pub scale: Vec<f64>,
    pub normalized: Tensor,
    pub out: Tensor,
}

pub(crate) fn layer_norm_rows(x: &Tensor, ln: &LayerNormParams) -> NormCache {
    let (rows, cols) = (x.rows(), x.cols());
    let mut normalized = Tensor::zeros(&[rows, cols]);
    let mut out = Tensor::zeros(&[rows, cols]);
    let mut scale = Vec::with_capacity(rows);
    for i in 0..rows {
        let (xhat, s) = standardize(x.row(i));
        scale.push(s);
        for (j, v) in xhat.iter().enumerate() {
            out.set(i, j, v * ln.w.data()[j] + ln.b.data()[j]);
        }
        normalized.row_mut(i).copy_from_slice(&xhat);
    }
    NormCache { scale, normalized, out }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub resid_pre: Tensor,
    pub ln1: NormCache,
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Per head `[batch·n × n]`: row `s·n + dest`, column `src`.
    pub pattern: Vec<Tensor>,
    /// Per head attention-weighted values `[batch·n × d_head]`.
    pub z: Vec<Tensor>,
    /// Per head residual contribution `z·W_O`, `[batch·n × d_model]`, before `b_O`.
    pub head_out: Vec<Tensor>,
    /// `Σ_h head_out + b_O`.
    pub attn_out: Tensor,
    pub resid_mid: Tensor,
    pub ln2: NormCache,
    pub mlp_pre: Tensor,
    pub mlp_post: Tensor,
    pub mlp_out: Tensor,
    pub resid_post: Tensor,
}

/// Everything computed on the way from inputs to predictions.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub batch: usize,
    pub seq_len: usize,
    /// `[batch·n × d_vocab]`.
    pub input: Tensor,
    /// `x·W_E + W_P`, the stream entering layer 0.
    pub embed: Tensor,
    pub layers: Vec<LayerCache>,
    pub ln_final: NormCache,
    /// `[batch·n × d_vocab]`.
    pub output: Tensor,
}

impl ActivationCache {
    /// Residual stream entering the final layer norm.
    pub fn resid_final(&self) -> &Tensor {
        self.layers.last().map_or(&self.embed, |l| &l.resid_post)
    }

    /// Final layer-norm divisors, one per flattened position.
    pub fn ln_final_scale(&self) -> &[f64] {
        &self.ln_final.scale
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.pattern.len())
    }

    /// Attention pattern of one sample, shape `[n_heads × n × n]`.
    pub fn attn_pattern(&self, layer: usize, sample: usize) -> Result<Tensor> {
        let lc = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
        if sample >= self.batch {
            return Err(Error::Argument(format!("sample {sample} out of range")));
        }
        let n = self.seq_len;
        let mut data = Vec::with_capacity(lc.pattern.len() * n * n);
        for p in &lc.pattern {
            data.extend_from_slice(&p.data()[sample * n * n..(sample + 1) * n * n]);
        }
        Ok(Tensor::from_parts(vec![lc.pattern.len(), n, n], data))
    }
}

/// Hook that may rewrite a head's `[batch·n × d_model]` output before summation.
pub type HeadHook<'a> = dyn FnMut(HeadId, &mut Tensor) + 'a;

fn check_input(params: &ModelParams, inputs: &Tensor) -> Result<(usize, usize)> {
    let cfg = &params.config;
    let (batch, n, dv) = match inputs.shape() {
        [n, dv] => (1, *n, *dv),
        [b, n, dv] => (*b, *n, *dv),
        s => return Err(Error::Shape(format!("inputs must be [n x D] or [b x n x D], got {s:?}"))),
    };
    if dv != cfg.d_vocab {
        return Err(Error::Shape(format!("input dimension {dv}, model expects {}", cfg.d_vocab)));
    }
    if n > cfg.n_ctx {
        return Err(Error::ContextLength { len: n, n_ctx: cfg.n_ctx });
    }
    if n == 0 || batch == 0 {
        return Err(Error::Argument("empty input".into()));
    }
    if !inputs.all_finite() {
        return Err(Error::NonFinite("model input".into()));
    }
    Ok((batch, n))
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = x.matmul(w).expect("shapes validated");
    out.add_row_broadcast(b.data());
    out
}

/// Runs the model on `[n × D]` or `[b × n × D]` inputs, recording every activation.
pub fn run(params: &ModelParams, inputs: &Tensor, hook: Option<&mut HeadHook<'_>>) -> Result<ActivationCache> {
    let (batch, n) = check_input(params, inputs)?;
    let cfg = params.config;
    let mut hook = hook;
    let x = inputs.clone().reshape(&[batch * n, cfg.d_vocab])?;

    let mut embed = x.matmul(&params.w_e)?;
    for s in 0..batch {
        for i in 0..n {
            let row = embed.row_mut(s * n + i);
            for (r, p) in row.iter_mut().zip(params.w_p.row(i)) {
                *r += p;
            }
        }
    }

    let inv_sqrt = 1.0 / (cfg.d_head as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut resid = embed.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let ln1 = layer_norm_rows(&resid, &layer.ln1);
        let mut qs = Vec::with_capacity(cfg.n_heads);
        let mut ks = Vec::with_capacity(cfg.n_heads);
        let mut vs = Vec::with_capacity(cfg.n_heads);
        let mut patterns = Vec::with_capacity(cfg.n_heads);
        let mut zs = Vec::with_capacity(cfg.n_heads);
        let mut outs = Vec::with_capacity(cfg.n_heads);
        let mut attn_out = Tensor::zeros(&[batch * n, cfg.d_model]);
        for (h, head) in layer.heads.iter().enumerate() {
            let q = affine(&ln1.out, &head.w_q, &head.b_q);
            let k = affine(&ln1.out, &head.w_k, &head.b_k);
            let v = affine(&ln1.out, &head.w_v, &head.b_v);
            let mut pattern = Tensor::zeros(&[batch * n, n]);
            let mut z = Tensor::zeros(&[batch * n, cfg.d_head]);
            for s in 0..batch {
                let base = s * n;
                let mut scores = Tensor::zeros(&[n, n]);
                for d in 0..n {
                    for src in 0..=d {
                        scores.set(d, src, dot(q.row(base + d), k.row(base + src)) * inv_sqrt);
                    }
                }
                let p = softmax_rows(&scores, true);
                for d in 0..n {
                    pattern.row_mut(base + d).copy_from_slice(p.row(d));
                    let zrow = z.row_mut(base + d);
                    for src in 0..=d {
                        let a = p.get(d, src);
                        for (zj, vj) in zrow.iter_mut().zip(v.row(base + src)) {
                            *zj += a * vj;
                        }
                    }
                }
            }
            let mut out = z.matmul(&head.w_o)?;
            if let Some(hook) = hook.as_deref_mut() {
                hook(HeadId::new(l, h), &mut out);
                if out.shape() != [batch * n, cfg.d_model] {
                    return Err(Error::Shape(format!("hook changed head {l}.{h} output shape")));
                }
            }
            attn_out.add_assign(&out)?;
            qs.push(q);
            ks.push(k);
            vs.push(v);
            patterns.push(pattern);
            zs.push(z);
            outs.push(out);
        }
        attn_out.add_row_broadcast(layer.b_o.data());
        let resid_mid = resid.add(&attn_out)?;
        let ln2 = layer_norm_rows(&resid_mid, &layer.ln2);
        let mlp_pre = affine(&ln2.out, &layer.w_in, &layer.b_in);
        let mlp_post = mlp_pre.map(|v| v.max(0.0));
        let mlp_out = affine(&mlp_post, &layer.w_out, &layer.b_out);
        let resid_post = resid_mid.add(&mlp_out)?;
        layers.push(LayerCache {
            resid_pre: resid,
            ln1,
            q: qs,
            k: ks,
            v: vs,
            pattern: patterns,
            z: zs,
            head_out: outs,
            attn_out,
            resid_mid,
            ln2,
            mlp_pre,
            mlp_post,
            mlp_out,
            resid_post: resid_post.clone(),
        });
        resid = resid_post;
    }

    let ln_final = layer_norm_rows(&resid, &params.ln_final);
    let output = ln_final.out.matmul(&params.w_u)?;
    Ok(ActivationCache { batch, seq_len: n, input: x, embed, layers, ln_final, output })
}

/// Predictions `[n × d_vocab]` for one sequence, plus the cache if requested.
pub fn forward(
    params: &ModelParams,
    inputs: &Tensor,
    want_cache: bool,
) -> Result<(Tensor, Option<ActivationCache>)> {
    let cache = run(params, inputs, None)?;
    let out_shape = if inputs.shape().len() == 3 {
        vec![cache.batch, cache.seq_len, params.config.d_vocab]
    } else {
        vec![cache.seq_len, params.config.d_vocab]
    };
    let pred = cache.output.clone().reshape(&out_shape)?;
    Ok((pred, want_cache.then_some(cache)))
}

/// Forward pass with a hook on every head's output.
pub fn forward_hooked(
    params: &ModelParams,
    inputs: &Tensor,
    hook: &mut HeadHook<'_>,
) -> Result<ActivationCache> {
    run(params, inputs, Some(hook))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{sample_normal, Rng};

    #[test]
    fn layer_norm_constant_vector_gives_beta() {
        let beta = [0.5, -1.0, 2.0];
        let out = layer_norm(&[3.0; 3], &[1.0; 3], &beta);
        for (o, b) in out.iter().zip(beta) {
            assert!((o - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() * 3.0 + 1.0).collect();
        let out = layer_norm(&x, &[1.0; 16], &[0.0; 16]);
        let mean = out.iter().sum::<f64>() / 16.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_affine_invariance() {
        // ε breaks exact invariance; with var(x) ≈ 50 the effect is ~1e-7.
        let x: Vec<f64> = (0..10).map(|i| 10.0 * (i as f64).cos()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.7 * v - 1.2).collect();
        let (g, b) = ([1.0; 10], [0.0; 10]);
        let (lx, ly) = (layer_norm(&x, &g, &b), layer_norm(&y, &g, &b));
        for (a, b) in lx.iter().zip(&ly) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_and_row_stochastic() {
        let p = ModelParams::init(ModelConfig::tiny(), &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        let x = sample_normal(&mut rng, &[6, 4]);
        let (y, cache) = forward(&p, &x, true).unwrap();
        let cache = cache.unwrap();
        for l in 0..2 {
            let pat = cache.attn_pattern(l, 0).unwrap();
            for h in 0..2 {
                for d in 0..6 {
                    let row = &pat.data()[(h * 6 + d) * 6..(h * 6 + d + 1) * 6];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[d + 1..].iter().all(|v| *v == 0.0));
                }
            }
        }
        let mut x2 = x.clone();
        for j in 0..4 {
            x2.set(4, j, 10.0);
        }
        let (y2, _) = forward(&p, &x2, false).unwrap();
        assert_eq!(&y.data()[..4 * 4], &y2.data()[..4 * 4]);
    }

    #[test]
    fn rejects_long_and_non_finite_input() {
        let p = ModelParams::init(ModelConfig::tiny(), &mut Rng::new(3)).unwrap();
        let long = Tensor::zeros(&[17, 4]);
        assert!(matches!(forward(&p, &long, false), Err(Error::ContextLength { .. })));
        let mut bad = Tensor::zeros(&[3, 4]);
        bad.data_mut()[2] = f64::INFINITY;
        assert!(matches!(forward(&p, &bad, false), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cache_decomposes_residual_stream() {
        let p = ModelParams::init(ModelConfig::tiny(), &mut Rng::new(8)).unwrap();
        let x = sample_normal(&mut Rng::new(9), &[5, 4]);
        let (_, cache) = forward(&p, &x, true).unwrap();
        let cache = cache.unwrap();
        for (l, lc) in cache.layers.iter().enumerate() {
            let mut sum = Tensor::zeros(lc.attn_out.shape());
            for o in &lc.head_out {
                sum.add_assign(o).unwrap();
            }
            sum.add_row_broadcast(p.layers[l].b_o.data());
            let delta = lc.resid_mid.sub(&lc.resid_pre).unwrap();
            assert!(sum.max_abs_diff(&delta) < 1e-10);
            let post = lc.resid_mid.add(&lc.mlp_out).unwrap();
            assert!(post.max_abs_diff(&lc.resid_post) < 1e-10);
        }
    }
}
