//! Reverse-mode gradients of the masked MSE through the whole model.
//!
//! Works directly off the [`ActivationCache`] of a batched forward pass; each
//! block below mirrors one step of the forward pass in reverse order.

use crate::error::{Error, Result};
use crate::model::{run, ActivationCache, LayerNormParams, ModelParams, NormCache};
use crate::numerics::{dot, Tensor};
use crate::recurrence::SequenceBatch;

use super::loss::{masked_mse, masked_mse_grad};

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    dst.add_assign(src).expect("gradient shapes follow parameter shapes");
}

fn accumulate_vec(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

/// Backprop through a row-wise layer norm; returns the gradient w.r.t. its input.
fn layer_norm_backward(
    d_out: &Tensor,
    cache: &NormCache,
    ln: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Tensor {
    let (rows, cols) = (d_out.rows(), d_out.cols());
    let gamma = ln.w.data();
    let mut d_in = Tensor::zeros(&[rows, cols]);
    let mut dxhat = vec![0.0; cols];
    for i in 0..rows {
        let dy = d_out.row(i);
        let xhat = cache.normalized.row(i);
        for j in 0..cols {
            grad.w.data_mut()[j] += dy[j] * xhat[j];
            grad.b.data_mut()[j] += dy[j];
            dxhat[j] = dy[j] * gamma[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
        let mean_dxhat_xhat = dot(&dxhat, xhat) / cols as f64;
        let inv = 1.0 / cache.scale[i];
        for (j, o) in d_in.row_mut(i).iter_mut().enumerate() {
            *o = (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv;
        }
    }
    d_in
}

/// Gradients of a scalar loss given its gradient `d_output` w.r.t. the model output.
pub fn backward(params: &ModelParams, cache: &ActivationCache, d_output: &Tensor) -> ModelParams {
    let cfg = params.config;
    let (batch, n) = (cache.batch, cache.seq_len);
    let inv_sqrt = 1.0 / (cfg.d_head as f64).sqrt();
    let mut grad = params.zeros_like();

    let d_output = d_output.clone().reshape(&[batch * n, cfg.d_vocab]).expect("output shape");
    grad.w_u = cache.ln_final.out.matmul_tn(&d_output).expect("shape");
    let d_lnf = d_output.matmul_nt(&params.w_u).expect("shape");
    let mut d_resid = layer_norm_backward(&d_lnf, &cache.ln_final, &params.ln_final, &mut grad.ln_final);

    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let gl = &mut grad.layers[l];

        // MLP
        accumulate_vec(&mut gl.b_out, &d_resid.sum_rows());
        gl.w_out = lc.mlp_post.matmul_tn(&d_resid).expect("shape");
        let mut d_pre = d_resid.matmul_nt(&layer.w_out).expect("shape");
        for (g, pre) in d_pre.data_mut().iter_mut().zip(lc.mlp_pre.data()) {
            if *pre <= 0.0 {
                *g = 0.0;
            }
        }
        accumulate_vec(&mut gl.b_in, &d_pre.sum_rows());
        gl.w_in = lc.ln2.out.matmul_tn(&d_pre).expect("shape");
        let d_ln2 = d_pre.matmul_nt(&layer.w_in).expect("shape");
        let d_mid_ln = layer_norm_backward(&d_ln2, &lc.ln2, &layer.ln2, &mut gl.ln2);
        let mut d_mid = d_resid;
        accumulate(&mut d_mid, &d_mid_ln);

        // attention
        accumulate_vec(&mut gl.b_o, &d_mid.sum_rows());
        let mut d_ln1 = Tensor::zeros(&[batch * n, cfg.d_model]);
        for (h, head) in layer.heads.iter().enumerate() {
            let gh = &mut gl.heads[h];
            let (q, k, v, z, pattern) = (&lc.q[h], &lc.k[h], &lc.v[h], &lc.z[h], &lc.pattern[h]);
            gh.w_o = z.matmul_tn(&d_mid).expect("shape");
            let dz = d_mid.matmul_nt(&head.w_o).expect("shape");

            let mut dq = Tensor::zeros(&[batch * n, cfg.d_head]);
            let mut dk = Tensor::zeros(&[batch * n, cfg.d_head]);
            let mut dv = Tensor::zeros(&[batch * n, cfg.d_head]);
            let mut d_scores = vec![0.0; n];
            for s in 0..batch {
                let base = s * n;
                for d in 0..n {
                    let a_row = &pattern.row(base + d)[..=d];
                    let dz_d = dz.row(base + d);
                    for (src, &a) in a_row.iter().enumerate() {
                        d_scores[src] = dot(dz_d, v.row(base + src));
                        for (dvj, dzj) in dv.row_mut(base + src).iter_mut().zip(dz_d) {
                            *dvj += a * dzj;
                        }
                    }
                    let weighted: f64 = a_row.iter().zip(&d_scores).map(|(a, g)| a * g).sum();
                    for (src, &a) in a_row.iter().enumerate() {
                        let ds = a * (d_scores[src] - weighted) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        for (dqj, kj) in dq.row_mut(base + d).iter_mut().zip(k.row(base + src)) {
                            *dqj += ds * kj;
                        }
                        for (dkj, qj) in dk.row_mut(base + src).iter_mut().zip(q.row(base + d)) {
                            *dkj += ds * qj;
                        }
                    }
                }
            }
            gh.w_q = lc.ln1.out.matmul_tn(&dq).expect("shape");
            gh.w_k = lc.ln1.out.matmul_tn(&dk).expect("shape");
            gh.w_v = lc.ln1.out.matmul_tn(&dv).expect("shape");
            accumulate_vec(&mut gh.b_q, &dq.sum_rows());
            accumulate_vec(&mut gh.b_k, &dk.sum_rows());
            accumulate_vec(&mut gh.b_v, &dv.sum_rows());
            accumulate(&mut d_ln1, &dq.matmul_nt(&head.w_q).expect("shape"));
            accumulate(&mut d_ln1, &dk.matmul_nt(&head.w_k).expect("shape"));
            accumulate(&mut d_ln1, &dv.matmul_nt(&head.w_v).expect("shape"));
        }
        let d_pre_ln = layer_norm_backward(&d_ln1, &lc.ln1, &layer.ln1, &mut gl.ln1);
        d_resid = d_mid;
        accumulate(&mut d_resid, &d_pre_ln);
    }

    grad.w_e = cache.input.matmul_tn(&d_resid).expect("shape");
    for s in 0..batch {
        for i in 0..n {
            for (g, d) in grad.w_p.row_mut(i).iter_mut().zip(d_resid.row(s * n + i)) {
                *g += d;
            }
        }
    }
    grad
}

/// Masked-MSE loss on a batch together with its exact gradients.
pub fn loss_and_gradients(params: &ModelParams, batch: &SequenceBatch) -> Result<(f64, ModelParams)> {
    let cache = run(params, &batch.inputs, None)?;
    let pred = cache.output.clone().reshape(batch.targets.shape())?;
    let loss = masked_mse(&pred, &batch.targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss on batch of {} sequences of length {} (max |pred| = {})",
            batch.batch_size(),
            batch.seq_len(),
            pred.max_abs()
        )));
    }
    let d_pred = masked_mse_grad(&pred, &batch.targets)?;
    Ok((loss, backward(params, &cache, &d_pred)))
}

pub fn gradients(params: &ModelParams, batch: &SequenceBatch) -> Result<ModelParams> {
    loss_and_gradients(params, batch).map(|(_, g)| g)
}
