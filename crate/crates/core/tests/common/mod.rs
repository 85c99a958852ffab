#![allow(dead_code)]

use recurlens::model::{ModelConfig, ModelParams, ParamKind};
use recurlens::numerics::{sample_normal, Rng, Tensor};

/// Random initial weights plus non-trivial biases and norm gains, so every
/// parameter family influences the output.
pub fn perturbed_params(config: ModelConfig, seed: u64) -> ModelParams {
    let mut rng = Rng::new(seed);
    let mut p = ModelParams::init(config, &mut rng).unwrap();
    p.visit_mut(&mut |_, kind, t| match kind {
        ParamKind::Weight => {}
        ParamKind::Bias => *t = sample_normal(&mut rng, t.shape()).scale(0.2),
        ParamKind::Norm => {
            let noise = sample_normal(&mut rng, t.shape()).scale(0.2);
            *t = t.add(&noise).unwrap();
        }
    });
    p
}

/// A `[n × dim]` input with entries uniform in `[-2, 2)`.
pub fn random_input(rng: &mut Rng, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
    Tensor::from_vec(&[n, dim], data).unwrap()
}

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let mut out = vec![0.0; w.shape()[1]];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w.get(i, j);
        }
        *o = acc + b.map_or(0.0, |b| b.data()[j]);
    }
    out
}

fn ln(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / s * g.data()[i] + b.data()[i]).collect()
}

/// Straight-line reimplementation of the pre-LN decoder, one position at a time.
pub fn naive_forward(p: &ModelParams, x: &Tensor) -> Tensor {
    let cfg = p.config;
    let x = to_mat(x);
    let n = x.len();
    let mut resid: Mat = x
        .iter()
        .enumerate()
        .map(|(i, xi)| vecmat(xi, &p.w_e, None).iter().zip(p.w_p.row(i)).map(|(a, b)| a + b).collect())
        .collect();
    for layer in &p.layers {
        let normed: Mat = resid.iter().map(|r| ln(r, &layer.ln1.w, &layer.ln1.b)).collect();
        let mut attn = vec![layer.b_o.data().to_vec(); n];
        for head in &layer.heads {
            let q: Mat = normed.iter().map(|r| vecmat(r, &head.w_q, Some(&head.b_q))).collect();
            let k: Mat = normed.iter().map(|r| vecmat(r, &head.w_k, Some(&head.b_k))).collect();
            let v: Mat = normed.iter().map(|r| vecmat(r, &head.w_v, Some(&head.b_v))).collect();
            for d in 0..n {
                let scores: Vec<f64> = (0..=d)
                    .map(|s| q[d].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() / (cfg.d_head as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z_sum: f64 = e.iter().sum();
                let mut z = vec![0.0; cfg.d_head];
                for s in 0..=d {
                    for j in 0..cfg.d_head {
                        z[j] += e[s] / z_sum * v[s][j];
                    }
                }
                for (a, o) in attn[d].iter_mut().zip(vecmat(&z, &head.w_o, None)) {
                    *a += o;
                }
            }
        }
        for d in 0..n {
            for j in 0..cfg.d_model {
                resid[d][j] += attn[d][j];
            }
            let h = ln(&resid[d], &layer.ln2.w, &layer.ln2.b);
            let hidden: Vec<f64> = vecmat(&h, &layer.w_in, Some(&layer.b_in)).iter().map(|v| v.max(0.0)).collect();
            let out = vecmat(&hidden, &layer.w_out, Some(&layer.b_out));
            for j in 0..cfg.d_model {
                resid[d][j] += out[j];
            }
        }
    }
    let out: Mat = resid.iter().map(|r| vecmat(&ln(r, &p.ln_final.w, &p.ln_final.b), &p.w_u, None)).collect();
    Tensor::from_rows(&out).unwrap()
}
