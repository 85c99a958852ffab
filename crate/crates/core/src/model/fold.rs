//! Layer-norm and value-bias folding.
//!
//! `ln(x)·W + b = x̂·(diag(γ)·W) + (β·W + b)`, so the scale and shift of
//! `ln1`/`ln2` move into the query/key/value and MLP input maps. Because
//! attention rows sum to one, `Σ_s A[d,s]·b_V·W_O = b_V·W_O` at every
//! destination, so each head's value bias moves into `b_O`.
//! `ln_final` is left alone: there is no unembedding bias to take `β`.

use crate::numerics::Tensor;

use super::params::{LayerNormParams, ModelParams};

fn fold_into(ln: &LayerNormParams, w: &mut Tensor, b: &mut Tensor) {
    let shift = ln.b.clone().reshape(&[1, ln.b.len()]).expect("vector").matmul(w).expect("shape");
    for (bi, s) in b.data_mut().iter_mut().zip(shift.data()) {
        *bi += s;
    }
    for (i, g) in ln.w.data().iter().enumerate() {
        for v in w.row_mut(i) {
            *v *= g;
        }
    }
}

pub fn fold(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for layer in &mut out.layers {
        for head in &mut layer.heads {
            fold_into(&layer.ln1, &mut head.w_q, &mut head.b_q);
            fold_into(&layer.ln1, &mut head.w_k, &mut head.b_k);
            fold_into(&layer.ln1, &mut head.w_v, &mut head.b_v);
        }
        layer.ln1.w.data_mut().fill(1.0);
        layer.ln1.b.data_mut().fill(0.0);

        fold_into(&layer.ln2, &mut layer.w_in, &mut layer.b_in);
        layer.ln2.w.data_mut().fill(1.0);
        layer.ln2.b.data_mut().fill(0.0);

        for head in &mut layer.heads {
            let bias = head.b_v.clone().reshape(&[1, head.b_v.len()]).expect("vector");
            let moved = bias.matmul(&head.w_o).expect("shape");
            for (bo, m) in layer.b_o.data_mut().iter_mut().zip(moved.data()) {
                *bo += m;
            }
            head.b_v.data_mut().fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use crate::numerics::{sample_normal, Rng};

    fn random_params(seed: u64) -> ModelParams {
        let mut rng = Rng::new(seed);
        let mut p = ModelParams::init(ModelConfig::tiny(), &mut rng).unwrap();
        // non-trivial norms and biases so folding has something to do
        p.visit_mut(&mut |_, kind, t| {
            if kind != crate::model::ParamKind::Weight {
                let noise = sample_normal(&mut rng, t.shape()).scale(0.3);
                t.add_assign(&noise).unwrap();
            }
        });
        p
    }

    #[test]
    fn fold_preserves_outputs() {
        let p = random_params(1);
        let f = fold(&p);
        let x = sample_normal(&mut Rng::new(2), &[7, 4]);
        let (a, _) = forward(&p, &x, false).unwrap();
        let (b, _) = forward(&f, &x, false).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn fold_is_idempotent() {
        let once = fold(&random_params(3));
        assert_eq!(fold(&once), once);
    }

    #[test]
    fn value_bias_zeroed() {
        let f = fold(&random_params(4));
        for layer in &f.layers {
            assert!(layer.heads.iter().all(|h| h.b_v.data().iter().all(|v| *v == 0.0)));
            assert!(layer.ln1.w.data().iter().all(|v| *v == 1.0));
        }
    }
}
