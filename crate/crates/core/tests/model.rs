mod common;

use common::{naive_forward, perturbed_params, random_input};
use recurlens::model::{fold, forward, load, save, ModelConfig};
use recurlens::numerics::{Rng, Tensor};

#[test]
fn forward_matches_naive_loops_on_fifty_inputs() {
    let mut rng = Rng::new(11);
    let cfg = ModelConfig::tiny();
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let p = perturbed_params(cfg, 100 + trial);
        let n = rng.int_inclusive(1, cfg.n_ctx);
        let x = random_input(&mut rng, n, cfg.d_vocab);
        let (pred, _) = forward(&p, &x, false).unwrap();
        worst = worst.max(pred.max_abs_diff(&naive_forward(&p, &x)));
    }
    assert!(worst < 1e-10, "max abs diff {worst:e}");
}

#[test]
fn batched_forward_matches_single_sequences() {
    let cfg = ModelConfig::tiny();
    let p = perturbed_params(cfg, 3);
    let mut rng = Rng::new(4);
    let seqs: Vec<Tensor> = (0..5).map(|_| random_input(&mut rng, 7, cfg.d_vocab)).collect();
    let data: Vec<f64> = seqs.iter().flat_map(|s| s.data().to_vec()).collect();
    let batch = Tensor::from_vec(&[5, 7, cfg.d_vocab], data).unwrap();
    let (pred, _) = forward(&p, &batch, false).unwrap();
    for (b, s) in seqs.iter().enumerate() {
        let (single, _) = forward(&p, s, false).unwrap();
        let chunk = &pred.data()[b * 7 * cfg.d_vocab..(b + 1) * 7 * cfg.d_vocab];
        for (a, c) in chunk.iter().zip(single.data()) {
            assert!((a - c).abs() < 1e-12);
        }
    }
}

#[test]
fn prefix_outputs_are_causal() {
    let cfg = ModelConfig::tiny();
    let p = perturbed_params(cfg, 5);
    let mut rng = Rng::new(6);
    let x = random_input(&mut rng, 10, cfg.d_vocab);
    let (full, _) = forward(&p, &x, false).unwrap();
    let mut changed = x.clone();
    for v in changed.row_mut(9) {
        *v += 1.0;
    }
    let (alt, _) = forward(&p, &changed, false).unwrap();
    assert!(full.slice_rows(0, 9).max_abs_diff(&alt.slice_rows(0, 9)) < 1e-14);
    assert!(full.slice_rows(9, 10).max_abs_diff(&alt.slice_rows(9, 10)) > 1e-6);
}

#[test]
fn folding_preserves_outputs_on_twenty_inputs() {
    let cfg = ModelConfig::tiny();
    let mut rng = Rng::new(21);
    for trial in 0..20 {
        let p = perturbed_params(cfg, 200 + trial);
        let folded = fold(&p);
        let n = rng.int_inclusive(3, cfg.n_ctx);
        let x = random_input(&mut rng, n, cfg.d_vocab);
        let (a, _) = forward(&p, &x, false).unwrap();
        let (b, _) = forward(&folded, &x, false).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8, "trial {trial}: {:e}", a.max_abs_diff(&b));
    }
}

#[test]
fn folded_model_has_identity_norms_and_no_value_bias() {
    let folded = fold(&perturbed_params(ModelConfig::tiny(), 9));
    for layer in &folded.layers {
        for ln in [&layer.ln1, &layer.ln2] {
            assert!(ln.w.data().iter().all(|&g| g == 1.0));
            assert!(ln.b.data().iter().all(|&b| b == 0.0));
        }
        for h in &layer.heads {
            assert!(h.b_v.data().iter().all(|&b| b == 0.0));
        }
    }
}

#[test]
fn context_overflow_is_rejected() {
    let cfg = ModelConfig::tiny();
    let p = perturbed_params(cfg, 1);
    let x = random_input(&mut Rng::new(0), cfg.n_ctx + 1, cfg.d_vocab);
    assert!(matches!(forward(&p, &x, false), Err(recurlens::Error::ContextLength { .. })));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = ModelConfig::tiny();
    let p = perturbed_params(cfg, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&p, &path).unwrap();
    let q = load(&path).unwrap();
    assert_eq!(p, q);
    let x = random_input(&mut Rng::new(1), 6, cfg.d_vocab);
    assert_eq!(forward(&p, &x, false).unwrap().0, forward(&q, &x, false).unwrap().0);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1, "no temporary file left behind");
}

#[test]
fn cache_is_consistent_with_the_output() {
    use recurlens::model::{layer_norm, run};
    let cfg = ModelConfig::tiny();
    let p = perturbed_params(cfg, 8);
    let x = random_input(&mut Rng::new(9), 9, cfg.d_vocab);
    let cache = run(&p, &x, None).unwrap();
    let last = &cache.layers[cfg.n_layers - 1].resid_post;
    for i in 0..9 {
        let normed = layer_norm(last.row(i), p.ln_final.w.data(), p.ln_final.b.data());
        let out: Vec<f64> = (0..cfg.d_vocab).map(|j| (0..cfg.d_model).map(|k| normed[k] * p.w_u.get(k, j)).sum()).collect();
        for (a, b) in out.iter().zip(cache.output.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    for (l, lc) in cache.layers.iter().enumerate() {
        let mut sum = Tensor::zeros(lc.attn_out.shape());
        for h in &lc.head_out {
            sum.add_assign(h).unwrap();
        }
        sum.add_row_broadcast(p.layers[l].b_o.data());
        assert!(sum.max_abs_diff(&lc.resid_mid.sub(&lc.resid_pre).unwrap()) < 1e-10);
    }
}
