use proptest::prelude::*;
use recurlens::numerics::{mix_seed, Rng};
use recurlens::recurrence::{
    classify, generate, generate_dataset, make_batch_with, read_jsonl, write_jsonl, RecurrenceSample, SequenceClass,
    MAX_LEN, MIN_LEN,
};

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest deviation from `a_i = c·a_{i-1} + d` over `a_0 … a_n`, with every term
/// scaled by `k` (and `d` with it).
fn residual_scaled(s: &RecurrenceSample, k: f64) -> f64 {
    let mut terms: Vec<Vec<f64>> = s.vectors.clone();
    terms.push(s.target_next.clone());
    let c = s.params.c;
    let mut worst: f64 = 0.0;
    for w in terms.windows(2) {
        for ((prev, next), d) in w[0].iter().zip(&w[1]).zip(&s.params.d) {
            worst = worst.max((next * k - (c * prev * k + d * k)).abs());
        }
    }
    worst
}

#[test]
fn ten_thousand_samples_satisfy_the_data_invariants() {
    let mut worst_norm_lo = f64::INFINITY;
    let mut worst_norm_hi: f64 = 0.0;
    for i in 0..10_000u64 {
        let mut rng = Rng::new(mix_seed(42, i));
        let n = rng.int_inclusive(MIN_LEN, MAX_LEN);
        let s = generate(8, n, &mut rng).unwrap();
        let m = s.vectors.iter().map(|v| l2(v)).fold(0.0, f64::max);
        worst_norm_lo = worst_norm_lo.min(m);
        worst_norm_hi = worst_norm_hi.max(m);
        assert!((1.0..=2.0).contains(&m), "sample {i}: max norm {m}");
        assert!((m - s.norm_factor).abs() < 1e-12, "max norm equals the drawn r");
        let post = residual_scaled(&s, 1.0);
        let pre = residual_scaled(&s, s.scale) / s.scale.max(1.0);
        assert!(post < 1e-9, "sample {i}: normalized residual {post:e}");
        assert!(pre < 1e-9, "sample {i}: raw residual {pre:e}");
        assert_eq!(s.len(), n);
        assert_eq!(s.vectors[0], s.params.a0);
    }
    assert!(worst_norm_lo < 1.1 && worst_norm_hi > 1.9, "r covers [1, 2)");
}

#[test]
fn classes_follow_the_sign_and_size_of_c() {
    assert_eq!(classify(-0.5), SequenceClass::Alternating);
    assert_eq!(classify(0.0), SequenceClass::Decay);
    assert_eq!(classify(0.999), SequenceClass::Decay);
    assert_eq!(classify(1.0), SequenceClass::Constant);
    assert_eq!(classify(1.5), SequenceClass::Growth);
}

#[test]
fn class_frequencies_match_a_uniform_c() {
    let recs = generate_dataset(4, 4000, MIN_LEN, MAX_LEN, 9).unwrap();
    let frac = |k: SequenceClass| recs.iter().filter(|r| classify(r.c) == k).count() as f64 / recs.len() as f64;
    // c ~ U(-2, 2): half alternate, a quarter decay, a quarter grow.
    assert!((frac(SequenceClass::Alternating) - 0.5).abs() < 0.04);
    assert!((frac(SequenceClass::Decay) - 0.25).abs() < 0.04);
    assert!((frac(SequenceClass::Growth) - 0.25).abs() < 0.04);
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let a = generate_dataset(5, 50, 4, 9, 7).unwrap();
    let b = generate_dataset(5, 50, 4, 9, 7).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| (4..=9).contains(&r.length)));
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_jsonl(&p1, &a).unwrap();
    write_jsonl(&p2, &b).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let back = read_jsonl(&p1).unwrap();
    assert_eq!(back.len(), 50);
    for (r, s) in a.iter().zip(&back) {
        assert_eq!(r.to_sample().unwrap(), *s);
        assert_eq!(s.vectors, r.vectors);
    }
}

#[test]
fn corrupt_dataset_lines_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    std::fs::write(&p, "{\"vectors\": [[1.0]]}\n").unwrap();
    assert!(read_jsonl(&p).is_err());
    assert!(read_jsonl(&dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn length_bounds_are_enforced() {
    let mut rng = Rng::new(0);
    assert!(generate(4, MIN_LEN - 1, &mut rng).is_err());
    assert!(generate(4, MAX_LEN + 1, &mut rng).is_err());
    assert!(generate(0, 5, &mut rng).is_err());
}

proptest! {
    #[test]
    fn targets_are_inputs_shifted_by_one(seed in any::<u64>(), n in MIN_LEN..=MAX_LEN, dim in 1usize..6) {
        let s = generate(dim, n, &mut Rng::new(seed)).unwrap();
        let (x, y) = (s.input_tensor(), s.target_tensor());
        prop_assert_eq!(x.shape(), &[n, dim]);
        for i in 0..n - 1 {
            prop_assert_eq!(y.row(i), x.row(i + 1));
        }
        prop_assert_eq!(y.row(n - 1), &s.target_next[..]);
    }

    #[test]
    fn batches_share_one_length(seed in any::<u64>(), b in 1usize..6) {
        let batch = make_batch_with(3, b, 5, 5, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(batch.inputs.shape(), &[b, 5, 3]);
        prop_assert_eq!(batch.targets.shape(), &[b, 5, 3]);
    }
}

proptest! {
    #[test]
    fn every_axis_obeys_its_own_scalar_recurrence(seed in any::<u64>(), n in MIN_LEN..=MAX_LEN) {
        let s = generate(4, n, &mut Rng::new(seed)).unwrap();
        let c = s.params.c;
        for k in 0..4 {
            let xs: Vec<f64> = s.vectors.iter().map(|v| v[k]).chain([s.target_next[k]]).collect();
            for w in xs.windows(2) {
                prop_assert!((w[1] - (c * w[0] + s.params.d[k])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn classify_is_exhaustive(c in -1e6f64..1e6) {
        let hits = SequenceClass::ALL.iter().filter(|&&k| classify(c) == k).count();
        prop_assert_eq!(hits, 1);
    }
}
