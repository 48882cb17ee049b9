use corelens::linalg::dot;
use corelens::refenc::{
    detokenize, embed_tokens, encode_backward, encode_forward, init_encoder, tokenize, CONTEXT_LENGTH, D_MODEL,
    LN_EPS,
};
use corelens::rng::Rng;
use corelens::Matrix;
use proptest::prelude::*;

fn random_e(rng: &mut Rng) -> Matrix {
    let data = (0..CONTEXT_LENGTH * D_MODEL).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Matrix::from_vec(CONTEXT_LENGTH, D_MODEL, data)
}

#[test]
fn backward_matches_central_differences() {
    let h = 1e-5;
    for case in 0..4u64 {
        let w = init_encoder(100 + case);
        let mut rng = Rng::new(case);
        let e = random_e(&mut rng);
        let idx = rng.below(CONTEXT_LENGTH);
        let up = rng.normal_vec(D_MODEL, 1.0);
        let (_, cache) = encode_forward(&w, &e, idx).unwrap();
        let grad = encode_backward(&w, &cache, &up).unwrap();
        let f = |e: &Matrix| dot(&encode_forward(&w, e, idx).unwrap().0.vector, &up);
        for i in 0..=idx {
            for j in 0..D_MODEL {
                let mut plus = e.clone();
                plus[(i, j)] += h;
                let mut minus = e.clone();
                minus[(i, j)] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let analytic = grad[(i, j)];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "case {case} ({i},{j}): {analytic} vs {numeric}");
            }
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let w = init_encoder(3);
    let e = random_e(&mut Rng::new(3));
    let (_, cache) = encode_forward(&w, &e, 9).unwrap();
    let grad = encode_backward(&w, &cache, &[0.0; D_MODEL]).unwrap();
    assert_eq!(grad.max_abs(), 0.0);
}

#[test]
fn final_rows_are_normalized_before_the_head() {
    let w = init_encoder(8);
    let e = random_e(&mut Rng::new(8));
    let (_, cache) = encode_forward(&w, &e, CONTEXT_LENGTH - 1).unwrap();
    let xhat = cache.final_normalized();
    for (i, row) in xhat.iter_rows().enumerate() {
        let mean = row.iter().sum::<f64>() / D_MODEL as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / D_MODEL as f64;
        assert!(mean.abs() < 1e-12, "row {i} mean {mean}");
        // With eps inside the root the variance is var/(var+eps), just under 1.
        let r = cache.final_inv_std()[i];
        assert!((var - (1.0 - LN_EPS * r * r)).abs() < 1e-12, "row {i} variance {var}");
        assert!(var < 1.0 && var > 1.0 - 1e-3);
    }
}

#[test]
fn pad_rows_come_from_the_table() {
    let w = init_encoder(0);
    let e = embed_tokens(&w, &tokenize("cat").unwrap()).unwrap();
    assert_eq!(e.row(0), w.token_table.row(1));
    assert_eq!(e.row(4), w.token_table.row(2));
    for i in 5..CONTEXT_LENGTH {
        assert_eq!(e.row(i), w.token_table.row(0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn later_rows_cannot_reach_the_output(seed in any::<u64>(), idx in 0usize..CONTEXT_LENGTH - 1, bump in -5.0f64..5.0) {
        let w = init_encoder(seed);
        let mut rng = Rng::new(seed);
        let e = random_e(&mut rng);
        let (v, cache) = encode_forward(&w, &e, idx).unwrap();
        let mut changed = e.clone();
        let row = idx + 1 + rng.below(CONTEXT_LENGTH - idx - 1);
        changed.row_mut(row).iter_mut().for_each(|x| *x += bump);
        let (v2, _) = encode_forward(&w, &changed, idx).unwrap();
        prop_assert_eq!(v.vector, v2.vector);
        let grad = encode_backward(&w, &cache, &rng.normal_vec(D_MODEL, 1.0)).unwrap();
        for i in idx + 1..CONTEXT_LENGTH {
            prop_assert!(grad.row(i).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn tokenizer_round_trips(text in "[a-z0-9 ]{0,14}") {
        let ids = tokenize(&text).unwrap();
        prop_assert_eq!(ids.len(), CONTEXT_LENGTH);
        prop_assert_eq!(tokenize(&detokenize(&ids).unwrap()).unwrap(), ids);
    }

    #[test]
    fn uppercase_folds_to_lowercase(text in "[A-Z]{1,14}") {
        prop_assert_eq!(tokenize(&text).unwrap(), tokenize(&text.to_lowercase()).unwrap());
    }
}

#[test]
fn unmappable_or_overlong_text_is_rejected() {
    assert!(tokenize("Ω").is_err());
    assert!(tokenize("a-b").is_err());
    assert!(tokenize(&"a".repeat(CONTEXT_LENGTH - 1)).is_err());
    assert!(tokenize(&"a".repeat(CONTEXT_LENGTH - 2)).is_ok());
    assert!(detokenize(&[40]).is_err());
}
