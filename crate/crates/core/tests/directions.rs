mod common;

use latent_edit::directions::{
    apply_global, beta_from_relevance, direction_from_relevance, edit_global,
    precompute_channel_stats, rank_channels, top_k_direction, ChannelStats, PromptSpec, Sparsity,
    StatsParams, TemplateBank,
};
use latent_edit::gateway::{BackendBundle, ToyConfig, ToyLinearBackend};
use latent_edit::latent::StyleDirection;
use proptest::prelude::*;

fn relevance_vec() -> impl Strategy<Value = Vec<f64>> {
    // Coarse grid so ties are common.
    proptest::collection::vec((-8i32..=8).prop_map(|x| x as f64 / 8.0), 1..48)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn thresholds_nest(rel in relevance_vec(), b1 in 0.0f64..1.2, b2 in 0.0f64..1.2) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let wide = direction_from_relevance(&rel, lo).unwrap().active_channels();
        let narrow = direction_from_relevance(&rel, hi).unwrap().active_channels();
        prop_assert!(narrow.iter().all(|c| wide.contains(c)));
    }

    #[test]
    fn top_k_is_exact_even_with_ties(rel in relevance_vec(), k in 1usize..60) {
        let nonzero = rel.iter().filter(|r| **r != 0.0).count();
        let result = top_k_direction(&rel, k);
        if nonzero == 0 {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let (d, t) = result.unwrap();
        prop_assert_eq!(d.active_count(), k.min(nonzero));
        prop_assert_eq!(t.saturated, k > nonzero);
        // Every selected |R| dominates every unselected one.
        let active = d.active_channels();
        let min_in = active.iter().map(|c| rel[*c].abs()).fold(f64::INFINITY, f64::min);
        let max_out = (0..rel.len()).filter(|c| !active.contains(c)).map(|c| rel[c].abs()).fold(0.0, f64::max);
        prop_assert!(min_in >= max_out);
        prop_assert_eq!(t.beta, min_in);
        for c in &active {
            prop_assert_eq!(d.values()[*c], rel[*c]);
        }
    }

    #[test]
    fn beta_threshold_never_selects_fewer_than_k(rel in relevance_vec(), k in 1usize..60) {
        if let Ok(t) = beta_from_relevance(&rel, k) {
            let n = direction_from_relevance(&rel, t.beta).unwrap().active_count();
            prop_assert_eq!(t.active, k.min(rel.iter().filter(|r| **r != 0.0).count()));
            prop_assert!(n >= t.active);
        }
    }

    #[test]
    fn ranking_is_a_stable_permutation(rel in relevance_vec()) {
        let order = rank_channels(&rel);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..rel.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            let (a, b) = (rel[w[0]].abs(), rel[w[1]].abs());
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }
}

fn stats(backend: &BackendBundle) -> ChannelStats {
    let params = StatsParams {
        sample_count: 200,
        pair_count: 20,
        perturb_alpha: 5.0,
        seed: 1,
    };
    precompute_channel_stats(backend, &params, |_, _| {}).unwrap()
}

#[test]
fn global_edit_end_to_end() {
    let backend = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(8)).unwrap());
    let stats = stats(&backend);
    let s = backend
        .wplus_to_style(&common::random_code(&backend, 1))
        .unwrap();
    let spec = PromptSpec::new("a face with grey hair", "a face").unwrap();
    let bank = TemplateBank::imagenet();

    let edit = edit_global(&backend, &stats, &s, &spec, &bank, Sparsity::K(20), 3.0).unwrap();
    assert_eq!(edit.direction.active_count(), 20);
    let again = edit_global(&backend, &stats, &s, &spec, &bank, Sparsity::K(20), 3.0).unwrap();
    assert_eq!(edit.image.pixels(), again.image.pixels());

    let zero = edit_global(&backend, &stats, &s, &spec, &bank, Sparsity::K(20), 0.0).unwrap();
    assert_eq!(
        zero.image.pixels(),
        backend.generate_from_style(&s).unwrap().pixels()
    );

    let none = edit_global(&backend, &stats, &s, &spec, &bank, Sparsity::Beta(5.0), 3.0).unwrap();
    assert_eq!(none.direction.active_count(), 0);
    assert_eq!(none.style.values(), s.values());

    // Negative strength walks the other way along the same direction.
    let (fwd, _) = apply_global(&backend, &s, &edit.direction, 2.0).unwrap();
    let (back, _) = apply_global(&backend, &fwd, &edit.direction, -2.0).unwrap();
    for (x, y) in back.values().iter().zip(s.values()) {
        assert!((x - y).abs() < 1e-12);
    }

    let degenerate = PromptSpec::new("a face", "a face");
    assert!(degenerate.is_err());
}

#[test]
fn stats_from_other_backend_are_rejected() {
    let a = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(8)).unwrap());
    let b = BackendBundle::toy(ToyLinearBackend::new(ToyConfig::channels64(9)).unwrap());
    let st = stats(&a);
    assert!(st.check_backend(&a).is_ok());
    assert!(st.check_backend(&b).is_err());
    let s = b.wplus_to_style(&common::random_code(&b, 1)).unwrap();
    let spec = PromptSpec::new("grey hair", "hair").unwrap();
    assert!(edit_global(
        &b,
        &st,
        &s,
        &spec,
        &TemplateBank::imagenet(),
        Sparsity::K(3),
        1.0
    )
    .is_err());
    assert!(apply_global(&b, &s, &StyleDirection::zeros(3), 1.0).is_err());
}
