//! Property tests for the divergence measures, ranking metrics, tokenizer
//! and split protocol.

use proptest::prelude::*;

use divrec_core::data::{split_leave_one_out, UserHistory};
use divrec_core::diversity::{cosine, js, kl, softmax, tv};
use divrec_core::metrics::{auc, hr_at_k, mrr_at_k, ndcg_at_k, RankedSample};
use divrec_core::prompt::{Tokenizer, TokenizerConfig};

fn distribution(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, dim).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    })
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn js_is_symmetric_and_bounded(p in distribution(6), q in distribution(6)) {
        let ab = js(&p, &q).unwrap();
        let ba = js(&q, &p).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12, "asymmetry {ab} vs {ba}");
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= 2f64.ln() + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in distribution(6), q in distribution(6)) {
        prop_assert!(kl(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl(&p, &p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn tv_is_a_metric(p in distribution(5), q in distribution(5), r in distribution(5)) {
        let pq = tv(&p, &q).unwrap();
        let qp = tv(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() <= 1e-12);
        prop_assert!(tv(&p, &p).unwrap().abs() <= 1e-12);
        let pr = tv(&p, &r).unwrap();
        let rq = tv(&r, &q).unwrap();
        prop_assert!(pq <= pr + rq + 1e-12, "triangle violated: {pq} > {pr} + {rq}");
        prop_assert!(pq >= 0.0 && pq <= 1.0 + 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant(x in vector(8), y in vector(8), a in 0.1f64..50.0, b in 0.1f64..50.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
        prop_assume!(y.iter().any(|v| v.abs() > 1e-6));
        let base = cosine(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * b).collect();
        let scaled = cosine(&xs, &ys).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12, "{base} vs {scaled}");
    }

    #[test]
    fn softmax_is_a_distribution(x in vector(10)) {
        let p = softmax(&x);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ranking_metrics_are_monotone_in_k(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 10), 1..40),
        pos in prop::collection::vec(0usize..10, 40),
    ) {
        let samples: Vec<RankedSample> = scores
            .iter()
            .zip(&pos)
            .map(|(s, &p)| RankedSample::new(s.clone(), p).unwrap())
            .collect();
        let mut prev_hr = 0.0;
        let mut prev_ndcg = 0.0;
        let mut prev_mrr = 0.0;
        for k in 1..=10 {
            let h = hr_at_k(&samples, k).unwrap();
            let n = ndcg_at_k(&samples, k).unwrap();
            let m = mrr_at_k(&samples, k).unwrap();
            prop_assert!(h + 1e-12 >= prev_hr);
            prop_assert!(n + 1e-12 >= prev_ndcg);
            prop_assert!(m + 1e-12 >= prev_mrr);
            prop_assert!(m <= h + 1e-12, "mrr@{k} above hr@{k}");
            prop_assert!(n <= h + 1e-12, "ndcg@{k} above hr@{k}");
            prev_hr = h;
            prev_ndcg = n;
            prev_mrr = m;
        }
        let a = auc(&samples).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn tokenizer_roundtrips_in_vocab_text(words in prop::collection::vec("[a-z]{1,8}", 1..20)) {
        let text = words.join(" ");
        let tok = Tokenizer::build([text.as_str()], &TokenizerConfig::default()).unwrap();
        let decoded = tok.decode(&tok.encode(&text));
        prop_assert_eq!(decoded, text);
    }
}

#[test]
fn split_invariants_on_synthetic_data() {
    use divrec_core::data::{preprocess, PreprocessConfig};
    use divrec_core::synth::{generate, SynthConfig};
    use std::collections::BTreeSet;

    let data = generate(&SynthConfig::default());
    let cfg = PreprocessConfig {
        trunc_lo: 5,
        trunc_hi: 10,
        ..Default::default()
    };
    let histories = preprocess(&data, &cfg).unwrap();
    let (train, test) = split_leave_one_out(&histories, 9, 4, 11).unwrap();

    let by_user: std::collections::BTreeMap<&str, &UserHistory> =
        histories.iter().map(|h| (h.user_id.as_str(), h)).collect();

    assert_eq!(test.len(), histories.len());
    for s in &test {
        let h = by_user[s.user_id.as_str()];
        // the test target is exactly the chronologically last kept item
        assert_eq!(&s.target, h.items.last().unwrap());
        assert_eq!(s.history.len(), h.len() - 1);
    }
    for s in train.iter().chain(&test) {
        assert_eq!(s.negatives.len(), 9);
        let user_items: BTreeSet<&str> = by_user[s.user_id.as_str()]
            .items
            .iter()
            .map(|s| s.as_str())
            .collect();
        for n in &s.negatives {
            assert!(!user_items.contains(n.as_str()));
        }
    }

    // random ranking anchor: expected HR@5 is 0.5, HR@1 is 0.1
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let ranked: Vec<RankedSample> = (0..10_000)
        .map(|_| {
            let scores: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            RankedSample::new(scores, 0).unwrap()
        })
        .collect();
    let hr5 = hr_at_k(&ranked, 5).unwrap();
    let hr1 = hr_at_k(&ranked, 1).unwrap();
    assert!((hr5 - 0.5).abs() < 0.02, "random HR@5 {hr5}");
    assert!((hr1 - 0.1).abs() < 0.02, "random HR@1 {hr1}");
}
