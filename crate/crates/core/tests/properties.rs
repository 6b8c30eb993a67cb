use ndarray::Array2;
use phs_core::dataset::dilate_mask;
use phs_core::diffusion::masked_mse;
use phs_core::edge::{mirror_composite, EdgeMap, EdgeSource};
use phs_core::metrics::{fid, fit_gaussian, ssim, SsimParams};
use phs_core::prompt::{size_category, DeskTokenizer, Tokenizer, MAX_TOKENS};
use phs_tensor::optim::clip_grad_norm;
use phs_tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn image(h: usize, w: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(-1.0f32..1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Array2<bool>> {
    prop::collection::vec(prop::bool::weighted(0.2), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn features(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_mse_is_nonnegative(
        eps in prop::collection::vec(-3.0f32..3.0, 32),
        hat in prop::collection::vec(-3.0f32..3.0, 32),
        m in prop::collection::vec(prop::bool::ANY, 16),
    ) {
        let eps = Tensor::new(&[1, 2, 4, 4], eps).unwrap();
        let hat = Tensor::new(&[1, 2, 4, 4], hat).unwrap();
        let mask = Tensor::new(&[1, 1, 4, 4], m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let v = masked_mse(&eps, &hat, &mask).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(masked_mse(&eps, &eps, &mask).unwrap(), 0.0);
    }

    #[test]
    fn ssim_symmetric_and_bounded(x in image(12, 15), y in image(12, 15)) {
        let p = SsimParams::default();
        let a = ssim(x.view(), y.view(), &p).unwrap();
        let b = ssim(y.view(), x.view(), &p).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert!((ssim(x.view(), x.view(), &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_symmetric_and_nonnegative(a in features(12, 3), b in features(9, 3)) {
        let sa = fit_gaussian(&a).unwrap();
        let sb = fit_gaussian(&b).unwrap();
        let ab = fid(&sa, &sb).unwrap();
        let ba = fid(&sb, &sa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert_eq!(fid(&sa, &sa).unwrap(), 0.0);
    }

    #[test]
    fn merged_stats_match_pooled_fit(a in features(5, 3), b in features(7, 3), c in features(4, 3)) {
        let (sa, sb, sc) = (fit_gaussian(&a).unwrap(), fit_gaussian(&b).unwrap(), fit_gaussian(&c).unwrap());
        let left = sa.merge(&sb).unwrap().merge(&sc).unwrap();
        let right = sa.merge(&sb.merge(&sc).unwrap()).unwrap();
        let pooled: Vec<Vec<f64>> = a.iter().chain(&b).chain(&c).cloned().collect();
        let all = fit_gaussian(&pooled).unwrap();
        prop_assert_eq!(left.n, all.n);
        prop_assert!((&left.mu - &all.mu).amax() < 1e-10);
        prop_assert!((&left.sigma - &all.sigma).amax() < 1e-10);
        prop_assert!((&left.sigma - &right.sigma).amax() < 1e-10);
    }

    #[test]
    fn clipped_norm_never_exceeds_limit(v in prop::collection::vec(-50.0f32..50.0, 1..40), limit in 0.1f64..5.0) {
        let mut store = ParamStore::new();
        let n = v.len();
        let id = store.insert("w", Tensor::new(&[n], vec![0.0; n]).unwrap());
        let g = Graph::new();
        let w = g.param(&store, id);
        let target = g.constant(Tensor::new(&[n], v).unwrap());
        let out = g.mul(&w, &target);
        let mut grads = g.backward_with(&out, Tensor::new(&[n], vec![1.0; n]).unwrap());
        let before = clip_grad_norm(&mut grads, limit);
        let after = grads.global_norm();
        prop_assert!(after <= limit * (1.0 + 1e-6));
        if before <= limit {
            prop_assert!((after - before).abs() < 1e-9 * before.max(1.0));
        }
    }

    #[test]
    fn dilation_is_monotone_and_extensive(m in mask(16, 16), r in 0usize..4) {
        let d = dilate_mask(m.view(), r);
        let d2 = dilate_mask(m.view(), r + 1);
        prop_assert!(m.iter().zip(d.iter()).all(|(&a, &b)| !a || b));
        prop_assert!(d.iter().zip(d2.iter()).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn mirroring_twice_with_symmetric_mask_is_identity(e in mask(10, 12), m in mask(10, 6)) {
        let full = Array2::from_shape_fn((10, 12), |(r, c)| m[[r, c.min(11 - c)]]);
        let em = EdgeMap { edges: e.clone(), source: EdgeSource::Native };
        let once = mirror_composite(&em, full.view()).unwrap();
        let twice = mirror_composite(&once, full.view()).unwrap();
        prop_assert_eq!(twice.edges, e);
    }

    #[test]
    fn size_bins_are_monotone(a in 1000usize..=3000, b in 1000usize..=3000) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(size_category(lo).unwrap() <= size_category(hi).unwrap());
    }

    #[test]
    fn token_sequences_have_fixed_length(text in "[a-z ,.()0-9-]{1,300}") {
        let tok = DeskTokenizer::new();
        if let Ok(seq) = tok.tokenize(&text) {
            prop_assert_eq!(seq.ids.len(), MAX_TOKENS);
        }
    }
}
