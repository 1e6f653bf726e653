use cdp_core::corpus::{build_manifest, synth_corpus, Corpus, Manifest, SplitFractions};
use cdp_core::{
    decode_ppm, distort, encode_ppm, DistortionKind, DistortionParams, ImageBuffer, SamplerConfig,
};
use proptest::prelude::*;

fn image() -> impl Strategy<Value = ImageBuffer> {
    (3usize..10, 3usize..10).prop_flat_map(|(w, h)| {
        proptest::collection::vec(0u8..=255, w * h * 3).prop_map(move |bytes| {
            ImageBuffer::new(w, h, bytes.into_iter().map(f64::from).collect()).unwrap()
        })
    })
}

fn kind() -> impl Strategy<Value = DistortionKind> {
    (0usize..4).prop_map(|i| DistortionKind::from_index(i).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn outputs_stay_in_range(img in image(), kind in kind(), alpha in 0.0f64..2.0,
                             beta in 0.0f64..0.1, seed in any::<u64>()) {
        let out = distort(&img, &DistortionParams { kind, alpha, beta, noise_seed: seed }).unwrap();
        prop_assert!(out.same_shape(&img));
        prop_assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn identity_parameters_leave_images_unchanged(img in image(), kind in kind()) {
        let out = distort(&img, &DistortionParams::identity(kind)).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn distortion_is_a_pure_function(img in image(), kind in kind(), alpha in 0.5f64..1.5,
                                     beta in 0.0f64..0.05, seed in any::<u64>()) {
        let p = DistortionParams { kind, alpha, beta, noise_seed: seed };
        prop_assert_eq!(distort(&img, &p).unwrap(), distort(&img, &p).unwrap());
    }

    #[test]
    fn ppm_round_trip_is_lossless_for_integer_images(img in image()) {
        let bytes = encode_ppm(&img);
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&back), bytes);
        prop_assert_eq!(back, img);
    }

    #[test]
    fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_ppm(&bytes);
        let mut framed = b"P6\n2 2\n255\n".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = decode_ppm(&framed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn manifests_respect_sampler_bounds_and_round_trip(seed in any::<u64>(), excl in 0.001f64..0.3) {
        let corpus = Corpus::from_images(synth_corpus(12, 8, 5).unwrap()).unwrap();
        let cfg = SamplerConfig { alpha_exclusion_halfwidth: excl, ..SamplerConfig::default() };
        let m = build_manifest(&corpus, &cfg, &SplitFractions::default(), seed).unwrap();
        prop_assert_eq!(m.samples.len(), 4 * corpus.len());
        for s in &m.samples {
            prop_assert!((cfg.alpha_lo..=cfg.alpha_hi).contains(&s.alpha));
            prop_assert!((s.alpha - 1.0).abs() >= excl);
            prop_assert!((cfg.beta_lo..=cfg.beta_hi).contains(&s.beta));
        }
        let text = m.to_jsonl();
        let back = Manifest::from_jsonl(&text).unwrap();
        prop_assert_eq!(back.to_jsonl(), text);
    }
}
