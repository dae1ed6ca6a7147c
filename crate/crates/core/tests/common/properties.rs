// Shared by the invariant tests and the acceptance runner via include!.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lap::audio::{chunk_for_frame, compute_mel, AudioClip, MelConfig, CHUNK_STEPS, N_MELS};
use lap::generator::{assemble_tokens, loss_continuity, GeneratorConfig, GeneratorInputs, LandmarkGenerator, LandmarkPrediction, Transformer};
use lap::landmarks::{assemble_full, paste_back, smooth_face_mask, FaceBox, FaceFrame, LandmarkSet, NUM_POINTS};
use lap::losses::{stage2_loss, stage2_terms, DiscriminatorConfig, IdentityBackend, LossWeights, PatchDiscriminator, Reduction};
use lap::nn::ParamStore;
use lap::render::{aggregate_stacked, warp, RenderConfig, TranslationInputs, TranslationNet};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn random_landmarks(rng: &mut ChaCha8Rng) -> LandmarkSet {
    LandmarkSet::new((0..NUM_POINTS).map(|_| [rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0f32)]).collect()).unwrap()
}

fn tiny_generator(zero_residual: bool) -> GeneratorConfig {
    GeneratorConfig {
        frames: 3,
        refs: 4,
        d: 16,
        layers: 2,
        heads: 2,
        audio_width: 4,
        landmark_width: 8,
        zero_init_residual: zero_residual,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    fn zero_field_warp_is_identity(seed in any::<u64>(), c in 1usize..6, h in 2usize..20, w in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, c, h, w], -3.0, 3.0);
        let zero = Tensor::zeros((2, 2, h, w), DType::F64, &Device::Cpu).unwrap();
        prop_assert!(max_abs_diff(&warp(&x, &zero).unwrap(), &x) == 0.0);
    }

    fn aggregate_ignores_weight_scale_and_stays_in_envelope(seed in any::<u64>(), n in 1usize..5, c in 0.001f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = rand_tensor(&mut rng, &[2, n, 3, 4, 5], -5.0, 5.0);
        let weights = rand_tensor(&mut rng, &[2, n, 1, 4, 5], 1e-3, 3.0);
        let a = aggregate_stacked(&items, &weights).unwrap();
        let b = aggregate_stacked(&items, &(&weights * c).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-6);
        let lo = items.min(1).unwrap();
        let hi = items.max(1).unwrap();
        prop_assert!(scalar(&(&lo - &a).unwrap().max_all().unwrap()) <= 1e-12);
        prop_assert!(scalar(&(&a - &hi).unwrap().max_all().unwrap()) <= 1e-12);
    }

    fn continuity_loss_ignores_per_sequence_offsets(seed in any::<u64>(), t in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |rng: &mut ChaCha8Rng| LandmarkPrediction {
            lip: rand_tensor(rng, &[3, t, 41, 2], 0.0, 1.0),
            jaw: rand_tensor(rng, &[3, t, 16, 2], 0.0, 1.0),
        };
        let pred = make(&mut rng);
        let gt = make(&mut rng);
        // one offset per sequence, shared by both groups and all frames
        let off = rand_tensor(&mut rng, &[3, 1, 1, 2], -1.0, 1.0);
        let moved = LandmarkPrediction {
            lip: pred.lip.broadcast_add(&off).unwrap(),
            jaw: pred.jaw.broadcast_add(&off).unwrap(),
        };
        let a = scalar(&loss_continuity(&pred, &gt).unwrap());
        let b = scalar(&loss_continuity(&moved, &gt).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    fn zero_residual_transformer_is_identity_and_keeps_shape(seed in any::<u64>(), tokens in 1usize..12, heads_pow in 0u32..3) {
        let heads = 1usize << heads_pow;
        let cfg = GeneratorConfig { d: 8 * heads, heads, ..tiny_generator(true) };
        let ps = ParamStore::new(seed, DType::F64);
        let tf = Transformer::new(&cfg, &ps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_tensor(&mut rng, &[2, tokens, cfg.d], -2.0, 2.0);
        let out = tf.forward(&z).unwrap();
        prop_assert_eq!(out.dims(), z.dims());
        prop_assert!(max_abs_diff(&out, &z) == 0.0);

        let cfg = GeneratorConfig { d: 8 * heads, heads, ..tiny_generator(false) };
        let tf = Transformer::new(&cfg, &ParamStore::new(seed, DType::F64)).unwrap();
        let out = tf.forward(&z).unwrap();
        prop_assert_eq!(out.dims(), z.dims());
    }

    fn reference_permutation_moves_only_reference_tokens(seed in any::<u64>()) {
        let cfg = tiny_generator(false);
        let ps = ParamStore::new(seed, DType::F64);
        let g = LandmarkGenerator::new(&cfg, &ps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = GeneratorInputs {
            audio: rand_tensor(&mut rng, &[1, cfg.frames, 16, 80], -5.0, 0.0),
            pose: rand_tensor(&mut rng, &[1, cfg.frames, 74, 2], 0.0, 1.0),
            refs: rand_tensor(&mut rng, &[1, cfg.refs, 131, 2], 0.0, 1.0),
        };
        let mut perm: Vec<u32> = (0..cfg.refs as u32).collect();
        perm.rotate_left(1 + (seed % (cfg.refs as u64 - 1)) as usize);
        let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
        let permuted = GeneratorInputs { refs: inputs.refs.index_select(&idx, 1).unwrap(), ..inputs.clone() };
        let a = g.tokens(&inputs).unwrap();
        let b = g.tokens(&permuted).unwrap();
        let n = cfg.refs;
        let rest = a.dim(1).unwrap() - n;
        prop_assert!(max_abs_diff(&a.narrow(1, n, rest).unwrap(), &b.narrow(1, n, rest).unwrap()) == 0.0);
        let a_refs = a.narrow(1, 0, n).unwrap().index_select(&idx, 1).unwrap();
        prop_assert!(max_abs_diff(&a_refs, &b.narrow(1, 0, n).unwrap()) < 1e-12);
        // the same holds for assemble_tokens on arbitrary embeddings
        let refs = rand_tensor(&mut rng, &[1, n, cfg.d], -1.0, 1.0);
        let audio = rand_tensor(&mut rng, &[1, cfg.frames, cfg.d], -1.0, 1.0);
        let pose = rand_tensor(&mut rng, &[1, cfg.frames, cfg.d], -1.0, 1.0);
        let x = assemble_tokens(&refs, &audio, &pose, &g.encodings).unwrap();
        let y = assemble_tokens(&refs.index_select(&idx, 1).unwrap(), &audio, &pose, &g.encodings).unwrap();
        prop_assert!(max_abs_diff(&x.narrow(1, n, rest).unwrap(), &y.narrow(1, n, rest).unwrap()) == 0.0);
    }

    fn split_then_assemble_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lm = random_landmarks(&mut rng);
        let (lip, jaw, pose) = lm.split();
        prop_assert_eq!(assemble_full(&lip, &jaw, &pose).unwrap(), lm);
    }

    fn paste_back_leaves_zero_mask_pixels_untouched(seed in any::<u64>(), size in 16usize..40, sigma in 0.3f32..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fh, fw) = (size + 20, size + 24);
        let original = Array3::from_shape_fn((3, fh, fw), |_| rng.random_range(0.0..1.0f32));
        let generated = FaceFrame::new(Array3::from_shape_fn((3, size, size), |_| rng.random_range(0.0..1.0f32)));
        let lm = LandmarkSet::new((0..NUM_POINTS).map(|_| [rng.random_range(0.3..0.7f32), rng.random_range(0.3..0.7f32)]).collect()).unwrap();
        let mask = smooth_face_mask(&lm, size, size, sigma);
        let (x0, y0) = (rng.random_range(0..20u32), rng.random_range(0..20u32));
        let bx = FaceBox::new(x0, y0, x0 + size as u32, y0 + size as u32);
        let out = paste_back(&generated, &original, bx, &mask).unwrap();
        for y in 0..fh {
            for x in 0..fw {
                let inside = (y0 as usize..y0 as usize + size).contains(&y) && (x0 as usize..x0 as usize + size).contains(&x);
                if !inside || mask[[y - y0 as usize, x - x0 as usize]] == 0.0 {
                    for c in 0..3 {
                        prop_assert_eq!(out[[c, y, x]].to_bits(), original[[c, y, x]].to_bits());
                    }
                }
            }
        }
    }

    fn chunks_are_always_16_by_80(seed in any::<u64>(), frame in 0usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(400..8000);
        let clip = AudioClip::new((0..n).map(|_| rng.random_range(-0.5..0.5f32)).collect(), 16000).unwrap();
        let mel = compute_mel(&clip, &MelConfig::default()).unwrap();
        let chunk = chunk_for_frame(&mel, frame, 25);
        prop_assert_eq!(chunk.values.dim(), (CHUNK_STEPS, N_MELS));
        prop_assert!(chunk.values.iter().all(|v| mel.values.iter().any(|m| m == v)));
    }

    fn amplitude_scaling_shifts_log_mel(seed in any::<u64>(), c in 0.2f32..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f32> = (0..4000).map(|_| rng.random_range(-0.2..0.2f32)).collect();
        let cfg = MelConfig::default();
        let a = compute_mel(&AudioClip::new(samples.clone(), 16000).unwrap(), &cfg).unwrap();
        let b = compute_mel(&AudioClip::new(samples.iter().map(|s| s * c).collect(), 16000).unwrap(), &cfg).unwrap();
        let shift = (c as f64 * c as f64).ln();
        let floor = cfg.log_floor.ln();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            // only values above the floor in both spectrograms shift exactly
            if (*x as f64) > floor + 1e-3 && (*y as f64) > floor + 1e-3 {
                prop_assert!(((*y - *x) as f64 - shift).abs() < 1e-4 * (1.0 + x.abs() as f64));
            }
        }
    }

    fn translation_output_is_finite_and_in_unit_range(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let cfg = RenderConfig::tiny(16);
        let ps = ParamStore::new(seed, DType::F32);
        let net = TranslationNet::new(&cfg, &ps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| rand_tensor(&mut rng, shape, -scale, scale).to_dtype(DType::F32).unwrap();
        let top = t(&[1, 3, 8, 16]);
        let masked = Tensor::cat(&[top, Tensor::zeros((1, 3, 8, 16), DType::F32, &Device::Cpu).unwrap()], 2).unwrap();
        let out = net.forward(&TranslationInputs {
            masked_face: masked,
            target_sketches: t(&[1, cfg.sketch_channels(), 16, 16]),
            agg_image: t(&[1, 3, 16, 16]),
            agg_h1: t(&[1, cfg.c1, 4, 4]),
            agg_h2: t(&[1, cfg.c2, 8, 8]),
            audio_embed: t(&[1, cfg.audio_dim]),
        }).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    }

    fn stage2_terms_are_nonnegative_zero_at_gt_and_linear_in_weights(seed in any::<u64>(), k in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = rand_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let gen = rand_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
        let ps = ParamStore::new(seed, DType::F64);
        let disc = PatchDiscriminator::new(&DiscriminatorConfig { width: 4, scales: 2 }, &ps).unwrap();
        let t = stage2_terms(&gen, &gen, &gt, &IdentityBackend, &disc, Reduction::Mean).unwrap();
        for x in [&t.warp, &t.recon, &t.style, &t.adversarial, &t.feature_matching] {
            prop_assert!(scalar(x) >= 0.0);
        }
        let same = stage2_terms(&gt, &gt, &gt, &IdentityBackend, &disc, Reduction::Mean).unwrap();
        for x in [&same.warp, &same.recon, &same.style, &same.feature_matching] {
            prop_assert!(scalar(x) == 0.0);
        }
        let w = LossWeights::default();
        let base = scalar(&stage2_loss(&t, &w).unwrap());
        let parts = [scalar(&t.warp), scalar(&t.recon), scalar(&t.style), scalar(&t.adversarial), scalar(&t.feature_matching)];
        for i in 0..5 {
            let mut w2 = w;
            let field = match i {
                0 => &mut w2.warp,
                1 => &mut w2.recon,
                2 => &mut w2.style,
                3 => &mut w2.adversarial,
                _ => &mut w2.feature_matching,
            };
            *field += k;
            let moved = scalar(&stage2_loss(&t, &w2).unwrap());
            prop_assert!((moved - base - k * parts[i]).abs() < 1e-9 * (1.0 + base.abs() + moved.abs()));
        }
    }
}

#[allow(dead_code)]
pub(crate) const PROPERTIES: &[(&str, fn())] = &[
    ("zero_field_warp_is_identity", zero_field_warp_is_identity),
    ("aggregate_ignores_weight_scale_and_stays_in_envelope", aggregate_ignores_weight_scale_and_stays_in_envelope),
    ("continuity_loss_ignores_per_sequence_offsets", continuity_loss_ignores_per_sequence_offsets),
    ("zero_residual_transformer_is_identity_and_keeps_shape", zero_residual_transformer_is_identity_and_keeps_shape),
    ("reference_permutation_moves_only_reference_tokens", reference_permutation_moves_only_reference_tokens),
    ("split_then_assemble_round_trips", split_then_assemble_round_trips),
    ("paste_back_leaves_zero_mask_pixels_untouched", paste_back_leaves_zero_mask_pixels_untouched),
    ("chunks_are_always_16_by_80", chunks_are_always_16_by_80),
    ("amplitude_scaling_shifts_log_mel", amplitude_scaling_shifts_log_mel),
    ("translation_output_is_finite_and_in_unit_range", translation_output_is_finite_and_in_unit_range),
    ("stage2_terms_are_nonnegative_zero_at_gt_and_linear_in_weights", stage2_terms_are_nonnegative_zero_at_gt_and_linear_in_weights),
];
