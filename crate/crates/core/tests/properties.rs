use atoken_core::autodiff::{Mat, Tape};
use atoken_core::evalkit::{feature_stats, frechet, psnr, read_features, ssim, write_features};
use atoken_core::gsplat::{format_splats, parse_splats, render, RenderTarget, Splat};
use atoken_core::losses::{gram_from_features, total_loss, LossParts, LossWeights, RecSchema};
use atoken_core::media::{Image, Video};
use atoken_core::nnet::{AttentionMask, ModelConfig, ModelParams};
use atoken_core::patchify::{patchify_video, unpatchify, CameraView};
use atoken_core::quantize::{dequantize, fsq_quantize_rows, quantize_scalar};
use atoken_core::sparse4d::{canonicalize, read_tokens, write_tokens, Coord4, Modality, TokenSet};
use atoken_core::stream::split_tiles;
use atoken_core::trainer::{task_counts, task_cycle, LrSchedule};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        blocks: 1,
        width: 16,
        heads: 2,
        latent: 6,
        semantic: 4,
        gaussians: 1,
        temporal_patch: 2,
        patch: 2,
    }
}

fn video_strategy() -> impl Strategy<Value = (Video, usize, usize)> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..3, 1usize..4).prop_flat_map(|(nt, nh, nw, tp, p)| {
        let (t, h, w) = (nt * tp, nh * p, nw * p);
        prop::collection::vec(0.0f32..1.0, t * h * w * 3)
            .prop_map(move |data| (Video::new(t, h, w, data).unwrap(), tp, p))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn patchify_round_trip((video, tp, p) in video_strategy()) {
        let g = patchify_video(&video, tp, p).unwrap();
        prop_assert_eq!(g.len(), video.frames / tp * (video.height / p) * (video.width / p));
        let back = unpatchify(&g.coords, &g.raw, tp, p, video.frames, video.height, video.width).unwrap();
        prop_assert_eq!(back, video);
    }

    #[test]
    fn token_files_round_trip(
        feats in prop::collection::vec(-1e3f32..1e3, 12),
        xs in prop::collection::btree_set(0u32..16, 4),
    ) {
        let coords: Vec<Coord4> = xs.iter().rev().map(|&x| Coord4::new(0, x, 3, 0)).collect();
        let ts = TokenSet::new(Modality::Image, [1, 16, 4, 1], 3, coords, feats).unwrap();
        let mut buf = Vec::new();
        write_tokens(&ts, &mut buf).unwrap();
        prop_assert_eq!(&read_tokens(&buf[..]).unwrap(), &ts);
        let c = canonicalize(&ts).unwrap();
        prop_assert!(c.coords.windows(2).all(|w| w[0] < w[1]));
        for (i, coord) in ts.coords.iter().enumerate() {
            let j = c.coords.iter().position(|x| x == coord).unwrap();
            prop_assert_eq!(ts.feature(i), c.feature(j));
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let cfg = small_config();
        let params = ModelParams::init(cfg, seed).unwrap();
        let coords: Vec<Coord4> = (0..5).map(|i| Coord4::new(0, i, i % 2, 0)).collect();
        let x = Mat::from_vec(5, 16, (0..80).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 17.0 - 0.5).collect());
        let mut order: Vec<usize> = (0..5).collect();
        order.rotate_left((perm_seed % 5) as usize);
        let px = Mat::from_vec(5, 16, order.iter().flat_map(|&i| x.row(i).to_vec()).collect());
        let pc: Vec<Coord4> = order.iter().map(|&i| coords[i]).collect();
        let run = |m: &Mat, c: &[Coord4]| {
            let mut tape = Tape::new();
            let net = params.bind(&mut tape, false);
            let v = tape.constant(m.clone());
            let y = net.encode(&mut tape, v, c, AttentionMask::Full, None);
            tape.value(y).clone()
        };
        let (a, b) = (run(&x, &coords), run(&px, &pc));
        for (k, &i) in order.iter().enumerate() {
            for (u, v) in a.row(i).iter().zip(b.row(k)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_ignores_spatial_order(vals in prop::collection::vec(-2.0f64..2.0, 24), shift in 0usize..6) {
        let a = Mat::from_vec(4, 6, vals.clone());
        let b = Mat::from_vec(4, 6, vals.iter().map(|v| v * 0.5 + 0.1).collect());
        let shuffled = Mat::from_vec(4, 6, (0..24).map(|i| a.data[(i / 6) * 6 + (i % 6 + shift) % 6]).collect());
        let base = gram_from_features(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        let moved = gram_from_features(&[shuffled], &[b]).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
        prop_assert_eq!(gram_from_features(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_is_linear(parts in prop::collection::vec(0.0f64..10.0, 6), k in 0usize..6, bump in 0.0f64..5.0) {
        let w = LossWeights::default();
        let make = |p: &[f64]| LossParts { l1: Some(p[0]), lpips: Some(p[1]), gram: Some(p[2]), clip: Some(p[3]), kl: Some(p[4]), sem: Some(p[5]) };
        let coef = [w.rec * w.l1, w.rec * w.lpips, w.rec * w.gram, w.rec * w.clip, w.kl, w.sem];
        let (t0, _) = total_loss(&make(&parts), Some(RecSchema::Image), &w).unwrap();
        let mut moved = parts.clone();
        moved[k] += bump;
        let (t1, _) = total_loss(&make(&moved), Some(RecSchema::Image), &w).unwrap();
        prop_assert!((t1 - t0 - coef[k] * bump).abs() <= 1e-9 * t1.abs().max(1.0));
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in prop::collection::vec(-3.0f64..3.0, 60), b in prop::collection::vec(-3.0f64..3.0, 60)) {
        let (sa, sb) = (feature_stats(&a, 3).unwrap(), feature_stats(&b, 3).unwrap());
        let (f, r) = (frechet(&sa, &sb).unwrap(), frechet(&sb, &sa).unwrap());
        prop_assert!(f.total >= -1e-9 && f.mean_term >= 0.0);
        prop_assert!((f.total - r.total).abs() <= 1e-8 * f.total.abs().max(1.0));
        prop_assert!(frechet(&sa, &sa).unwrap().total.abs() < 1e-8);
    }

    #[test]
    fn feature_files_round_trip(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..40), dim in 1usize..5) {
        let n = vals.len() / dim * dim;
        let mut buf = Vec::new();
        write_features(&vals[..n], dim, &mut buf).unwrap();
        let (back, d) = read_features(&buf[..]).unwrap();
        prop_assert_eq!(d, dim);
        prop_assert_eq!(back, vals[..n].to_vec());
    }

    #[test]
    fn image_metrics_are_symmetric(a in prop::collection::vec(0.0f32..1.0, 16 * 16 * 3), b in prop::collection::vec(0.0f32..1.0, 16 * 16 * 3)) {
        let (x, y) = (Image::new(16, 16, a).unwrap(), Image::new(16, 16, b).unwrap());
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        let s = ssim(&x, &y).unwrap();
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn fsq_ids_decode_to_quantized_values(z in prop::collection::vec(-4.0f64..4.0, 18)) {
        let code = fsq_quantize_rows(&z, 6).unwrap();
        let back = dequantize(&code.ids, 1).unwrap().level_matrix();
        for (v, q) in z.iter().zip(&back.data) {
            prop_assert_eq!(quantize_scalar(*v), *q);
        }
    }

    #[test]
    fn full_cycles_hit_exact_ratios(stage in 1u32..5, cycles in 1usize..200) {
        let cycle = task_cycle(stage).unwrap();
        let counts = task_counts(stage, cycles * cycle.len()).unwrap();
        for (task, n) in counts {
            prop_assert_eq!(n, cycles * cycle.iter().filter(|t| **t == task).count());
        }
    }

    #[test]
    fn schedule_stays_in_range(total in 100usize..100_000, frac in 0.0f64..1.0) {
        let s = LrSchedule::for_total(total);
        let step = (frac * total as f64) as usize;
        let lr = s.at(step).unwrap();
        prop_assert!((0.0..=s.max).contains(&lr));
        if step >= s.warmup {
            prop_assert!(lr >= s.min - 1e-18);
        }
    }

    #[test]
    fn tiles_cover_the_video(frames in 1usize..40, tiles in 1usize..5) {
        let tile_len = 4 * tiles;
        let v = Video::new(frames, 2, 2, vec![0.5; frames * 12]).unwrap();
        let t = split_tiles(&v, tile_len, 4).unwrap();
        let covered: usize = t.iter().map(|x| x.video.frames).sum();
        prop_assert_eq!(covered, frames.div_ceil(4) * 4);
        prop_assert!(t.iter().all(|x| x.video.frames <= tile_len && x.video.frames % 4 == 0));
        prop_assert!(t.windows(2).all(|w| w[1].start == w[0].start + w[0].video.frames));
    }

    #[test]
    fn splat_text_round_trips(vals in prop::collection::vec(-5.0f64..5.0, 14)) {
        let s = Splat {
            position: [vals[0], vals[1], vals[2]],
            color: [vals[3].abs() / 5.0, vals[4].abs() / 5.0, vals[5].abs() / 5.0],
            scale: [vals[6].abs() + 0.01, vals[7].abs() + 0.01, vals[8].abs() + 0.01],
            opacity: vals[9].abs() / 5.0,
            rotation: [1.0, 0.0, 0.0, 0.0],
        };
        prop_assert_eq!(parse_splats(&format_splats(&[s])).unwrap(), vec![s]);
    }

    #[test]
    fn transparent_splats_leave_background(x in -1.0f64..1.0, y in -1.0f64..1.0, bg in 0.0f64..1.0) {
        let cam = CameraView::look_at(Image::filled(8, 8, [0.0; 3]), [0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 8.0, [4.0, 4.0]).unwrap();
        let mut target = RenderTarget::new(8, 8).unwrap();
        target.background = [bg; 3];
        let s = Splat { position: [x, y, 0.0], color: [1.0; 3], scale: [0.3; 3], opacity: 0.0, rotation: [1.0, 0.0, 0.0, 0.0] };
        prop_assert_eq!(render(&[s], &cam, &target), render(&[], &cam, &target));
    }
}
