mod common;

use prtr::cascade::model::{readout_keypoints, LayerOutput};
use prtr::data::coco::parse_coco;
use prtr::data::{augment_crop, AugmentParams, DataError, JointCatalog, LoaderOptions};
use prtr::eval::{coco_ap, dataset_pck, oks_from_distances, CocoProtocol, EvalImage, Raster};
use prtr::geometry::{Affine2, BoundingBox, Keypoint, PoseInstance};
use prtr::loss::{match_targets, set_loss, LossWeights, MatchStrategy};
use prtr::matcher::{brute_force_match, hungarian_solve, CostMatrix, CostMode, Target};
use prtr::nn::{Ctx, Decoder, HeadKind, HeadOutput, ParamStore, PredictionHeads};
use prtr::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

fn matrix(r: usize, c: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn randomized_store(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in store.values_mut() {
        for x in v.iter_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(r in 1usize..5, c in 1usize..9, seed in any::<u64>(), scale in 0.1f64..30.0) {
        let x = Tensor::new(&[r, c], matrix(r, c, seed).iter().map(|v| v * scale).collect()).unwrap();
        let s = x.softmax(1).unwrap();
        for row in s.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(r in 1usize..5, c in 4usize..12, seed in any::<u64>()) {
        let data = matrix(r, c, seed);
        for row in data.chunks(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            prop_assume!(row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64 > 0.1);
        }
        let x = Tensor::new(&[r, c], data).unwrap();
        let y = x.layer_norm(&Tensor::full(&[c], 1.0), &Tensor::zeros(&[c])).unwrap();
        for row in y.data().chunks(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(m.abs() <= 1e-7);
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let tape = Tape::new();
            let a = tape.leaf(&[3, 4], Arc::new(matrix(3, 4, seed))).unwrap();
            let b = tape.leaf(&[4, 2], Arc::new(matrix(4, 2, seed ^ 1))).unwrap();
            let y = a.matmul(&b).unwrap().softmax(1).unwrap().ln().unwrap().sum().unwrap();
            let g = y.backward().unwrap();
            (y.item().unwrap().to_bits(), g.get(&a).unwrap().to_vec(), g.get(&b).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn decoder_is_query_permutation_equivariant(seed in any::<u64>(), rot in 1usize..5) {
        let (d, q, n) = (8, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", d, 2, 16, 2, &mut rng).unwrap();
        randomized_store(&mut store, seed);
        let queries = matrix(q, d, seed ^ 2);
        let memory = Tensor::new(&[n, d], matrix(n, d, seed ^ 3)).unwrap();
        let perm: Vec<usize> = (0..q).map(|i| (i + rot) % q).collect();
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| queries[p * d..(p + 1) * d].to_vec()).collect();
        let ctx = Ctx::inference(&store);
        let a = dec.forward(&ctx, &Tensor::new(&[q, d], queries).unwrap(), &memory, 1).unwrap();
        let b = dec.forward(&ctx, &Tensor::new(&[q, d], permuted).unwrap(), &memory, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (r, &p) in perm.iter().enumerate() {
                for c in 0..d {
                    prop_assert!((y.data()[r * d + c] - x.data()[p * d + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn head_outputs_are_finite_with_coords_in_unit_range(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let person = PredictionHeads::new(&mut store, "p", 8, HeadKind::Person, &mut rng);
        let kp = PredictionHeads::new(&mut store, "k", 8, HeadKind::Keypoint { joints: 5 }, &mut rng);
        let state = Tensor::new(&[6, 8], matrix(6, 8, seed).iter().map(|v| v * scale).collect()).unwrap();
        let ctx = Ctx::inference(&store);
        for out in [person.forward(&ctx, &state).unwrap(), kp.forward(&ctx, &state).unwrap()] {
            prop_assert!(out.logits.data().iter().all(|v| v.is_finite()));
            prop_assert!(out.coords.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn row_shift_moves_total_by_the_shift(n in 1usize..5, extra in 0usize..3, seed in any::<u64>(), row in 0usize..5, shift in -3.0f64..3.0) {
        let q = n + extra;
        let row = row % n;
        let v = matrix(n, q, seed);
        let base = hungarian_solve(&CostMatrix::new(n, q, v.clone(), CostMode::Train).unwrap()).unwrap();
        let mut w = v.clone();
        for c in 0..q {
            w[row * q + c] += shift;
        }
        let shifted = CostMatrix::new(n, q, w, CostMode::Train).unwrap();
        let m = hungarian_solve(&shifted).unwrap();
        prop_assert!((m.total_cost - base.total_cost - shift).abs() < 1e-12);
        prop_assert!((m.total_cost - brute_force_match(&shifted).unwrap().total_cost).abs() < 1e-12);
    }

    #[test]
    fn column_permutation_permutes_the_matching(n in 1usize..5, extra in 0usize..3, seed in any::<u64>(), rot in 0usize..7) {
        let q = n + extra;
        let v = matrix(n, q, seed);
        // column c of the permuted matrix is column perm[c] of the original
        let perm: Vec<usize> = (0..q).map(|c| (c + rot) % q).collect();
        let w: Vec<f64> = (0..n).flat_map(|r| perm.iter().map(|&p| v[r * q + p]).collect::<Vec<_>>()).collect();
        let a = hungarian_solve(&CostMatrix::new(n, q, v, CostMode::Train).unwrap()).unwrap();
        let b = hungarian_solve(&CostMatrix::new(n, q, w, CostMode::Train).unwrap()).unwrap();
        prop_assert!((a.total_cost - b.total_cost).abs() < 1e-12);
        let mapped: Vec<usize> = b.assignment.iter().map(|&c| perm[c]).collect();
        prop_assert_eq!(mapped, a.assignment);
    }

    #[test]
    fn loss_is_invariant_to_query_order(seed in any::<u64>(), n in 0usize..4, rot in 1usize..6) {
        let (q, j) = (6, 3);
        let kind = HeadKind::Keypoint { joints: j };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<Target> = (0..n)
            .map(|_| Target { class: rng.gen_range(0..j), coords: vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)] })
            .collect();
        let logits = matrix(q, j + 1, seed ^ 5);
        let coords: Vec<f64> = (0..q * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let perm: Vec<usize> = (0..q).map(|i| (i + rot) % q).collect();
        let take = |v: &[f64], w: usize| -> Vec<f64> { perm.iter().flat_map(|&p| v[p * w..(p + 1) * w].to_vec()).collect() };
        let total = |logits: Vec<f64>, coords: Vec<f64>| {
            let out = HeadOutput { logits: Tensor::new(&[q, j + 1], logits).unwrap(), coords: Tensor::new(&[q, 2], coords).unwrap() };
            let m = match_targets(&targets, &out, MatchStrategy::Hungarian).unwrap();
            set_loss(&targets, &out, &m, kind, &LossWeights::keypoint()).unwrap().1.total
        };
        let a = total(logits.clone(), coords.clone());
        let b = total(take(&logits, j + 1), take(&coords, 2));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn readout_is_injective_with_unit_scores(seed in any::<u64>(), j in 1usize..6, extra in 0usize..5, exclude in any::<bool>()) {
        let q = j + extra;
        let out = LayerOutput { logits: matrix(q, j + 1, seed).iter().map(|v| v * 4.0).collect(), coords: matrix(q, 2, seed ^ 9) };
        let r = readout_keypoints(&out, q, j, exclude, false, &Affine2::from_box(&BoundingBox::new(0.0, 1.0, 0.0, 1.0))).unwrap();
        let mut seen = r.queries.clone();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), j);
        prop_assert!(r.keypoints.iter().all(|k| k.score > 0.0 && k.score <= 1.0));
    }

    #[test]
    fn oks_does_not_grow_with_distance(seed in any::<u64>(), j in 1usize..8, which in 0usize..8, grow in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d2: Vec<f64> = (0..j).map(|_| rng.gen_range(0.0..100.0)).collect();
        let k: Vec<f64> = (0..j).map(|_| rng.gen_range(0.02..0.2)).collect();
        let s2 = rng.gen_range(100.0..5000.0);
        let mut far = d2.clone();
        far[which % j] += grow;
        prop_assert!(oks_from_distances(&far, &k, s2).unwrap() <= oks_from_distances(&d2, &k, s2).unwrap());
    }

    #[test]
    fn ap_depends_only_on_score_order(power in 0.2f64..5.0, scale in 0.01f64..10.0, offset in -3.0f64..3.0) {
        let (images, params, _) = common::coco_oracle();
        let moved: Vec<EvalImage> = images
            .iter()
            .map(|img| EvalImage {
                preds: img.preds.iter().map(|p| PoseInstance { score: scale * p.score.powf(power) + offset, ..p.clone() }).collect(),
                ..img.clone()
            })
            .collect();
        let proto = CocoProtocol::default();
        prop_assert_eq!(coco_ap(&images, &params, &proto).unwrap(), coco_ap(&moved, &params, &proto).unwrap());
    }

    #[test]
    fn pck_ignores_rigid_translation(seed in any::<u64>(), tx in -8i32..8, ty in -8i32..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raster = Raster { width: 128, height: 128 };
        let person = |rng: &mut ChaCha8Rng, jitter: f64, base: &[(f64, f64)]| PoseInstance {
            bbox: BoundingBox::new(0.25, 0.75, 0.25, 0.75),
            keypoints: base.iter().enumerate().map(|(j, &(x, y))| Keypoint {
                x: x + rng.gen_range(-jitter..=jitter), y: y + rng.gen_range(-jitter..=jitter), label: j, visible: true, score: 1.0,
            }).collect(),
            score: 1.0,
        };
        let base: Vec<(f64, f64)> = (0..5).map(|_| (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7))).collect();
        let gt = person(&mut rng, 0.0, &base);
        let pred = person(&mut rng, 0.2, &base);
        // translations by whole pixels keep pixel distances exact
        let (dx, dy) = (tx as f64 / 128.0, ty as f64 / 128.0);
        let shift = |p: &PoseInstance| PoseInstance {
            bbox: BoundingBox::new(p.bbox.x_left + dx, p.bbox.x_right + dx, p.bbox.y_top + dy, p.bbox.y_down + dy),
            keypoints: p.keypoints.iter().map(|k| Keypoint { x: k.x + dx, y: k.y + dy, ..*k }).collect(),
            score: p.score,
        };
        let img = |g: PoseInstance, p: PoseInstance| [EvalImage { raster, gts: vec![g], preds: vec![p] }];
        let a = dataset_pck(&img(gt.clone(), pred.clone()), 0.2).unwrap();
        let b = dataset_pck(&img(shift(&gt), shift(&pred)), 0.2).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augmented_keypoints_follow_the_patch_transform(seed in any::<u64>(), rot in -40.0f64..40.0, scale in 0.7f64..1.3, flip in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let catalog = JointCatalog::stick_figure();
        let pose = PoseInstance {
            bbox: BoundingBox::new(0.2, 0.7, 0.1, 0.9),
            keypoints: (0..catalog.len()).map(|j| Keypoint {
                x: rng.gen_range(0.2..0.7), y: rng.gen_range(0.1..0.9), label: j, visible: true, score: 1.0,
            }).collect(),
            score: 1.0,
        };
        let image = Tensor::zeros(&[3, 32, 32]);
        let params = AugmentParams { rotation_deg: rot, scale, flip };
        let crop = augment_crop(&image, &pose, 4.0 / 3.0, 16, 12, &params, &catalog.swap).unwrap();
        for k in &pose.keypoints {
            let slot = if flip { catalog.swap[k.label] } else { k.label };
            let p = crop.keypoints[slot];
            prop_assert_eq!(p.label, slot);
            let (x, y) = crop.to_image.apply(p.x, p.y);
            prop_assert!((x - k.x).abs() < 1e-12 && (y - k.y).abs() < 1e-12);
        }
    }

    #[test]
    fn loader_never_panics_on_corrupted_files(pos in 0usize..4000, byte in any::<u8>(), cut in any::<bool>()) {
        let text = include_str!("fixtures/coco_small/annotations.json");
        let mut bytes = text.as_bytes().to_vec();
        let pos = pos % bytes.len();
        if cut {
            bytes.truncate(pos);
        } else {
            bytes[pos] = byte;
        }
        let Ok(text) = String::from_utf8(bytes) else { return Ok(()) };
        match parse_coco(&text, "corrupt.json", Path::new("/nonexistent"), LoaderOptions::default()) {
            Ok((data, skipped)) => prop_assert_eq!(skipped.missing_images.len() + data.len(), skipped.missing_images.len()),
            Err(DataError::Parse { offset, .. }) => prop_assert!(offset <= text.len()),
            Err(_) => {}
        }
    }
}
