use mixmask::augment::{augment_batch, AugmentParams};
use mixmask::batch::{BatchShape, ImageBatch, Normalization};
use mixmask::datastore::{parse_cifar, CifarVariant};
use mixmask::eval::{knn_classify, FeatureBank};
use mixmask::maskgen::{expand_to_pixels, gen_blocked_mask, gen_discrete_mask, target_zero_cells, GridMask};
use mixmask::mixer::{make_pairing, mix_batch, switch_batch, unmix_global_with_lambda, FillMode, PairingKind};
use mixmask::nnet::{momentum_update, ArchConfig, EncoderParams};
use mixmask::objective::{info_nce, EmbeddingBatch, EmbeddingRole, KeyQueue};
use proptest::prelude::*;

fn batch_from(n: usize, c: usize, h: usize, values: &[f32]) -> ImageBatch {
    let shape = BatchShape::new(n, c, h, h);
    let data = (0..shape.len()).map(|i| values[i % values.len()] * (1.0 + (i % 7) as f32)).collect();
    ImageBatch::new(shape, data, None, Normalization::centered(c)).unwrap()
}

fn unit_rows(n: usize, dim: usize, raw: &[f32]) -> EmbeddingBatch<f32> {
    let data = (0..n * dim).map(|i| raw[i % raw.len()] + 0.01 * i as f32).collect();
    EmbeddingBatch::normalized(n, dim, data, EmbeddingRole::Key).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_masks_are_binary_and_expand_blockwise(grid in 2usize..9, ratio in 0.0f64..=1.0, seed in any::<u64>(), scale in 1usize..4) {
        for mask in [gen_discrete_mask(grid, ratio, seed).unwrap(), gen_blocked_mask(grid, ratio, seed).unwrap().mask] {
            prop_assert!(mask.cells().iter().all(|&c| c <= 1));
            prop_assert!((0.0..=1.0).contains(&mask.lambda()));
            let side = grid * scale;
            let pix = expand_to_pixels(&mask, side, side).unwrap();
            for y in 0..side {
                for x in 0..side {
                    prop_assert_eq!(pix.values()[y * side + x], mask.get(y / scale, x / scale));
                }
            }
        }
        let discrete = gen_discrete_mask(grid, ratio, seed).unwrap();
        prop_assert_eq!(discrete.zeros(), target_zero_cells(grid, ratio));
    }

    #[test]
    fn blocked_overshoot_is_bounded(grid in 2usize..12, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let b = gen_blocked_mask(grid, ratio, seed).unwrap();
        let target = target_zero_cells(grid, ratio);
        prop_assert!(b.mask.zeros() >= target.min(grid * grid));
        prop_assert!(b.mask.zeros() - target <= b.max_block_area());
    }

    #[test]
    fn mixing_partitions_and_switch_completes(
        n in 2usize..6,
        grid in 1usize..5,
        cells in prop::collection::vec(0u8..2, 16),
        values in prop::collection::vec(-3.0f32..3.0, 1..40),
        seed in any::<u64>(),
    ) {
        let h = grid * 2;
        let batch = batch_from(n, 3, h, &values);
        let mask = GridMask::from_cells(grid, cells[..grid * grid].to_vec(), 0).unwrap();
        let pix = expand_to_pixels(&mask, h, h).unwrap();
        let pairing = make_pairing(PairingKind::Random { seed }, n).unwrap();
        let out = mix_batch(&batch, &pix, &pairing, FillMode::Image).unwrap();
        let switched = switch_batch(&out, &batch, &pix).unwrap();
        prop_assert_eq!(out.lambda, mask.lambda());
        for i in 0..n {
            let (a, b) = (batch.image(i), batch.image(pairing.perm()[i]));
            for (idx, (&m, &s)) in out.mixtures.image(i).iter().zip(switched.image(i)).enumerate() {
                prop_assert!(m == a[idx] || m == b[idx]);
                prop_assert_eq!(m + s, a[idx] + b[idx]);
            }
        }
        prop_assert_eq!(mask.lambda() + mask.complement().lambda(), 1.0);
    }

    #[test]
    fn unmix_global_is_convex(n in 2usize..6, lam in 0.0f64..=1.0, values in prop::collection::vec(-3.0f32..3.0, 1..40)) {
        let batch = batch_from(n, 1, 4, &values);
        let out = unmix_global_with_lambda(&batch, lam).unwrap();
        for i in 0..n {
            let (a, b) = (batch.image(i), batch.image(n - 1 - i));
            for (idx, &m) in out.mixed.image(i).iter().enumerate() {
                let want = lam as f32 * a[idx] + (1.0 - lam as f32) * b[idx];
                prop_assert!((m - want).abs() <= 1e-5 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn momentum_target_stays_between(seed_a in 0u64..1000, seed_b in 1000u64..2000, m in 0.0f64..=1.0) {
        let arch = ArchConfig::tiny(8);
        let online = EncoderParams::<f64>::init(&arch, seed_a).unwrap();
        let old = EncoderParams::<f64>::init(&arch, seed_b).unwrap();
        let mut target = old.clone();
        momentum_update(&mut target, &online, m);
        for idx in 0..online.num_params() {
            let (o, t, n) = (old.flat_get(idx), online.flat_get(idx), target.flat_get(idx));
            prop_assert!(n >= o.min(t) - 1e-12 && n <= o.max(t) + 1e-12);
        }
    }

    #[test]
    fn queue_occupancy_is_min_of_pushed_and_capacity(batch in 1usize..5, mult in 1usize..4, pushes in 0usize..10) {
        let cap = batch * mult;
        let mut q = KeyQueue::<f32>::random(cap, 4, 0).unwrap();
        let mut last = None;
        for p in 0..pushes {
            let keys = unit_rows(batch, 4, &[p as f32 + 0.5, -1.0, 2.0]);
            q.push(&keys).unwrap();
            last = Some(keys);
        }
        prop_assert_eq!(q.occupancy(), (pushes * batch).min(cap));
        if let Some(keys) = last {
            let newest = (q.cursor() + cap - batch) % cap;
            for i in 0..batch {
                prop_assert_eq!(q.entry((newest + i) % cap), keys.row(i));
            }
        }
        for j in 0..cap {
            let n: f32 = q.entry(j).iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn info_nce_is_nonnegative(n in 1usize..5, k in 1usize..9, raw in prop::collection::vec(-1.0f32..1.0, 3..20), tau in 0.05f64..2.0) {
        let q = unit_rows(n, 4, &raw).with_role(EmbeddingRole::Query);
        let keys = unit_rows(n, 4, &raw[1..]);
        let queue = KeyQueue::<f32>::random(k, 4, 3).unwrap();
        let l = info_nce(&q, &keys, &queue, tau).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn knn_ignores_bank_order(m in 3usize..20, k in 1usize..4, raw in prop::collection::vec(-1.0f32..1.0, 5..30), rot in 0usize..20) {
        let emb = unit_rows(m, 3, &raw);
        let labels: Vec<u32> = (0..m as u32).map(|i| i % 3).collect();
        let bank = FeatureBank::new(emb.clone(), labels.clone(), 3, "a").unwrap();
        let order: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
        let shuffled = FeatureBank::new(emb.select(&order), order.iter().map(|&i| labels[i]).collect(), 3, "b").unwrap();
        let queries = unit_rows(4, 3, &raw[2..]).with_role(EmbeddingRole::Query);
        let k = k.min(m);
        // Exact similarity ties may be broken differently, so only generic inputs are compared.
        let a = knn_classify(&bank, &queries, k, 0.1).unwrap();
        let b = knn_classify(&shuffled, &queries, k, 0.1).unwrap();
        let sims: Vec<f32> = (0..4).flat_map(|q| (0..m).map(move |j| (q, j))).map(|(q, j)| {
            queries.row(q).iter().zip(emb.row(j)).map(|(x, y)| x * y).sum()
        }).collect();
        let mut sorted = sims.clone();
        sorted.sort_by(f32::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-6));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn knn_with_one_neighbour_ignores_temperature(m in 2usize..15, raw in prop::collection::vec(-1.0f32..1.0, 5..30), t1 in 0.01f64..5.0, t2 in 0.01f64..5.0) {
        let emb = unit_rows(m, 3, &raw);
        let bank = FeatureBank::new(emb, (0..m as u32).map(|i| i % 4).collect(), 4, "a").unwrap();
        let queries = unit_rows(3, 3, &raw[1..]).with_role(EmbeddingRole::Query);
        prop_assert_eq!(knn_classify(&bank, &queries, 1, t1).unwrap(), knn_classify(&bank, &queries, 1, t2).unwrap());
    }

    #[test]
    fn augmentation_stays_in_valid_range(seed in any::<u64>(), step in 0u64..100, values in prop::collection::vec(0.0f32..=1.0, 1..50)) {
        let shape = BatchShape::new(2, 3, 6, 6);
        let unit: Vec<f32> = (0..shape.len()).map(|i| values[i % values.len()]).collect();
        let batch = ImageBatch::from_unit_intensities(shape, unit, None, Normalization::centered(3)).unwrap();
        let out = augment_batch(&batch, &AugmentParams::default(), seed, step, 0).unwrap();
        let norm = Normalization::centered(3);
        for (idx, &v) in out.data().iter().enumerate() {
            let c = (idx / 36) % 3;
            let (lo, hi) = norm.valid_range(c);
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }

    #[test]
    fn cifar_reader_never_pads(records in 1usize..3, cut in 1usize..3073) {
        let mut bytes = vec![0u8; records * 3073];
        bytes.truncate(bytes.len() - cut);
        prop_assert!(parse_cifar(&bytes, CifarVariant::Cifar10, std::path::Path::new("x")).is_err());
    }
}
