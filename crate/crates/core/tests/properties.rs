mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csc_core::blending::{blend, BlendParams};
use csc_core::embednet::{pool_regions, Activation, EmbeddingBank};
use csc_core::losses::{loss_pro, loss_sp, total_loss, LossConfig};
use csc_core::projection::build_associations;
use csc_core::protobank::{build_prototypes, ema_update, PrototypeBank};
use csc_core::scenegen::Scene;
use csc_core::ExecMode;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}

fn unit_rows(rows: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), rows).prop_filter_map("non-zero rows", move |mut r| {
        for row in &mut r {
            if row.iter().map(|x| x * x).sum::<f64>() < 1e-6 {
                return None;
            }
            normalize(row);
        }
        Some(Array2::from_shape_fn((rows, d), |(i, j)| r[i][j]))
    })
}

fn bank_strategy(max_rows: usize, d: usize, classes: u16) -> impl Strategy<Value = EmbeddingBank> {
    (2..=max_rows).prop_flat_map(move |q| {
        (unit_rows(q, d), unit_rows(q, d), prop::collection::vec(0..classes, q), prop::collection::vec(any::<bool>(), q))
            .prop_map(move |(f2d, f3d, signs, mask)| {
                // Keep at least two valid rows.
                let valid3d = mask.iter().enumerate().map(|(i, &m)| m || i < 2).collect();
                EmbeddingBank::new(f2d, f3d, vec![true; q], valid3d, signs).unwrap()
            })
    })
}

fn blended(banks: &[EmbeddingBank], seed: u64) -> PrototypeBank {
    let protos = build_prototypes(banks).unwrap();
    let params = BlendParams::xavier(protos.dim(), 1, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    blend(&protos, &params).unwrap().0
}

fn permuted_scene(scene: &Scene, perm: &[usize]) -> Scene {
    let mut s = scene.clone();
    s.frame.points = perm.iter().map(|&i| scene.frame.points[i]).collect();
    s.truth.point_labels = perm.iter().map(|&i| scene.truth.point_labels[i]).collect();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_ignores_member_order(x in unit_rows(12, 5), perm in Just((0..12u32).collect::<Vec<_>>()).prop_shuffle()) {
        let groups = vec![(0..12).collect::<Vec<u32>>(), vec![3, 7]];
        let shuffled = vec![perm, vec![7, 3]];
        let a = pool_regions(x.view(), &groups).unwrap();
        let b = pool_regions(x.view(), &shuffled).unwrap();
        prop_assert_eq!(&a.valid, &b.valid);
        for (u, v) in a.rows.iter().zip(b.rows.iter()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn valid_pooled_rows_are_unit(x in prop::collection::vec(-3.0f64..3.0, 40), sizes in prop::collection::vec(0usize..5, 1..6)) {
        let feats = Array2::from_shape_vec((10, 4), x).unwrap();
        let groups: Vec<Vec<u32>> = sizes.iter().enumerate().map(|(g, &n)| (0..n as u32).map(|k| (k + g as u32) % 10).collect()).collect();
        let pooled = pool_regions(feats.view(), &groups).unwrap();
        for (q, &ok) in pooled.valid.iter().enumerate() {
            let norm = pooled.rows.row(q).dot(&pooled.rows.row(q)).sqrt();
            if ok {
                prop_assert!((norm - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(norm, 0.0);
            }
        }
    }

    #[test]
    fn losses_are_non_negative(bank in bank_strategy(10, 6, 4), tau in 0.02f64..2.0, seed in any::<u64>()) {
        let sp = loss_sp(&bank, tau).unwrap();
        prop_assert!(sp.value >= 0.0);
        let protos = blended(std::slice::from_ref(&bank), seed);
        let pro = loss_pro(&bank, &protos, tau).unwrap();
        prop_assert!(pro.value >= 0.0);
    }

    #[test]
    fn total_follows_the_gate(bank in bank_strategy(8, 4, 3), epoch in 1u32..12, lambda in 0u32..10, seed in any::<u64>()) {
        let cfg = LossConfig { lambda, ..LossConfig::default() };
        let sp = loss_sp(&bank, cfg.tau_sp).unwrap();
        let sp_value = sp.value;
        let protos = blended(std::slice::from_ref(&bank), seed);
        let mut called = false;
        let t = total_loss(epoch, sp, || { called = true; loss_pro(&bank, &protos, cfg.tau_pro) }, &cfg).unwrap();
        prop_assert_eq!(t.report.gate, epoch > lambda);
        prop_assert_eq!(called, epoch > lambda);
        prop_assert_eq!(t.report.total, sp_value + if t.report.gate { t.report.loss_pro } else { 0.0 });
    }

    #[test]
    fn prototypes_ignore_bank_order(banks in prop::collection::vec(bank_strategy(6, 4, 3), 2..5)) {
        let a = build_prototypes(&banks).unwrap();
        let mut reversed = banks.clone();
        reversed.reverse();
        let b = build_prototypes(&reversed).unwrap();
        prop_assert_eq!(&a.classes, &b.classes);
        prop_assert_eq!(&a.count3d, &b.count3d);
        for (u, v) in a.p3d.iter().zip(b.p3d.iter()).chain(a.p2d.iter().zip(b.p2d.iter())) {
            prop_assert!((u - v).abs() < 1e-12);
        }
        // Same order twice is bit-identical.
        prop_assert_eq!(build_prototypes(&banks).unwrap(), a.clone());
        // Means of unit vectors stay inside the unit ball.
        for r in a.p2d.rows().into_iter().chain(a.p3d.rows()) {
            prop_assert!(r.dot(&r).sqrt() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn blending_is_per_class(bank in bank_strategy(10, 4, 4), seed in any::<u64>(), bump in -0.5f64..0.5) {
        let protos = build_prototypes(std::slice::from_ref(&bank)).unwrap();
        prop_assume!(protos.len() >= 2);
        let params = BlendParams::xavier(4, 1, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let base = blend(&protos, &params).unwrap().0;
        let mut changed = protos.clone();
        changed.p2d[[0, 0]] += bump;
        let moved = blend(&changed, &params).unwrap().0;
        let (m0, m1) = (base.mix.unwrap(), moved.mix.unwrap());
        for t in 0..protos.len() {
            prop_assert!((m0.row(t).dot(&m0.row(t)).sqrt() - 1.0).abs() < 1e-9);
            if t > 0 {
                prop_assert_eq!(m0.row(t), m1.row(t));
            }
        }
    }

    #[test]
    fn ema_fixed_point_and_zero_momentum(bank in bank_strategy(6, 3, 2), m in 0.0f64..0.999) {
        let p = build_prototypes(std::slice::from_ref(&bank)).unwrap();
        let same = ema_update(&p, &p, m).unwrap();
        for (u, v) in same.p3d.iter().zip(p.p3d.iter()) {
            prop_assert!((u - v).abs() < 1e-15);
        }
        let fresh = ema_update(&p, &p, 0.0).unwrap();
        prop_assert_eq!(fresh.p2d, p.p2d.clone());
    }

    #[test]
    fn temperature_monotone_when_positives_dominate(q in 2usize..6, tau in 0.05f64..1.0) {
        // Orthonormal positives: every positive similarity is 1, every negative 0.
        let eye = Array2::from_shape_fn((q, q), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let bank = EmbeddingBank::new(eye.clone(), eye, vec![true; q], vec![true; q], vec![0; q]).unwrap();
        let hot = loss_sp(&bank, tau).unwrap().value;
        let cold = loss_sp(&bank, tau * 0.8).unwrap().value;
        prop_assert!(cold < hot);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn associations_follow_point_permutation(seed in 0u64..1000, perm_seed in any::<u64>()) {
        let scene = &common::scenes(seed, 1, 512)[0];
        let n = scene.frame.points.len();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let moved = permuted_scene(scene, &perm);
        let a = build_associations(&scene.frame, ExecMode::Sequential);
        let b = build_associations(&moved.frame, ExecMode::Parallel);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.superpixels.iter().zip(&b.superpixels) {
            prop_assert_eq!(&x.pixels, &y.pixels);
            prop_assert_eq!(x.class, y.class);
            let mut mapped: Vec<u32> = y.points.iter().map(|&i| perm[i as usize] as u32).collect();
            mapped.sort_unstable();
            prop_assert_eq!(&x.points, &mapped);
        }
        // Partition: no point in two superpixels.
        let mut seen = vec![false; n];
        for s in &a.superpixels {
            for &i in &s.points {
                prop_assert!(!std::mem::replace(&mut seen[i as usize], true));
            }
        }
    }
}
