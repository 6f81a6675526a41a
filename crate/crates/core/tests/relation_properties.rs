use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vfm4sdg::distill::{
    align_resolution, alignment_mode, csrpd_loss, reconstruct_pyramid, relation_matrix, AlignMode,
    FeaturePyramid, TeacherFeature,
};
use vfm4sdg::Tensor;

fn map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(&[c, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Pairwise cosine of tokens, diagonal zero, computed entry by entry.
fn brute_relation(x: &Tensor) -> Vec<f64> {
    let (c, n) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let d = x.data();
    let token = |j: usize| -> Vec<f64> { (0..c).map(|i| d[i * n + j]).collect() };
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let (u, v) = (token(a), token(b));
            let dot: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
            let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt().max(1e-12);
            let nv = v.iter().map(|p| p * p).sum::<f64>().sqrt().max(1e-12);
            out[a * n + b] = dot / (nu * nv);
        }
    }
    out
}

fn scale_tokens(x: &Tensor, factors: &[f64]) -> Tensor {
    let n = factors.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * factors[i % n])
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

fn grid() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..5).prop_filter("at most 16 tokens", |(_, h, w)| h * w <= 16)
}

proptest! {
    #[test]
    fn relation_matches_brute_force((c, h, w) in grid(), seed in any::<u64>()) {
        let x = map(c, h, w, seed);
        let s = relation_matrix(&x).unwrap();
        let oracle = brute_relation(&x);
        let n = h * w;
        let v = s.values().data();
        for a in 0..n {
            prop_assert_eq!(v[a * n + a], 0.0);
            for b in 0..n {
                prop_assert!((v[a * n + b] - oracle[a * n + b]).abs() < 1e-9);
                prop_assert_eq!(v[a * n + b], v[b * n + a]);
                prop_assert!(v[a * n + b].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn relation_ignores_positive_token_scale(
        (c, h, w) in grid(),
        seed in any::<u64>(),
        factors in prop::collection::vec(0.01f64..100.0, 16),
    ) {
        let x = map(c, h, w, seed);
        let y = scale_tokens(&x, &factors[..h * w]);
        let a = relation_matrix(&x).unwrap();
        let b = relation_matrix(&y).unwrap();
        for (p, q) in a.values().data().iter().zip(b.values().data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn csrpd_ignores_positive_token_scale(
        seed in any::<u64>(),
        factors in prop::collection::vec(0.01f64..100.0, 16),
    ) {
        let teacher = TeacherFeature::new(map(5, 2, 2, seed), "t").unwrap();
        let levels: Vec<Tensor> = [(4, 4), (2, 2), (1, 3)]
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| map(3, h, w, seed.wrapping_add(i as u64 + 1)))
            .collect();
        let scaled: Vec<Tensor> = levels.iter().map(|m| {
            let n = m.shape()[1] * m.shape()[2];
            scale_tokens(m, &factors[..n])
        }).collect();
        let all: BTreeSet<usize> = [0, 1, 2].into();
        let a = csrpd_loss(&FeaturePyramid::from_maps(levels).unwrap(), &teacher, &all, 1.0).unwrap();
        let b = csrpd_loss(&FeaturePyramid::from_maps(scaled).unwrap(), &teacher, &all, 1.0).unwrap();
        // identity-aligned level must be exactly invariant; resampled ones mix tokens
        prop_assert!((a.per_level[1].value - b.per_level[1].value).abs() < 1e-9);
    }

    #[test]
    fn flatten_then_reconstruct_is_identity(
        c in 1usize..4,
        shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5),
        seed in any::<u64>(),
    ) {
        let maps: Vec<Tensor> = shapes.iter().enumerate()
            .map(|(i, &(h, w))| map(c, h, w, seed.wrapping_add(i as u64)))
            .collect();
        let pyramid = FeaturePyramid::from_maps(maps.clone()).unwrap();
        let tokens = pyramid.flatten().unwrap();
        let total: usize = shapes.iter().map(|(h, w)| h * w).sum();
        prop_assert_eq!(tokens.shape(), &[total, c][..]);
        let back = reconstruct_pyramid(&tokens, &shapes).unwrap();
        for (orig, level) in maps.iter().zip(back.levels()) {
            prop_assert_eq!(orig.shape(), level.map.shape());
            prop_assert_eq!(orig.data(), level.map.data());
        }
    }

    #[test]
    fn csrpd_is_non_negative_and_monotone_in_levels(
        seed in any::<u64>(),
        subset in prop::collection::btree_set(0usize..5, 1..5),
        extra in 0usize..5,
        beta in 0.1f64..2.0,
    ) {
        let teacher = TeacherFeature::new(map(4, 3, 3, seed), "t").unwrap();
        let maps: Vec<Tensor> = [(6, 6), (3, 3), (2, 2), (1, 1), (3, 5)]
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| map(2, h, w, seed ^ (i as u64 + 17)))
            .collect();
        let pyramid = FeaturePyramid::from_maps(maps).unwrap();
        let mut superset = subset.clone();
        superset.insert(extra);
        let small = csrpd_loss(&pyramid, &teacher, &subset, beta).unwrap();
        let large = csrpd_loss(&pyramid, &teacher, &superset, beta).unwrap();
        prop_assert!(small.value() >= 0.0);
        prop_assert!(small.per_level.iter().all(|l| l.value >= 0.0));
        prop_assert!(large.value() >= small.value() - 1e-15);
        let summed: f64 = large.per_level.iter().map(|l| l.value).sum();
        prop_assert!((summed - large.value()).abs() < 1e-12);
    }

    #[test]
    fn student_equal_to_teacher_gives_zero(
        seed in any::<u64>(),
        subset in prop::collection::btree_set(0usize..5, 1..6),
    ) {
        let t = map(3, 3, 4, seed);
        let teacher = TeacherFeature::new(t.clone(), "t").unwrap();
        let pyramid = FeaturePyramid::from_maps(vec![t; 5]).unwrap();
        let loss = csrpd_loss(&pyramid, &teacher, &subset, 1.0).unwrap();
        prop_assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn pooling_on_divisible_ratios_is_block_mean(
        c in 1usize..3, th in 1usize..4, tw in 1usize..4, fy in 1usize..4, fx in 1usize..4, seed in any::<u64>(),
    ) {
        let (h, w) = (th * fy, tw * fx);
        prop_assume!((h, w) != (th, tw));
        let x = map(c, h, w, seed);
        prop_assert_eq!(alignment_mode((h, w), (th, tw)), AlignMode::AdaptivePool);
        let y = align_resolution(&x, (th, tw)).unwrap();
        let d = x.data();
        for ch in 0..c {
            for i in 0..th {
                for j in 0..tw {
                    let mut sum = 0.0;
                    for a in i * fy..(i + 1) * fy {
                        for b in j * fx..(j + 1) * fx {
                            sum += d[ch * h * w + a * w + b];
                        }
                    }
                    let expect = sum / (fy * fx) as f64;
                    prop_assert!((y.data()[ch * th * tw + i * tw + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_reproduces_bilinear_functions(
        h in 2usize..5, w in 2usize..5, dh in 1usize..5, dw in 1usize..5,
        coef in prop::array::uniform4(-2.0f64..2.0),
    ) {
        let (ht, wt) = (h + dh, w + dw);
        let f = |y: f64, x: f64| coef[0] + coef[1] * y + coef[2] * x + coef[3] * x * y;
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| f(y as f64, x as f64)).collect();
        let src = Tensor::new(&[1, h, w], data).unwrap();
        let out = align_resolution(&src, (ht, wt)).unwrap();
        for i in 0..ht {
            let sy = (i as f64 + 0.5) * h as f64 / ht as f64 - 0.5;
            for j in 0..wt {
                let sx = (j as f64 + 0.5) * w as f64 / wt as f64 - 0.5;
                let interior = (0.0..=(h - 1) as f64).contains(&sy) && (0.0..=(w - 1) as f64).contains(&sx);
                if interior {
                    prop_assert!((out.data()[i * wt + j] - f(sy, sx)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn same_size_alignment_is_identity(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = map(c, h, w, seed);
        let y = align_resolution(&x, (h, w)).unwrap();
        prop_assert!(y.same_storage(&x));
    }
}

#[test]
fn mixed_aspect_is_bilinear_everywhere() {
    assert_eq!(alignment_mode((8, 2), (4, 4)), AlignMode::Bilinear);
    let x = map(1, 8, 2, 3);
    assert_eq!(align_resolution(&x, (4, 4)).unwrap().shape(), &[1, 4, 4]);
}
