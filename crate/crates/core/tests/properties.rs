use std::collections::BTreeSet;

use num_complex::Complex64;
use proptest::prelude::*;

use ura_core::config::{PresetKind, SystemConfig};
use ura_core::encoder::{derive_interleaver, invert_permutation, PayloadEncoding, TreeCode};
use ura_core::flat::{lmmse_preamble, residual_rotation_rho};
use ura_core::gbcr::{DecodingGraph, GraphNode};
use ura_core::metrics::{md_fa, Accumulator};
use ura_core::numerics::{chi2_cdf, chi2_inv};
use ura_core::CMatrix;

fn complex() -> impl Strategy<Value = Complex64> {
    (-3.0..3.0f64, -3.0..3.0f64).prop_map(|(re, im)| Complex64::new(re, im))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = CMatrix> {
    prop::collection::vec(complex(), rows * cols).prop_map(move |v| CMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn md_fa_ignores_order(
        truth in prop::collection::vec(prop::collection::vec(0u8..2, 6), 1..12),
        extra in prop::collection::vec(prop::collection::vec(0u8..2, 6), 0..4),
        keep in prop::collection::vec(any::<bool>(), 12),
        seed in any::<u64>(),
    ) {
        let mut list: BTreeSet<Vec<u8>> = truth.iter().zip(&keep).filter(|(_, k)| **k).map(|(m, _)| m.clone()).collect();
        list.extend(extra);
        let mut shuffled = truth.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let (md, fa) = md_fa(&truth, &list);
        prop_assert_eq!((md, fa), md_fa(&shuffled, &list));
        prop_assert!((0.0..=1.0).contains(&md) && (0.0..=1.0).contains(&fa));
    }

    #[test]
    fn rho_ignores_symbol_signs(s in prop::collection::vec(complex(), 1..64), flips in prop::collection::vec(any::<bool>(), 64)) {
        let flipped: Vec<Complex64> = s.iter().zip(&flips).map(|(z, f)| if *f { -z } else { *z }).collect();
        let (a, b) = (residual_rotation_rho(&s), residual_rotation_rho(&flipped));
        prop_assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
    }

    #[test]
    fn tree_code_round_trip(bits in prop::collection::vec(0u8..2, 14)) {
        let tc = TreeCode::new(7, &[0, 0, 7, 7], 99).unwrap();
        let idx: Vec<usize> = tc.encode_words(&bits).unwrap().into_iter().map(|w| w as usize + 1).collect();
        prop_assert!(idx.iter().all(|&d| (1..=128).contains(&d)));
        prop_assert_eq!(tc.path_bits(&idx), bits);
        let lists: Vec<Vec<usize>> = idx.iter().map(|&d| vec![d]).collect();
        prop_assert_eq!(tc.tree_decode(&lists).paths, vec![idx]);
    }

    #[test]
    fn preamble_estimate_is_linear(y1 in matrix(128, 2), y2 in matrix(128, 2), a in -2.0..2.0f64, nv in 0.0..3.0f64) {
        let cfg = SystemConfig::preset(PresetKind::DeskFlat);
        let a = Complex64::new(a, 0.0);
        let lhs = lmmse_preamble(&(&y1 * a + &y2), &cfg, nv).unwrap();
        let rhs = lmmse_preamble(&y1, &cfg, nv).unwrap() * a + lmmse_preamble(&y2, &cfg, nv).unwrap();
        prop_assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn interleaver_is_a_permutation(idx in prop::collection::vec(1usize..128, 4), len in 1usize..600) {
        let p = derive_interleaver(&idx, len, 5);
        let inv = invert_permutation(&p);
        prop_assert!((0..len).all(|i| inv[p[i]] == i));
        prop_assert_eq!(p.clone(), derive_interleaver(&idx, len, 5));
    }

    #[test]
    fn chi2_round_trip(dof in 1usize..600, p in 1e-6..(1.0 - 1e-6)) {
        let x = chi2_inv(dof, p).unwrap();
        prop_assert!((chi2_cdf(dof, x).unwrap() - p).abs() < 1e-9);
    }

    #[test]
    fn edge_weights_are_distances(b1 in matrix(1, 4), b2 in matrix(1, 4), k in 0usize..81) {
        let cfg = SystemConfig::preset(PresetKind::DeskFlat);
        let node = |index, block| GraphNode { index, block, err_var: 0.1 };
        let g = DecodingGraph::new(vec![vec![node(5, b1)], vec![node(9, b2)]], &[vec![5, 9]], &cfg);
        let w = g.edge_weight(0, 0, 1, 0, k);
        prop_assert!(w >= 0.0);
        prop_assert_eq!(w, g.edge_weight(1, 0, 0, 0, k));
        let direct = (g.derotated(0, 0, k) - g.derotated(1, 0, k)).norm_squared();
        prop_assert!((w - direct).abs() <= 1e-9 * (1.0 + direct));
    }

    #[test]
    fn streamed_mean_is_order_free(xs in prop::collection::vec(-1e6..1e6f64, 2..200)) {
        let mut a = Accumulator::default();
        let mut b = Accumulator::default();
        xs.iter().for_each(|&x| a.push(x));
        xs.iter().rev().for_each(|&x| b.push(x));
        let scale = xs.iter().map(|x| x.abs()).fold(1.0, f64::max);
        prop_assert!((a.moment().mean - b.moment().mean).abs() <= 1e-12 * scale);
    }
}

#[test]
fn payload_code_round_trip() {
    let cfg = SystemConfig::preset(PresetKind::DeskFlat);
    let pe = PayloadEncoding::new(&cfg).unwrap();
    let bits: Vec<u8> = (0..pe.info_len).map(|i| ((i * 7 + 3) % 5 % 2) as u8).collect();
    let cw = pe.code.encode(&bits).unwrap();
    assert!(pe.code.syndrome_ok(&cw));
    assert_eq!(pe.code.extract_info(&cw, pe.info_len), bits);
}
