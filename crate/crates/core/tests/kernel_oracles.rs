mod common;

use common::cases::{self, *};
use common::*;
use lms_core::decoder::position_maps;
use lms_core::loss::{boundary_mask, raw_boundary, LabelVolume};
use lms_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sweep(label: &str, tol: f64, case: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let worst = cases::sweep(case);
    assert!(worst <= tol, "{label}: worst scaled error {worst:e} > {tol:e}");
}

#[test]
fn conv3d_matches_direct_loops() {
    sweep("conv3d f32", TOL_F32, |r| conv_case::<f32>(r, false));
    sweep("conv3d f64", TOL_F64, |r| conv_case::<f64>(r, false));
}

#[test]
fn depthwise_conv3d_matches_direct_loops() {
    sweep("dwconv3d f32", TOL_F32, |r| conv_case::<f32>(r, true));
    sweep("dwconv3d f64", TOL_F64, |r| conv_case::<f64>(r, true));
}

#[test]
fn conv_transpose3d_matches_scatter() {
    sweep("convT f32", TOL_F32, conv_t_case::<f32>);
    sweep("convT f64", TOL_F64, conv_t_case::<f64>);
}

#[test]
fn maxpool_matches_window_scan() {
    sweep("maxpool f32", TOL_F32, pool_case::<f32>);
    sweep("maxpool f64", TOL_F64, pool_case::<f64>);
}

#[test]
fn group_norm_matches_two_pass() {
    sweep("groupnorm f32", TOL_F32, gn_case::<f32>);
    sweep("groupnorm f64", TOL_F64, gn_case::<f64>);
}

#[test]
fn trilinear_matches_corner_sum() {
    sweep("trilinear f32", TOL_F32, trilinear_case::<f32>);
    sweep("trilinear f64", TOL_F64, trilinear_case::<f64>);
}

#[test]
fn position_maps_match_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..CASES {
        let (b, k) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
        let ext = [rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6)];
        let a = Tensor::<f64>::from_fn(vec![b, k, 3], |_| rng.gen_range(0.0..1.0));
        let got = position_maps(&a, ext).unwrap();
        let want = common::position_maps(a.data(), b, k, ext);
        // Same left-to-right summation order as the oracle.
        assert_eq!(got.data(), &want[..]);
    }
}

#[test]
fn position_maps_hand_values() {
    let zero = Tensor::<f64>::zeros(vec![1, 1, 3]);
    let p = position_maps(&zero, [2, 2, 2]).unwrap();
    assert_eq!(p.data()[0], 0.0);
    assert_eq!(p.data()[7], 1.5);
    let half = Tensor::<f64>::full(vec![1, 1, 3], 0.5);
    let p = position_maps(&half, [2, 2, 2]).unwrap();
    assert_eq!(p.data()[(1 * 2 + 0) * 2 + 1], -0.5);
}

fn split_labels(n: usize, at: usize) -> LabelVolume {
    let data = (0..n * n * n).map(|i| u32::from(i / (n * n) >= at)).collect();
    LabelVolume::new([1, n, n, n], data, 2).unwrap()
}

#[test]
fn boundary_mask_matches_chebyshev_search() {
    let split = split_labels(16, 8);
    let m = boundary_mask(&split, 3);
    let want = chebyshev_mask(&split, 3);
    assert_eq!(m.data, want);
    // Raw boundary is depths 7 and 8; dilation covers depths 4..=11.
    assert_eq!(m.count(), 8 * 16 * 16);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..4 {
        let c = [rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0)];
        let r = [rng.gen_range(2.0..5.0), rng.gen_range(2.0..5.0), rng.gen_range(2.0..5.0)];
        let data = (0..4096)
            .map(|i| {
                let p = [(i / 256) as f64, ((i / 16) % 16) as f64, (i % 16) as f64];
                u32::from((0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0)
            })
            .collect();
        let labels = LabelVolume::new([1, 16, 16, 16], data, 2).unwrap();
        assert_eq!(raw_boundary(&labels), common::raw_boundary(&labels));
        assert_eq!(boundary_mask(&labels, 3).data, chebyshev_mask(&labels, 3));
        assert_eq!(boundary_mask(&labels, 1).data, chebyshev_mask(&labels, 1));
    }
}

#[test]
fn boundary_mask_small_cases() {
    assert_eq!(boundary_mask(&split_labels(4, 2), 3).count(), 64);
    let single = LabelVolume::new([1, 4, 4, 4], vec![1; 64], 2).unwrap();
    assert_eq!(boundary_mask(&single, 3).count(), 0);
}
