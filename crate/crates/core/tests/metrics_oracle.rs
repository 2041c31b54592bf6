//! Fast metrics against the O(n²) pairwise-distance definitions.

mod common;

use cbmt::metrics::{assd, dice, surface};
use common::{brute_assd, brute_dice, brute_surface, random_mask};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fifty_random_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2023);
    for _ in 0..50 {
        let p = random_mask(&mut rng, 32, 32);
        let t = random_mask(&mut rng, 32, 32);
        assert_eq!(surface(p.view()), brute_surface(&p));
        let d = dice(p.view(), t.view()).unwrap();
        assert!((d - brute_dice(&p, &t)).abs() <= 1e-9);
        match (assd(p.view(), t.view()).unwrap(), brute_assd(&p, &t)) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9, "{a} vs {b}"),
            (None, None) => {}
            other => panic!("definedness differs: {other:?}"),
        }
        // symmetry holds exactly
        assert_eq!(d, dice(t.view(), p.view()).unwrap());
        assert_eq!(assd(p.view(), t.view()).unwrap(), assd(t.view(), p.view()).unwrap());
    }
}

#[test]
fn translation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        // keep content away from the border so the shift stays in bounds
        let mut p = Array2::zeros((32, 32));
        let mut t = Array2::zeros((32, 32));
        p.slice_mut(ndarray::s![4..24, 4..24]).assign(&random_mask(&mut rng, 20, 20));
        t.slice_mut(ndarray::s![4..24, 4..24]).assign(&random_mask(&mut rng, 20, 20));
        // a mask touching its 20x20 window edge is still interior in 32x32
        let (dy, dx) = (rng.random_range(0..4), rng.random_range(0..4));
        let shift = |m: &Array2<u8>| {
            let mut o = Array2::zeros((32, 32));
            o.slice_mut(ndarray::s![4 + dy..24 + dy, 4 + dx..24 + dx]).assign(&m.slice(ndarray::s![4..24, 4..24]));
            o
        };
        let (ps, ts) = (shift(&p), shift(&t));
        assert_eq!(dice(p.view(), t.view()).unwrap(), dice(ps.view(), ts.view()).unwrap());
        assert_eq!(assd(p.view(), t.view()).unwrap(), assd(ps.view(), ts.view()).unwrap());
    }
}
