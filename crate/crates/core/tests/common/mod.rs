//! Brute-force oracles shared by the integration tests.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn brute_dice(p: &Array2<u8>, t: &Array2<u8>) -> f64 {
    let inter = p.iter().zip(t.iter()).filter(|(a, b)| **a == 1 && **b == 1).count();
    let s = p.iter().filter(|v| **v == 1).count() + t.iter().filter(|v| **v == 1).count();
    if s == 0 { 1.0 } else { 2.0 * inter as f64 / s as f64 }
}

pub fn brute_surface(m: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = m.dim();
    let mut out = vec![];
    for i in 0..h {
        for j in 0..w {
            if m[[i, j]] != 1 {
                continue;
            }
            let nb = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
            let on_surface = nb.iter().any(|(di, dj)| {
                let (y, x) = (i as i64 + di, j as i64 + dj);
                y < 0 || x < 0 || y >= h as i64 || x >= w as i64 || m[[y as usize, x as usize]] == 0
            });
            if on_surface {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn brute_assd(p: &Array2<u8>, t: &Array2<u8>) -> Option<f64> {
    let (sp, st) = (brute_surface(p), brute_surface(t));
    if sp.is_empty() || st.is_empty() {
        return None;
    }
    let nearest = |a: (usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|b| ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let s1: f64 = sp.iter().map(|&a| nearest(a, &st)).sum();
    let s2: f64 = st.iter().map(|&b| nearest(b, &sp)).sum();
    Some((s1 + s2) / (sp.len() + st.len()) as f64)
}

/// Random blobs: a few filled ellipses plus sparse speckle.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<u8> {
    let mut m = Array2::zeros((h, w));
    for _ in 0..rng.random_range(0..4) {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (rng.random_range(1.0..10.0), rng.random_range(1.0..10.0));
        for i in 0..h {
            for j in 0..w {
                let d = ((i as f64 - cy) / ry).powi(2) + ((j as f64 - cx) / rx).powi(2);
                if d <= 1.0 {
                    m[[i, j]] = 1;
                }
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        m[[rng.random_range(0..h), rng.random_range(0..w)]] = 1;
    }
    m
}

