use cbmt::calibration::{bce_loss, calibrated_bce, CalibrationStats};
use cbmt::data_io::{decode_mask, encode_mask, MaskLevels};
use cbmt::datamodel::{FilterMode, ProbMap, Producer, PseudoLabelMap};
use cbmt::metrics::{assd, dice};
use cbmt::pseudo::PixelFilterMask;
use ndarray::{Array2, Array3};
use proptest::collection::vec;
use proptest::prelude::*;

const SHAPE: (usize, usize, usize) = (2, 8, 8);
const N: usize = 2 * 8 * 8;

fn labels(v: Vec<u8>) -> PseudoLabelMap {
    PseudoLabelMap {
        labels: Array3::from_shape_vec(SHAPE, v).unwrap(),
        gamma_used: 0.75,
        producer_id: "p".into(),
    }
}

fn keep(v: Vec<u8>) -> PixelFilterMask {
    PixelFilterMask {
        keep: Array3::from_shape_vec(SHAPE, v).unwrap(),
        mode: FilterMode::DistanceFromLabel,
        alpha_used: 0.2,
    }
}

fn finalize(losses: &Array3<f64>, y: &PseudoLabelMap, k: &PixelFilterMask) -> Vec<(f64, f64, f64)> {
    let mut st = CalibrationStats::new(2);
    st.accumulate_stats(losses, y, k).unwrap();
    st.finalize_epoch().iter().map(|r| (r.eta_fg, r.eta_bg, r.bg_weight)).collect()
}

proptest! {
    #[test]
    fn unit_weights_match_plain_bce(p in vec(0.0f64..=1.0, N), y in vec(0u8..2, N)) {
        let probs = ProbMap::new(Array3::from_shape_vec(SHAPE, p).unwrap(), Producer::Student).unwrap();
        let y = labels(y);
        let plain = bce_loss(&probs, &y).unwrap().mean;
        let cal = calibrated_bce(&probs, &y, &CalibrationStats::new(2), &[0, 1]).unwrap();
        prop_assert!((plain - cal).abs() <= 1e-12 * plain.abs().max(1e-300));
    }

    #[test]
    fn statistics_match_direct_means(l in vec(0.0f64..5.0, N), y in vec(0u8..2, N), k in vec(0u8..2, N)) {
        let losses = Array3::from_shape_vec(SHAPE, l.clone()).unwrap();
        let recs = finalize(&losses, &labels(y.clone()), &keep(k.clone()));
        for (c, &(ef, eb, w)) in recs.iter().enumerate() {
            let idx = (c * 64)..((c + 1) * 64);
            let pick = |fg: u8| {
                let v: Vec<f64> = idx.clone().filter(|&i| k[i] == 1 && y[i] == fg).map(|i| l[i]).collect();
                (v.iter().sum::<f64>(), v.len())
            };
            let ((sf, nf), (sb, nb)) = (pick(1), pick(0));
            if nf > 0 && nb > 0 && sb > 0.0 {
                let (of, ob) = (sf / nf as f64, sb / nb as f64);
                prop_assert!((ef - of).abs() <= 1e-10 * of.max(1e-300));
                prop_assert!((eb - ob).abs() <= 1e-10 * ob);
                prop_assert!((w - of / ob).abs() <= 1e-10 * (of / ob).max(1e-300));
            } else {
                prop_assert_eq!(w, 1.0);
            }
        }
    }

    #[test]
    fn background_scaling(l in vec(0.01f64..5.0, N), y in vec(0u8..2, N), scale in 0.1f64..10.0) {
        let y = labels(y);
        let all = keep(vec![1; N]);
        let losses = Array3::from_shape_vec(SHAPE, l).unwrap();
        let mut scaled = losses.clone();
        ndarray::Zip::from(&mut scaled).and(&y.labels).for_each(|v, &lab| {
            if lab == 0 {
                *v *= scale;
            }
        });
        let a = finalize(&losses, &y, &all);
        let b = finalize(&scaled, &y, &all);
        for c in 0..2 {
            let fg = y.labels.index_axis(ndarray::Axis(0), c).iter().filter(|&&v| v == 1).count();
            if fg == 0 || fg == 64 {
                continue;
            }
            prop_assert!((a[c].0 - b[c].0).abs() <= 1e-12 * a[c].0);
            prop_assert!((b[c].2 - a[c].2 / scale).abs() <= 1e-10 * a[c].2 / scale);
        }
    }

    #[test]
    fn metric_symmetry(a in vec(0u8..2, 144), b in vec(0u8..2, 144)) {
        let a = Array2::from_shape_vec((12, 12), a).unwrap();
        let b = Array2::from_shape_vec((12, 12), b).unwrap();
        prop_assert_eq!(dice(a.view(), b.view()).unwrap(), dice(b.view(), a.view()).unwrap());
        prop_assert_eq!(assd(a.view(), b.view()).unwrap(), assd(b.view(), a.view()).unwrap());
    }

    #[test]
    fn mask_codec_round_trip(
        cells in vec(0u8..3, 64),
        levels in prop::sample::subsequence((0u8..=255).collect::<Vec<_>>(), 3),
        inverted in any::<bool>(),
    ) {
        // 0 = background, 1 = disc only, 2 = disc and cup
        let mut m = Array3::<u8>::zeros((2, 8, 8));
        for (i, &c) in cells.iter().enumerate() {
            m[[0, i / 8, i % 8]] = u8::from(c >= 1);
            m[[1, i / 8, i % 8]] = u8::from(c == 2);
        }
        let (lo, mid, hi) = (levels[0], levels[1], levels[2]);
        let lv = if inverted {
            MaskLevels { background: hi, disc: mid, cup: lo }
        } else {
            MaskLevels { background: lo, disc: mid, cup: hi }
        };
        let gray = encode_mask(&m, &lv).unwrap();
        prop_assert_eq!(decode_mask(&gray, &lv).unwrap(), m);
    }
}
