//! Disparity error statistics: mean absolute error, RMS error and the
//! percentage of pixels whose error exceeds 0.5, 1, 2 and 4 px.
//!
//! An error exactly equal to a threshold is not counted as bad. Pixels with
//! non-finite or non-positive ground truth never enter the statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BAD_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelDomain {
    AllValid,
    MaskOnly,
}

impl std::fmt::Display for PixelDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PixelDomain::AllValid => f.write_str("all_valid"),
            PixelDomain::MaskOnly => f.write_str("mask_only"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_err: f64,
    pub rms: f64,
    /// Threshold (formatted with one decimal, e.g. "0.5") to percentage.
    pub bad: BTreeMap<String, f64>,
    pub pixel_domain: PixelDomain,
    pub n_pixels: usize,
}

impl EvalReport {
    pub fn bad_at(&self, threshold: f64) -> Option<f64> {
        self.bad.get(&threshold_key(threshold)).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

/// Pixel-weighted running sums; lets a whole dataset be reduced to one
/// report without storing the error maps.
#[derive(Clone, Debug)]
pub struct ErrorAccumulator {
    domain: PixelDomain,
    n: usize,
    sum_abs: f64,
    sum_sq: f64,
    over: [usize; 4],
}

impl ErrorAccumulator {
    pub fn new(domain: PixelDomain) -> Self {
        Self {
            domain,
            n: 0,
            sum_abs: 0.0,
            sum_sq: 0.0,
            over: [0; 4],
        }
    }

    pub fn push(&mut self, err: f64) {
        let e = err.abs();
        self.n += 1;
        self.sum_abs += e;
        self.sum_sq += e * e;
        for (count, t) in self.over.iter_mut().zip(BAD_THRESHOLDS) {
            if e > t {
                *count += 1;
            }
        }
    }

    /// Add every in-domain pixel of one prediction.
    pub fn add(
        &mut self,
        pred: ArrayView2<f32>,
        gt: ArrayView2<f32>,
        valid: ArrayView2<bool>,
        object_mask: Option<ArrayView2<u16>>,
    ) -> Result<()> {
        check_shapes(&pred, &gt, &valid, object_mask.as_ref())?;
        if self.domain == PixelDomain::MaskOnly && object_mask.is_none() {
            return Err(Error::EmptyDomain("mask_only domain requested without an object mask".into()));
        }
        for ((idx, &g), &p) in gt.indexed_iter().zip(pred.iter()) {
            if !valid[idx] || !g.is_finite() || g <= 0.0 {
                continue;
            }
            if let Some(m) = &object_mask {
                if self.domain == PixelDomain::MaskOnly && m[idx] == 0 {
                    continue;
                }
            }
            self.push(p as f64 - g as f64);
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.n == 0 {
            return Err(Error::EmptyDomain(format!("no pixels in the {} domain", self.domain)));
        }
        let n = self.n as f64;
        let bad = BAD_THRESHOLDS
            .iter()
            .zip(self.over)
            .map(|(t, c)| (threshold_key(*t), 100.0 * c as f64 / n))
            .collect();
        Ok(EvalReport {
            avg_err: self.sum_abs / n,
            rms: (self.sum_sq / n).sqrt(),
            bad,
            pixel_domain: self.domain,
            n_pixels: self.n,
        })
    }
}

fn check_shapes(
    pred: &ArrayView2<f32>,
    gt: &ArrayView2<f32>,
    valid: &ArrayView2<bool>,
    mask: Option<&ArrayView2<u16>>,
) -> Result<()> {
    let s = gt.dim();
    if pred.dim() != s || valid.dim() != s || mask.map(|m| m.dim() != s).unwrap_or(false) {
        return Err(Error::Shape(format!(
            "prediction {:?}, ground truth {:?}, valid {:?}, mask {:?}",
            pred.dim(),
            s,
            valid.dim(),
            mask.map(|m| m.dim())
        )));
    }
    Ok(())
}

/// Evaluate one prediction. With an object mask the domain is restricted
/// to pixels whose mask id is nonzero; without one, all valid pixels count.
pub fn evaluate(
    pred: ArrayView2<f32>,
    gt: ArrayView2<f32>,
    valid: ArrayView2<bool>,
    object_mask: Option<ArrayView2<u16>>,
) -> Result<EvalReport> {
    let domain = if object_mask.is_some() {
        PixelDomain::MaskOnly
    } else {
        PixelDomain::AllValid
    };
    let mut acc = ErrorAccumulator::new(domain);
    acc.add(pred, gt, valid, object_mask)?;
    acc.finish()
}

/// Mean absolute disparity error over all valid pixels.
pub fn end_point_error(pred: ArrayView2<f32>, gt: ArrayView2<f32>, valid: ArrayView2<bool>) -> Result<f64> {
    Ok(evaluate(pred, gt, valid, None)?.avg_err)
}

/// Fixed-width table with the columns AvgErr, RMS, bad 0.5/1.0/2.0/4.0.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$} | {:>8} | {:>8}", "Method", "AvgErr", "RMS");
    for t in BAD_THRESHOLDS {
        let _ = write!(out, " | {:>8}", format!("bad {t:.1}"));
    }
    out.push('\n');
    let width = out.trim_end().len();
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{:<name_w$} | {:>8.3} | {:>8.3}", name, r.avg_err, r.rms);
        for t in BAD_THRESHOLDS {
            let _ = write!(out, " | {:>8.4}", r.bad_at(t).unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, ShapeBuilder};
    use proptest::prelude::*;

    fn fixture(errors: &[f32]) -> (Array2<f32>, Array2<f32>, Array2<bool>) {
        let n = errors.len();
        let gt = Array2::from_elem((1, n), 10.0f32);
        let pred = Array2::from_shape_vec((1, n), errors.iter().map(|e| 10.0 + e).collect()).unwrap();
        (pred, gt, Array2::from_elem((1, n), true))
    }

    #[test]
    fn perfect_prediction() {
        let (_, gt, valid) = fixture(&[0.0; 6]);
        let r = evaluate(gt.view(), gt.view(), valid.view(), None).unwrap();
        assert_eq!(r.avg_err, 0.0);
        assert_eq!(r.rms, 0.0);
        assert!(r.bad.values().all(|b| *b == 0.0));
    }

    #[test]
    fn four_pixel_hand_fixture() {
        let gt = Array2::from_elem((2, 2), 5.0f64);
        let pred = Array2::from_shape_vec((2, 2), vec![5.3, 4.3, 6.5, 0.8]).unwrap();
        let mut acc = ErrorAccumulator::new(PixelDomain::AllValid);
        for (p, g) in pred.iter().zip(gt.iter()) {
            acc.push(p - g);
        }
        let r = acc.finish().unwrap();
        assert!((r.avg_err - 1.675).abs() < 1e-12);
        assert!((r.rms - (20.47f64 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.bad_at(0.5), Some(75.0));
        assert_eq!(r.bad_at(1.0), Some(50.0));
        assert_eq!(r.bad_at(2.0), Some(25.0));
        assert_eq!(r.bad_at(4.0), Some(25.0));
    }

    #[test]
    fn threshold_is_strict() {
        let (pred, gt, valid) = fixture(&[1.0, 2.0, 0.5, 4.0]);
        let r = evaluate(pred.view(), gt.view(), valid.view(), None).unwrap();
        assert_eq!(r.bad_at(0.5), Some(75.0));
        assert_eq!(r.bad_at(1.0), Some(50.0));
        assert_eq!(r.bad_at(2.0), Some(25.0));
        assert_eq!(r.bad_at(4.0), Some(0.0));
    }

    #[test]
    fn constant_offset_epe() {
        let gt = Array2::from_shape_fn((5, 7), |(i, j)| 1.0 + (i * 7 + j) as f32);
        let pred = gt.mapv(|v| v + 1.0);
        let valid = Array2::from_elem((5, 7), true);
        assert!((end_point_error(pred.view(), gt.view(), valid.view()).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(end_point_error(gt.view(), gt.view(), valid.view()).unwrap(), 0.0);
    }

    #[test]
    fn invalid_and_nonpositive_gt_excluded() {
        let gt = Array2::from_shape_vec((1, 4), vec![f32::INFINITY, 0.0, -2.0, 3.0]).unwrap();
        let pred = Array2::from_elem((1, 4), 4.0f32);
        let valid = Array2::from_elem((1, 4), true);
        let r = evaluate(pred.view(), gt.view(), valid.view(), None).unwrap();
        assert_eq!(r.n_pixels, 1);
        assert_eq!(r.avg_err, 1.0);
    }

    #[test]
    fn empty_domain_is_an_error() {
        let (pred, gt, _) = fixture(&[1.0, 2.0]);
        let none = Array2::from_elem((1, 2), false);
        assert!(matches!(
            evaluate(pred.view(), gt.view(), none.view(), None),
            Err(Error::EmptyDomain(_))
        ));
        let valid = Array2::from_elem((1, 2), true);
        let mask = Array2::<u16>::zeros((1, 2));
        assert!(matches!(
            evaluate(pred.view(), gt.view(), valid.view(), Some(mask.view())),
            Err(Error::EmptyDomain(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (pred, _, valid) = fixture(&[1.0, 2.0]);
        let gt = Array2::from_elem((2, 1), 1.0f32);
        assert!(matches!(evaluate(pred.view(), gt.view(), valid.view(), None), Err(Error::Shape(_))));
    }

    #[test]
    fn json_has_expected_fields() {
        let (pred, gt, valid) = fixture(&[0.3, 0.7]);
        let r = evaluate(pred.view(), gt.view(), valid.view(), None).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in ["avg_err", "rms", "bad", "pixel_domain", "n_pixels"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["pixel_domain"], "all_valid");
        assert!(v["bad"].get("0.5").is_some());
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn table_layout() {
        let (pred, gt, valid) = fixture(&[0.3, 0.7]);
        let r = evaluate(pred.view(), gt.view(), valid.view(), None).unwrap();
        let t = format_table(&[("toy".into(), r)]);
        let header = t.lines().next().unwrap();
        for col in ["AvgErr", "RMS", "bad 0.5", "bad 1.0", "bad 2.0", "bad 4.0"] {
            assert!(header.contains(col));
        }
        assert_eq!(t.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn report_invariants(errs in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
            let (pred, gt, valid) = fixture(&errs);
            let r = evaluate(pred.view(), gt.view(), valid.view(), None).unwrap();
            prop_assert!(r.avg_err >= 0.0);
            prop_assert!(r.rms + 1e-9 >= r.avg_err);
            let bads: Vec<f64> = BAD_THRESHOLDS.iter().map(|t| r.bad_at(*t).unwrap()).collect();
            for w in bads.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            prop_assert!(bads.iter().all(|b| (0.0..=100.0).contains(b)));
        }

        #[test]
        fn full_mask_matches_all_valid(errs in proptest::collection::vec(-5.0f32..5.0, 1..40), seed in 0u64..1000) {
            let (pred, gt, mut valid) = fixture(&errs);
            for (i, v) in valid.iter_mut().enumerate() {
                *v = (i as u64 + seed) % 3 != 0 || i == 0;
            }
            let mask = Array2::from_shape_vec((1, errs.len()).f(), vec![7u16; errs.len()]).unwrap();
            let a = evaluate(pred.view(), gt.view(), valid.view(), None).unwrap();
            let m = evaluate(pred.view(), gt.view(), valid.view(), Some(mask.view())).unwrap();
            prop_assert_eq!(a.avg_err, m.avg_err);
            prop_assert_eq!(a.rms, m.rms);
            prop_assert_eq!(a.bad, m.bad);
        }
    }
}
