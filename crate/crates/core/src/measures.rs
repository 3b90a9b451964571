//! Stimulus/reaction measures built from ROI scores or regional time series.
//!
//! A measure is a finite set of weighted atoms in the domain. The source
//! carries the stimulus entry distribution, the target the reaction
//! distribution; a transport problem is well posed only when the two carry
//! the same total mass.

use thiserror::Error;

use crate::geometry::{BoundingBox, Point};

/// Relative tolerance for mass bookkeeping (balance and re-sum checks).
pub const BALANCE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("all scores are zero; cannot normalize")]
    AllZeroScores,
    #[error("length mismatch: {left} scores vs {right} positions")]
    LengthMismatch { left: usize, right: usize },
    #[error("score at index {index} is negative ({value})")]
    NegativeScore { index: usize, value: f64 },
    #[error("mass at index {index} is negative ({value})")]
    NegativeMass { index: usize, value: f64 },
    #[error("total mass must be positive (got {0})")]
    NonPositiveMass(f64),
    #[error("window [{t0}, {t1}] is invalid or outside the recorded span [0, {span}]")]
    WindowOutOfRange { t0: f64, t1: f64, span: f64 },
    #[error("roi index {index} out of range ({len} rois)")]
    RoiOutOfRange { index: usize, len: usize },
    #[error("time series is inconsistent: {0}")]
    InconsistentSeries(String),
    #[error("atom {index} lies outside the declared bounding box")]
    OutsideDomain { index: usize },
}

/// Finite nonnegative weighted point set.
///
/// Zero-mass atoms are kept so that atom indices stay aligned with ROI
/// indices across the stimulus/reaction pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicMeasure {
    points: Vec<Point>,
    masses: Vec<f64>,
    total_mass: f64,
}

impl AtomicMeasure {
    pub fn new(points: Vec<Point>, masses: Vec<f64>) -> Result<Self, MeasureError> {
        if points.len() != masses.len() {
            return Err(MeasureError::LengthMismatch { left: masses.len(), right: points.len() });
        }
        for (i, &m) in masses.iter().enumerate() {
            if m < 0.0 || !m.is_finite() {
                return Err(MeasureError::NegativeMass { index: i, value: m });
            }
        }
        let total_mass = masses.iter().sum();
        Ok(Self { points, masses, total_mass })
    }

    /// Normalizes nonnegative activity scores into atom masses summing to `m`.
    ///
    /// The mass placed at position `i` is `m * scores[i] / sum(scores)`;
    /// zero-score atoms are retained with zero mass.
    pub fn from_scores(
        scores: &[f64],
        positions: &[Point],
        m: f64,
    ) -> Result<Self, MeasureError> {
        if scores.len() != positions.len() {
            return Err(MeasureError::LengthMismatch {
                left: scores.len(),
                right: positions.len(),
            });
        }
        if m <= 0.0 || !m.is_finite() {
            return Err(MeasureError::NonPositiveMass(m));
        }
        for (i, &a) in scores.iter().enumerate() {
            if a < 0.0 || !a.is_finite() {
                return Err(MeasureError::NegativeScore { index: i, value: a });
            }
        }
        let denom: f64 = scores.iter().sum();
        if denom <= 0.0 {
            return Err(MeasureError::AllZeroScores);
        }
        let masses: Vec<f64> = scores.iter().map(|a| m * a / denom).collect();
        Self::new(positions.to_vec(), masses)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that every atom lies inside the declared domain.
    pub fn check_within(&self, bbox: &BoundingBox, tol: f64) -> Result<(), MeasureError> {
        for (i, p) in self.points.iter().enumerate() {
            if !bbox.contains(p, tol) {
                return Err(MeasureError::OutsideDomain { index: i });
            }
        }
        Ok(())
    }
}

/// Source/target pair measured against the balance condition.
///
/// Construction does not enforce balance; [`BalancedPair::validate`] reports
/// the mismatch so unbalanced inputs can be diagnosed rather than rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedPair {
    pub source: AtomicMeasure,
    pub target: AtomicMeasure,
}

/// Outcome of the balance diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub source_mass: f64,
    pub target_mass: f64,
    /// `|m+ - m-| / max(m+, m-)`; zero for the degenerate all-zero pair.
    pub relative_mismatch: f64,
    pub pass: bool,
}

impl BalancedPair {
    pub fn new(source: AtomicMeasure, target: AtomicMeasure) -> Self {
        Self { source, target }
    }

    pub fn validate(&self) -> BalanceReport {
        let mp = self.source.total_mass();
        let mm = self.target.total_mass();
        let denom = mp.max(mm);
        let relative_mismatch = if denom > 0.0 { (mp - mm).abs() / denom } else { 0.0 };
        BalanceReport {
            source_mass: mp,
            target_mass: mm,
            relative_mismatch,
            pass: relative_mismatch <= BALANCE_RTOL,
        }
    }

    pub fn is_balanced(&self) -> bool {
        self.validate().pass
    }
}

/// How the baseline-corrected signal enters the window integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Integrate the positive part, the fMRI-style score.
    PositivePart,
    /// Integrate the absolute value, the source-space EEG/MEG variant.
    Absolute,
}

/// Uniformly sampled regional signals with a per-ROI baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTimeSeries {
    positions: Vec<Point>,
    /// One row per ROI, uniform sampling at `time_step`.
    samples: Vec<Vec<f64>>,
    time_step: f64,
    baseline: Vec<f64>,
}

impl RoiTimeSeries {
    pub fn new(
        positions: Vec<Point>,
        samples: Vec<Vec<f64>>,
        time_step: f64,
        baseline: Vec<f64>,
    ) -> Result<Self, MeasureError> {
        if time_step <= 0.0 || !time_step.is_finite() {
            return Err(MeasureError::InconsistentSeries(format!(
                "time_step must be positive (got {time_step})"
            )));
        }
        if samples.len() != positions.len() || baseline.len() != positions.len() {
            return Err(MeasureError::InconsistentSeries(format!(
                "{} rois vs {} sample rows vs {} baselines",
                positions.len(),
                samples.len(),
                baseline.len()
            )));
        }
        let n = samples.first().map(Vec::len).unwrap_or(0);
        if n < 2 {
            return Err(MeasureError::InconsistentSeries(
                "need at least two samples per roi".into(),
            ));
        }
        if samples.iter().any(|row| row.len() != n) {
            return Err(MeasureError::InconsistentSeries("ragged sample matrix".into()));
        }
        Ok(Self { positions, samples, time_step, baseline })
    }

    /// Builds the series with baselines set to the per-ROI mean over a
    /// pre-stimulus window (window endpoints snap to the sample grid).
    pub fn with_baseline_window(
        positions: Vec<Point>,
        samples: Vec<Vec<f64>>,
        time_step: f64,
        window: (f64, f64),
    ) -> Result<Self, MeasureError> {
        let zeros = vec![0.0; positions.len()];
        let mut ts = Self::new(positions, samples, time_step, zeros)?;
        let (i0, i1) = ts.snap_window(window.0, window.1)?;
        for (roi, row) in ts.samples.iter().enumerate() {
            let slice = &row[i0..=i1];
            ts.baseline[roi] = slice.iter().sum::<f64>() / slice.len() as f64;
        }
        Ok(ts)
    }

    pub fn n_rois(&self) -> usize {
        self.positions.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.first().map(Vec::len).unwrap_or(0)
    }

    pub fn time_step(&self) -> f64 {
        self.time_step
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    /// Recorded span `(n_samples - 1) * time_step`.
    pub fn span(&self) -> f64 {
        (self.n_samples() - 1) as f64 * self.time_step
    }

    fn snap_window(&self, t0: f64, t1: f64) -> Result<(usize, usize), MeasureError> {
        let span = self.span();
        let half = 0.5 * self.time_step;
        if t0 >= t1 || !t0.is_finite() || !t1.is_finite() || t0 < -half || t1 > span + half {
            return Err(MeasureError::WindowOutOfRange { t0, t1, span });
        }
        let last = self.n_samples() - 1;
        let snap = |t: f64| -> usize {
            let i = (t / self.time_step).round();
            (i.max(0.0) as usize).min(last)
        };
        Ok((snap(t0), snap(t1)))
    }

    /// Window score: trapezoidal integral of the baseline-corrected signal,
    /// clipped to its positive part or taken in absolute value.
    ///
    /// The window snaps to the nearest samples, so nested windows always
    /// yield nested index ranges and the score is monotone in the window.
    pub fn score_from_window(
        &self,
        roi: usize,
        t0: f64,
        t1: f64,
        mode: WindowMode,
    ) -> Result<f64, MeasureError> {
        if roi >= self.n_rois() {
            return Err(MeasureError::RoiOutOfRange { index: roi, len: self.n_rois() });
        }
        let (i0, i1) = self.snap_window(t0, t1)?;
        let base = self.baseline[roi];
        let f = |y: f64| -> f64 {
            let v = y - base;
            match mode {
                WindowMode::PositivePart => v.max(0.0),
                WindowMode::Absolute => v.abs(),
            }
        };
        let row = &self.samples[roi];
        let mut acc = 0.0;
        for k in i0..i1 {
            acc += 0.5 * (f(row[k]) + f(row[k + 1])) * self.time_step;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pts(n: usize) -> Vec<Point> {
        (0..n).map(|i| Point::new(i as f64, 0.0, 0.0)).collect()
    }

    #[test]
    fn equal_scores_split_mass() {
        let m = AtomicMeasure::from_scores(&[1.0, 1.0], &pts(2), 1.0).unwrap();
        assert_eq!(m.masses(), &[0.5, 0.5]);
        assert_abs_diff_eq!(m.total_mass(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn normalization_keeps_zero_atoms() {
        let m = AtomicMeasure::from_scores(&[3.0, 1.0, 0.0], &pts(3), 2.0).unwrap();
        assert_eq!(m.masses(), &[1.5, 0.5, 0.0]);
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn single_atom_gets_total_mass() {
        let m = AtomicMeasure::from_scores(&[5.0], &pts(1), 7.0).unwrap();
        assert_eq!(m.masses(), &[7.0]);
    }

    #[test]
    fn zero_scores_rejected() {
        let err = AtomicMeasure::from_scores(&[0.0, 0.0], &pts(2), 1.0).unwrap_err();
        assert_eq!(err, MeasureError::AllZeroScores);
    }

    #[test]
    fn length_mismatch_rejected() {
        let err = AtomicMeasure::from_scores(&[1.0], &pts(2), 1.0).unwrap_err();
        assert!(matches!(err, MeasureError::LengthMismatch { .. }));
    }

    #[test]
    fn negative_score_rejected() {
        let err = AtomicMeasure::from_scores(&[1.0, -0.5], &pts(2), 1.0).unwrap_err();
        assert!(matches!(err, MeasureError::NegativeScore { index: 1, .. }));
    }

    #[test]
    fn balance_report_examples() {
        let a = AtomicMeasure::new(pts(1), vec![1.0]).unwrap();
        let b = AtomicMeasure::new(pts(1), vec![1.0]).unwrap();
        assert!(BalancedPair::new(a.clone(), b).validate().pass);

        let c = AtomicMeasure::new(pts(1), vec![0.9]).unwrap();
        let rep = BalancedPair::new(a, c).validate();
        assert!(!rep.pass);
        assert_abs_diff_eq!(rep.relative_mismatch, 0.1, epsilon = 1e-12);

        let z0 = AtomicMeasure::new(pts(1), vec![0.0]).unwrap();
        let z1 = AtomicMeasure::new(vec![], vec![]).unwrap();
        assert!(BalancedPair::new(z0, z1).validate().pass);
    }

    fn ramp_series() -> RoiTimeSeries {
        let n = 101;
        let dt = 0.01;
        let row: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        RoiTimeSeries::new(pts(1), vec![row], dt, vec![0.0]).unwrap()
    }

    #[test]
    fn constant_window_scores() {
        let dt = 0.1;
        let ones = vec![1.0; 11];
        let ts = RoiTimeSeries::new(pts(1), vec![ones], dt, vec![0.0]).unwrap();
        let s = ts.score_from_window(0, 0.0, 1.0, WindowMode::PositivePart).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);

        let neg = vec![-2.0; 11];
        let ts = RoiTimeSeries::new(pts(1), vec![neg], dt, vec![0.0]).unwrap();
        let s = ts.score_from_window(0, 0.0, 1.0, WindowMode::PositivePart).unwrap();
        assert_eq!(s, 0.0);
        let s = ts.score_from_window(0, 0.0, 1.0, WindowMode::Absolute).unwrap();
        assert_abs_diff_eq!(s, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn ramp_window_matches_exact_integral() {
        // Trapezoid is exact on an affine profile; the closed form is 1/2.
        let ts = ramp_series();
        let s = ts.score_from_window(0, 0.0, 1.0, WindowMode::PositivePart).unwrap();
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn window_out_of_range() {
        let ts = ramp_series();
        assert!(matches!(
            ts.score_from_window(0, 0.5, 0.5, WindowMode::Absolute),
            Err(MeasureError::WindowOutOfRange { .. })
        ));
        assert!(matches!(
            ts.score_from_window(0, 0.0, 2.0, WindowMode::Absolute),
            Err(MeasureError::WindowOutOfRange { .. })
        ));
        assert!(matches!(
            ts.score_from_window(0, -1.0, 0.5, WindowMode::Absolute),
            Err(MeasureError::WindowOutOfRange { .. })
        ));
    }

    #[test]
    fn baseline_window_mean() {
        let dt = 1.0;
        let row = vec![2.0, 4.0, 0.0, 0.0];
        let ts = RoiTimeSeries::with_baseline_window(pts(1), vec![row], dt, (0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(ts.baseline()[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn atoms_outside_domain_detected() {
        let bbox = BoundingBox::unit(2);
        let m = AtomicMeasure::new(vec![Point::new(2.0, 0.0, 0.0)], vec![1.0]).unwrap();
        assert!(matches!(
            m.check_within(&bbox, 1e-9),
            Err(MeasureError::OutsideDomain { index: 0 })
        ));
    }

    proptest! {
        #[test]
        fn scores_are_scale_invariant(
            raw in proptest::collection::vec(0.0f64..10.0, 1..8),
            lambda in 1e-3f64..1e3,
            m in 0.1f64..10.0,
        ) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let positions = pts(raw.len());
            let a = AtomicMeasure::from_scores(&raw, &positions, m).unwrap();
            let scaled: Vec<f64> = raw.iter().map(|v| v * lambda).collect();
            let b = AtomicMeasure::from_scores(&scaled, &positions, m).unwrap();
            for (x, y) in a.masses().iter().zip(b.masses()) {
                prop_assert!((x - y).abs() <= 1e-12 * m.max(1.0));
            }
        }

        #[test]
        fn normalized_total_mass_matches(
            raw in proptest::collection::vec(0.0f64..10.0, 1..8),
            m in 0.1f64..10.0,
        ) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let a = AtomicMeasure::from_scores(&raw, &pts(raw.len()), m).unwrap();
            prop_assert!((a.total_mass() - m).abs() <= 1e-12 * m);
        }

        #[test]
        fn window_score_is_monotone(
            t0 in 0.0f64..0.4,
            t1 in 0.5f64..1.0,
            grow0 in 0.0f64..0.3,
            grow1 in 0.0f64..0.3,
            vals in proptest::collection::vec(-1.0f64..1.0, 11),
        ) {
            let ts = RoiTimeSeries::new(pts(1), vec![vals], 0.1, vec![0.0]).unwrap();
            let inner = ts.score_from_window(0, t0, t1, WindowMode::PositivePart).unwrap();
            let wider = ts
                .score_from_window(0, (t0 - grow0).max(0.0), (t1 + grow1).min(1.0),
                    WindowMode::PositivePart)
                .unwrap();
            prop_assert!(inner <= wider + 1e-12);
        }
    }
}
