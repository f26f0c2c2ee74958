use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{MedicationEvent, SeverityPoint};

/// Number of most recent observations the forecast line is fitted to.
pub const FORECAST_WINDOW: usize = 3;
/// Attached to every medication summary.
pub const ASSOCIATION_NOTE: &str = "association, not causation";

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Severity as a percentage of the baseline quantification value. Both
/// values zero gives 0.
pub fn severity(q_current: f64, q_initial: f64) -> Result<f64> {
    if !(q_current.is_finite() && q_initial.is_finite()) || q_current < 0.0 || q_initial < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "quantification values must be finite and nonnegative, got {q_current} and {q_initial}"
        )));
    }
    if q_initial == 0.0 {
        return if q_current == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::UndefinedBaseline { q_current })
        };
    }
    Ok(q_current / q_initial * 100.0)
}

/// Baseline state for one patient: the first strictly positive scan-level
/// Q, once seen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Baseline {
    pub q_initial: Option<f64>,
}

impl Baseline {
    /// Folds in a new scan-level Q. Returns the updated baseline and the
    /// severity of this scan, which is `None` while no baseline exists.
    pub fn observe(self, q: f64) -> Result<(Baseline, Option<f64>)> {
        match self.q_initial {
            Some(b) => Ok((self, Some(severity(q, b)?))),
            None if q > 0.0 => Ok((Baseline { q_initial: Some(q) }, Some(severity(q, q)?))),
            None => {
                severity(q, 0.0)?;
                Ok((self, None))
            }
        }
    }
}

fn days_between(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    (to - from).num_milliseconds() as f64 / 1000.0 / SECONDS_PER_DAY
}

/// Least-squares slope and intercept at `x = 0`, or `None` for fewer than
/// two distinct abscissae.
fn ols(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let xm = points.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - xm).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let slope = sxy / sxx;
    Some((slope, ym - slope * xm))
}

/// Extrapolates severity one point per day for `horizon_days` days past
/// the last observation, from a line fitted to the last
/// [`FORECAST_WINDOW`] observed points. Predictions are clamped at 0.
pub fn forecast(timeline: &[SeverityPoint], horizon_days: u32) -> Result<Vec<SeverityPoint>> {
    if horizon_days == 0 {
        return Err(Error::InvalidConfig("forecast horizon must be positive".into()));
    }
    let observed: Vec<&SeverityPoint> = timeline.iter().filter(|p| !p.is_forecast).collect();
    if observed.len() < 2 {
        return Err(Error::InsufficientPoints {
            needed: 2,
            found: observed.len(),
        });
    }
    let window = &observed[observed.len().saturating_sub(FORECAST_WINDOW)..];
    let last = window.last().expect("nonempty").timestamp;
    let pts: Vec<(f64, f64)> = window
        .iter()
        .map(|p| (days_between(last, p.timestamp), p.s))
        .collect();
    let (slope, intercept) = ols(&pts).unwrap_or((0.0, pts.last().expect("nonempty").1));
    Ok((1..=horizon_days)
        .map(|d| SeverityPoint {
            timestamp: last + Duration::days(d as i64),
            q: None,
            s: (intercept + slope * d as f64).max(0.0),
            is_forecast: true,
            scan_id: None,
        })
        .collect())
}

/// Least-squares severity slope per day over the last [`FORECAST_WINDOW`]
/// observed points, or `None` with fewer than two.
pub fn trend_slope(timeline: &[SeverityPoint]) -> Option<f64> {
    let observed: Vec<&SeverityPoint> = timeline.iter().filter(|p| !p.is_forecast).collect();
    let window = &observed[observed.len().saturating_sub(FORECAST_WINDOW)..];
    let last = window.last()?.timestamp;
    let pts: Vec<(f64, f64)> = window
        .iter()
        .map(|p| (days_between(last, p.timestamp), p.s))
        .collect();
    ols(&pts).map(|(slope, _)| slope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SlopeComparison {
    Computed {
        slope_before_per_day: f64,
        slope_after_per_day: f64,
        delta_per_day: f64,
    },
    #[serde(rename = "insufficient-data")]
    InsufficientData {
        points_before: usize,
        points_after: usize,
    },
}

/// Descriptive severity trend around one medication start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicationEffect {
    pub medication: String,
    pub start: DateTime<Utc>,
    #[serde(flatten)]
    pub comparison: SlopeComparison,
    pub note: String,
}

/// For each medication, compares the severity slope over the last
/// [`FORECAST_WINDOW`] observations before its start with the slope over the
/// first [`FORECAST_WINDOW`] at or after it. Purely descriptive.
pub fn correlate_medications(
    timeline: &[SeverityPoint],
    medications: &[MedicationEvent],
) -> Vec<MedicationEffect> {
    let observed: Vec<&SeverityPoint> = timeline.iter().filter(|p| !p.is_forecast).collect();
    medications
        .iter()
        .map(|med| {
            let split = observed.partition_point(|p| p.timestamp < med.start);
            let before = &observed[split.saturating_sub(FORECAST_WINDOW)..split];
            let after = &observed[split..(split + FORECAST_WINDOW).min(observed.len())];
            let fit = |pts: &[&SeverityPoint]| {
                let xy: Vec<(f64, f64)> = pts
                    .iter()
                    .map(|p| (days_between(med.start, p.timestamp), p.s))
                    .collect();
                ols(&xy).map(|(slope, _)| slope)
            };
            let comparison = match (fit(before), fit(after)) {
                (Some(b), Some(a)) => SlopeComparison::Computed {
                    slope_before_per_day: b,
                    slope_after_per_day: a,
                    delta_per_day: a - b,
                },
                _ => SlopeComparison::InsufficientData {
                    points_before: before.len(),
                    points_after: after.len(),
                },
            };
            MedicationEffect {
                medication: med.name.clone(),
                start: med.start,
                comparison,
                note: ASSOCIATION_NOTE.into(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn day(d: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap() + Duration::days(d)
    }

    fn series(points: &[(i64, f64)]) -> Vec<SeverityPoint> {
        points
            .iter()
            .map(|&(d, s)| SeverityPoint::observed(day(d), s, s, format!("s{d}")))
            .collect()
    }

    #[test]
    fn severity_cases() {
        assert_eq!(severity(7.25, 7.25).unwrap(), 100.0);
        assert_eq!(severity(50.0, 200.0).unwrap(), 25.0);
        assert_eq!(severity(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(severity(3.0, 0.0), Err(Error::UndefinedBaseline { .. })));
        assert!(severity(-1.0, 2.0).is_err());
        assert_eq!(severity(300.0, 100.0).unwrap(), 300.0);
    }

    #[test]
    fn baseline_is_first_positive_q() {
        let b = Baseline::default();
        let (b, s) = b.observe(0.0).unwrap();
        assert_eq!((b.q_initial, s), (None, None));
        let (b, s) = b.observe(4.0).unwrap();
        assert_eq!((b.q_initial, s), (Some(4.0), Some(100.0)));
        let (b, s) = b.observe(1.0).unwrap();
        assert_eq!((b.q_initial, s), (Some(4.0), Some(25.0)));
    }

    #[test]
    fn forecast_examples() {
        let f = forecast(&series(&[(0, 100.0), (1, 80.0), (2, 60.0)]), 2).unwrap();
        assert_eq!(f.iter().map(|p| p.s).collect::<Vec<_>>(), [40.0, 20.0]);
        assert!(f.iter().all(|p| p.is_forecast && p.q.is_none()));
        assert_eq!(f[0].timestamp, day(3));

        let f = forecast(&series(&[(0, 100.0), (2, 80.0)]), 2).unwrap();
        assert!((f[1].s - 60.0).abs() < 1e-12);

        let f = forecast(&series(&[(0, 100.0), (1, 100.0), (2, 100.0)]), 3).unwrap();
        assert!(f.iter().all(|p| p.s == 100.0));
        assert_eq!(trend_slope(&series(&[(0, 100.0), (1, 100.0)])), Some(0.0));
        assert_eq!(trend_slope(&series(&[(0, 100.0)])), None);

        let f = forecast(&series(&[(0, 60.0), (1, 30.0)]), 4).unwrap();
        assert_eq!(f.iter().map(|p| p.s).collect::<Vec<_>>(), [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn forecast_uses_last_three_and_skips_forecast_points() {
        let mut t = series(&[(0, 0.0), (1, 100.0), (2, 90.0), (3, 80.0)]);
        t.push(SeverityPoint {
            is_forecast: true,
            ..SeverityPoint::observed(day(4), 500.0, 500.0, "x")
        });
        let f = forecast(&t, 1).unwrap();
        assert!((f[0].s - 70.0).abs() < 1e-12);
        assert!(matches!(
            forecast(&series(&[(0, 1.0)]), 1),
            Err(Error::InsufficientPoints { needed: 2, found: 1 })
        ));
    }

    fn med(name: &str, start: i64) -> MedicationEvent {
        MedicationEvent {
            name: name.into(),
            start: day(start),
            end: None,
            dosage_note: String::new(),
        }
    }

    #[test]
    fn medication_slope_delta() {
        let t = series(&[(0, 100.0), (1, 95.0), (2, 90.0), (3, 85.0), (4, 70.0), (5, 55.0)]);
        let out = correlate_medications(&t, &[med("a", 3)]);
        assert_eq!(out.len(), 1);
        match out[0].comparison {
            SlopeComparison::Computed {
                slope_before_per_day,
                slope_after_per_day,
                delta_per_day,
            } => {
                assert!((slope_before_per_day + 5.0).abs() < 1e-9);
                assert!((slope_after_per_day + 15.0).abs() < 1e-9);
                assert!((delta_per_day + 10.0).abs() < 1e-9);
            }
            ref other => panic!("{other:?}"),
        }
        assert_eq!(out[0].note, ASSOCIATION_NOTE);
    }

    #[test]
    fn medication_insufficient_data() {
        let t = series(&[(0, 100.0), (1, 95.0), (2, 90.0)]);
        let out = correlate_medications(&t, &[med("early", 1), med("late", 9)]);
        for e in &out {
            assert!(matches!(e.comparison, SlopeComparison::InsufficientData { .. }));
        }
        assert!(correlate_medications(&t, &[]).is_empty());
        let json = serde_json::to_value(&out[0]).unwrap();
        assert_eq!(json["status"], "insufficient-data");
        assert_eq!(json["note"], ASSOCIATION_NOTE);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn severity_is_linear_in_current_q(q in 0.0f64..1e3, q0 in 1e-3f64..1e3, a in 0.0f64..50.0) {
            let s = severity(q, q0).unwrap();
            let sa = severity(a * q, q0).unwrap();
            prop_assert!((sa - a * s).abs() <= 1e-9 * (1.0 + a * s));
            prop_assert_eq!(severity(q0, q0).unwrap(), 100.0);
        }
    }
}
