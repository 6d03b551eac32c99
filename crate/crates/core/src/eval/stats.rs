use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{Method, SeparationScore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    pub mean_diff: f64,
}

/// Two-sided paired t-test of `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::mismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let (t, p_value) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t, df, p_value, mean_diff: mean });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p_value: (2.0 * dist.sf(t.abs())).min(1.0),
        mean_diff: mean,
    })
}

/// Number of mixtures: choose `l` of `l_tot` positions, `u` utterance
/// combinations each.
pub fn mixture_count(l_tot: usize, l: usize, u: usize) -> usize {
    if l > l_tot {
        return 0;
    }
    let k = l.min(l_tot - l);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (l_tot - i) as u128 / (i + 1) as u128;
    }
    (c as usize) * u
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleMean {
    pub target_angle_deg: f64,
    pub count: usize,
    pub mean_sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub count: usize,
    pub mean_sdr_db: f64,
    pub mean_sdr_db_left: f64,
    pub mean_sdr_db_right: f64,
    pub per_target_angle: Vec<AngleMean>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestEntry {
    pub method: Method,
    pub baseline: Method,
    pub pairs: usize,
    /// Absent with fewer than two pairs.
    pub test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub baseline: Method,
    pub methods: Vec<MethodSummary>,
    pub ttests: Vec<TTestEntry>,
    pub scores: Vec<SeparationScore>,
}

impl ExperimentReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn ttest(&self, method: Method) -> Option<&TTestEntry> {
        self.ttests.iter().find(|t| t.method == method)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn pair_key(s: &SeparationScore) -> (String, u64) {
    (s.scene_id.clone(), s.target_angle_deg.to_bits())
}

/// Means per method and target angle, and paired t-tests of every other
/// method against `baseline`, pairing rows by scene and target.
pub fn aggregate(scores: &[SeparationScore], baseline: Method) -> Result<ExperimentReport> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to aggregate"));
    }
    let mut by_method: BTreeMap<Method, Vec<&SeparationScore>> = BTreeMap::new();
    for s in scores {
        by_method.entry(s.method).or_default().push(s);
    }
    let methods = by_method
        .iter()
        .map(|(&method, rows)| {
            let mut angles: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
            for r in rows {
                // order-preserving key for finite floats of either sign
                let bits = r.target_angle_deg.to_bits();
                let key = if r.target_angle_deg < 0.0 { !bits } else { bits | (1 << 63) };
                angles.entry(key).or_insert((r.target_angle_deg, Vec::new())).1.push(r.mean_sdr_db());
            }
            MethodSummary {
                method,
                count: rows.len(),
                mean_sdr_db: mean(rows.iter().map(|r| r.mean_sdr_db())),
                mean_sdr_db_left: mean(rows.iter().map(|r| r.sdr_db_left)),
                mean_sdr_db_right: mean(rows.iter().map(|r| r.sdr_db_right)),
                per_target_angle: angles
                    .into_values()
                    .map(|(a, v)| AngleMean {
                        target_angle_deg: a,
                        count: v.len(),
                        mean_sdr_db: mean(v.into_iter()),
                    })
                    .collect(),
            }
        })
        .collect();

    let base: BTreeMap<(String, u64), f64> = by_method
        .get(&baseline)
        .map(|rows| rows.iter().map(|r| (pair_key(r), r.mean_sdr_db())).collect())
        .unwrap_or_default();
    let mut ttests = Vec::new();
    for (&method, rows) in &by_method {
        if method == baseline {
            continue;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for r in rows {
            if let Some(v) = base.get(&pair_key(r)) {
                a.push(r.mean_sdr_db());
                b.push(*v);
            }
        }
        let test = if a.len() >= 2 { Some(paired_ttest(&a, &b)?) } else { None };
        ttests.push(TTestEntry {
            method,
            baseline,
            pairs: a.len(),
            test,
        });
    }
    Ok(ExperimentReport {
        baseline,
        methods,
        ttests,
        scores: scores.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::Variant;

    // Cushny and Peebles sleep data as used in Student (1908)
    const SLEEP_1: [f64; 10] = [0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0];
    const SLEEP_2: [f64; 10] = [1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4];

    #[test]
    fn textbook_example() {
        let t = paired_ttest(&SLEEP_1, &SLEEP_2).unwrap();
        assert_eq!(t.df, 9);
        assert!((t.t - -4.0621).abs() < 5e-5, "{}", t.t);
        assert!((t.p_value - 0.002833).abs() < 5e-7, "{}", t.p_value);
        assert!((t.mean_diff - -1.58).abs() < 1e-12);
    }

    #[test]
    fn identical_samples() {
        let t = paired_ttest(&SLEEP_1, &SLEEP_1).unwrap();
        assert_eq!(t.p_value, 1.0);
        let shifted: Vec<f64> = SLEEP_1.iter().map(|v| v + 1.0).collect();
        let t = paired_ttest(&shifted, &SLEEP_1).unwrap();
        assert_eq!(t.p_value, 0.0);
    }

    #[test]
    fn small_noise_shift_is_significant() {
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let a: Vec<f64> = b.iter().enumerate().map(|(i, v)| v + 1.0 + 0.01 * (i as f64 * 1.3).cos()).collect();
        assert!(paired_ttest(&a, &b).unwrap().p_value < 0.001);
    }

    #[test]
    fn ttest_input_checks() {
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn mixture_counts() {
        assert_eq!(mixture_count(7, 2, 15), 315);
        assert_eq!(mixture_count(3, 2, 2), 6);
        assert_eq!(mixture_count(5, 2, 3), 30);
        assert_eq!(mixture_count(2, 3, 1), 0);
    }

    fn score(scene: &str, method: Method, angle: f64, l: f64, r: f64) -> SeparationScore {
        SeparationScore {
            scene_id: scene.into(),
            method,
            target_angle_deg: angle,
            interferer_angle_deg: 0.0,
            sdr_db_left: l,
            sdr_db_right: r,
            seed: 1,
        }
    }

    #[test]
    fn aggregation() {
        let messl = Method::Em(Variant::Messl);
        let eric = Method::Em(Variant::EricMessl);
        let one = aggregate(&[score("a", messl, 30.0, 2.0, 4.0)], messl).unwrap();
        assert_eq!(one.methods[0].mean_sdr_db, 3.0);

        let rows = vec![
            score("a", messl, 30.0, 1.0, 1.0),
            score("b", messl, -30.0, 2.0, 2.0),
            score("c", messl, 30.0, 4.5, 4.5),
            score("a", eric, 30.0, 1.5, 1.5),
            score("b", eric, -30.0, 2.0, 3.0),
            score("c", eric, 30.0, 5.0, 5.0),
            score("a", Method::Random, 30.0, -1.0, -1.0),
        ];
        let r = aggregate(&rows, messl).unwrap();
        assert!((r.summary(messl).unwrap().mean_sdr_db - 2.5).abs() < 1e-12);
        let e = r.summary(eric).unwrap();
        assert!((e.mean_sdr_db - 3.0).abs() < 1e-12);
        assert_eq!(e.per_target_angle.len(), 2);
        assert_eq!(e.per_target_angle[0].target_angle_deg, -30.0);
        assert!((e.per_target_angle[1].mean_sdr_db - 3.25).abs() < 1e-12);
        let t = r.ttest(eric).unwrap();
        assert_eq!(t.pairs, 3);
        assert!(t.test.is_some());
        assert_eq!(r.ttest(Method::Random).unwrap().test, None);
        assert!(r.ttest(messl).is_none());
        assert!(aggregate(&[], messl).is_err());
    }
}
