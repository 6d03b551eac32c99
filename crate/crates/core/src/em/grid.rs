use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::CombParams;

/// Candidate comb parameters per real source. Amplitudes stay at their
/// initial values; only the three delays vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub candidates: Vec<Vec<CombParams>>,
}

impl ParamGrid {
    pub fn sources(&self) -> usize {
        self.candidates.len()
    }

    pub fn total(&self) -> usize {
        self.candidates.iter().map(Vec::len).sum()
    }
}

/// `steps` values spread uniformly over `center +- range`; the middle one is
/// `center` exactly.
fn axis(center: f64, range: f64, steps: usize) -> Vec<f64> {
    let half = (steps / 2) as i64;
    (-half..=half)
        .map(|i| if i == 0 { center } else { center + range * i as f64 / half as f64 })
        .collect()
}

/// Cartesian product over (n_ds, n_df, n_st), n_ds outermost. Without
/// reflections the reflection amplitudes are zeroed and only n_ds varies.
pub fn build_param_grid(init: &[CombParams], range_s: f64, steps: [usize; 3], reflections: bool) -> Result<ParamGrid> {
    if init.is_empty() {
        return Err(Error::invalid("no sources to build a grid for"));
    }
    if let Some(s) = steps.iter().find(|s| **s == 0 || **s % 2 == 0) {
        return Err(Error::invalid(format!("grid steps must be odd, got {s}")));
    }
    if !(range_s >= 0.0) || !range_s.is_finite() {
        return Err(Error::invalid(format!("grid range {range_s} s")));
    }
    let mut candidates = Vec::with_capacity(init.len());
    for c in init {
        c.validate()?;
        let mut list = Vec::new();
        if reflections {
            for ds in axis(c.n_ds_s, range_s, steps[0]) {
                for df in axis(c.n_df_s, range_s, steps[1]) {
                    for st in axis(c.n_st_s, range_s, steps[2]) {
                        list.push(CombParams {
                            n_ds_s: ds,
                            n_df_s: df.max(0.0),
                            n_st_s: st,
                            ..*c
                        });
                    }
                }
            }
        } else {
            let base = c.without_reflection();
            for ds in axis(c.n_ds_s, range_s, steps[0]) {
                list.push(CombParams { n_ds_s: ds, ..base });
            }
        }
        candidates.push(list);
    }
    Ok(ParamGrid { candidates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init() -> CombParams {
        CombParams {
            n_ds_s: 2e-4,
            n_df_s: 6e-3,
            n_st_s: -1e-4,
            p01: 1.0,
            p11: 0.5,
            p02: 0.9,
            p12: 0.4,
        }
    }

    #[test]
    fn full_grid_has_center_and_extremes() {
        let g = build_param_grid(&[init()], 0.13e-3, [5, 5, 5], true).unwrap();
        assert_eq!(g.candidates[0].len(), 125);
        assert_eq!(g.candidates[0][62], init());
        let ds: Vec<f64> = g.candidates[0].iter().map(|c| c.n_ds_s).collect();
        let lo = ds.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - (2e-4 - 0.13e-3)).abs() < 1e-15);
        assert!((hi - (2e-4 + 0.13e-3)).abs() < 1e-15);
        for c in &g.candidates[0] {
            assert_eq!((c.p01, c.p11, c.p02, c.p12), (1.0, 0.5, 0.9, 0.4));
            assert!((c.n_df_s - 6e-3).abs() <= 0.13e-3 + 1e-15);
            assert!((c.n_st_s + 1e-4).abs() <= 0.13e-3 + 1e-15);
        }
    }

    #[test]
    fn single_step_is_init() {
        let g = build_param_grid(&[init(), init()], 0.13e-3, [1, 1, 1], true).unwrap();
        assert_eq!(g.candidates, vec![vec![init()], vec![init()]]);
    }

    #[test]
    fn direct_only_grid_varies_n_ds() {
        let g = build_param_grid(&[init()], 0.19e-3, [5, 5, 5], false).unwrap();
        assert_eq!(g.candidates[0].len(), 5);
        assert!(g.candidates[0].iter().all(|c| !c.has_reflection()));
        assert_eq!(g.candidates[0][2].n_ds_s, 2e-4);
    }

    #[test]
    fn even_steps_rejected() {
        assert!(build_param_grid(&[init()], 1e-4, [4, 5, 5], true).is_err());
        assert!(build_param_grid(&[init()], 1e-4, [5, 5, 0], true).is_err());
    }
}
