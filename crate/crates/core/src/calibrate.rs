//! Fits the per-byte CPU costs so a reference scenario hits a target
//! scheduling delay and CPU average.

use serde::Serialize;

use crate::error::ScenarioError;
use crate::model::CostModel;
use crate::runner::{build_images, run_variant, trial_seeds, Variant};
use crate::scenario::{CostSection, ScenarioConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CalibrationTarget {
    /// Seconds per compressed GB.
    pub sd: f64,
    /// Percent of all cores.
    pub cpu_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fit {
    pub cost: CostModel,
    pub sd: f64,
    pub cpu_pct: f64,
    pub iterations: usize,
}

/// Mean SD and CPU average of `cfg` over its trials, with `cost` in place
/// of the configured cost model.
pub fn measure(cfg: &ScenarioConfig, cost: &CostModel) -> Result<(f64, f64), ScenarioError> {
    let mut cfg = cfg.clone();
    cfg.cost = CostSection::from_model(cost);
    let images = build_images(&cfg)?;
    let seeds = trial_seeds(cfg.scenario.seed, cfg.scenario.trials);
    let (mut sd, mut cpu) = (0.0, 0.0);
    for seed in &seeds {
        let (r, _) = run_variant(&cfg, &images, Variant::Single, *seed)?;
        let missing = || ScenarioError::Validation("calibration scenario produced no attack window".into());
        sd += r.sd.ok_or_else(missing)?;
        cpu += r.cpu_avg.ok_or_else(missing)?;
    }
    let n = seeds.len() as f64;
    Ok((sd / n, cpu / n))
}

/// Newton iteration on (download, unpack) CPU cost with a finite-difference
/// Jacobian. Everything else in `start` stays fixed.
pub fn fit_cpu_costs(cfg: &ScenarioConfig, target: CalibrationTarget, start: CostModel) -> Result<Fit, ScenarioError> {
    let mut x = [start.download_cpu_per_byte, start.unpack_cpu_per_byte];
    let with = |x: [f64; 2]| CostModel {
        download_cpu_per_byte: x[0],
        unpack_cpu_per_byte: x[1],
        ..start.clone()
    };
    let residual = |x: [f64; 2]| -> Result<[f64; 2], ScenarioError> {
        let (sd, cpu) = measure(cfg, &with(x))?;
        Ok([sd - target.sd, cpu - target.cpu_pct])
    };
    let mut r = residual(x)?;
    let mut iterations = 0;
    while iterations < 30 && (r[0].abs() > 1e-4 * target.sd || r[1].abs() > 1e-4 * target.cpu_pct) {
        iterations += 1;
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let h = x[j] * 1e-3;
            let mut xh = x;
            xh[j] += h;
            let rh = residual(xh)?;
            for i in 0..2 {
                jac[i][j] = (rh[i] - r[i]) / h;
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(ScenarioError::Validation("calibration Jacobian is singular".into()));
        }
        let dx0 = (jac[1][1] * r[0] - jac[0][1] * r[1]) / det;
        let dx1 = (jac[0][0] * r[1] - jac[1][0] * r[0]) / det;
        // Halve the step until the costs stay positive and the error shrinks.
        let norm = |r: [f64; 2]| (r[0] / target.sd).powi(2) + (r[1] / target.cpu_pct).powi(2);
        let mut step = 1.0;
        loop {
            let cand = [x[0] - step * dx0, x[1] - step * dx1];
            if cand[0] > 0.0 && cand[1] > 0.0 {
                let rc = residual(cand)?;
                if norm(rc) < norm(r) || step < 1e-3 {
                    x = cand;
                    r = rc;
                    break;
                }
            }
            step /= 2.0;
            if step < 1e-6 {
                return Err(ScenarioError::Validation("calibration failed to converge".into()));
            }
        }
    }
    Ok(Fit {
        cost: with(x),
        sd: r[0] + target.sd,
        cpu_pct: r[1] + target.cpu_pct,
        iterations,
    })
}
