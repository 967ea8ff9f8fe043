//! Scheduling Delay, CPU averages and tenant slowdown over simulation traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::model::{NodeId, GB};
use crate::runtime::GaugeSample;

/// Seconds of blockage per compressed gigabyte.
pub fn scheduling_delay(duration_s: f64, compressed_gb: f64) -> Result<f64, MetricsError> {
    if compressed_gb <= 0.0 {
        return Err(MetricsError::ZeroBytes);
    }
    Ok(duration_s / compressed_gb)
}

pub fn scheduling_delay_bytes(duration_s: f64, compressed_bytes: u64) -> Result<f64, MetricsError> {
    scheduling_delay(duration_s, compressed_bytes as f64 / GB)
}

/// Time-weighted mean of a step series `(t, value)` over `[start, end]`.
/// Each value holds from its time until the next point; the last one holds
/// forever.
pub fn step_average(steps: &[(f64, f64)], start: f64, end: f64) -> Result<f64, MetricsError> {
    let first = steps.first().map_or(f64::INFINITY, |s| s.0);
    if !(end > start) || start < first {
        return Err(MetricsError::EmptyWindow { start, end });
    }
    let mut area = 0.0;
    for (i, &(t, v)) in steps.iter().enumerate() {
        let next = steps.get(i + 1).map_or(f64::INFINITY, |s| s.0);
        let lo = t.max(start);
        let hi = next.min(end);
        if hi > lo {
            area += v * (hi - lo);
        }
    }
    Ok(area / (end - start))
}

/// Mean CPU utilisation in percent.
pub fn cpu_average(steps: &[(f64, f64)], start: f64, end: f64) -> Result<f64, MetricsError> {
    step_average(steps, start, end).map(|u| 100.0 * u)
}

/// Completion-time ratio of a job against its uncontended run.
pub fn slowdown(contended: f64, alone: f64) -> f64 {
    contended / alone
}

/// Throughput lost by a fixed-work job, as a fraction.
pub fn throughput_drop(contended: f64, alone: f64) -> f64 {
    1.0 - alone / contended
}

/// A background job description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenantWorkload {
    pub name: String,
    pub cpu_demand: f64,
    pub total_work: f64,
    /// Disk write bytes per second issued alongside the CPU work.
    pub io_demand: f64,
    pub start: f64,
}

impl TenantWorkload {
    pub fn uncontended_time(&self) -> f64 {
        if self.total_work == 0.0 {
            0.0
        } else {
            self.total_work / self.cpu_demand
        }
    }
}

/// Gauges and annotations collected from one node.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsTrace {
    pub node: Option<NodeId>,
    pub samples: Vec<GaugeSample>,
    pub cpu_steps: Vec<(f64, f64)>,
    pub annotations: Vec<(f64, String)>,
}

impl MetricsTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,cpu_util,net_mb_s,disk_write_mb_s,disk_used_pct,queue_len,active_pulls\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:.3},{:.6},{:.6},{:.6},{:.6},{},{}",
                s.time_s, s.cpu_util, s.net_mb_s, s.disk_write_mb_s, s.disk_used_pct, s.queue_len, s.active_pulls
            );
        }
        out
    }

    pub fn cpu_average(&self, start: f64, end: f64) -> Result<f64, MetricsError> {
        cpu_average(&self.cpu_steps, start, end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scheduling_delay_examples() {
        assert!((scheduling_delay(1352.0, 28.88).unwrap() - 46.81).abs() < 0.01);
        assert!((scheduling_delay(909.0, 28.88).unwrap() - 31.47).abs() < 0.01);
        assert_eq!(scheduling_delay(0.0, 28.88).unwrap(), 0.0);
        assert_eq!(scheduling_delay(10.0, 0.0), Err(MetricsError::ZeroBytes));
    }

    #[test]
    fn cpu_average_examples() {
        let idle = [(0.0, 0.0)];
        assert_eq!(cpu_average(&idle, 0.0, 100.0).unwrap(), 0.0);
        let half = [(0.0, 0.5)];
        assert_eq!(cpu_average(&half, 3.0, 17.0).unwrap(), 50.0);
        let steps = [(0.0, 1.0), (10.0, 0.0), (20.0, 0.5)];
        assert!((cpu_average(&steps, 5.0, 25.0).unwrap() - 37.5).abs() < 1e-12);
        assert!(cpu_average(&steps, 5.0, 5.0).is_err());
    }

    #[test]
    fn slowdown_and_drop() {
        assert!((slowdown(1630.04, 823.25) - 1.98).abs() < 0.01);
        assert!((throughput_drop(1.49, 1.0) - 0.329).abs() < 0.001);
    }

    proptest! {
        #[test]
        fn scheduling_delay_scale_invariant(d in 0.0f64..1e5, gb in 1e-3f64..1e3, c in 1e-3f64..1e3) {
            let a = scheduling_delay(d, gb).unwrap();
            let b = scheduling_delay(d * c, gb * c).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
