//! Finite schedules standing in for limits, and tail-based limsup/liminf proxies.

use serde::Serialize;

use crate::error::{Error, Result};

/// Number of trailing schedule entries entering a limsup/liminf proxy.
pub const DEFAULT_TAIL: usize = 3;

pub fn check_decreasing(name: &'static str, schedule: &[f64]) -> Result<()> {
    let ok = !schedule.is_empty() && schedule.iter().all(|r| *r > 0.0 && r.is_finite()) && schedule.windows(2).all(|w| w[1] < w[0]);
    if ok {
        Ok(())
    } else {
        Err(Error::Schedule {
            name,
            expected: "nonempty, positive and strictly decreasing",
        })
    }
}

pub fn check_increasing(name: &'static str, schedule: &[f64]) -> Result<()> {
    let ok = !schedule.is_empty() && schedule.iter().all(|r| *r > 0.0 && r.is_finite()) && schedule.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(Error::Schedule {
            name,
            expected: "nonempty, positive and strictly increasing",
        })
    }
}

/// A sequence along a schedule with its tail proxies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub values: Vec<f64>,
    /// Max over the last `tail` entries.
    pub upper: f64,
    /// Min over the last `tail` entries.
    pub lower: f64,
}

impl TailEstimate {
    pub fn new(values: Vec<f64>, tail: usize) -> Self {
        let k = tail.max(1).min(values.len());
        let last = &values[values.len() - k..];
        let upper = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lower = last.iter().copied().fold(f64::INFINITY, f64::min);
        Self { values, upper, lower }
    }

    pub fn spread(&self) -> f64 {
        self.upper - self.lower
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_proxies() {
        let t = TailEstimate::new(vec![5.0, 1.0, 3.0, 2.0], 3);
        assert_eq!(t.upper, 3.0);
        assert_eq!(t.lower, 1.0);
        let t = TailEstimate::new(vec![4.0], 3);
        assert_eq!((t.upper, t.lower), (4.0, 4.0));
    }

    #[test]
    fn schedule_validation() {
        assert!(check_decreasing("rho", &[0.5, 0.25]).is_ok());
        assert!(check_decreasing("rho", &[0.25, 0.5]).is_err());
        assert!(check_decreasing("rho", &[]).is_err());
        assert!(check_increasing("t", &[1.0, 2.0]).is_ok());
        assert!(check_increasing("t", &[2.0, 2.0]).is_err());
    }
}
