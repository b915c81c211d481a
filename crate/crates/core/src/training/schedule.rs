use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear warmup, then linear decay to the floor at the last step.
    WarmupLinear,
    /// Linear warmup, then half-cosine annealing to the floor.
    WarmupCosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup-linear" | "linear" => Ok(ScheduleKind::WarmupLinear),
            "warmup-cosine" | "cosine" => Ok(ScheduleKind::WarmupCosine),
            other => Err(Error::config(format!(
                "unknown schedule `{other}` (expected warmup-linear or warmup-cosine)"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::WarmupLinear => "warmup-linear",
            ScheduleKind::WarmupCosine => "warmup-cosine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Steps(u64),
    /// Fraction of the total step count, rounded to the nearest step.
    Fraction(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub warmup: Warmup,
    pub peak: f64,
    pub total_steps: u64,
    /// Value reached at `total_steps`.
    pub floor: f64,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, warmup: Warmup, peak: f64, total_steps: u64) -> Result<Self> {
        let s = ScheduleSpec {
            kind,
            warmup,
            peak,
            total_steps,
            floor: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(Error::config(format!(
                "peak learning rate {} must be positive",
                self.peak
            )));
        }
        if !(0.0..=self.peak).contains(&self.floor) {
            return Err(Error::config(format!(
                "floor {} outside [0, peak]",
                self.floor
            )));
        }
        if let Warmup::Fraction(f) = self.warmup {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("warmup fraction {f} outside [0, 1]")));
            }
        }
        let w = self.warmup_steps();
        if w > self.total_steps {
            return Err(Error::config(format!(
                "warmup of {w} steps exceeds total of {} steps",
                self.total_steps
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        match self.warmup {
            Warmup::Steps(n) => n,
            Warmup::Fraction(f) => (f * self.total_steps as f64).round() as u64,
        }
    }
}

/// Learning rate after `step` completed optimizer steps.
///
/// Warmup rises linearly from 0 to `peak` at the warmup boundary; the decay
/// phase then maps progress `p ∈ [0, 1]` over the remaining steps to
/// `floor + (peak − floor)·(1 − p)` or `floor + (peak − floor)·½(1 + cos πp)`.
pub fn lr_at(spec: &ScheduleSpec, step: u64) -> Result<f64> {
    if step > spec.total_steps {
        return Err(Error::contract(format!(
            "step {step} beyond schedule total {}",
            spec.total_steps
        )));
    }
    let w = spec.warmup_steps();
    if step < w {
        return Ok(spec.peak * step as f64 / w as f64);
    }
    if step == w || spec.total_steps == w {
        return Ok(spec.peak);
    }
    let progress = (step - w) as f64 / (spec.total_steps - w) as f64;
    let span = spec.peak - spec.floor;
    Ok(match spec.kind {
        ScheduleKind::WarmupLinear => spec.floor + span * (1.0 - progress),
        ScheduleKind::WarmupCosine => spec.floor + span * 0.5 * (1.0 + (PI * progress).cos()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> ScheduleSpec {
        ScheduleSpec::new(
            ScheduleKind::WarmupLinear,
            Warmup::Steps(20_000),
            5e-5,
            100_000,
        )
        .unwrap()
    }

    fn cosine() -> ScheduleSpec {
        ScheduleSpec::new(
            ScheduleKind::WarmupCosine,
            Warmup::Fraction(0.3),
            3e-5,
            1000,
        )
        .unwrap()
    }

    #[test]
    fn pretraining_schedule_examples() {
        let s = linear();
        assert_eq!(lr_at(&s, 20_000).unwrap(), 5e-5);
        assert_eq!(lr_at(&s, 10_000).unwrap(), 2.5e-5);
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 100_000).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 60_000).unwrap(), 2.5e-5);
    }

    #[test]
    fn finetuning_schedule_examples() {
        let s = cosine();
        assert_eq!(s.warmup_steps(), 300);
        assert_eq!(lr_at(&s, 300).unwrap(), 3e-5);
        assert_eq!(lr_at(&s, 650).unwrap(), 1.5e-5);
        assert_eq!(lr_at(&s, 1000).unwrap(), 0.0);
    }

    #[test]
    fn past_total_is_contract_error() {
        assert!(matches!(lr_at(&cosine(), 1001), Err(Error::Contract(_))));
    }

    #[test]
    fn warmup_longer_than_total_rejected() {
        assert!(
            ScheduleSpec::new(ScheduleKind::WarmupLinear, Warmup::Steps(20_000), 5e-5, 10).is_err()
        );
        assert!(ScheduleSpec::new(ScheduleKind::WarmupLinear, Warmup::Steps(0), 0.0, 10).is_err());
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        for s in [linear(), cosine()] {
            let w = s.warmup_steps();
            let before = lr_at(&s, w - 1).unwrap();
            let at = lr_at(&s, w).unwrap();
            let after = lr_at(&s, w + 1).unwrap();
            let slope = s.peak / w as f64;
            assert!((at - before - slope).abs() < 1e-15);
            assert!((at - after).abs() <= slope);
        }
    }
}
