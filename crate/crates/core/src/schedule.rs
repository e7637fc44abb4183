//! Two-stage routing of mechanisms over the sampler steps.
//!
//! Each step `k` of an `N`-step sampler sits at continuous time
//! `t_k / T = (N - 1 - k) / N` (leading spacing: `T(N-1)/N, ..., 0`). A step
//! belongs to the structure stage when `t_k >= eta * T` (closed at the
//! boundary) and to the style stage otherwise. Masked self-attention and
//! steering run only in the structure stage; key/value style injection only in
//! the style stage.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Slack for comparing a step's time with `eta * T` in floating point.
const BOUNDARY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Structure,
    Style,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Structure => "structure",
            Stage::Style => "style",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structure" => Ok(Stage::Structure),
            "style" => Ok(Stage::Style),
            other => Err(Error::invalid(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepEntry {
    pub step_index: usize,
    /// Continuous time as a fraction of `T`, in `[0, 1]`.
    pub time: f64,
    pub stage: Stage,
    pub sams_layers: BTreeSet<usize>,
    pub makvs_layers: BTreeSet<usize>,
    pub steer_active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    eta: f64,
    entries: Vec<StepEntry>,
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid(format!(
            "eta must lie in the open interval (0, 1), got {eta}"
        )));
    }
    Ok(())
}

/// Leading-spacing step times `(N - 1 - k) / N`.
pub fn uniform_step_times(total_steps: usize) -> Vec<f64> {
    (0..total_steps)
        .map(|k| (total_steps - 1 - k) as f64 / total_steps as f64)
        .collect()
}

pub fn build_schedule(
    eta: f64,
    total_steps: usize,
    sams_layers: &BTreeSet<usize>,
    makvs_layers: &BTreeSet<usize>,
) -> Result<StageSchedule> {
    if total_steps < 2 {
        return Err(Error::invalid(format!(
            "total_steps must be at least 2, got {total_steps}"
        )));
    }
    build_schedule_from_times(eta, &uniform_step_times(total_steps), sams_layers, makvs_layers)
}

/// Builds a schedule for arbitrary, strictly decreasing step times in `[0, 1]`.
pub fn build_schedule_from_times(
    eta: f64,
    times: &[f64],
    sams_layers: &BTreeSet<usize>,
    makvs_layers: &BTreeSet<usize>,
) -> Result<StageSchedule> {
    check_eta(eta)?;
    if times.is_empty() {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("step times must lie in [0, 1]"));
    }
    if times.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("step times must be strictly decreasing"));
    }
    let entries = times
        .iter()
        .enumerate()
        .map(|(step_index, &time)| {
            let stage = stage_at(eta, time);
            let structure = stage == Stage::Structure;
            StepEntry {
                step_index,
                time,
                stage,
                sams_layers: if structure { sams_layers.clone() } else { BTreeSet::new() },
                makvs_layers: if structure { BTreeSet::new() } else { makvs_layers.clone() },
                steer_active: structure,
            }
        })
        .collect();
    Ok(StageSchedule { eta, entries })
}

/// Closed-interval membership: `time >= eta` is structure.
pub fn stage_at(eta: f64, time: f64) -> Stage {
    if time >= eta - BOUNDARY_SLACK {
        Stage::Structure
    } else {
        Stage::Style
    }
}

impl StageSchedule {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn total_steps(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[StepEntry] {
        &self.entries
    }

    /// Restricts steering to every `stride`-th structure step, or disables it.
    pub fn with_steer(mut self, enabled: bool, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("steer stride must be >= 1"));
        }
        let mut seen = 0usize;
        for e in &mut self.entries {
            if e.stage == Stage::Structure {
                e.steer_active = enabled && seen.is_multiple_of(stride);
                seen += 1;
            } else {
                e.steer_active = false;
            }
        }
        Ok(self)
    }

    pub fn mechanisms_at(&self, step_index: usize) -> Result<&StepEntry> {
        self.entries.get(step_index).ok_or_else(|| {
            Error::invalid(format!(
                "step index {step_index} out of range for a {}-step schedule",
                self.entries.len()
            ))
        })
    }

    pub fn structure_steps(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.stage == Stage::Structure)
            .count()
    }

    pub fn style_steps(&self) -> usize {
        self.total_steps() - self.structure_steps()
    }

    /// Index of the first style step, or `total_steps` when there is none.
    pub fn transition_index(&self) -> usize {
        self.entries
            .iter()
            .position(|e| e.stage == Stage::Style)
            .unwrap_or(self.entries.len())
    }

    /// One line per step: `index time stage sams makvs steer`.
    pub fn to_table(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{} {:.6} {} sams={} makvs={} steer={}",
                    e.step_index,
                    e.time,
                    e.stage,
                    join(&e.sams_layers),
                    join(&e.makvs_layers),
                    e.steer_active
                )
            })
            .collect()
    }
}

fn join(set: &BTreeSet<usize>) -> String {
    set.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers(r: std::ops::RangeInclusive<usize>) -> BTreeSet<usize> {
        r.collect()
    }

    fn default_schedule() -> StageSchedule {
        build_schedule(0.6, 50, &layers(2..=6), &layers(9..=16)).unwrap()
    }

    #[test]
    fn default_split_is_twenty_thirty() {
        let s = default_schedule();
        assert_eq!((s.structure_steps(), s.style_steps()), (20, 30));
        assert_eq!(s.transition_index(), 20);
    }

    #[test]
    fn split_examples() {
        let s = build_schedule(0.02, 50, &BTreeSet::new(), &BTreeSet::new()).unwrap();
        assert_eq!((s.structure_steps(), s.style_steps()), (49, 1));
        let s = build_schedule(0.5, 2, &BTreeSet::new(), &BTreeSet::new()).unwrap();
        assert_eq!((s.structure_steps(), s.style_steps()), (1, 1));
    }

    #[test]
    fn invalid_arguments() {
        for eta in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(build_schedule(eta, 50, &BTreeSet::new(), &BTreeSet::new()).is_err());
        }
        assert!(build_schedule(0.5, 1, &BTreeSet::new(), &BTreeSet::new()).is_err());
        assert!(default_schedule().mechanisms_at(50).is_err());
    }

    #[test]
    fn routing_entries() {
        let s = default_schedule();
        let first = s.mechanisms_at(0).unwrap();
        assert_eq!(first.stage, Stage::Structure);
        assert!(first.steer_active);
        assert_eq!(first.sams_layers, layers(2..=6));
        let last = s.mechanisms_at(49).unwrap();
        assert_eq!(last.stage, Stage::Style);
        assert!(!last.steer_active && !last.makvs_layers.is_empty());
        assert_eq!(s.mechanisms_at(19).unwrap().stage, Stage::Structure);
        assert_eq!(s.mechanisms_at(20).unwrap().stage, Stage::Style);
        // Step 19 sits exactly on the boundary and stays in the structure stage.
        assert!((s.mechanisms_at(19).unwrap().time - 0.6).abs() < 1e-15);
    }

    #[test]
    fn steer_stride_and_disable() {
        let s = default_schedule().with_steer(true, 3).unwrap();
        let active: Vec<usize> = s.entries().iter().filter(|e| e.steer_active).map(|e| e.step_index).collect();
        assert_eq!(active, vec![0, 3, 6, 9, 12, 15, 18]);
        let off = default_schedule().with_steer(false, 1).unwrap();
        assert!(off.entries().iter().all(|e| !e.steer_active));
        assert!(default_schedule().with_steer(true, 0).is_err());
    }

    #[test]
    fn non_uniform_times_use_continuous_rule() {
        let times = [0.99, 0.9, 0.75, 0.5, 0.2, 0.0];
        let s = build_schedule_from_times(0.75, &times, &layers(1..=1), &layers(2..=2)).unwrap();
        let stages: Vec<Stage> = s.entries().iter().map(|e| e.stage).collect();
        use Stage::*;
        assert_eq!(stages, vec![Structure, Structure, Structure, Style, Style, Style]);
        assert!(build_schedule_from_times(0.5, &[0.2, 0.4], &BTreeSet::new(), &BTreeSet::new()).is_err());
    }

    #[test]
    fn exclusivity_and_purity() {
        let s = default_schedule();
        for e in s.entries() {
            assert!(e.sams_layers.is_empty() || e.makvs_layers.is_empty());
        }
        assert_eq!(s, default_schedule());
    }
}
