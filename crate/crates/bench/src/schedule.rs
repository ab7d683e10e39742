//! Context schedules: which key each training step uses.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use psp_core::context::Family;
use psp_net::{ContextSel, Model};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::stream::{StreamKind, TaskStream};

/// Schedule as requested on the command line; per-step policies take their
/// cycle from the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    PerTask,
    PerBlock { block: usize },
    Fast,
    FastLocalMix,
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::PerTask => f.write_str("per-task"),
            ScheduleSpec::PerBlock { block } => write!(f, "per-block:{block}"),
            ScheduleSpec::Fast => f.write_str("fast"),
            ScheduleSpec::FastLocalMix => f.write_str("fast-localmix"),
        }
    }
}

impl FromStr for ScheduleSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-task" => Ok(ScheduleSpec::PerTask),
            "fast" => Ok(ScheduleSpec::Fast),
            "fast-localmix" => Ok(ScheduleSpec::FastLocalMix),
            _ => s
                .strip_prefix("per-block:")
                .and_then(|b| b.parse().ok())
                .filter(|&b| b > 0)
                .map(|block| ScheduleSpec::PerBlock { block })
                .ok_or_else(|| BenchError::Config(format!("unknown schedule {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulePolicy {
    PerTask,
    PerBlock(usize),
    /// A fresh key for every step of a cycle, reused across cycles.
    PerStepReused(usize),
    /// As `PerStepReused`, but each step uses the phase mixture of its own
    /// key and its two neighbours in the cycle.
    PerStepMixed(usize),
}

/// Pure map from step index to context selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSchedule {
    pub policy: SchedulePolicy,
    /// Rotation cycle of the stream, if any.
    cycle: Option<usize>,
    steps_per_task: Option<usize>,
    n_tasks: usize,
    total_steps: usize,
}

impl ContextSchedule {
    /// Validates `spec` against the stream and the binding family.
    pub fn new(spec: ScheduleSpec, stream: &TaskStream, family: Family, total_steps: usize) -> Result<Self> {
        let cycle = stream.steps_per_cycle();
        let incompatible = |why: &str| Err(BenchError::Config(format!("schedule {spec}: {why}")));
        let policy = match (spec, &stream.kind) {
            (ScheduleSpec::PerTask, StreamKind::Rotating { .. }) => {
                return incompatible("a rotating stream has no task boundaries")
            }
            (ScheduleSpec::PerTask, _) => SchedulePolicy::PerTask,
            (ScheduleSpec::PerBlock { block }, _) => {
                if let Some(c) = cycle {
                    if c % block != 0 {
                        return incompatible("block length must divide the rotation cycle");
                    }
                }
                SchedulePolicy::PerBlock(block)
            }
            (ScheduleSpec::Fast | ScheduleSpec::FastLocalMix, StreamKind::Rotating { .. }) => {
                let c = cycle.expect("rotating");
                if spec == ScheduleSpec::Fast {
                    SchedulePolicy::PerStepReused(c)
                } else if family == Family::Complex {
                    SchedulePolicy::PerStepMixed(c)
                } else {
                    return incompatible("phase mixtures need the complex family");
                }
            }
            _ => return incompatible("per-step contexts need a rotating stream"),
        };
        Ok(Self {
            policy,
            cycle,
            steps_per_task: stream.steps_per_task(),
            n_tasks: stream.n_tasks(),
            total_steps,
        })
    }

    pub fn context(&self, step: usize) -> ContextSel {
        match self.policy {
            SchedulePolicy::PerTask => {
                let n = self.steps_per_task.expect("task stream");
                ContextSel::Task(step / n)
            }
            SchedulePolicy::PerBlock(b) => match self.cycle {
                Some(c) => ContextSel::Task((step % c) / b),
                None => ContextSel::Task(step / b),
            },
            SchedulePolicy::PerStepReused(c) => ContextSel::Task(step % c),
            SchedulePolicy::PerStepMixed(c) => {
                let t = step % c;
                ContextSel::Mix {
                    prev: (t + c - 1) % c,
                    cur: t,
                    next: (t + 1) % c,
                }
            }
        }
    }

    /// Context used to evaluate `task`: the one active at the task's first
    /// step (the start of a cycle for rotating streams).
    pub fn eval_context(&self, task: usize) -> ContextSel {
        self.context(task * self.steps_per_task.unwrap_or(0))
    }

    /// Every context index the run touches, ascending.
    pub fn contexts(&self) -> Vec<usize> {
        let span = match self.cycle {
            Some(c) => c.min(self.total_steps.max(1)),
            None => self.total_steps.max(1),
        };
        let mut set: BTreeSet<usize> = (0..span)
            .flat_map(|s| self.context(s).indices())
            .collect();
        for task in 0..self.n_tasks {
            set.extend(self.eval_context(task).indices());
        }
        set.into_iter().collect()
    }

    pub fn register(&self, model: &mut dyn Model) -> Result<()> {
        for ctx in self.contexts() {
            model.register_context(ctx)?;
        }
        Ok(())
    }
}
