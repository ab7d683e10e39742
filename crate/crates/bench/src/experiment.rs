//! Training loop and evaluation protocol.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use psp_core::context::Family;
use psp_net::{build_model, Activation, LayerSpec, Model, NetworkSpec};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetKind, Split};
use crate::error::{BenchError, Result};
use crate::schedule::{ContextSchedule, ScheduleSpec};
use crate::stream::{LabelTask, TaskStream, IMAGE_PIXELS, IMAGE_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Permuting,
    Rotating,
    LabelSplit,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Permuting => "permuting",
            TaskKind::Rotating => "rotating",
            TaskKind::LabelSplit => "labelsplit",
        })
    }
}

impl FromStr for TaskKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permuting" => Ok(TaskKind::Permuting),
            "rotating" => Ok(TaskKind::Rotating),
            "labelsplit" | "label-split" => Ok(TaskKind::LabelSplit),
            other => Err(BenchError::Config(format!("unknown task {other}"))),
        }
    }
}

/// Everything that determines a run. Echoed verbatim into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub mode: Family,
    /// Hidden units per dense hidden layer.
    pub units: usize,
    pub hidden_layers: usize,
    /// Task count; rotation cycles for the rotating stream.
    pub tasks: usize,
    /// Steps per task; steps per full turn for the rotating stream.
    pub steps_per_task: usize,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Test images per evaluation (the first ones of each task's test set).
    pub eval_samples: usize,
    /// Bind the raw pixels entering the first layer.
    pub bind_input_layer: bool,
    /// Source for permuting and rotating runs.
    pub dataset: DatasetKind,
    /// Install the identity key for every context, which turns a bound
    /// network into the plain baseline.
    #[serde(default)]
    pub identity_contexts: bool,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `task`.
    pub fn new(task: TaskKind, mode: Family) -> Self {
        let (tasks, schedule, dataset) = match task {
            TaskKind::Permuting => (10, ScheduleSpec::PerTask, DatasetKind::Mnist),
            TaskKind::Rotating => (3, ScheduleSpec::PerBlock { block: 100 }, DatasetKind::Fashion),
            TaskKind::LabelSplit => (3, ScheduleSpec::PerTask, DatasetKind::Mnist),
        };
        Self {
            task,
            mode,
            units: 256,
            hidden_layers: 2,
            tasks,
            steps_per_task: 1000,
            schedule,
            seed: 0,
            batch: 64,
            lr: 0.05,
            eval_every: 100,
            eval_samples: 10_000,
            bind_input_layer: true,
            dataset,
            identity_contexts: false,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.tasks * self.steps_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.tasks == 0 || self.steps_per_task == 0 {
            return bad("tasks and steps per task must be positive");
        }
        if self.units == 0 || self.batch == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return bad("units, batch, eval interval and eval samples must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.task == TaskKind::LabelSplit && !(2..=11).contains(&self.tasks) {
            return bad("label split runs need 2 to 11 tasks");
        }
        Ok(())
    }

    /// Network for this run; all classifiers have ten outputs.
    pub fn network_spec(&self) -> NetworkSpec {
        let seed = psp_core::linalg::SeededRng::new(self.seed).child(1 << 48).seed();
        let mut spec = match self.task {
            TaskKind::LabelSplit => NetworkSpec {
                family: self.mode,
                input: (1, IMAGE_SIDE, IMAGE_SIDE),
                layers: vec![
                    LayerSpec::Conv {
                        out_channels: 8,
                        kernel: 5,
                        stride: 2,
                        padding: 0,
                        activation: Activation::Relu,
                    },
                    LayerSpec::Conv {
                        out_channels: 16,
                        kernel: 3,
                        stride: 2,
                        padding: 0,
                        activation: Activation::Relu,
                    },
                    LayerSpec::Dense {
                        units: self.units,
                        activation: Activation::Relu,
                    },
                    LayerSpec::Dense {
                        units: 10,
                        activation: Activation::Identity,
                    },
                ],
                bind_input_layer: true,
                seed,
            },
            _ => NetworkSpec::mlp(
                self.mode,
                IMAGE_PIXELS,
                &vec![self.units; self.hidden_layers],
                10,
                seed,
            ),
        };
        spec.bind_input_layer = self.bind_input_layer;
        spec
    }

    /// Datasets this run reads.
    pub fn sources(&self) -> Vec<DatasetKind> {
        match self.task {
            TaskKind::LabelSplit => vec![DatasetKind::Mnist, DatasetKind::Fashion],
            _ => vec![self.dataset],
        }
    }

    /// MNIST first, then FashionMNIST split into `tasks - 1` contiguous class groups.
    pub fn label_tasks(&self) -> Vec<LabelTask> {
        let groups = self.tasks - 1;
        let mut out = vec![LabelTask {
            source: 0,
            classes: (0..10).collect(),
        }];
        out.extend((0..groups).map(|g| LabelTask {
            source: 1,
            classes: (g * 10 / groups..(g + 1) * 10 / groups).collect(),
        }));
        out
    }

    pub fn stream(&self, train: &[Arc<Dataset>]) -> Result<TaskStream> {
        let seed = psp_core::linalg::SeededRng::new(self.seed).child(2 << 48).seed();
        let first = || {
            train
                .first()
                .cloned()
                .ok_or_else(|| BenchError::Config("no training data".into()))
        };
        match self.task {
            TaskKind::Permuting => {
                TaskStream::permuting(first()?, self.tasks, self.steps_per_task, self.batch, seed)
            }
            TaskKind::Rotating => {
                let block = match self.schedule {
                    ScheduleSpec::PerBlock { block } => block,
                    _ => 1,
                };
                TaskStream::rotating(first()?, self.steps_per_task, block, self.batch, seed)
            }
            TaskKind::LabelSplit => TaskStream::label_split(
                train.to_vec(),
                self.label_tasks(),
                self.steps_per_task,
                self.batch,
                seed,
            ),
        }
    }
}

/// Test-set score of one task at one point of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub eval_task: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: ExperimentConfig,
    pub records: Vec<EvalRecord>,
}

impl RunMetrics {
    /// Records of one task in step order.
    pub fn trace(&self, task: usize) -> Vec<EvalRecord> {
        self.records.iter().filter(|r| r.eval_task == task).copied().collect()
    }

    pub fn final_step(&self) -> Option<usize> {
        self.records.iter().map(|r| r.step).max()
    }

    /// Mean final accuracy over the last ten tasks, when at least ten were evaluated at the end.
    pub fn last_ten_average(&self) -> Option<f64> {
        let last = self.final_step()?;
        let mut finals: Vec<EvalRecord> =
            self.records.iter().filter(|r| r.step == last).copied().collect();
        finals.sort_by_key(|r| r.eval_task);
        finals.dedup_by_key(|r| r.eval_task);
        if finals.len() < 10 {
            return None;
        }
        let tail = &finals[finals.len() - 10..];
        Some(tail.iter().map(|r| r.accuracy).sum::<f64>() / 10.0)
    }
}

/// Training and test splits of every source of `config`, loaded from `dir`.
pub fn load_sources(config: &ExperimentConfig, dir: &Path) -> Result<(Vec<Arc<Dataset>>, Vec<Arc<Dataset>>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for kind in config.sources() {
        train.push(Arc::new(Dataset::load(dir, kind, Split::Train)?));
        test.push(Arc::new(Dataset::load(dir, kind, Split::Test)?));
    }
    Ok((train, test))
}

/// Trains through the stream, scoring task 0 (angle 0 for rotating runs)
/// before training and every `eval_every` steps, then every task at the end.
pub fn run_experiment(
    config: &ExperimentConfig,
    train: &[Arc<Dataset>],
    test: &[Arc<Dataset>],
) -> Result<(RunMetrics, Box<dyn Model>)> {
    run_for(config, train, test, config.total_steps())
}

/// As [`run_experiment`], stopping after `steps` training steps. With zero
/// steps only the initial evaluation is recorded.
pub fn run_for(
    config: &ExperimentConfig,
    train: &[Arc<Dataset>],
    test: &[Arc<Dataset>],
    steps: usize,
) -> Result<(RunMetrics, Box<dyn Model>)> {
    config.validate()?;
    let stream = config.stream(train)?;
    let total = steps;
    let schedule = ContextSchedule::new(config.schedule, &stream, config.mode, total)?;
    let mut model = build_model(config.network_spec())?;
    if config.identity_contexts {
        for ctx in schedule.contexts() {
            model.install_identity(ctx)?;
        }
    } else {
        schedule.register(model.as_mut())?;
    }

    let eval_sets = (0..stream.n_tasks())
        .map(|t| stream.eval_set(test, t, config.eval_samples))
        .collect::<Result<Vec<_>>>()?;
    let evaluate = |model: &dyn Model, step: usize, task: usize| -> Result<EvalRecord> {
        let (x, labels) = &eval_sets[task];
        let (accuracy, loss) = model.evaluate(x, labels, schedule.eval_context(task))?;
        Ok(EvalRecord {
            step,
            eval_task: task,
            accuracy,
            loss,
        })
    };

    let mut records = vec![evaluate(model.as_ref(), 0, 0)?];
    for step in 0..total {
        let batch = stream.batch_at(step);
        model.train_batch(&batch.x, &batch.labels, schedule.context(step), config.lr)?;
        let done = step + 1;
        if done % config.eval_every == 0 && done < total {
            records.push(evaluate(model.as_ref(), done, 0)?);
        }
    }
    for task in (0..stream.n_tasks()).filter(|_| total > 0) {
        records.push(evaluate(model.as_ref(), total, task)?);
    }
    Ok((
        RunMetrics {
            config: config.clone(),
            records,
        },
        model,
    ))
}
