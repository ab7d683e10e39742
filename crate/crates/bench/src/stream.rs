//! Task streams: deterministic `(task, mini-batch)` sequences.

use std::sync::Arc;

use psp_core::linalg::{RealMatrix, SeededRng};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{BenchError, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Classes drawn from one source dataset, relabelled by position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTask {
    /// Index into the stream's source list.
    pub source: usize,
    pub classes: Vec<usize>,
}

impl LabelTask {
    pub fn remap(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamKind {
    Permuting {
        n_tasks: usize,
        steps_per_task: usize,
        permutations: Vec<Vec<usize>>,
    },
    Rotating {
        steps_per_cycle: usize,
        context_block: usize,
    },
    LabelSplit {
        partitions: Vec<LabelTask>,
        steps_per_task: usize,
    },
}

/// One training step's data.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: usize,
    pub task: usize,
    pub x: RealMatrix,
    pub labels: Vec<usize>,
}

/// Training stream over one or more source datasets. Batches are sampled
/// with replacement and depend only on `(seed, step)`.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub batch: usize,
    pub seed: u64,
    sources: Vec<Arc<Dataset>>,
    /// Candidate indices per task (label split) or one shared pool.
    pools: Vec<Vec<usize>>,
}

fn check_images(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(BenchError::Config("empty dataset".into()));
    }
    if ds.image_size() != IMAGE_PIXELS {
        return Err(BenchError::Config(format!(
            "expected 28x28 images, got {}x{}",
            ds.rows, ds.cols
        )));
    }
    Ok(())
}

fn check_batch(batch: usize) -> Result<()> {
    if batch == 0 {
        return Err(BenchError::Config("batch size must be positive".into()));
    }
    Ok(())
}

/// Seeded uniform permutation of the pixels of task `task`; task 0 is the identity.
pub fn task_permutation(seed: u64, task: usize) -> Vec<usize> {
    if task == 0 {
        return (0..IMAGE_PIXELS).collect();
    }
    SeededRng::new(seed)
        .child((1 << 40) + task as u64)
        .permutation(IMAGE_PIXELS)
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// `out[i] = img[perm[i]]`.
pub fn permute(img: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&j| img[j]).collect()
}

/// Counter-clockwise rotation by `degrees` about the image centre with
/// bilinear interpolation and zero fill. Angles that are multiples of 360
/// return the input unchanged.
pub fn rotate(img: &[f64], side: usize, degrees: f64) -> Vec<f64> {
    if degrees.rem_euclid(360.0) == 0.0 {
        return img.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let centre = (side as f64 - 1.0) / 2.0;
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= side as isize || col >= side as isize {
            0.0
        } else {
            img[r as usize * side + col as usize]
        }
    };
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for col in 0..side {
            let x = col as f64 - centre;
            let y = centre - r as f64;
            let xs = c * x + s * y;
            let ys = -s * x + c * y;
            let (cs, rs) = (xs + centre, centre - ys);
            let (c0, r0) = (cs.floor(), rs.floor());
            let (fc, fr) = (cs - c0, rs - r0);
            let (c0, r0) = (c0 as isize, r0 as isize);
            out[r * side + col] = (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
                + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
        }
    }
    out
}

impl TaskStream {
    /// `n_tasks` windows of `steps_per_task` steps; task `t` permutes pixels.
    pub fn permuting(
        ds: Arc<Dataset>,
        n_tasks: usize,
        steps_per_task: usize,
        batch: usize,
        seed: u64,
    ) -> Result<Self> {
        check_images(&ds)?;
        check_batch(batch)?;
        if n_tasks == 0 || steps_per_task == 0 {
            return Err(BenchError::Config("need at least one task and one step".into()));
        }
        let permutations = (0..n_tasks).map(|t| task_permutation(seed, t)).collect();
        let pools = vec![(0..ds.len()).collect()];
        Ok(Self {
            kind: StreamKind::Permuting {
                n_tasks,
                steps_per_task,
                permutations,
            },
            batch,
            seed,
            sources: vec![ds],
            pools,
        })
    }

    /// Inputs rotate a full turn every `steps_per_cycle` steps.
    pub fn rotating(
        ds: Arc<Dataset>,
        steps_per_cycle: usize,
        context_block: usize,
        batch: usize,
        seed: u64,
    ) -> Result<Self> {
        check_images(&ds)?;
        check_batch(batch)?;
        if steps_per_cycle == 0 || context_block == 0 {
            return Err(BenchError::Config("cycle and block lengths must be positive".into()));
        }
        let pools = vec![(0..ds.len()).collect()];
        Ok(Self {
            kind: StreamKind::Rotating {
                steps_per_cycle,
                context_block,
            },
            batch,
            seed,
            sources: vec![ds],
            pools,
        })
    }

    /// Sequential tasks over disjoint label groups of `sources`.
    pub fn label_split(
        sources: Vec<Arc<Dataset>>,
        partitions: Vec<LabelTask>,
        steps_per_task: usize,
        batch: usize,
        seed: u64,
    ) -> Result<Self> {
        check_batch(batch)?;
        if partitions.is_empty() || steps_per_task == 0 {
            return Err(BenchError::Config("need at least one task and one step".into()));
        }
        for ds in &sources {
            check_images(ds)?;
        }
        for (i, a) in partitions.iter().enumerate() {
            if a.source >= sources.len() || a.classes.is_empty() {
                return Err(BenchError::Config(format!("task {i} has no valid source or classes")));
            }
            for b in &partitions[..i] {
                if a.source == b.source && a.classes.iter().any(|c| b.classes.contains(c)) {
                    return Err(BenchError::Config(format!("task {i} overlaps an earlier task")));
                }
            }
        }
        let pools = partitions
            .iter()
            .map(|p| sources[p.source].indices_of(&p.classes))
            .collect::<Vec<_>>();
        if let Some(i) = pools.iter().position(Vec::is_empty) {
            return Err(BenchError::Config(format!("task {i} has no training images")));
        }
        Ok(Self {
            kind: StreamKind::LabelSplit {
                partitions,
                steps_per_task,
            },
            batch,
            seed,
            sources,
            pools,
        })
    }

    /// Number of discrete tasks; a rotating stream counts as one.
    pub fn n_tasks(&self) -> usize {
        match &self.kind {
            StreamKind::Permuting { n_tasks, .. } => *n_tasks,
            StreamKind::Rotating { .. } => 1,
            StreamKind::LabelSplit { partitions, .. } => partitions.len(),
        }
    }

    pub fn steps_per_task(&self) -> Option<usize> {
        match &self.kind {
            StreamKind::Permuting { steps_per_task, .. }
            | StreamKind::LabelSplit { steps_per_task, .. } => Some(*steps_per_task),
            StreamKind::Rotating { .. } => None,
        }
    }

    pub fn steps_per_cycle(&self) -> Option<usize> {
        match &self.kind {
            StreamKind::Rotating { steps_per_cycle, .. } => Some(*steps_per_cycle),
            _ => None,
        }
    }

    /// Task trained at `step`; tasks past the last one stay on the last.
    pub fn task_at(&self, step: usize) -> usize {
        match self.steps_per_task() {
            Some(n) => (step / n).min(self.n_tasks() - 1),
            None => 0,
        }
    }

    /// Rotation in degrees at `step` (zero for non-rotating streams).
    pub fn angle_at(&self, step: usize) -> f64 {
        match self.kind {
            StreamKind::Rotating { steps_per_cycle, .. } => {
                360.0 * (step % steps_per_cycle) as f64 / steps_per_cycle as f64
            }
            _ => 0.0,
        }
    }

    fn source_of(&self, task: usize) -> &Dataset {
        match &self.kind {
            StreamKind::LabelSplit { partitions, .. } => &self.sources[partitions[task].source],
            _ => &self.sources[0],
        }
    }

    /// Image `i` of `ds` as task `task` sees it at rotation `degrees`, plus its label.
    fn transform(&self, ds: &Dataset, i: usize, task: usize, degrees: f64) -> (Vec<f64>, usize) {
        let img = ds.image(i);
        match &self.kind {
            StreamKind::Permuting { permutations, .. } => {
                (permute(&img, &permutations[task]), ds.label(i))
            }
            StreamKind::Rotating { .. } => (rotate(&img, IMAGE_SIDE, degrees), ds.label(i)),
            StreamKind::LabelSplit { partitions, .. } => (
                img,
                partitions[task].remap(ds.label(i)).expect("pooled by class"),
            ),
        }
    }

    fn assemble(&self, rows: Vec<(Vec<f64>, usize)>) -> (RealMatrix, Vec<usize>) {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(n);
        for (img, label) in rows {
            data.extend_from_slice(&img);
            labels.push(label);
        }
        let x = RealMatrix::from_vec(n, IMAGE_PIXELS, data).expect("rows are 784 wide");
        (x, labels)
    }

    pub fn batch_at(&self, step: usize) -> Batch {
        let task = self.task_at(step);
        let pool = match self.kind {
            StreamKind::LabelSplit { .. } => &self.pools[task],
            _ => &self.pools[0],
        };
        let ds = self.source_of(task);
        let degrees = self.angle_at(step);
        let mut rng = SeededRng::new(self.seed).child(step as u64);
        let rows = (0..self.batch)
            .map(|_| self.transform(ds, pool[rng.below(pool.len())], task, degrees))
            .collect();
        let (x, labels) = self.assemble(rows);
        Batch {
            step,
            task,
            x,
            labels,
        }
    }

    /// Held-out evaluation set of `task` (at angle 0 for rotating streams):
    /// the first `limit` matching images of `test[source]`.
    pub fn eval_set(&self, test: &[Arc<Dataset>], task: usize, limit: usize) -> Result<(RealMatrix, Vec<usize>)> {
        if task >= self.n_tasks() {
            return Err(BenchError::Config(format!("no task {task}")));
        }
        let source = match &self.kind {
            StreamKind::LabelSplit { partitions, .. } => partitions[task].source,
            _ => 0,
        };
        let ds = test
            .get(source)
            .ok_or_else(|| BenchError::Config(format!("missing test set for source {source}")))?;
        check_images(ds)?;
        let idx: Vec<usize> = match &self.kind {
            StreamKind::LabelSplit { partitions, .. } => ds.indices_of(&partitions[task].classes),
            _ => (0..ds.len()).collect(),
        };
        let rows = idx
            .into_iter()
            .take(limit)
            .map(|i| self.transform(ds, i, task, 0.0))
            .collect();
        Ok(self.assemble(rows))
    }
}
