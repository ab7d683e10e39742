use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;
use psp_bench::data::{encode_idx_images, encode_idx_labels, load_idx, Idx};
use psp_bench::stream::{permute, rotate, task_permutation, IMAGE_PIXELS};
use psp_bench::{
    load_sources, run_experiment, run_for, Dataset, ExperimentConfig, Split, TaskKind, TaskStream,
};
use psp_core::context::Family;

/// Ten classes of noisy class-specific blobs; easy to learn, fast to run.
fn synthetic(n: usize, seed: u64) -> Arc<Dataset> {
    let mut rng = psp_core::SeededRng::new(seed);
    let mut pixels = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        for p in 0..IMAGE_PIXELS {
            let on = (p / 78) == class;
            let v = if on { 200.0 } else { 20.0 } + 30.0 * rng.gaussian();
            pixels.push(v.clamp(0.0, 255.0) as u8);
        }
        labels.push(class as u8);
    }
    Arc::new(Dataset::new(Split::Train, 28, 28, pixels, labels).unwrap())
}

fn data_dir() -> Option<PathBuf> {
    let dir = std::env::var_os(psp_bench::DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    dir.join("mnist/train-images-idx3-ubyte").exists().then_some(dir)
}

#[test]
fn idx_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..2 * 784).map(|i| (i % 251) as u8).collect();
    let img = dir.path().join("img");
    let lab = dir.path().join("lab");
    std::fs::write(&img, encode_idx_images(28, 28, &pixels)).unwrap();
    std::fs::write(&lab, encode_idx_labels(&[3, 7])).unwrap();
    let ds = Dataset::from_idx(Split::Test, load_idx(&img).unwrap(), load_idx(&lab).unwrap()).unwrap();
    assert_eq!((ds.len(), ds.rows, ds.cols), (2, 28, 28));
    assert_eq!(ds.labels(), &[3, 7]);
    assert!(ds.image(1).iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(matches!(load_idx(&lab).unwrap(), Idx::Labels(_)));
    assert!(load_idx(&dir.path().join("missing")).is_err());
}

#[test]
fn zero_steps_records_only_the_initial_chance_level_evaluation() {
    let ds = synthetic(400, 1);
    let mut cfg = ExperimentConfig::new(TaskKind::Permuting, Family::Binary);
    cfg.units = 32;
    cfg.tasks = 2;
    let (m, _) = run_for(&cfg, &[ds.clone()], &[ds], 0).unwrap();
    assert_eq!(m.records.len(), 1);
    assert_eq!(m.records[0].step, 0);
    assert!(m.records[0].accuracy < 0.3, "{}", m.records[0].accuracy);
}

#[test]
fn identity_contexts_reproduce_the_baseline_metrics() {
    let ds = synthetic(300, 2);
    let mut base = ExperimentConfig::new(TaskKind::Permuting, Family::Standard);
    base.units = 24;
    base.tasks = 2;
    base.steps_per_task = 60;
    base.eval_every = 20;
    let mut psp = base.clone();
    psp.mode = Family::Binary;
    psp.identity_contexts = true;
    let (a, _) = run_experiment(&base, &[ds.clone()], &[ds.clone()]).unwrap();
    let (b, _) = run_experiment(&psp, &[ds.clone()], &[ds]).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn same_seed_same_report() {
    let ds = synthetic(300, 3);
    let mut cfg = ExperimentConfig::new(TaskKind::Rotating, Family::Complex);
    cfg.units = 16;
    cfg.tasks = 1;
    cfg.steps_per_task = 40;
    cfg.eval_every = 10;
    cfg.schedule = "fast-localmix".parse().unwrap();
    let (a, ma) = run_experiment(&cfg, &[ds.clone()], &[ds.clone()]).unwrap();
    let (b, mb) = run_experiment(&cfg, &[ds.clone()], &[ds]).unwrap();
    assert_eq!(psp_bench::report::to_json(&a), psp_bench::report::to_json(&b));
    assert_eq!(ma.to_bytes(), mb.to_bytes());
    let reloaded = psp_net::load_model(&ma.to_bytes()).unwrap();
    assert_eq!(reloaded.to_bytes(), ma.to_bytes());
}

#[test]
fn label_split_runs_on_the_conv_net() {
    let (a, b) = (synthetic(200, 4), synthetic(200, 5));
    let mut cfg = ExperimentConfig::new(TaskKind::LabelSplit, Family::Binary);
    cfg.units = 16;
    cfg.steps_per_task = 10;
    cfg.eval_every = 10;
    let (m, model) = run_experiment(&cfg, &[a.clone(), b.clone()], &[a, b]).unwrap();
    assert_eq!(m.final_step(), Some(30));
    let finals: Vec<usize> = m.records.iter().filter(|r| r.step == 30).map(|r| r.eval_task).collect();
    assert_eq!(finals, vec![0, 1, 2]);
    assert!(model.spec().layers.len() == 4);
}

/// Two tasks at desk scale on real MNIST: the baseline forgets task 0 and
/// the binary superposition forgets less.
#[test]
fn forgetting_on_two_permuted_tasks() {
    let Some(dir) = data_dir() else {
        eprintln!("MNIST not found; run `psp data fetch --dataset mnist`");
        return;
    };
    let mut cfg = ExperimentConfig::new(TaskKind::Permuting, Family::Standard);
    cfg.units = 64;
    cfg.hidden_layers = 1;
    cfg.tasks = 2;
    cfg.steps_per_task = 400;
    cfg.eval_samples = 2000;
    let (train, test) = load_sources(&cfg, &dir).unwrap();
    let drop = |family| {
        let mut c = cfg.clone();
        c.mode = family;
        let (m, _) = run_experiment(&c, &train, &test).unwrap();
        let t0 = m.trace(0);
        let before = t0.iter().find(|r| r.step == 400).unwrap().accuracy;
        let after = t0.last().unwrap().accuracy;
        (before, after)
    };
    let (b0, b1) = drop(Family::Standard);
    let (p0, p1) = drop(Family::Binary);
    assert!(b1 < b0, "baseline {b0} -> {b1}");
    assert!(p0 - p1 < b0 - b1, "binary {p0} -> {p1}, baseline {b0} -> {b1}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permutations_preserve_pixel_multisets(seed: u64, task in 0usize..50) {
        let img: Vec<f64> = (0..IMAGE_PIXELS).map(|i| ((i * 37) % 101) as f64).collect();
        let p = task_permutation(seed, task);
        let mut a = permute(&img, &p);
        let mut b = img.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        let mut seen = p.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..IMAGE_PIXELS).collect::<Vec<_>>());
    }

    #[test]
    fn whole_turns_leave_batches_unchanged(seed: u64, step in 0usize..500, turns in 1usize..4) {
        let ds = synthetic(30, 7);
        let s = TaskStream::rotating(ds, 100, 10, 4, seed).unwrap();
        let base = s.batch_at(step % 100);
        let later = s.batch_at(step % 100 + 100 * turns);
        // Sampling differs by step, so compare the rotation itself.
        let img = later.x.row(0).to_vec();
        prop_assert_eq!(rotate(&img, 28, 360.0 * turns as f64), img);
        prop_assert_eq!(s.angle_at(step % 100 + 100 * turns), s.angle_at(base.step));
    }

    #[test]
    fn streams_are_pure_functions_of_seed_and_step(seed: u64, step in 0usize..5000) {
        let ds = synthetic(50, 8);
        let a = TaskStream::permuting(ds.clone(), 5, 1000, 8, seed).unwrap();
        let b = TaskStream::permuting(ds, 5, 1000, 8, seed).unwrap();
        prop_assert_eq!(a.batch_at(step), b.batch_at(step));
    }

    #[test]
    fn rotated_pixels_stay_in_range(deg in -720.0f64..720.0) {
        let img: Vec<f64> = (0..IMAGE_PIXELS).map(|i| ((i * 13) % 17) as f64 / 16.0).collect();
        prop_assert!(rotate(&img, 28, deg).iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }
}
