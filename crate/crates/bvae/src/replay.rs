//! Class-incremental continual learning with generative replay.
//!
//! The fit-sample-replay loop: for each task, the training stream is the
//! task's real data plus, from the second task on, samples drawn from the
//! previous generator snapshot and labeled with the previous solver's soft
//! predictions (distillation targets). The solver trains on cross-entropy
//! against that mixed target matrix, the generator on the VAE objective over
//! the mixed images, and both are snapshotted at the task boundary. All ten
//! classes share one output head and no task identity exists at test time.
//!
//! Replay latents come from the reduced-bias mixture sampler, which at r = 0
//! is exactly standard prior sampling, so the vanilla and binarized
//! generators differ only in their objective and sampling offsets.
//!
//! Every stream example carries a provenance tag; the loop asserts that no
//! real example from a finished task ever re-enters training (replay purity).

use crate::data::{ImageDataset, ScheduleKind, TaskSchedule};
use crate::graph::Tape;
use crate::latent::LatentPriorConfig;
use crate::model::{
    train, Mlp, MlpSpec, ModelError, SampleMode, TrainConfig, VaeModel, VariantConfig,
};
use crate::optim::{AdamParams, AdamState};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("schedule: {0}")]
    BadSchedule(String),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("task {task}: non-finite solver loss")]
    SolverDiverged { task: usize },
    #[error("task {task}: generator failed: {source}")]
    Generator { task: usize, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Where a stream example came from. Real data is only ever admitted for the
/// task currently being trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Real { task: usize },
    Replay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub gen_variant: VariantConfig,
    pub latent_dim: usize,
    pub gen_hidden: usize,
    pub solver_hidden: usize,
    /// Replayed examples per real example; 0 disables replay entirely.
    pub replay_ratio: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> ReplayConfig {
        ReplayConfig {
            gen_variant: VariantConfig::vae(),
            latent_dim: 32,
            gen_hidden: 256,
            solver_hidden: 256,
            replay_ratio: 1.0,
            epochs_per_task: 3,
            batch_size: 128,
            adam: AdamParams::default(),
            seed: 0,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        let fail = |m: String| Err(ReplayError::BadConfig(m));
        if !self.replay_ratio.is_finite() || self.replay_ratio < 0.0 {
            return fail(format!(
                "replay_ratio must be >= 0, got {}",
                self.replay_ratio
            ));
        }
        if self.epochs_per_task == 0 {
            return fail("epochs_per_task must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.latent_dim == 0 || self.gen_hidden == 0 || self.solver_hidden == 0 {
            return fail("widths must be positive".into());
        }
        self.gen_variant
            .validate()
            .map_err(|e| ReplayError::BadConfig(e.to_string()))
    }
}

/// The shared 10-way classifier.
#[derive(Clone)]
pub struct Solver {
    pub net: Mlp,
}

impl Solver {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Solver {
        Solver {
            net: Mlp::init(MlpSpec::new(vec![input_dim, hidden, NUM_CLASSES]), rng),
        }
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.net.forward_value(x)
    }

    /// Row-stochastic softmax of the logits; the distillation targets.
    pub fn soft_targets(&self, x: &Tensor) -> Tensor {
        let logits = self.logits(x);
        let (n, k) = (logits.rows(), logits.cols());
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / z));
        }
        Tensor::from_vec(&[n, k], out)
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let logits = self.logits(x);
        (0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[u8]) -> f64 {
        assert_eq!(x.rows(), labels.len(), "accuracy: row/label mismatch");
        assert!(!labels.is_empty(), "accuracy: empty evaluation set");
        let pred = self.predict(x);
        let hits = pred
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == l as usize)
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// Live models plus the frozen snapshots replay draws from.
pub struct ReplayState {
    pub generator: VaeModel,
    pub solver: Solver,
    pub frozen_generator: Option<VaeModel>,
    pub frozen_solver: Option<Solver>,
    /// Completed task count.
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CLResult {
    /// Test accuracy per task, evaluated once after the final task.
    pub per_task: Vec<f64>,
    pub average: f64,
}

impl CLResult {
    fn new(per_task: Vec<f64>) -> CLResult {
        assert!(!per_task.is_empty());
        assert!(per_task.iter().all(|&a| (0.0..=1.0).contains(&a)));
        let average = per_task.iter().sum::<f64>() / per_task.len() as f64;
        CLResult { per_task, average }
    }
}

/// `cl_result.csv`: task,accuracy rows (1-based task ids) plus an average
/// row, LF endings.
pub fn format_cl_csv(result: &CLResult) -> String {
    let mut out = String::from("task,accuracy\n");
    for (i, a) in result.per_task.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, a);
    }
    let _ = writeln!(out, "average,{}", result.average);
    out
}

/// One task's training stream: images, target distributions (one-hot for
/// real rows, soft for replayed rows) and the provenance tag per row.
struct TaskStream {
    images: Tensor,
    targets: Tensor,
    provenance: Vec<Provenance>,
}

fn one_hot(labels: &[u8]) -> Tensor {
    let mut data = vec![0.0; labels.len() * NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        assert!((l as usize) < NUM_CLASSES, "label {} out of range", l);
        data[i * NUM_CLASSES + l as usize] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), NUM_CLASSES], data)
}

fn build_stream(
    real: &ImageDataset,
    task: usize,
    state: &ReplayState,
    cfg: &ReplayConfig,
    rng: &mut Rng,
) -> Result<TaskStream, ReplayError> {
    let dim = real.dim();
    let mut images = real.images().data().to_vec();
    let mut targets = one_hot(real.labels()).into_data();
    let mut provenance = vec![Provenance::Real { task }; real.n()];

    let n_replay = (cfg.replay_ratio * real.n() as f64).round() as usize;
    if task > 0 && n_replay > 0 {
        let gen = state
            .frozen_generator
            .as_ref()
            .expect("snapshot missing after a completed task");
        let sol = state
            .frozen_solver
            .as_ref()
            .expect("snapshot missing after a completed task");
        let replayed = gen
            .generate(n_replay, SampleMode::ReducedBias, None, rng)
            .map_err(|source| ReplayError::Generator { task, source })?;
        let soft = sol.soft_targets(&replayed);
        images.extend_from_slice(replayed.data());
        targets.extend_from_slice(soft.data());
        provenance.extend(std::iter::repeat_n(Provenance::Replay, n_replay));
    }

    let n = provenance.len();
    Ok(TaskStream {
        images: Tensor::from_vec(&[n, dim], images),
        targets: Tensor::from_vec(&[n, NUM_CLASSES], targets),
        provenance,
    })
}

/// Replay purity: real data may only belong to the task being trained.
fn assert_stream_purity(stream: &TaskStream, current_task: usize) {
    for p in &stream.provenance {
        if let Provenance::Real { task } = p {
            assert_eq!(
                *task, current_task,
                "replay purity violated: real task-{} example in task-{} stream",
                task, current_task
            );
        }
    }
}

fn train_solver(
    solver: &mut Solver,
    stream: &TaskStream,
    task: usize,
    cfg: &ReplayConfig,
    rng: &mut Rng,
) -> Result<(), ReplayError> {
    let n = stream.images.rows();
    let dim = stream.images.cols();
    let mut params: Vec<Tensor> = solver.net.params().into_iter().cloned().collect();
    let mut adam = AdamState::new(&params);
    for _ in 0..cfg.epochs_per_task {
        let perm = rng.permutation(n);
        for rows in perm.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(rows.len() * dim);
            let mut tb = Vec::with_capacity(rows.len() * NUM_CLASSES);
            for &r in rows {
                xb.extend_from_slice(stream.images.row(r));
                tb.extend_from_slice(stream.targets.row(r));
            }
            let x = Tensor::from_vec(&[rows.len(), dim], xb);
            let t = Tensor::from_vec(&[rows.len(), NUM_CLASSES], tb);
            let tape = Tape::new();
            let vars = solver.net.leaves(&tape);
            let logits = solver.net.forward(&vars, tape.leaf(x));
            let loss = logits.ce_logits_rows(&t).mean();
            if !loss.value().item().is_finite() {
                return Err(ReplayError::SolverDiverged { task });
            }
            tape.backward(loss);
            let grads: Vec<Tensor> = vars.flat().iter().map(|v| tape.grad(*v)).collect();
            adam.step(&cfg.adam, &mut params, &grads);
            solver.net.set_params(&params);
        }
    }
    Ok(())
}

/// Runs the full fit-sample-replay loop over a split schedule and evaluates
/// per-task test accuracy at the end. Deterministic per `cfg.seed`.
/// `on_task` fires with the completed task count after each task boundary.
pub fn run_generative_replay(
    train_ds: &ImageDataset,
    test_ds: &ImageDataset,
    schedule: &TaskSchedule,
    cfg: &ReplayConfig,
    mut on_task: impl FnMut(usize),
) -> Result<(CLResult, ReplayState), ReplayError> {
    if schedule.kind != ScheduleKind::SplitMnist {
        return Err(ReplayError::BadSchedule(
            "generative replay requires a split schedule".into(),
        ));
    }
    cfg.validate()?;
    let dim = train_ds.dim();
    let prior = LatentPriorConfig::standard(cfg.latent_dim, cfg.gen_variant.effective_r())
        .map_err(ModelError::from)?;
    let generator = VaeModel::new(
        dim,
        cfg.gen_hidden,
        cfg.latent_dim,
        prior,
        cfg.gen_variant,
        cfg.seed ^ fnv1a64("cl-generator"),
    )?;
    let solver = Solver::init(
        dim,
        cfg.solver_hidden,
        &mut Rng::derive(cfg.seed, "cl-solver"),
    );
    let mut state = ReplayState {
        generator,
        solver,
        frozen_generator: None,
        frozen_solver: None,
        task: 0,
    };

    for (t, task) in schedule.tasks.iter().enumerate() {
        let real = schedule.materialize(train_ds, task);
        let mut replay_rng = Rng::derive(cfg.seed, &format!("cl-replay-{}", t));
        let stream = build_stream(&real, t, &state, cfg, &mut replay_rng)?;
        assert_stream_purity(&stream, t);

        let val_rows = stream.images.rows().min(512);
        let val: Vec<f64> = stream.images.data()[..val_rows * dim].to_vec();
        let val = Tensor::from_vec(&[val_rows, dim], val);
        let gen_cfg = TrainConfig {
            epochs: cfg.epochs_per_task,
            batch_size: cfg.batch_size,
            adam: cfg.adam,
            seed: cfg.seed ^ fnv1a64(&format!("cl-gen-task-{}", t)),
        };
        train(&mut state.generator, &stream.images, &val, &gen_cfg)
            .map_err(|source| ReplayError::Generator { task: t, source })?;

        let mut solver_rng = Rng::derive(cfg.seed, &format!("cl-solver-task-{}", t));
        train_solver(&mut state.solver, &stream, t, cfg, &mut solver_rng)?;

        state.frozen_generator = Some(state.generator.clone());
        state.frozen_solver = Some(state.solver.clone());
        state.task = t + 1;
        on_task(state.task);
    }

    let mut per_task = Vec::with_capacity(schedule.num_tasks());
    for task in &schedule.tasks {
        let test = schedule.materialize(test_ds, task);
        per_task.push(state.solver.accuracy(test.images(), test.labels()));
    }
    Ok((CLResult::new(per_task), state))
}

/// Samples routed to their argmax class under the current solver.
pub struct ClassGroup {
    pub class: usize,
    /// `[m, input_dim]`, m <= the requested per-class count.
    pub images: Tensor,
    /// Mean over pixels of the across-sample variance; 0 for m < 2.
    pub pixel_variance: f64,
}

pub struct SampleReport {
    pub groups: Vec<ClassGroup>,
}

fn mean_pixel_variance(images: &Tensor) -> f64 {
    let (n, d) = (images.rows(), images.cols());
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| images.row(i)[j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| {
                let dev = images.row(i)[j] - mean;
                dev * dev
            })
            .sum::<f64>()
            / n as f64;
        total += var;
    }
    total / d as f64
}

/// Generates a pool of samples from the current generator, classifies each
/// with the current solver, and groups them by predicted class, at most
/// `n_per_task` per class. The pool is oversampled (2x the target total)
/// because class routing is not controllable in an unconditional generator;
/// a class the solver never predicts ends up with an empty group. Also
/// reports per-class mean pixel variance, the replay-diversity measure.
pub fn conditional_sample_report(
    state: &ReplayState,
    n_per_task: usize,
    rng: &mut Rng,
) -> Result<SampleReport, ReplayError> {
    if state.task == 0 {
        return Err(ReplayError::BadSchedule(
            "conditional sampling needs at least one completed task".into(),
        ));
    }
    let dim = state.generator.input_dim();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); NUM_CLASSES];
    if n_per_task > 0 {
        let pool = state.generator.generate(
            2 * n_per_task * NUM_CLASSES,
            SampleMode::ReducedBias,
            None,
            rng,
        )?;
        let classes = state.solver.predict(&pool);
        for (i, &c) in classes.iter().enumerate() {
            if buckets[c].len() < n_per_task * dim {
                buckets[c].extend_from_slice(pool.row(i));
            }
        }
    }
    let groups = buckets
        .into_iter()
        .enumerate()
        .map(|(class, data)| {
            let m = data.len() / dim;
            let images = Tensor::from_vec(&[m, dim], data);
            let pixel_variance = mean_pixel_variance(&images);
            ClassGroup {
                class,
                images,
                pixel_variance,
            }
        })
        .collect();
    Ok(SampleReport { groups })
}
