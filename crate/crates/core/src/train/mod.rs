//! Training loop, inference and dataset evaluation.

pub mod checkpoint;
pub mod config;
pub mod optimizer;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::Checkpoint;
pub use config::{learning_rate_at, LossMode, OptimizerKind, RegularizationPreset, TrainConfig};
pub use optimizer::OptimizerState;

use crate::autodiff::{Array, Tape};
use crate::error::{Error, Result};
use crate::geometry::{self, FlowField, FlowSequence, NeighborIndexLists};
use crate::model::{forward, forward_on_tape, ModelParameters};
use crate::objectives::{tape_sequence_loss, DataTerm, LossWeights, MetricsAccumulator, MetricsRecord};
use crate::synthetic::ScenePair;

/// Environment variable capping worker threads (0 or unset: one per core).
pub const THREADS_ENV: &str = "FLOWSTEP_THREADS";

pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

/// Loss of one optimizer step (mean over the batch).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
}

/// Sequence loss and parameter gradients for one scene.
pub fn scene_gradient(
    params: &ModelParameters,
    config: &TrainConfig,
    scene: &ScenePair,
    neighborhoods: &NeighborIndexLists,
    weights: &LossWeights,
) -> Result<(f64, Vec<Array>)> {
    let tape = Tape::new();
    let m = params.bind(&tape);
    let trace = forward_on_tape(&tape, &m, &scene.source, &scene.target, config.k_train)?;
    let data = match config.loss_mode {
        LossMode::SelfSupervised => DataTerm::Chamfer {
            target: &scene.target,
            normalize: config.chamfer_normalize,
        },
        LossMode::Full => DataTerm::L1 {
            gt: scene
                .gt_flow
                .as_ref()
                .ok_or_else(|| Error::MissingGroundTruth(vec![scene.id.clone()]))?,
        },
    };
    let loss = tape_sequence_loss(&tape, &scene.source, &trace.flows, data, weights, neighborhoods)?;
    let grads = tape.gradient(loss, m.vars())?;
    Ok((tape.scalar(loss), grads))
}

/// Path of the CSV loss log written next to a checkpoint.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_os_string();
    name.push(".loss.csv");
    PathBuf::from(name)
}

/// Trains from the seeded initialization. When `out` is given the checkpoint
/// is rewritten after every epoch and a CSV loss log is kept beside it.
pub fn train(config: &TrainConfig, scenes: &[ScenePair], out: Option<&Path>) -> Result<TrainReport> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.loss_mode == LossMode::Full {
        let missing: Vec<String> = scenes.iter().filter(|s| s.gt_flow.is_none()).map(|s| s.id.clone()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingGroundTruth(missing));
        }
    }
    let weights = config.weights()?;
    let neighborhoods: Vec<NeighborIndexLists> = scenes
        .iter()
        .map(|s| geometry::regularization_neighborhood(&s.source, config.k_a, config.k_b, config.r_b, config.neighborhood_seed))
        .collect::<Result<_>>()?;
    let mut params = ModelParameters::new(config.model.clone(), config.init_seed)?;
    let mut optimizer = OptimizerState::new(config.optimizer, &params);
    let pool = thread_pool()?;
    let mut log = match out {
        Some(p) => {
            let path = loss_log_path(p);
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "epoch,step,learning_rate,loss").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut steps = Vec::new();
    let mut checkpoint = Checkpoint {
        config: config.clone(),
        epoch: 0,
        params: params.clone(),
        optimizer: optimizer.clone(),
    };
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, Vec<Array>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| scene_gradient(&params, config, &scenes[i], &neighborhoods[i], &weights))
                    .collect()
            });
            let mut total = 0.0;
            let mut grads: Option<Vec<Array>> = None;
            for (&i, r) in batch.iter().zip(results) {
                let (loss, g) = r?;
                if !loss.is_finite() || g.iter().any(|a| !a.all_finite()) {
                    log::error!(
                        "non-finite loss {loss} on scene '{}' ({} source / {} target points), epoch {epoch}, step {step}",
                        scenes[i].id,
                        scenes[i].source.len(),
                        scenes[i].target.len()
                    );
                    return Err(Error::NonFiniteLoss {
                        scene_id: scenes[i].id.clone(),
                        epoch,
                        step,
                    });
                }
                total += loss;
                match grads.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("batches are nonempty");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(scale));
            optimizer.apply(&mut params, &grads, lr, config.momentum)?;
            let record = StepRecord {
                epoch,
                step,
                learning_rate: lr,
                loss: total * scale,
            };
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{},{},{},{}", record.epoch, record.step, record.learning_rate, record.loss)
                    .map_err(|e| Error::io(&*path, e))?;
            }
            epoch_loss += total;
            steps.push(record);
            step += 1;
        }
        log::info!(
            "epoch {}/{} lr {lr} mean loss {:.6}",
            epoch + 1,
            config.epochs,
            epoch_loss / scenes.len() as f64
        );
        checkpoint = Checkpoint {
            config: config.clone(),
            epoch: epoch as u64 + 1,
            params: params.clone(),
            optimizer: optimizer.clone(),
        };
        if let Some(p) = out {
            checkpoint.save(p)?;
        }
    }
    if let Some((f, path)) = log.as_mut() {
        f.flush().map_err(|e| Error::io(&*path, e))?;
    }
    Ok(TrainReport { checkpoint, steps })
}

/// Flow sequence `F_1..F_K` for one scene.
pub fn infer(params: &ModelParameters, scene: &ScenePair, iterations: usize) -> Result<FlowSequence> {
    forward(params, &scene.source, &scene.target, iterations)
}

/// Point-weighted dataset metrics of an arbitrary predictor.
pub fn evaluate_with<F>(scenes: &[ScenePair], predict: F) -> Result<MetricsRecord>
where
    F: Fn(&ScenePair) -> Result<FlowField> + Sync,
{
    let missing: Vec<String> = scenes.iter().filter(|s| s.gt_flow.is_none()).map(|s| s.id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let pool = thread_pool()?;
    let predictions: Vec<Result<FlowField>> = pool.install(|| scenes.par_iter().map(&predict).collect());
    let mut acc = MetricsAccumulator::default();
    for (scene, pred) in scenes.iter().zip(predictions) {
        acc.add(&pred?, scene.gt_flow.as_ref().expect("checked above"))?;
    }
    acc.record()
}

/// Metrics of `F_K` over a dataset.
pub fn evaluate_dataset(params: &ModelParameters, scenes: &[ScenePair], iterations: usize) -> Result<MetricsRecord> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    evaluate_with(scenes, |s| Ok(infer(params, s, iterations)?.last().clone()))
}
