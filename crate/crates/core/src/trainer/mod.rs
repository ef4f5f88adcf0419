//! Training: batch sampling, loss evaluation, update routing, the epoch
//! loop, and checkpoints.
//!
//! One step embeds the batch with the momentum encoder, fits a patch per
//! row, scores point and proxy similarities against those patches, embeds
//! the batch again with the trainable network, and takes one Adam step on
//! each parameter group: network weights from the point and proxy terms,
//! proxies from the proxy and neighborhood terms. Proxies are then projected
//! back onto their constraints and the momentum encoder is averaged in.

pub mod checkpoint;
pub mod loss;
pub mod sampler;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SeedStream};
use crate::dataio::FeatureDataset;
use crate::embedder::{AdamState, EmbedderPair, Mlp};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::linalg::{distance, Matrix};
use crate::manifold::{fit_all_neighborhoods, fit_neighborhood, init_proxies_with, ProxySet};
use crate::similarity::point_similarity_matrix;

use loss::{total_loss, LossBreakdown, ProxySimilarities};
use sampler::{sample_batch, NeighborIndex};

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Epoch the step belongs to (0-based).
    pub epoch: u64,
    /// Global step counter (0-based).
    pub step: u64,
    pub losses: LossBreakdown,
}

impl StepRecord {
    /// `epoch,step,L_point,L_proxy,L_neighborhood,total`
    pub fn log_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.losses.point,
            self.losses.proxy,
            self.losses.neighborhood,
            self.losses.total
        )
    }
}

/// Retrieval metrics measured on the training set at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: u64,
    pub recall_at: BTreeMap<usize, f64>,
}

/// Everything needed to continue training; also the checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub embedder: EmbedderPair,
    pub proxies: ProxySet,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EpochEval>,
}

pub type Checkpoint = TrainState;

/// Progress notifications from [`run_epochs`].
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    EpochEnd(&'a TrainState),
}

impl TrainState {
    /// Fresh state: seeded network, `phi = theta`, proxies placed by
    /// farthest-point sampling over momentum embeddings of the whole dataset.
    pub fn init(dataset: &FeatureDataset, config: &RunConfig) -> Result<Self> {
        config.validate(dataset.dim())?;
        if dataset.len() < config.sampler.batch_size {
            return Err(Error::config(
                "sampler.batch_size",
                format!(
                    "batch of {} exceeds dataset size {}",
                    config.sampler.batch_size,
                    dataset.len()
                ),
            ));
        }
        if config.n_proxies > dataset.len() {
            return Err(Error::config(
                "n_proxies",
                format!("{} proxies exceed dataset size {}", config.n_proxies, dataset.len()),
            ));
        }
        let sizes = config.network.layer_sizes(dataset.dim());
        let theta = Mlp::new(&sizes, config.derive_seed(SeedStream::NetworkInit, 0))?;
        let embedder = EmbedderPair::new(theta, config.network.gamma)?;

        let y = embedder.phi.forward(dataset.features())?;
        let index = NeighborIndex::build(&y, config.manifold.k);
        let proxies = init_proxies_with(
            &y,
            config.n_proxies,
            config.derive_seed(SeedStream::ProxyInit, 0),
            |i| fit_neighborhood(&y, i, index.neighbors(i), &config.manifold),
        )?;
        let adam = AdamState::new(
            embedder.theta.params().len(),
            proxies.param_len(),
            config.optimizer.lr,
            config.optimizer.proxy_lr_multiplier,
        );
        Ok(Self {
            config: config.clone(),
            embedder,
            proxies,
            adam,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.config.sampler.batch_size) as u64
    }
}

/// Network inputs for a batch: the raw rows, or two noisy views per row
/// when augmentation is on.
fn batch_inputs(
    dataset: &FeatureDataset,
    batch: &[usize],
    config: &RunConfig,
    step: u64,
) -> Matrix {
    let x = dataset.features().select_rows(batch);
    let sigma = config.sampler.augment_sigma;
    if sigma == 0.0 {
        return x;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.derive_seed(SeedStream::Augment, step));
    let mut out = Matrix::zeros(2 * x.rows(), x.cols());
    for r in 0..x.rows() {
        for v in 0..2 {
            let row = out.row_mut(2 * r + v);
            for (o, xi) in row.iter_mut().zip(x.row(r)) {
                let e: f64 = rng.sample(StandardNormal);
                *o = xi + sigma * e;
            }
        }
    }
    out
}

/// Everything a step computes before touching parameters.
#[derive(Debug, Clone)]
pub struct StepEvaluation {
    pub losses: LossBreakdown,
    /// Gradient with respect to the flat network parameters.
    pub theta_grad: Vec<f64>,
    /// Gradient with respect to the flat proxy parameters.
    pub proxy_grad: Vec<f64>,
}

/// Losses and routed gradients for `batch` at the current parameters.
pub fn evaluate_step(
    state: &TrainState,
    dataset: &FeatureDataset,
    batch: &[usize],
    threads: usize,
) -> Result<StepEvaluation> {
    let cfg = &state.config;
    let x = batch_inputs(dataset, batch, cfg, state.step);
    let y = state.embedder.phi.forward(&x)?;
    let neighborhoods = fit_all_neighborhoods(&y, &cfg.manifold, threads)?;
    let point_sim = point_similarity_matrix(&y, &neighborhoods, &cfg.similarity)?;
    let proxy_sim = ProxySimilarities::compute(&y, &neighborhoods, &state.proxies, &cfg.similarity)?;
    let z = state.embedder.theta.forward(&x)?;
    let (losses, grads) = total_loss(
        &z,
        &point_sim,
        &neighborhoods,
        &state.proxies,
        &proxy_sim,
        &cfg.loss,
    );
    if !losses.total.is_finite() {
        return Err(non_finite_diagnostic(state, batch, &z, &point_sim, &proxy_sim, losses));
    }
    let theta_grad = state.embedder.theta.backward(&x, &grads.embeddings)?;
    Ok(StepEvaluation {
        losses,
        theta_grad,
        proxy_grad: grads.proxies,
    })
}

fn non_finite_diagnostic(
    state: &TrainState,
    batch: &[usize],
    z: &Matrix,
    point_sim: &Matrix,
    proxy_sim: &ProxySimilarities,
    losses: LossBreakdown,
) -> Error {
    let rows = batch.len().min(z.rows());
    let head = format!(
        "loss not finite at epoch {} step {} ({losses:?})",
        state.epoch, state.step
    );
    for i in 0..point_sim.rows() {
        for j in 0..point_sim.cols() {
            let s = point_sim[(i, j)];
            if !s.is_finite() {
                let sample = |r: usize| batch.get(r % rows.max(1)).copied().unwrap_or(r);
                return Error::NonFinite(format!(
                    "{head}: point pair rows ({i},{j}) samples ({},{}) similarity {s} distance {}",
                    sample(i),
                    sample(j),
                    distance(z.row(i), z.row(j))
                ));
            }
        }
    }
    let ps = proxy_sim.values();
    for i in 0..ps.rows() {
        for j in 0..ps.cols() {
            let s = ps[(i, j)];
            let dist = distance(z.row(i), state.proxies.location(j));
            if !s.is_finite() || !dist.is_finite() {
                return Error::NonFinite(format!(
                    "{head}: proxy pair (row {i}, proxy {j}) similarity {s} distance {dist}"
                ));
            }
        }
    }
    Error::NonFinite(head)
}

/// One optimizer step on `batch`.
pub fn train_step(
    state: &mut TrainState,
    dataset: &FeatureDataset,
    batch: &[usize],
    threads: usize,
) -> Result<StepRecord> {
    let eval = evaluate_step(state, dataset, batch, threads)?;
    state
        .adam
        .network
        .step(state.embedder.theta.params_mut(), &eval.theta_grad)?;
    let mut flat = state.proxies.to_flat();
    state.adam.proxies.step(&mut flat, &eval.proxy_grad)?;
    state.proxies.set_flat(&flat)?;
    state.proxies.project_to_constraints()?;
    state.embedder.ema_update();

    let record = StepRecord {
        epoch: state.epoch,
        step: state.step,
        losses: eval.losses,
    };
    state.step += 1;
    state.history.push(record);
    Ok(record)
}

/// Deterministic batch for global step `step`.
pub fn batch_for_step(state: &TrainState, index: &NeighborIndex, step: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.derive_seed(SeedStream::Sampler, step));
    sample_batch(index, &state.config.sampler, &mut rng)
}

/// Trains until `state.epoch == until_epoch`. The sampling index is rebuilt
/// from momentum embeddings at the start of every `knn_refresh_epochs`-th
/// epoch and on entry. Resuming is bit-exact when the stored epoch is a
/// multiple of the refresh period.
pub fn run_epochs(
    state: &mut TrainState,
    dataset: &FeatureDataset,
    until_epoch: u64,
    threads: usize,
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<()> {
    let mut index: Option<NeighborIndex> = None;
    let steps = state.steps_per_epoch(dataset.len());
    let group = state.config.sampler.k();
    while state.epoch < until_epoch {
        if index.is_none() || state.epoch % state.config.knn_refresh_epochs == 0 {
            let y = state.embedder.phi.forward(dataset.features())?;
            index = Some(NeighborIndex::build(&y, group.saturating_sub(1)));
        }
        let idx = index.as_ref().unwrap();
        for _ in 0..steps {
            let batch = batch_for_step(state, idx, state.step)?;
            let record = train_step(state, dataset, &batch, threads)?;
            observer(TrainEvent::Step(&record))?;
        }
        state.epoch += 1;
        if let Some(e) = epoch_eval(state, dataset)? {
            state.evals.push(e);
        }
        observer(TrainEvent::EpochEnd(state))?;
    }
    Ok(())
}

fn epoch_eval(state: &TrainState, dataset: &FeatureDataset) -> Result<Option<EpochEval>> {
    let ks = &state.config.eval_recall_k;
    let Some(labels) = dataset.labels() else {
        return Ok(None);
    };
    if ks.is_empty() || ks.iter().any(|&k| k + 1 > dataset.len()) {
        return Ok(None);
    }
    let z = state.embedder.theta.forward(dataset.features())?;
    Ok(Some(EpochEval {
        epoch: state.epoch,
        recall_at: recall_at_k(&z, labels, ks)?,
    }))
}

/// Initializes and trains for `config.epochs` epochs without any I/O.
pub fn train(dataset: &FeatureDataset, config: &RunConfig, threads: usize) -> Result<TrainState> {
    let mut state = TrainState::init(dataset, config)?;
    run_epochs(&mut state, dataset, config.epochs, threads, &mut |_| Ok(()))?;
    Ok(state)
}

/// File outputs of a run.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub final_checkpoint: PathBuf,
    pub metric_log: PathBuf,
}

/// Trains `state` to `config.epochs`, appending step records (and per-epoch
/// eval records) to `metrics.log` in `dir`, writing `epoch_NNNN.plck` every
/// `checkpoint_every` epochs and `final.plck` at the end.
pub fn run_to_dir(
    state: &mut TrainState,
    dataset: &FeatureDataset,
    dir: &Path,
    threads: usize,
) -> Result<RunOutputs> {
    use std::io::Write;

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join("metrics.log");
    let fresh = state.step == 0 && state.epoch == 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    if fresh {
        writeln!(log, "epoch,step,L_point,L_proxy,L_neighborhood,total")
            .map_err(|e| Error::io(&log_path, e))?;
    }
    let every = state.config.checkpoint_every;
    let until = state.config.epochs;
    run_epochs(state, dataset, until, threads, &mut |ev| {
        match ev {
            TrainEvent::Step(r) => {
                writeln!(log, "{}", r.log_line()).map_err(|e| Error::io(&log_path, e))?;
            }
            TrainEvent::EpochEnd(s) => {
                if let Some(e) = s.evals.last().filter(|e| e.epoch == s.epoch) {
                    let fields: Vec<String> = e
                        .recall_at
                        .iter()
                        .map(|(k, v)| format!("recall@{k}={v}"))
                        .collect();
                    writeln!(log, "eval epoch={} {}", e.epoch, fields.join(" "))
                        .map_err(|e| Error::io(&log_path, e))?;
                }
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                if every > 0 && s.epoch % every == 0 {
                    checkpoint::save(s, &dir.join(format!("epoch_{:04}.plck", s.epoch)))?;
                }
            }
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = dir.join("final.plck");
    checkpoint::save(state, &final_checkpoint)?;
    Ok(RunOutputs {
        final_checkpoint,
        metric_log: log_path,
    })
}
