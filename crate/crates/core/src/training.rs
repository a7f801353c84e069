//! EM estimation in batch and mini-batch stepwise form, plus state
//! splitting for growing the model.
//!
//! Determinism contract: expected counts are produced per tree and merged in
//! ascending tree position, no matter how many worker threads computed the
//! underlying message passes. Runs with the same seed and corpus therefore
//! produce bit-identical models at any thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DepTree;
use crate::inference::{infer, tree_log_likelihood, BeliefTable, InferenceError, ProjectionConfig};
use crate::model::{ModelMeta, ModelParams};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sentence {sentence}: {source}")]
    Inference {
        sentence: usize,
        source: InferenceError,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split schedule is empty")]
    EmptySchedule,
    #[error("bad training config: {0}")]
    Config(String),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Batch,
    Stepwise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Stepwise learning-rate decay power; update t uses (t+2)^(-alpha).
    pub alpha: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub proj: ProjectionConfig,
    /// Additive pseudo-count applied in every M-step.
    pub smoothing: f64,
    /// Fraction of the corpus reserved for per-epoch held-out scoring.
    pub heldout_fraction: f64,
    pub seed: u64,
    /// Stop early when the trace improves by less than this relative margin.
    pub stop_rel_tol: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Stepwise,
            alpha: 1.0,
            minibatch_size: 1000,
            epochs: 2,
            proj: ProjectionConfig::exact(),
            smoothing: 0.0,
            heldout_fraction: 0.05,
            seed: 42,
            stop_rel_tol: None,
        }
    }
}

fn check_config(config: &TrainConfig) -> Result<(), TrainError> {
    if config.minibatch_size < 1 {
        return Err(TrainError::Config("minibatch size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(TrainError::Config(format!(
            "alpha {} outside [0, 1]",
            config.alpha
        )));
    }
    if !(0.0..1.0).contains(&config.heldout_fraction) {
        return Err(TrainError::Config(format!(
            "heldout fraction {} outside [0, 1)",
            config.heldout_fraction
        )));
    }
    if !(config.smoothing >= 0.0 && config.smoothing.is_finite()) {
        return Err(TrainError::Config(format!(
            "smoothing {} must be a finite non-negative number",
            config.smoothing
        )));
    }
    Ok(())
}

/// Expected counts from one or more E-steps: `tau[i,j,l]` child-parent
/// transition mass, `omega[w,j,l]` emission mass, `rho[i,l]` mass on states
/// attached to the synthetic root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub tau: Tensor3,
    pub omega: Tensor3,
    pub rho: Tensor3,
    pub tree_count: u64,
}

impl SufficientStats {
    pub fn zeros(meta: ModelMeta) -> SufficientStats {
        SufficientStats {
            tau: Tensor3::zeros(meta.n, meta.n, meta.s),
            omega: Tensor3::zeros(meta.v, meta.n, meta.s),
            rho: Tensor3::zeros(meta.n, 1, meta.s),
            tree_count: 0,
        }
    }

    /// One pseudo-observation per column, shaped like `params`. Seeds the
    /// stepwise running average so early M-steps keep every column proper.
    pub fn from_params(params: &ModelParams) -> SufficientStats {
        SufficientStats {
            tau: params.trans.clone(),
            omega: params.emit.clone(),
            rho: params.root.clone(),
            tree_count: 0,
        }
    }

    pub fn add(&mut self, other: &SufficientStats) {
        self.tau.add(&other.tau);
        self.omega.add(&other.omega);
        self.rho.add(&other.rho);
        self.tree_count += other.tree_count;
    }

    pub fn scale(&mut self, c: f64) {
        self.tau.scale(c);
        self.omega.scale(c);
        self.rho.scale(c);
    }

    /// Running-average update toward `other`; `tree_count` is untouched
    /// because a blended value has no count interpretation.
    pub fn blend(&mut self, eta: f64, other: &SufficientStats) {
        self.tau.blend(eta, &other.tau);
        self.omega.blend(eta, &other.omega);
        self.rho.blend(eta, &other.rho);
    }
}

/// Adds one completed inference pass into the running counts.
fn add_table(stats: &mut SufficientStats, tree: &DepTree, table: &BeliefTable) {
    let n = stats.tau.rows();
    for (k, node) in tree.nodes.iter().enumerate() {
        let post = table.node_posterior(k);
        for (j, &p) in post.iter().enumerate() {
            *stats.omega.at_mut(node.word, j, node.func) += p;
        }
        match table.edge_posterior(k) {
            Some(edge) => {
                for j in 0..n {
                    let col = stats.tau.col_mut(j, node.func);
                    for (i, c) in col.iter_mut().enumerate() {
                        *c += edge[i * n + j];
                    }
                }
            }
            None => {
                let col = stats.rho.col_mut(0, node.func);
                for (i, c) in col.iter_mut().enumerate() {
                    *c += post[i];
                }
            }
        }
    }
    stats.tree_count += 1;
}

/// E-step for a single tree, accumulated into `stats`.
pub fn accumulate_estep(
    tree: &DepTree,
    params: &ModelParams,
    proj: ProjectionConfig,
    stats: &mut SufficientStats,
) -> Result<(), TrainError> {
    let table = infer(tree, params, proj).map_err(|source| TrainError::Inference {
        sentence: tree.sentence_id,
        source,
    })?;
    add_table(stats, tree, &table);
    Ok(())
}

/// Message passes fan out across worker threads in windows of this many
/// trees; results merge strictly in tree order.
const ESTEP_CHUNK: usize = 32;

/// Full E-step over `trees`, returning the counts and the summed
/// log-likelihood of the same pass. Parallel but order-deterministic.
pub fn corpus_estep(
    trees: &[&DepTree],
    params: &ModelParams,
    proj: ProjectionConfig,
) -> Result<(SufficientStats, f64), TrainError> {
    let mut stats = SufficientStats::zeros(params.meta);
    let mut ll = 0.0;
    for chunk in trees.chunks(ESTEP_CHUNK) {
        let tables: Vec<BeliefTable> = chunk
            .par_iter()
            .map(|tree| {
                infer(tree, params, proj).map_err(|source| TrainError::Inference {
                    sentence: tree.sentence_id,
                    source,
                })
            })
            .collect::<Result<_, _>>()?;
        for (tree, table) in chunk.iter().zip(&tables) {
            add_table(&mut stats, tree, table);
            ll += table.log_likelihood();
        }
    }
    Ok((stats, ll))
}

/// Normalizes counts into conditional distributions, adding `smoothing` to
/// every cell first. Columns left without mass fall back to uniform; their
/// number is logged once per tensor.
pub fn m_step(stats: &SufficientStats, smoothing: f64, meta: ModelMeta) -> ModelParams {
    assert!(
        stats.tau.rows() == meta.n && stats.omega.rows() == meta.v && stats.tau.funcs() == meta.s,
        "stats shaped [{}x{}x{}] do not match meta {:?}",
        stats.tau.rows(),
        stats.omega.rows(),
        stats.tau.funcs(),
        meta
    );
    let mut params = ModelParams::zeros(meta);
    for (name, src, dst) in [
        ("transition", &stats.tau, &mut params.trans),
        ("emission", &stats.omega, &mut params.emit),
        ("root", &stats.rho, &mut params.root),
    ] {
        let mut empty = 0usize;
        let rows = dst.rows();
        for l in 0..dst.funcs() {
            for j in 0..dst.cols() {
                let col = dst.col_mut(j, l);
                let mut sum = 0.0;
                for (c, &x) in col.iter_mut().zip(src.col(j, l)) {
                    *c = x + smoothing;
                    sum += *c;
                }
                if sum > 0.0 {
                    for c in col.iter_mut() {
                        *c /= sum;
                    }
                } else {
                    empty += 1;
                    col.fill(1.0 / rows as f64);
                }
            }
        }
        if empty > 0 {
            log::warn!("m_step: {empty} {name} columns had no mass, set to uniform");
        }
    }
    params
}

/// Whole-corpus EM. The trace holds the corpus log-likelihood measured
/// before each M-step, so a monotone trace certifies the updates.
pub fn train_batch_em(
    corpus: &[DepTree],
    params0: &ModelParams,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>), TrainError> {
    check_config(config)?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let trees: Vec<&DepTree> = corpus.iter().collect();
    let mut params = params0.clone();
    let mut trace: Vec<f64> = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (stats, ll) = corpus_estep(&trees, &params, config.proj)?;
        params = m_step(&stats, config.smoothing, params.meta);
        let stop = matches!(
            (config.stop_rel_tol, trace.last()),
            (Some(tol), Some(&prev)) if ll - prev <= tol * prev.abs()
        );
        trace.push(ll);
        if stop {
            break;
        }
    }
    Ok((params, trace))
}

fn stepwise_eta(t: u64, alpha: f64) -> f64 {
    ((t + 2) as f64).powf(-alpha)
}

/// Exact log-likelihood summed over the listed trees. Trees whose
/// probability vanishes contribute negative infinity (with one aggregate
/// warning) instead of aborting; dimension mismatches still fail.
pub fn corpus_log_likelihood(
    corpus: &[DepTree],
    idx: &[usize],
    params: &ModelParams,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut degenerate = 0usize;
    for &i in idx {
        let tree = &corpus[i];
        match tree_log_likelihood(tree, params) {
            Ok(ll) if ll.is_finite() => total += ll,
            Ok(_) | Err(InferenceError::ZeroBelief { .. }) => {
                degenerate += 1;
                total = f64::NEG_INFINITY;
            }
            Err(source) => {
                return Err(TrainError::Inference {
                    sentence: tree.sentence_id,
                    source,
                })
            }
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} trees had zero probability during scoring");
    }
    Ok(total)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"THMS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Mini-batch stepwise EM state: the running-average statistics, the global
/// update counter, and the epoch counter that keys the shuffle stream.
/// Parameters are always the M-step image of the running average.
#[derive(Debug, Clone)]
pub struct StepwiseTrainer {
    params: ModelParams,
    mu: SufficientStats,
    t: u64,
    epoch: u64,
    config: TrainConfig,
}

impl StepwiseTrainer {
    pub fn new(params0: &ModelParams, config: &TrainConfig) -> Result<StepwiseTrainer, TrainError> {
        check_config(config)?;
        Ok(StepwiseTrainer {
            params: params0.clone(),
            mu: SufficientStats::from_params(params0),
            t: 0,
            epoch: 0,
            config: config.clone(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn updates(&self) -> u64 {
        self.t
    }

    /// One pass over the training indices: shuffle (keyed by the epoch
    /// counter), then per mini-batch scale the counts to corpus size, fold
    /// them into the running average with weight (t+2)^(-alpha), and
    /// re-derive parameters. Within a batch, trees merge in corpus order.
    pub fn run_epoch(&mut self, corpus: &[DepTree], train_idx: &[usize]) -> Result<(), TrainError> {
        let mut order: Vec<usize> = train_idx.to_vec();
        let mut rng = stream_rng(self.config.seed, Stream::Shuffle(self.epoch));
        order.shuffle(&mut rng);
        let n_train = order.len();
        for batch in order.chunks(self.config.minibatch_size) {
            let mut idx: Vec<usize> = batch.to_vec();
            idx.sort_unstable();
            let trees: Vec<&DepTree> = idx.iter().map(|&i| &corpus[i]).collect();
            let (mut stats, _) = corpus_estep(&trees, &self.params, self.config.proj)?;
            stats.scale(n_train as f64 / batch.len() as f64);
            self.mu.blend(stepwise_eta(self.t, self.config.alpha), &stats);
            self.params = m_step(&self.mu, self.config.smoothing, self.params.meta);
            self.t += 1;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = self.params.meta;
        for x in [
            self.t,
            self.epoch,
            self.config.seed,
            meta.n as u64,
            meta.v as u64,
            meta.s as u64,
            meta.seed,
        ] {
            w.write_all(&x.to_le_bytes())?;
        }
        for tensor in [&self.mu.tau, &self.mu.omega, &self.mu.rho] {
            let mut buf = Vec::with_capacity(tensor.data().len() * 8);
            for &x in tensor.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Restores a trainer from `save_checkpoint` output. Parameters are
    /// re-derived from the stored running average via the M-step, which is
    /// exactly how they were produced before saving.
    pub fn from_checkpoint(path: &Path, config: &TrainConfig) -> Result<StepwiseTrainer, TrainError> {
        check_config(config)?;
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| TrainError::Corrupt(format!("header short: {e}")))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Corrupt(format!(
                "bad magic bytes {magic:?}, not a checkpoint"
            )));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)
            .map_err(|e| TrainError::Corrupt(format!("header short: {e}")))?;
        let ver = u32::from_le_bytes(ver);
        if ver != CHECKPOINT_VERSION {
            return Err(TrainError::Corrupt(format!("unsupported version {ver}")));
        }
        let mut word = || -> Result<u64, TrainError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| TrainError::Corrupt(format!("header short: {e}")))?;
            Ok(u64::from_le_bytes(b))
        };
        let t = word()?;
        let epoch = word()?;
        let seed = word()?;
        let n = word()? as usize;
        let v = word()? as usize;
        let s = word()? as usize;
        let init_seed = word()?;
        if seed != config.seed {
            return Err(TrainError::Config(format!(
                "checkpoint was trained with seed {seed}, config says {}",
                config.seed
            )));
        }
        let meta = ModelMeta::new(n, v, s, init_seed);
        if !meta.shape_ok() {
            return Err(TrainError::Corrupt(format!("implausible shape {meta:?}")));
        }
        let mut mu = SufficientStats::zeros(meta);
        for tensor in [&mut mu.tau, &mut mu.omega, &mut mu.rho] {
            let mut buf = vec![0u8; tensor.data().len() * 8];
            r.read_exact(&mut buf)
                .map_err(|e| TrainError::Corrupt(format!("statistics short: {e}")))?;
            for (x, c) in tensor.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
                *x = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
        let params = m_step(&mu, config.smoothing, meta);
        Ok(StepwiseTrainer {
            params,
            mu,
            t,
            epoch,
            config: config.clone(),
        })
    }
}

/// Splits off the held-out set: indices shuffled once under the Heldout
/// stream, the first round(fraction * n) reserved, both sides returned in
/// ascending corpus order.
pub fn heldout_split(
    n: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::Heldout);
    order.shuffle(&mut rng);
    let h = (fraction * n as f64).round() as usize;
    if h >= n {
        return Err(TrainError::Config(format!(
            "heldout fraction {fraction} leaves no training data"
        )));
    }
    let mut heldout: Vec<usize> = order[..h].to_vec();
    let mut train: Vec<usize> = order[h..].to_vec();
    heldout.sort_unstable();
    train.sort_unstable();
    Ok((heldout, train))
}

/// Mini-batch stepwise EM. The trace starts with the held-out score of the
/// starting parameters and gains one entry per epoch; with a zero held-out
/// fraction those entries are all zero.
pub fn train_stepwise_em(
    corpus: &[DepTree],
    params0: &ModelParams,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>), TrainError> {
    check_config(config)?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (heldout, train) = heldout_split(corpus.len(), config.heldout_fraction, config.seed)?;
    let mut trainer = StepwiseTrainer::new(params0, config)?;
    let mut trace = vec![corpus_log_likelihood(corpus, &heldout, params0)?];
    for _ in 0..config.epochs {
        trainer.run_epoch(corpus, &train)?;
        let ll = corpus_log_likelihood(corpus, &heldout, trainer.params())?;
        let stop = matches!(
            (config.stop_rel_tol, trace.last()),
            (Some(tol), Some(&prev)) if prev.is_finite() && ll - prev <= tol * prev.abs()
        );
        trace.push(ll);
        if stop {
            break;
        }
    }
    Ok((trainer.into_params(), trace))
}

/// Doubles the state count by cloning state s into 2s and 2s+1. Transition
/// mass toward s is halved across the clones, emission columns are copied,
/// and every entry is then jittered by a factor (1 + u), u uniform in
/// (-noise, +noise), before renormalization. At noise 0+ the represented
/// distribution over trees is unchanged.
pub fn split_states(params: &ModelParams, noise: f64, seed: u64) -> ModelParams {
    assert!(noise > 0.0, "split noise must be positive");
    let meta = params.meta;
    let meta2 = ModelMeta::new(meta.n * 2, meta.v, meta.s, meta.seed);
    let mut out = ModelParams::zeros(meta2);

    for l in 0..meta.s {
        for j2 in 0..meta2.n {
            let src = params.trans.col(j2 / 2, l);
            let dst = out.trans.col_mut(j2, l);
            for i2 in 0..meta2.n {
                dst[i2] = src[i2 / 2] * 0.5;
            }
        }
        for j2 in 0..meta2.n {
            out.emit.col_mut(j2, l).copy_from_slice(params.emit.col(j2 / 2, l));
        }
        let src = params.root.col(0, l);
        let dst = out.root.col_mut(0, l);
        for i2 in 0..meta2.n {
            dst[i2] = src[i2 / 2] * 0.5;
        }
    }

    let mut rng = stream_rng(seed, Stream::SplitNoise);
    for tensor in [&mut out.trans, &mut out.emit, &mut out.root] {
        for x in tensor.data_mut() {
            *x *= 1.0 + rng.gen_range(-noise..noise);
        }
        tensor.normalize_cols();
    }
    out
}

/// One leg of a split schedule: train for `epochs`, then optionally split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPhase {
    pub epochs: usize,
    pub split_after: bool,
}

/// Alternates training rounds and state splits. Each phase trains with
/// `config` (epochs overridden by the phase) in the configured mode; round
/// r's split noise runs under seed + r so rounds draw distinct jitter.
/// Returns the final parameters and one trace per phase.
pub fn train_with_splitting(
    corpus: &[DepTree],
    params0: &ModelParams,
    config: &TrainConfig,
    schedule: &[SplitPhase],
    split_noise: f64,
) -> Result<(ModelParams, Vec<Vec<f64>>), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if schedule.is_empty() {
        return Err(TrainError::EmptySchedule);
    }
    let mut params = params0.clone();
    let mut traces = Vec::with_capacity(schedule.len());
    let mut rounds = 0u64;
    for phase in schedule {
        let mut phase_config = config.clone();
        phase_config.epochs = phase.epochs;
        let (next, trace) = match config.mode {
            TrainMode::Batch => train_batch_em(corpus, &params, &phase_config)?,
            TrainMode::Stepwise => train_stepwise_em(corpus, &params, &phase_config)?,
        };
        params = next;
        traces.push(trace);
        if phase.split_after {
            params = split_states(&params, split_noise, config.seed.wrapping_add(rounds));
            rounds += 1;
        }
    }
    Ok((params, traces))
}
