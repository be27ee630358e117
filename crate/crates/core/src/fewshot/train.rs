//! Episodic training and evaluation loops.
//!
//! Training is sequential (parameter updates serialize); evaluation can
//! fan episodes out to worker threads, each with its own derived random
//! stream, and merges the per-episode results in index order so the
//! reported numbers do not depend on the worker count.

use std::io::Write;

use thiserror::Error;

use crate::fewshot::{sample_episode, Episode, EpisodeError, NoiseSpec, Partition, SplitSpec};
use crate::losses::{self, LossConfig, LossError};
use crate::model::{ModelError, SscfModel};
use crate::rng::Rng;
use crate::tensor::{self, BnMode, Tensor};

use super::{add_gaussian_noise, Dataset};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("loss became NaN at episode {episode}; aborting (lr too high or degenerate data)")]
    NanLoss { episode: usize },
    #[error("metrics io error: {0}")]
    MetricsIo(#[from] std::io::Error),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cosine_decay: bool,
    pub loss: LossConfig,
    pub seed: u64,
    /// Noise injected into training episodes (usually absent; robustness
    /// studies perturb the test episodes instead).
    pub train_noise: Option<NoiseSpec>,
    /// Print a progress record to stdout every this many episodes
    /// (0 silences progress output).
    pub log_every: usize,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRecord {
    pub episode: usize,
    pub loss_tet: f64,
    pub loss_info: f64,
    pub loss_total: f64,
    pub accuracy: f64,
    /// Wall-clock episode time. Reported on the live stream only; the
    /// persisted metrics file omits it so identical runs produce
    /// byte-identical files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

/// Where metrics records go: an optional JSON-lines file (deterministic
/// fields only) and optional stdout progress.
#[derive(Default)]
pub struct MetricsSink {
    pub file: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsSink {
    pub fn to_file(path: &std::path::Path) -> Result<Self, std::io::Error> {
        Ok(MetricsSink {
            file: Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        })
    }

    fn write(&mut self, record: &MetricsRecord) -> Result<(), std::io::Error> {
        if let Some(f) = &mut self.file {
            let mut persisted = record.clone();
            persisted.elapsed_ms = None;
            serde_json::to_writer(&mut *f, &persisted)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), std::io::Error> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
}

/// Cosine decay from `lr` to zero across the run.
fn lr_at(config: &TrainConfig, episode: usize) -> f64 {
    if !config.cosine_decay || config.episodes <= 1 {
        return config.lr;
    }
    let progress = episode as f64 / config.episodes as f64;
    config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Computes both loss terms and the episode accuracy for one episode
/// forward. Terms excluded from the total by the lambda endpoints are
/// still evaluated (detached) for the metrics stream.
pub fn episode_losses(
    model: &SscfModel,
    episode: &Episode,
    split: &SplitSpec,
    loss_cfg: &LossConfig,
    mode: BnMode,
) -> Result<(Tensor, f64, f64, f64, Vec<crate::model::BnUpdate>), TrainError> {
    let lambda = loss_cfg.lambda;
    let with_embedding_grad = lambda < 1.0;
    let fwd = model.forward_episode(&episode.support, &episode.query, mode, with_embedding_grad, None)?;

    // Head labels: position of each query's class within the train split.
    let ns = episode.support.len();
    let nq = episode.query.len();
    let mut head_labels = Vec::with_capacity(nq);
    for (_, cid) in &episode.query {
        head_labels.push(split.train_label(*cid).unwrap_or(0));
    }
    let t = fwd.logits_seq.shape()[0];
    let classes = fwd.logits_seq.shape()[2];
    let query_logits = fwd
        .logits_seq
        .permute(&[1, 0, 2])?
        .slice_axis0(ns, nq)?
        .permute(&[1, 0, 2])?
        .reshape(&[t, nq, classes])?;

    let tet = if lambda > 0.0 {
        losses::tet_loss(&query_logits, &head_labels)?
    } else {
        tensor::no_grad(|| losses::tet_loss(&query_logits, &head_labels))?
    };
    let info = if lambda < 1.0 {
        losses::infonce_loss(&fwd.embeddings, loss_cfg.tau_c)?
    } else {
        tensor::no_grad(|| losses::infonce_loss(&fwd.embeddings, loss_cfg.tau_c))?
    };
    let total = losses::total_loss(&tet, &info, lambda)?;

    let predictions = losses::classify_query(&fwd.embeddings)?;
    let correct = predictions
        .iter()
        .zip(&episode.query)
        .filter(|(pred, (_, cid))| *pred == cid)
        .count();
    let accuracy = correct as f64 / nq.max(1) as f64;
    Ok((
        total,
        tet.item(),
        info.item(),
        accuracy,
        fwd.bn_updates,
    ))
}

/// Episodic training with SGD-momentum updates, one metrics record per
/// episode. Aborts on a NaN loss.
pub fn train(
    model: &mut SscfModel,
    dataset: &Dataset,
    split: &SplitSpec,
    config: &TrainConfig,
    sink: &mut MetricsSink,
) -> Result<TrainOutcome, TrainError> {
    let mut sample_rng = Rng::new(config.seed).derive(0x0001);
    let mut noise_rng = Rng::new(config.seed).derive(0x0002);
    let mut records = Vec::with_capacity(config.episodes);
    for ep in 0..config.episodes {
        let started = std::time::Instant::now();
        let mut episode = sample_episode(
            dataset,
            &split.train,
            config.n_way,
            config.k_shot,
            config.q_queries,
            &mut sample_rng,
        )?;
        if let Some(noise) = config.train_noise {
            for (t, _) in episode.support.iter_mut().chain(episode.query.iter_mut()) {
                *t = add_gaussian_noise(t, noise, &mut noise_rng);
            }
        }
        let (total, loss_tet, loss_info, accuracy, bn_updates) =
            episode_losses(model, &episode, split, &config.loss, BnMode::Train)?;
        let loss_total = total.item();
        if !loss_total.is_finite() {
            return Err(TrainError::NanLoss { episode: ep });
        }
        model.zero_grad();
        tensor::backward(&total)?;
        model.sgd_step(lr_at(config, ep), config.momentum);
        model.apply_bn_updates(bn_updates);

        let record = MetricsRecord {
            episode: ep,
            loss_tet,
            loss_info,
            loss_total,
            accuracy,
            elapsed_ms: Some(started.elapsed().as_millis() as u64),
        };
        sink.write(&record)?;
        if config.log_every > 0 && (ep % config.log_every == 0 || ep + 1 == config.episodes) {
            println!(
                "{}",
                serde_json::to_string(&record).expect("metrics record serializes")
            );
        }
        records.push(record);
    }
    sink.finish()?;
    Ok(TrainOutcome { records })
}

/// Accuracy over evaluation episodes with a normal-approximation 95%
/// confidence interval.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

/// Evaluation settings beyond the episode shape.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub partition: Partition,
    pub noise: Option<NoiseSpec>,
    /// Perturb support items as well as queries (the robustness-study
    /// protocol); otherwise only queries are perturbed.
    pub noise_on_support: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            partition: Partition::Test,
            noise: None,
            noise_on_support: true,
            seed: 7,
            threads: 1,
        }
    }
}

/// Evaluates `episodes` sampled tasks. Batchnorm uses running statistics
/// when available and falls back to per-batch statistics on an untrained
/// model.
pub fn evaluate(
    model: &SscfModel,
    dataset: &Dataset,
    split: &SplitSpec,
    n_way: usize,
    k_shot: usize,
    q_queries: usize,
    episodes: usize,
    options: EvalOptions,
) -> Result<EvalReport, TrainError> {
    let mode = if model.bn.any_uninitialized() {
        BnMode::Train
    } else {
        BnMode::Eval
    };
    let pool: Vec<usize> = split.partition(options.partition).to_vec();
    let eval_one = |idx: usize| -> Result<f64, TrainError> {
        let mut rng = Rng::new(options.seed).derive(0x1_0000 + idx as u64);
        let mut episode = sample_episode(dataset, &pool, n_way, k_shot, q_queries, &mut rng)?;
        if let Some(noise) = options.noise {
            let mut noise_rng = rng.derive(0x2_0000);
            if options.noise_on_support {
                for (t, _) in episode.support.iter_mut() {
                    *t = add_gaussian_noise(t, noise, &mut noise_rng);
                }
            }
            for (t, _) in episode.query.iter_mut() {
                *t = add_gaussian_noise(t, noise, &mut noise_rng);
            }
        }
        let accuracy = tensor::no_grad(|| -> Result<f64, TrainError> {
            let fwd = model.forward_episode(&episode.support, &episode.query, mode, false, None)?;
            let predictions = losses::classify_query(&fwd.embeddings)?;
            let correct = predictions
                .iter()
                .zip(&episode.query)
                .filter(|(pred, (_, cid))| *pred == cid)
                .count();
            Ok(correct as f64 / episode.query.len().max(1) as f64)
        })?;
        Ok(accuracy)
    };

    let threads = options.threads.max(1);
    let per_episode: Vec<f64> = if threads == 1 {
        let mut out = Vec::with_capacity(episodes);
        for i in 0..episodes {
            out.push(eval_one(i)?);
        }
        out
    } else {
        let mut slots: Vec<Option<Result<f64, TrainError>>> = (0..episodes).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunks: Vec<&mut [Option<Result<f64, TrainError>>]> =
                chunk_slots(&mut slots, threads);
            let mut offset = 0usize;
            for chunk in chunks {
                let start = offset;
                offset += chunk.len();
                let eval_one = &eval_one;
                scope.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(eval_one(start + j));
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(episodes);
        for slot in slots {
            out.push(slot.expect("all episodes evaluated")?);
        }
        out
    };

    let n = per_episode.len().max(1) as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    let ci95 = if per_episode.len() > 1 {
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        episodes,
        mean_accuracy: mean,
        ci95,
        per_episode,
    })
}

fn chunk_slots<'a, T>(slots: &'a mut [T], parts: usize) -> Vec<&'a mut [T]> {
    let len = slots.len();
    let per = len.div_ceil(parts).max(1);
    let mut rest = slots;
    let mut out = Vec::new();
    while !rest.is_empty() {
        let take = per.min(rest.len());
        let (head, tail) = rest.split_at_mut(take);
        out.push(head);
        rest = tail;
    }
    out
}
