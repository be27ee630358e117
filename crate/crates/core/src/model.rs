//! Parameter and batchnorm-state stores plus the assembled network.
//!
//! Layers hold typed ids into the stores rather than tensors, so the SGD
//! step can swap in fresh leaves without touching layer structs, and a
//! read-only model can be shared across evaluation workers.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig};
use crate::cfc;
use crate::energy::EnergyProbe;
use crate::losses::EmbeddingSet;
use crate::rng::Rng;
use crate::sfe::SfeLayer;
use crate::spiking::SpikingError;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::{self, BnBatchStats, BnMode, BnStats, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spiking(#[from] SpikingError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint is missing entry {0}")]
    MissingEntry(String),
    #[error("checkpoint entry {name} has shape {got:?}, expected {want:?}")]
    EntryShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

// ── parameter store ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable leaves plus SGD momentum state.
#[derive(Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    momentum: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn register(&mut self, name: impl Into<String>, init: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.momentum.push(vec![0.0; init.numel()]);
        self.tensors.push(init.requires_grad_(true));
        self.names.push(name);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn zero_grad(&self) {
        for t in &self.tensors {
            t.zero_grad();
        }
    }

    /// SGD with momentum: `m <- mu*m + g`, `w <- w - lr*m`. Parameters
    /// with no accumulated gradient are left untouched.
    pub fn sgd_step(&mut self, lr: f64, mu: f64) {
        for i in 0..self.tensors.len() {
            let Some(g) = self.tensors[i].grad() else {
                continue;
            };
            let m = &mut self.momentum[i];
            let mut w = self.tensors[i].data().to_vec();
            for k in 0..w.len() {
                m[k] = mu * m[k] + g[k];
                w[k] -= lr * m[k];
            }
            self.tensors[i] = Tensor::param(self.tensors[i].shape(), w).expect("shape preserved");
        }
    }

    fn replace(&mut self, id: usize, tensor: Tensor) {
        self.momentum[id] = vec![0.0; tensor.numel()];
        self.tensors[id] = tensor.requires_grad_(true);
    }

    /// Replaces a parameter's value, resetting its momentum.
    pub fn overwrite(&mut self, id: ParamId, tensor: Tensor) {
        assert_eq!(
            tensor.shape(),
            self.tensors[id.0].shape(),
            "overwrite must preserve the parameter shape"
        );
        self.replace(id.0, tensor);
    }
}

// ── batchnorm state store ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnId(usize);

#[derive(Default)]
pub struct BnSet {
    names: Vec<String>,
    stats: Vec<BnStats>,
}

impl BnSet {
    pub fn register(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        let id = BnId(self.stats.len());
        self.names.push(name.into());
        self.stats.push(BnStats::new(channels));
        id
    }

    pub fn get(&self, id: BnId) -> &BnStats {
        &self.stats[id.0]
    }

    pub fn any_uninitialized(&self) -> bool {
        self.stats.iter().any(|s| !s.initialized)
    }

    pub fn apply(&mut self, update: BnUpdate) {
        self.stats[update.id.0].update(&update.batch.mean, &update.batch.var);
    }
}

/// Deferred running-statistics update produced by a train-mode forward.
pub struct BnUpdate {
    pub id: BnId,
    pub batch: BnBatchStats,
}

/// Kaiming-style fan-in normal initialization for conv / linear weights.
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..tensor::numel(shape)).map(|_| rng.normal() * std).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

// ── linear layer (classification head) ───────────────────────────────

pub struct Linear {
    pub weight: ParamId, // [in, out]
    pub bias: ParamId,   // [out]
}

impl Linear {
    pub fn init(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Self {
        let weight =
            params.register(format!("{name}.weight"), kaiming(&[in_dim, out_dim], in_dim, rng));
        let bias = params.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { weight, bias }
    }

    /// `x [B,in] -> [B,out]`.
    pub fn forward(&self, x: &Tensor, params: &ParamSet) -> Result<Tensor, TensorError> {
        x.matmul(params.get(self.weight))?.add_channel(params.get(self.bias))
    }
}

// ── assembled model ──────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub input_hw: (usize, usize),
    /// Self-feature extractor enabled (ablation switch).
    pub use_sfe: bool,
    /// Cross-feature attention enabled; when off, pooling falls back to
    /// uniform attention (ablation switch).
    pub use_cfc: bool,
    /// Compact channel width fed to the cross-correlation.
    pub compact_channels: usize,
    /// Channel width of the intermediate 4-D correlation refinement.
    pub refine_channels: usize,
    /// Softmax temperature of the attention maps.
    pub attention_gamma: f64,
    /// Number of training classes for the time-stepped classification head.
    pub head_classes: usize,
}

pub struct SscfModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub bn: BnSet,
    pub backbone: Backbone,
    pub sfe: SfeLayer,
    pub cfc: cfc::CfcLayer,
    pub head: Linear,
}

/// Outputs of one episode forward pass.
pub struct EpisodeForward {
    /// `[T, B, head_classes]` logits over the combined batch
    /// (supports first, queries after).
    pub logits_seq: Tensor,
    /// Attended prototypes and query embeddings for the metric path.
    pub embeddings: EmbeddingSet,
    pub bn_updates: Vec<BnUpdate>,
}

impl SscfModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = Rng::new(seed).derive(0x5343_4646);
        let mut params = ParamSet::default();
        let mut bn = BnSet::default();
        let (out_c, _out_hw) = config
            .backbone
            .validate(config.input_hw)
            .map_err(ModelError::Config)?;
        let backbone = Backbone::init(&config.backbone, &mut params, &mut bn, &mut rng);
        let sfe = SfeLayer::init(out_c, config.backbone.lif, &mut params, &mut rng)
            .map_err(ModelError::Config)?;
        if config.compact_channels == 0 || config.refine_channels == 0 {
            return Err(ModelError::Config(
                "compact_channels and refine_channels must be positive".into(),
            ));
        }
        if config.attention_gamma <= 0.0 {
            return Err(ModelError::Config(format!(
                "attention temperature must be positive, got {}",
                config.attention_gamma
            )));
        }
        let cfc = cfc::CfcLayer::init(
            out_c,
            config.compact_channels,
            config.refine_channels,
            config.attention_gamma,
            &mut params,
            &mut rng,
        );
        if config.head_classes == 0 {
            return Err(ModelError::Config("head_classes must be positive".into()));
        }
        let head = Linear::init("head", out_c, config.head_classes, &mut params, &mut rng);
        Ok(SscfModel {
            config,
            params,
            bn,
            backbone,
            sfe,
            cfc,
            head,
        })
    }

    /// Encode a batch into post-SFE features `[T,B,C,H',W']`. `images` is
    /// `[B,C,H,W]` for static data (replicated over T) or `[T,B,C,H,W]`
    /// for event data.
    pub fn encode(
        &self,
        images: &Tensor,
        mode: BnMode,
        mut probe: Option<&mut EnergyProbe>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Tensor, ModelError> {
        let f0 = if images.rank() == 4 {
            self.backbone
                .encode_static(images, &self.params, &self.bn, mode, probe.as_deref_mut(), updates)?
        } else {
            self.backbone
                .encode_events(images, &self.params, &self.bn, mode, probe.as_deref_mut(), updates)?
        };
        if self.config.use_sfe {
            Ok(self.sfe.forward(&f0, &self.params, probe)?)
        } else {
            Ok(f0)
        }
    }

    /// Encode while capturing every LIF layer's binary output, for spike
    /// visualization. Static `[B,C,H,W]` input is replicated over T.
    pub fn encode_traced(
        &self,
        images: &Tensor,
        mode: BnMode,
    ) -> Result<(Tensor, Vec<(String, Tensor)>), ModelError> {
        let x_seq = if images.rank() == 4 {
            tensor::stack(&vec![images.clone(); self.config.backbone.timesteps])?
        } else {
            images.clone()
        };
        let mut updates = Vec::new();
        let (f0, mut trace) =
            self.backbone
                .encode_traced(&x_seq, &self.params, &self.bn, mode, &mut updates)?;
        if self.config.use_sfe {
            let f = self.sfe.forward(&f0, &self.params, None)?;
            let f1 = f.sub(&f0)?;
            trace.push(("sfe.lif".to_string(), f1.detach()));
            Ok((f, trace))
        } else {
            Ok((f0, trace))
        }
    }

    /// Full episode forward: encodes supports and queries in one weight-
    /// shared batch, produces per-time-step head logits and the attended
    /// embedding set.
    pub fn forward_episode(
        &self,
        support: &[(Tensor, usize)],
        query: &[(Tensor, usize)],
        mode: BnMode,
        with_embedding_grad: bool,
        mut probe: Option<&mut EnergyProbe>,
    ) -> Result<EpisodeForward, ModelError> {
        let batch = batch_items(support, query)?;
        let mut updates = Vec::new();
        let features = self.encode(&batch, mode, probe.as_deref_mut(), &mut updates)?;
        let logits_seq = self.head_logits(&features, probe.as_deref_mut())?;
        let embeddings = if with_embedding_grad {
            self.attended_embeddings(&features, support, query, probe)?
        } else {
            tensor::no_grad(|| self.attended_embeddings(&features, support, query, probe))?
        };
        Ok(EpisodeForward {
            logits_seq,
            embeddings,
            bn_updates: updates,
        })
    }

    /// Head logits `[T,B,classes]`: global spatial mean per time step,
    /// then the shared linear head.
    pub fn head_logits(
        &self,
        features: &Tensor,
        probe: Option<&mut EnergyProbe>,
    ) -> Result<Tensor, ModelError> {
        let (t, b, c) = (features.shape()[0], features.shape()[1], features.shape()[2]);
        let hw = features.shape()[3] * features.shape()[4];
        let mut per_step = Vec::with_capacity(t);
        for step in 0..t {
            let f_t = features.index_axis0(step)?.reshape(&[b, c, hw])?.mean_axis(2)?;
            per_step.push(self.head.forward(&f_t, &self.params)?);
        }
        if let Some(p) = probe {
            // The head consumes the pooled (real-valued) sequence.
            let mut pooled = Vec::with_capacity(t * b * c);
            let steps_data = features.data();
            let plane = hw;
            for step in 0..t {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = ((step * b + bi) * c + ci) * plane;
                        let mean: f64 =
                            steps_data[base..base + plane].iter().sum::<f64>() / plane as f64;
                        pooled.push(mean);
                    }
                }
            }
            let pooled = Tensor::from_vec(&[t, b, c], pooled)?;
            let flops = (c * self.config.head_classes) as f64;
            p.record("head.linear", &pooled, flops, t, b);
        }
        Ok(tensor::stack(&per_step)?)
    }

    /// Attention-pooled embeddings for the metric path. Supports occupy
    /// rows `0..Ns` of the encoded batch, queries the rest.
    fn attended_embeddings(
        &self,
        features: &Tensor,
        support: &[(Tensor, usize)],
        query: &[(Tensor, usize)],
        probe: Option<&mut EnergyProbe>,
    ) -> Result<EmbeddingSet, ModelError> {
        let support_labels: Vec<usize> = support.iter().map(|(_, c)| *c).collect();
        let query_labels: Vec<usize> = query.iter().map(|(_, c)| *c).collect();
        Ok(cfc::episode_embeddings(
            &self.cfc,
            features,
            &support_labels,
            &query_labels,
            self.config.use_cfc,
            &self.params,
            probe,
        )?)
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        for u in updates {
            self.bn.apply(u);
        }
    }

    pub fn zero_grad(&self) {
        self.params.zero_grad();
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        self.params.sgd_step(lr, momentum);
    }

    /// Named tensors for checkpointing: every parameter plus batchnorm
    /// running statistics.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        for (name, t) in self.params.iter() {
            map.insert(name.to_string(), t.detach());
        }
        for (name, s) in self.bn.names.iter().zip(&self.bn.stats) {
            map.insert(
                format!("{name}.running_mean"),
                Tensor::from_vec(&[s.mean.len()], s.mean.clone()).unwrap(),
            );
            map.insert(
                format!("{name}.running_var"),
                Tensor::from_vec(&[s.var.len()], s.var.clone()).unwrap(),
            );
            map.insert(
                format!("{name}.initialized"),
                Tensor::scalar(if s.initialized { 1.0 } else { 0.0 }),
            );
        }
        map
    }

    pub fn load_state_dict(&mut self, map: &BTreeMap<String, Tensor>) -> Result<(), ModelError> {
        for i in 0..self.params.tensors.len() {
            let name = self.params.names[i].clone();
            let entry = map
                .get(&name)
                .ok_or_else(|| ModelError::MissingEntry(name.clone()))?;
            if entry.shape() != self.params.tensors[i].shape() {
                return Err(ModelError::EntryShape {
                    name,
                    got: entry.shape().to_vec(),
                    want: self.params.tensors[i].shape().to_vec(),
                });
            }
            self.params.replace(i, entry.clone());
        }
        let bn_names = self.bn.names.clone();
        for (name, s) in bn_names.iter().zip(self.bn.stats.iter_mut()) {
            let mean = map
                .get(&format!("{name}.running_mean"))
                .ok_or_else(|| ModelError::MissingEntry(format!("{name}.running_mean")))?;
            let var = map
                .get(&format!("{name}.running_var"))
                .ok_or_else(|| ModelError::MissingEntry(format!("{name}.running_var")))?;
            let init = map
                .get(&format!("{name}.initialized"))
                .ok_or_else(|| ModelError::MissingEntry(format!("{name}.initialized")))?;
            if mean.numel() != s.mean.len() || var.numel() != s.var.len() {
                return Err(ModelError::EntryShape {
                    name: name.clone(),
                    got: mean.shape().to_vec(),
                    want: vec![s.mean.len()],
                });
            }
            s.mean.copy_from_slice(mean.data());
            s.var.copy_from_slice(var.data());
            s.initialized = init.item() != 0.0;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ModelError> {
        Ok(crate::tensor::checkpoint::save(path, &self.state_dict())?)
    }

    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<(), ModelError> {
        let map = crate::tensor::checkpoint::load(path)?;
        self.load_state_dict(&map)
    }
}

/// Stacks support then query item tensors into one batch. Static items
/// `[C,H,W]` become `[B,C,H,W]`; event items `[T,C,H,W]` become
/// `[T,B,C,H,W]`.
pub fn batch_items(
    support: &[(Tensor, usize)],
    query: &[(Tensor, usize)],
) -> Result<Tensor, ModelError> {
    let all: Vec<Tensor> = support
        .iter()
        .chain(query)
        .map(|(t, _)| t.clone())
        .collect();
    if all.is_empty() {
        return Err(ModelError::Config("episode has no items".into()));
    }
    for t in &all {
        if t.shape() != all[0].shape() {
            return Err(ModelError::Config(format!(
                "episode items disagree on shape: {:?} vs {:?}",
                t.shape(),
                all[0].shape()
            )));
        }
    }
    match all[0].rank() {
        3 => Ok(tensor::stack(&all)?),
        4 => Ok(tensor::stack(&all)?.permute(&[1, 0, 2, 3, 4])?),
        r => Err(ModelError::Config(format!(
            "episode items must be rank 3 (static) or rank 4 (event), got rank {r}"
        ))),
    }
}
