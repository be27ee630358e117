//! Training objectives: time-averaged cross-entropy over the temporal
//! unroll, contrastive prototype loss over attended embeddings, and their
//! weighted combination. Inference classifies each query as the class of
//! its most cosine-similar prototype.

use thiserror::Error;

use crate::tensor::{self, Result as TensorResult, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
    #[error("contrastive temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("query class {0} has no prototype in this episode")]
    QueryClassMissing(usize),
    #[error("duplicate prototype for class {0}")]
    DuplicatePrototype(usize),
    #[error("episode has no prototypes")]
    EmptyPrototypes,
}

/// Balance and temperature settings for the combined objective.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the classification term in the total loss.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau_c: f64,
    /// Training-class count for the classification head.
    pub num_classes_train: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.7,
            tau_c: 0.2,
            num_classes_train: 30,
        }
    }
}

/// Attended support prototypes and query embeddings for one episode.
pub struct EmbeddingSet {
    pub prototypes: Vec<(usize, Tensor)>,
    pub queries: Vec<(usize, Tensor)>,
}

impl EmbeddingSet {
    fn validate(&self) -> Result<(), LossError> {
        if self.prototypes.is_empty() {
            return Err(LossError::EmptyPrototypes);
        }
        for (i, (cid, _)) in self.prototypes.iter().enumerate() {
            if self.prototypes[..i].iter().any(|(c, _)| c == cid) {
                return Err(LossError::DuplicatePrototype(*cid));
            }
        }
        Ok(())
    }
}

/// Mean over time steps of the per-step cross-entropy:
/// `logits_seq [T,B,K]` against one label per batch row.
pub fn tet_loss(logits_seq: &Tensor, labels: &[usize]) -> TensorResult<Tensor> {
    if logits_seq.rank() != 3 {
        return Err(TensorError::shape(
            "tet_loss",
            format!("expects [T,B,classes], got {:?}", logits_seq.shape()),
        ));
    }
    let t = logits_seq.shape()[0];
    let mut acc: Option<Tensor> = None;
    for step in 0..t {
        let ce = logits_seq.index_axis0(step)?.cross_entropy_logits(labels)?;
        acc = Some(match acc {
            Some(total) => total.add(&ce)?,
            None => ce,
        });
    }
    Ok(acc.expect("T >= 1 by shape").mul_scalar(1.0 / t as f64))
}

/// Contrastive prototype loss: per query, softmax over cosine similarities
/// to all N prototypes at temperature `tau_c`, with the same-class
/// prototype as the positive; averaged over queries.
pub fn infonce_loss(embeddings: &EmbeddingSet, tau_c: f64) -> Result<Tensor, LossError> {
    if tau_c <= 0.0 {
        return Err(LossError::BadTemperature(tau_c));
    }
    embeddings.validate()?;
    let mut acc: Option<Tensor> = None;
    for (q_class, q_emb) in &embeddings.queries {
        let mut sims = Vec::with_capacity(embeddings.prototypes.len());
        let mut positive = None;
        for (idx, (p_class, p_emb)) in embeddings.prototypes.iter().enumerate() {
            if p_class == q_class {
                positive = Some(idx);
            }
            sims.push(q_emb.cosine(p_emb)?);
        }
        let positive = positive.ok_or(LossError::QueryClassMissing(*q_class))?;
        let scores = tensor::stack(&sims)?
            .reshape(&[sims.len()])?
            .mul_scalar(1.0 / tau_c);
        // stable log-sum-exp with a detached shift
        let shift = scores
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = scores
            .add_scalar(-shift)
            .exp()
            .sum_all()
            .log()
            .add_scalar(shift);
        let loss_q = lse.sub(&scores.index_axis0(positive)?)?;
        acc = Some(match acc {
            Some(total) => total.add(&loss_q)?,
            None => loss_q,
        });
    }
    let n_queries = embeddings.queries.len().max(1);
    Ok(acc
        .unwrap_or_else(|| Tensor::scalar(0.0))
        .mul_scalar(1.0 / n_queries as f64))
}

/// `lambda * l_tet + (1 - lambda) * l_info`.
pub fn total_loss(l_tet: &Tensor, l_info: &Tensor, lambda: f64) -> Result<Tensor, LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::LambdaOutOfRange(lambda));
    }
    Ok(l_tet
        .mul_scalar(lambda)
        .add(&l_info.mul_scalar(1.0 - lambda))?)
}

/// Nearest-prototype classification by cosine similarity; exact ties go to
/// the lowest class id.
pub fn classify_query(embeddings: &EmbeddingSet) -> Result<Vec<usize>, LossError> {
    embeddings.validate()?;
    let mut protos: Vec<(usize, &Tensor)> = embeddings
        .prototypes
        .iter()
        .map(|(c, t)| (*c, t))
        .collect();
    protos.sort_by_key(|(c, _)| *c);
    let mut out = Vec::with_capacity(embeddings.queries.len());
    for (_, q_emb) in &embeddings.queries {
        let mut best = (protos[0].0, f64::NEG_INFINITY);
        for (cid, p_emb) in &protos {
            let sim = tensor::no_grad(|| q_emb.cosine(p_emb)).map_err(LossError::Tensor)?;
            if sim.item() > best.1 {
                best = (*cid, sim.item());
            }
        }
        out.push(best.0);
    }
    Ok(out)
}
