//! Cross-feature contrastive module: builds a 4-D cosine cross-correlation
//! tensor between query and support positions, refines it with two 4-D
//! convolutions, and derives joint attention maps used for attended
//! pooling of both feature maps.
//!
//! The module operates on the temporal mean of the spike features, so
//! everything here is real-valued and fully differentiable.

use crate::energy::{self, EnergyProbe};
use crate::losses::EmbeddingSet;
use crate::model::{kaiming, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{self, batchnorm2d, BnMode, BnStats, Result as TensorResult, Tensor, TensorError};

/// Arithmetic mean over the leading time axis: `[T,B,C,H,W] -> [B,C,H,W]`.
/// For binary spike tensors the result holds per-position firing rates.
pub fn temporal_mean(f: &Tensor) -> TensorResult<Tensor> {
    if f.rank() != 5 {
        return Err(TensorError::shape(
            "temporal_mean",
            format!("expects [T,B,C,H,W], got {:?}", f.shape()),
        ));
    }
    f.mean_axis(0)
}

/// Cosine similarity between every query position and every support
/// position: `[C',H,W] x [C',H,W] -> [H,W,H,W]` with query positions
/// leading. All-zero channel vectors contribute zero similarity.
pub fn cross_correlation(q: &Tensor, s: &Tensor) -> TensorResult<Tensor> {
    if q.rank() != 3 || s.rank() != 3 {
        return Err(TensorError::shape(
            "cross_correlation",
            format!("expects rank-3 feature maps, got {:?} and {:?}", q.shape(), s.shape()),
        ));
    }
    if q.shape() != s.shape() {
        return Err(TensorError::shape(
            "cross_correlation",
            format!("query shape {:?} does not match support shape {:?}", q.shape(), s.shape()),
        ));
    }
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let qn = q.normalize(0)?.reshape(&[c, h * w])?.permute(&[1, 0])?;
    let sn = s.normalize(0)?.reshape(&[c, h * w])?;
    qn.matmul(&sn)?.reshape(&[h, w, h, w])
}

/// Attention maps from a refined correlation tensor (Eq. 5 reading): for
/// the query map, softmax over query positions within each support-position
/// slice, then average the `HW` distributions; the support map switches
/// the roles. Each map is a distribution over its own positions.
pub fn attention_maps(c_refined: &Tensor, gamma: f64) -> TensorResult<(Tensor, Tensor)> {
    if c_refined.rank() != 4
        || c_refined.shape()[0] != c_refined.shape()[2]
        || c_refined.shape()[1] != c_refined.shape()[3]
    {
        return Err(TensorError::shape(
            "attention_maps",
            format!("expects [H,W,H,W], got {:?}", c_refined.shape()),
        ));
    }
    if gamma <= 0.0 {
        return Err(TensorError::shape(
            "attention_maps",
            format!("temperature must be positive, got {gamma}"),
        ));
    }
    let (h, w) = (c_refined.shape()[0], c_refined.shape()[1]);
    let hw = h * w;
    let scores = c_refined.reshape(&[hw, hw])?.mul_scalar(1.0 / gamma);
    let a_q = scores.softmax(0)?.mean_axis(1)?.reshape(&[h, w])?;
    let a_s = scores.softmax(1)?.mean_axis(0)?.reshape(&[h, w])?;
    Ok((a_q, a_s))
}

/// Attention-weighted spatial pooling: `out[c] = sum_x f[c,x] * a[x]`.
pub fn attended_pool(f: &Tensor, a: &Tensor) -> TensorResult<Tensor> {
    if f.rank() != 3 || a.rank() != 2 {
        return Err(TensorError::shape(
            "attended_pool",
            format!("expects [C,H,W] and [H,W], got {:?} and {:?}", f.shape(), a.shape()),
        ));
    }
    if f.shape()[1] != a.shape()[0] || f.shape()[2] != a.shape()[1] {
        return Err(TensorError::shape(
            "attended_pool",
            format!("spatial shapes differ: {:?} vs {:?}", &f.shape()[1..], a.shape()),
        ));
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    f.reshape(&[c, h * w])?
        .matmul(&a.reshape(&[h * w, 1])?)?
        .reshape(&[c])
}

pub struct CfcLayer {
    compact_w: ParamId, // [C', C, 1, 1]
    compact_b: ParamId, // [C']
    conv4a_w: ParamId,  // [C1, 1, 3,3,3,3]
    bn_gamma: ParamId,  // [C1]
    bn_beta: ParamId,   // [C1]
    conv4b_w: ParamId,  // [1, C1, 3,3,3,3]
    pub compact_channels: usize,
    pub refine_channels: usize,
    pub gamma: f64,
}

impl CfcLayer {
    pub fn init(
        in_channels: usize,
        compact_channels: usize,
        refine_channels: usize,
        gamma: f64,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Self {
        let compact_w = params.register(
            "cfc.compact.weight",
            kaiming(&[compact_channels, in_channels, 1, 1], in_channels, rng),
        );
        let compact_b = params.register("cfc.compact.bias", Tensor::zeros(&[compact_channels]));
        let conv4a_w = params.register(
            "cfc.refine_a.weight",
            kaiming(&[refine_channels, 1, 3, 3, 3, 3], 81, rng),
        );
        let bn_gamma = params.register("cfc.refine_bn.gamma", Tensor::ones(&[refine_channels]));
        let bn_beta = params.register("cfc.refine_bn.beta", Tensor::zeros(&[refine_channels]));
        let conv4b_w = params.register(
            "cfc.refine_b.weight",
            kaiming(&[1, refine_channels, 3, 3, 3, 3], refine_channels * 81, rng),
        );
        CfcLayer {
            compact_w,
            compact_b,
            conv4a_w,
            bn_gamma,
            bn_beta,
            conv4b_w,
            compact_channels,
            refine_channels,
            gamma,
        }
    }

    /// Point-wise compaction `[B,C,H,W] -> [B,C',H,W]`.
    pub fn compact(&self, f_mean: &Tensor, params: &ParamSet) -> TensorResult<Tensor> {
        f_mean
            .conv2d(params.get(self.compact_w), 1, 0)?
            .add_channel(params.get(self.compact_b))
    }

    /// Two 4-D convolutions with a normalized rectifier between them;
    /// shape `[H,W,H,W]` is preserved by same-padding. Normalization uses
    /// the tensor's own statistics, so refinement behaves identically in
    /// training and evaluation.
    pub fn refine_4d(&self, c: &Tensor, params: &ParamSet) -> TensorResult<Tensor> {
        if c.rank() != 4 {
            return Err(TensorError::shape(
                "refine_4d",
                format!("expects [H,W,H,W], got {:?}", c.shape()),
            ));
        }
        let (h, w, h2, w2) = (c.shape()[0], c.shape()[1], c.shape()[2], c.shape()[3]);
        let c1 = self.refine_channels;
        let x = c.reshape(&[1, h, w, h2, w2])?;
        let y = x.conv4d(params.get(self.conv4a_w))?;
        let flat = y.reshape(&[1, c1, h * w, h2 * w2])?;
        let (flat, _) = batchnorm2d(
            &flat,
            params.get(self.bn_gamma),
            params.get(self.bn_beta),
            &BnStats::new(c1),
            BnMode::Train,
        )?;
        let y = flat.relu().reshape(&[c1, h, w, h2, w2])?;
        let out = y.conv4d(params.get(self.conv4b_w))?;
        out.reshape(&[h, w, h2, w2])
    }
}

/// Builds the episode's attended embeddings. The encoded batch holds the
/// supports first and the queries after them; attention is computed per
/// (query, support) pair, each item pools with its attention maps averaged
/// over the pairs it participates in, and class prototypes average the K
/// attended support embeddings.
#[allow(clippy::too_many_arguments)]
pub fn episode_embeddings(
    layer: &CfcLayer,
    features: &Tensor,
    support_labels: &[usize],
    query_labels: &[usize],
    use_cfc: bool,
    params: &ParamSet,
    mut probe: Option<&mut EnergyProbe>,
) -> Result<EmbeddingSet, TensorError> {
    let ns = support_labels.len();
    let nq = query_labels.len();
    let f_mean = temporal_mean(features)?;
    let (b, _c, h, w) = (
        f_mean.shape()[0],
        f_mean.shape()[1],
        f_mean.shape()[2],
        f_mean.shape()[3],
    );
    if b != ns + nq {
        return Err(TensorError::shape(
            "episode_embeddings",
            format!("batch of {b} does not cover {ns} supports + {nq} queries"),
        ));
    }

    let mut support_emb: Vec<Tensor> = Vec::with_capacity(ns);
    let mut query_emb: Vec<Tensor> = Vec::with_capacity(nq);

    if !use_cfc {
        // Ablation: uniform attention everywhere reduces to mean pooling.
        let uniform = Tensor::full(&[h, w], 1.0 / (h * w) as f64);
        for j in 0..ns {
            support_emb.push(attended_pool(&f_mean.index_axis0(j)?, &uniform)?);
        }
        for i in 0..nq {
            query_emb.push(attended_pool(&f_mean.index_axis0(ns + i)?, &uniform)?);
        }
    } else {
        if let Some(p) = probe.as_deref_mut() {
            let flops = energy::count_flops(&energy::LayerKind::Conv2d {
                out_channels: layer.compact_channels,
                out_hw: (h, w),
                in_channels: f_mean.shape()[1],
                kernel: (1, 1),
            });
            p.record("cfc.compact", &f_mean, flops, 1, b);
        }
        let compact = layer.compact(&f_mean, params)?;
        let mut query_attn: Vec<Vec<Tensor>> = vec![Vec::with_capacity(ns); nq];
        let mut support_attn: Vec<Vec<Tensor>> = vec![Vec::with_capacity(nq); ns];
        for i in 0..nq {
            let q_c = compact.index_axis0(ns + i)?;
            for j in 0..ns {
                let s_c = compact.index_axis0(j)?;
                let raw = cross_correlation(&q_c, &s_c)?;
                if let Some(p) = probe.as_deref_mut() {
                    let refine_flops = energy::count_flops(&energy::LayerKind::Conv4d {
                        out_channels: layer.refine_channels,
                        in_channels: 1,
                        positions: h * w * h * w,
                        kernel_taps: 81,
                    }) + energy::count_flops(&energy::LayerKind::Conv4d {
                        out_channels: 1,
                        in_channels: layer.refine_channels,
                        positions: h * w * h * w,
                        kernel_taps: 81,
                    });
                    p.record("cfc.refine4d", &raw, refine_flops, 1, 1);
                }
                let refined = layer.refine_4d(&raw, params)?;
                let (a_q, a_s) = attention_maps(&refined, layer.gamma)?;
                query_attn[i].push(a_q);
                support_attn[j].push(a_s);
            }
        }
        for (j, maps) in support_attn.iter().enumerate() {
            let avg = tensor::stack(maps)?.mean_axis(0)?;
            support_emb.push(attended_pool(&f_mean.index_axis0(j)?, &avg)?);
        }
        for (i, maps) in query_attn.iter().enumerate() {
            let avg = tensor::stack(maps)?.mean_axis(0)?;
            query_emb.push(attended_pool(&f_mean.index_axis0(ns + i)?, &avg)?);
        }
    }

    // Prototype per class: mean of its attended support embeddings.
    let mut class_ids: Vec<usize> = support_labels.to_vec();
    class_ids.sort_unstable();
    class_ids.dedup();
    let mut prototypes = Vec::with_capacity(class_ids.len());
    for &cid in &class_ids {
        let members: Vec<Tensor> = support_labels
            .iter()
            .zip(&support_emb)
            .filter(|(l, _)| **l == cid)
            .map(|(_, e)| e.clone())
            .collect();
        let proto = if members.len() == 1 {
            members[0].clone()
        } else {
            tensor::stack(&members)?.mean_axis(0)?
        };
        prototypes.push((cid, proto));
    }
    let queries = query_labels
        .iter()
        .copied()
        .zip(query_emb)
        .collect::<Vec<_>>();
    Ok(EmbeddingSet {
        prototypes,
        queries,
    })
}
