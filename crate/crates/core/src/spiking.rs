//! Leaky integrate-and-fire neurons with hard reset, applied pointwise
//! across a temporal unroll. The forward emits binary spikes; the backward
//! pass substitutes a triangular surrogate for the step function's
//! derivative, and the reset factor is detached so gradients do not flow
//! through the discontinuous reset.

use thiserror::Error;

use crate::tensor::{self, Result as TensorResult, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SpikingError {
    #[error("leak factor tau must lie in (0, 1], got {0}")]
    BadTau(f64),
    #[error("threshold v_th must be positive, got {0}")]
    BadThreshold(f64),
    #[error("surrogate width must be positive, got {0}")]
    BadWidth(f64),
    #[error("temporal unroll needs at least one step")]
    EmptySequence,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Neuron constants: membrane update `U' = tau * U + x`, spike when
/// `U' >= v_th`, hard reset to zero after a spike.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    pub surrogate_width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau: 0.5,
            v_th: 1.0,
            surrogate_width: 1.0,
        }
    }
}

impl LifParams {
    pub fn new(tau: f64, v_th: f64, surrogate_width: f64) -> Result<Self, SpikingError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(SpikingError::BadTau(tau));
        }
        if !(v_th > 0.0) {
            return Err(SpikingError::BadThreshold(v_th));
        }
        if !(surrogate_width > 0.0) {
            return Err(SpikingError::BadWidth(surrogate_width));
        }
        Ok(LifParams {
            tau,
            v_th,
            surrogate_width,
        })
    }
}

/// Per-layer membrane potentials carried between unroll steps.
#[derive(Debug, Clone)]
pub struct LifState {
    pub membrane: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            membrane: Tensor::zeros(shape),
        }
    }
}

/// Triangular surrogate derivative `max(0, 1 - |u - v_th|/width) / width`,
/// evaluated elementwise on membrane-minus-threshold values. Forward-only;
/// the spike op applies the same formula inside its backward rule.
pub fn surrogate_grad(u_minus_vth: &Tensor, width: f64) -> Result<Tensor, SpikingError> {
    if !(width > 0.0) {
        return Err(SpikingError::BadWidth(width));
    }
    let data = u_minus_vth
        .data()
        .iter()
        .map(|&z| tensor::triangular_surrogate(z, width))
        .collect();
    Ok(Tensor::from_vec(u_minus_vth.shape(), data)?)
}

/// One membrane update: returns the binary spike map and the post-reset
/// state. Positions that spiked carry exactly zero membrane forward.
pub fn lif_step(
    state: &LifState,
    x: &Tensor,
    params: &LifParams,
) -> TensorResult<(Tensor, LifState)> {
    if state.membrane.shape() != x.shape() {
        return Err(TensorError::shape(
            "lif_step",
            format!(
                "input shape {:?} does not match membrane shape {:?}",
                x.shape(),
                state.membrane.shape()
            ),
        ));
    }
    let u = state.membrane.mul_scalar(params.tau).add(x)?;
    let spikes = u.spike(params.v_th, params.surrogate_width);
    // Reset factor (1 - S) is treated as a constant in backward.
    let keep = spikes.detach().mul_scalar(-1.0).add_scalar(1.0);
    let membrane = u.mul(&keep)?;
    Ok((spikes, LifState { membrane }))
}

/// Unrolls [`lif_step`] over the leading axis of `x_seq` from a zero
/// initial membrane. Output shape equals input shape and is binary.
pub fn lif_layer(x_seq: &Tensor, params: &LifParams) -> Result<Tensor, SpikingError> {
    if x_seq.rank() < 2 || x_seq.shape()[0] == 0 {
        return Err(SpikingError::EmptySequence);
    }
    let steps = x_seq.shape()[0];
    let mut state = LifState::zeros(&x_seq.shape()[1..]);
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = x_seq.index_axis0(t)?;
        let (spikes, next) = lif_step(&state, &x_t, params)?;
        outputs.push(spikes);
        state = next;
    }
    Ok(tensor::stack(&outputs)?)
}
