//! Spiking convolutional backbones: stacks of conv-bn-LIF blocks mapping
//! image sequences to binary feature maps. Static inputs are replicated
//! along a new leading time axis; event inputs pass through natively.
//! Downsampling uses stride-2 convolutions, never pooling.

use crate::energy::{self, EnergyProbe};
use crate::model::{kaiming, BnId, BnSet, BnUpdate, ModelError, ParamId, ParamSet};
use crate::rng::Rng;
use crate::spiking::{lif_layer, LifParams};
use crate::tensor::{batchnorm2d, BnMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    Scnn,
    Vggsnn,
}

/// Reference channel plans before division by `channel_divisor`.
const VGGSNN_WIDTHS: [usize; 8] = [64, 128, 256, 256, 512, 512, 512, 512];
const SCNN_WIDTHS: [usize; 4] = [64, 128, 256, 256];

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub timesteps: usize,
    pub in_channels: usize,
    /// Per-block output channel widths.
    pub channels: Vec<usize>,
    /// Block indices (0-based) whose convolution uses stride 2.
    pub downsample: Vec<usize>,
    pub lif: LifParams,
}

impl BackboneConfig {
    /// Eight conv-bn-LIF blocks with the reference widths divided by
    /// `divisor`, downsampling at blocks 1, 3 and 5 (32x32 -> 4x4).
    pub fn vggsnn(timesteps: usize, in_channels: usize, divisor: usize) -> Self {
        BackboneConfig {
            variant: BackboneVariant::Vggsnn,
            timesteps,
            in_channels,
            channels: VGGSNN_WIDTHS.iter().map(|w| (w / divisor).max(1)).collect(),
            downsample: vec![1, 3, 5],
            lif: LifParams::default(),
        }
    }

    /// Four conv-bn-LIF blocks, downsampling at blocks 1 and 3
    /// (32x32 -> 8x8).
    pub fn scnn(timesteps: usize, in_channels: usize, divisor: usize) -> Self {
        BackboneConfig {
            variant: BackboneVariant::Scnn,
            timesteps,
            in_channels,
            channels: SCNN_WIDTHS.iter().map(|w| (w / divisor).max(1)).collect(),
            downsample: vec![1, 3],
            lif: LifParams::default(),
        }
    }

    /// Output spatial size from the stride plan.
    pub fn output_hw(&self, input_hw: (usize, usize)) -> (usize, usize) {
        let (mut h, mut w) = input_hw;
        for block in 0..self.channels.len() {
            if self.downsample.contains(&block) {
                // 3x3 kernel, padding 1, stride 2
                h = (h + 2 - 3) / 2 + 1;
                w = (w + 2 - 3) / 2 + 1;
            }
        }
        (h, w)
    }

    /// Checks structural invariants; returns output channel count and
    /// spatial size for the given input resolution.
    pub fn validate(&self, input_hw: (usize, usize)) -> Result<(usize, (usize, usize)), String> {
        if self.timesteps == 0 {
            return Err("timesteps must be >= 1".into());
        }
        if self.channels.is_empty() {
            return Err("backbone needs at least one block".into());
        }
        if self.variant == BackboneVariant::Vggsnn && self.channels.len() != 8 {
            return Err(format!(
                "vggsnn variant requires exactly 8 conv-bn-LIF blocks, got {}",
                self.channels.len()
            ));
        }
        for &d in &self.downsample {
            if d >= self.channels.len() {
                return Err(format!("downsample position {d} out of range"));
            }
        }
        let (h, w) = self.output_hw(input_hw);
        if h < 2 || w < 2 {
            return Err(format!(
                "output spatial size {h}x{w} too small; the attention module needs at least 2x2"
            ));
        }
        Ok((*self.channels.last().unwrap(), (h, w)))
    }
}

struct ConvBnLif {
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: BnId,
    stride: usize,
}

pub struct Backbone {
    blocks: Vec<ConvBnLif>,
    channels: Vec<usize>,
    in_channels: usize,
    timesteps: usize,
    lif: LifParams,
}

impl Backbone {
    pub fn init(
        config: &BackboneConfig,
        params: &mut ParamSet,
        bn: &mut BnSet,
        rng: &mut Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let name = format!("backbone.block{i}");
            let fan_in = c_in * 9;
            let conv = params.register(
                format!("{name}.conv.weight"),
                kaiming(&[c_out, c_in, 3, 3], fan_in, rng),
            );
            let gamma = params.register(format!("{name}.bn.gamma"), Tensor::ones(&[c_out]));
            let beta = params.register(format!("{name}.bn.beta"), Tensor::zeros(&[c_out]));
            let bn_id = bn.register(format!("{name}.bn"), c_out);
            blocks.push(ConvBnLif {
                conv,
                gamma,
                beta,
                bn: bn_id,
                stride: if config.downsample.contains(&i) { 2 } else { 1 },
            });
            c_in = c_out;
        }
        Backbone {
            blocks,
            channels: config.channels.clone(),
            in_channels: config.in_channels,
            timesteps: config.timesteps,
            lif: config.lif,
        }
    }

    /// Replicates a static `[B,C,H,W]` batch `T` times and encodes it.
    pub fn encode_static(
        &self,
        images: &Tensor,
        params: &ParamSet,
        bn: &BnSet,
        mode: BnMode,
        probe: Option<&mut EnergyProbe>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Tensor, ModelError> {
        if images.rank() != 4 {
            return Err(ModelError::Config(format!(
                "encode_static expects [B,C,H,W], got {:?}",
                images.shape()
            )));
        }
        let replicated = crate::tensor::stack(&vec![images.clone(); self.timesteps])?;
        self.forward(&replicated, params, bn, mode, probe, updates)
    }

    /// Encodes a native event sequence `[T,B,C,H,W]`; weights are the same
    /// tensors `encode_static` uses.
    pub fn encode_events(
        &self,
        events: &Tensor,
        params: &ParamSet,
        bn: &BnSet,
        mode: BnMode,
        probe: Option<&mut EnergyProbe>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Tensor, ModelError> {
        if events.rank() != 5 {
            return Err(ModelError::Config(format!(
                "encode_events expects [T,B,C,H,W], got {:?}",
                events.shape()
            )));
        }
        if events.shape()[0] != self.timesteps {
            return Err(ModelError::Config(format!(
                "event sequence has {} steps but the backbone is configured for {}",
                events.shape()[0],
                self.timesteps
            )));
        }
        self.forward(events, params, bn, mode, probe, updates)
    }

    /// Like the plain encode path, but also hands back every block's
    /// binary spike output for visualization.
    pub fn encode_traced(
        &self,
        x_seq: &Tensor,
        params: &ParamSet,
        bn: &BnSet,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Tensor, Vec<(String, Tensor)>), ModelError> {
        let mut trace = Vec::new();
        let out = self.forward_inner(x_seq, params, bn, mode, None, updates, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward(
        &self,
        x_seq: &Tensor,
        params: &ParamSet,
        bn: &BnSet,
        mode: BnMode,
        probe: Option<&mut EnergyProbe>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Tensor, ModelError> {
        self.forward_inner(x_seq, params, bn, mode, probe, updates, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_inner(
        &self,
        x_seq: &Tensor,
        params: &ParamSet,
        bn: &BnSet,
        mode: BnMode,
        mut probe: Option<&mut EnergyProbe>,
        updates: &mut Vec<BnUpdate>,
        mut trace: Option<&mut Vec<(String, Tensor)>>,
    ) -> Result<Tensor, ModelError> {
        let (t, b) = (x_seq.shape()[0], x_seq.shape()[1]);
        let (mut h, mut w) = (x_seq.shape()[3], x_seq.shape()[4]);
        if x_seq.shape()[2] != self.in_channels {
            return Err(ModelError::Config(format!(
                "input has {} channels, backbone expects {}",
                x_seq.shape()[2],
                self.in_channels
            )));
        }
        let mut c_in = self.in_channels;
        // [T,B,C,H,W] and [T*B,C,H,W] share a layout; reshape is free.
        let mut x = x_seq.reshape(&[t * b, c_in, h, w])?;
        for (i, block) in self.blocks.iter().enumerate() {
            let c_out = self.channels[i];
            let (ho, wo) = (
                (h + 2 - 3) / block.stride + 1,
                (w + 2 - 3) / block.stride + 1,
            );
            if let Some(p) = probe.as_deref_mut() {
                let flops = energy::count_flops(&energy::LayerKind::Conv2d {
                    out_channels: c_out,
                    out_hw: (ho, wo),
                    in_channels: c_in,
                    kernel: (3, 3),
                });
                p.record(&format!("backbone.block{i}.conv"), &x, flops, t, b);
            }
            let y = x.conv2d(params.get(block.conv), block.stride, 1)?;
            let (y, batch) = batchnorm2d(
                &y,
                params.get(block.gamma),
                params.get(block.beta),
                bn.get(block.bn),
                mode,
            )?;
            if let Some(batch) = batch {
                updates.push(BnUpdate {
                    id: block.bn,
                    batch,
                });
            }
            let y_seq = y.reshape(&[t, b, c_out, ho, wo])?;
            let spikes = lif_layer(&y_seq, &self.lif)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((format!("backbone.block{i}.lif"), spikes.detach()));
            }
            x = spikes.reshape(&[t * b, c_out, ho, wo])?;
            (h, w, c_in) = (ho, wo, c_out);
        }
        Ok(x.reshape(&[t, b, c_in, h, w])?)
    }
}
