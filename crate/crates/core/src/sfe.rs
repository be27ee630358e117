//! Self-feature extractor: channel-normalized self-correlation over a 5x5
//! neighborhood per time step, aggregated by a bottleneck convolution block
//! that collapses the neighborhood axes, passed through a LIF layer, and
//! added residually onto the backbone feature.
//!
//! The two padding-free 3x3 convolutions force the neighborhood to 5x5
//! (5 -> 3 -> 1); the 1x1 convolutions act on the channel axis only.

use crate::energy::{self, EnergyProbe};
use crate::model::{kaiming, ParamId, ParamSet};
use crate::rng::Rng;
use crate::spiking::{lif_layer, LifParams};
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

/// Neighborhood side length required by the bottleneck geometry.
pub const NEIGHBORHOOD: usize = 5;

/// Bottleneck channel reduction factor.
pub const REDUCTION: usize = 4;

/// Time-channel self-correlation: every spatial position's channel vector
/// is L2-normalized (zero vectors stay zero), then multiplied channelwise
/// against each neighbor in a `u x v` window, independently per time step.
/// `[T,B,C,H,W] -> [T,B,C,H,W,u,v]`, zero outside image bounds.
pub fn self_correlation(f0: &Tensor, u: usize, v: usize) -> TensorResult<Tensor> {
    if f0.rank() != 5 {
        return Err(TensorError::shape(
            "self_correlation",
            format!("expects [T,B,C,H,W], got {:?}", f0.shape()),
        ));
    }
    if u % 2 == 0 || v % 2 == 0 {
        return Err(TensorError::shape(
            "self_correlation",
            format!("neighborhood must be odd, got {u}x{v}"),
        ));
    }
    let [t, b, c, h, w] = [
        f0.shape()[0],
        f0.shape()[1],
        f0.shape()[2],
        f0.shape()[3],
        f0.shape()[4],
    ];
    let folded = f0.reshape(&[t * b, c, h, w])?;
    let normalized = folded.normalize(1)?;
    let corr = normalized.neighbor_product(u, v)?;
    corr.reshape(&[t, b, c, h, w, u, v])
}

pub struct SfeLayer {
    reduce_w: ParamId,  // [C/r, C, 1, 1]
    reduce_b: ParamId,  // [C/r]
    conv_a_w: ParamId,  // [C/r, C/r, 3, 3]
    conv_a_b: ParamId,  // [C/r]
    conv_b_w: ParamId,  // [C/r, C/r, 3, 3]
    conv_b_b: ParamId,  // [C/r]
    restore_w: ParamId, // [C, C/r, 1, 1]
    restore_b: ParamId, // [C]
    channels: usize,
    reduced: usize,
    lif: LifParams,
}

impl SfeLayer {
    pub fn init(
        channels: usize,
        lif: LifParams,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Self, String> {
        if channels == 0 {
            return Err("self-feature extractor needs at least one channel".into());
        }
        let reduced = (channels / REDUCTION).max(1);
        let reg_conv = |params: &mut ParamSet,
                        rng: &mut Rng,
                        name: &str,
                        co: usize,
                        ci: usize,
                        k: usize| {
            let w = params.register(
                format!("sfe.{name}.weight"),
                kaiming(&[co, ci, k, k], ci * k * k, rng),
            );
            let b = params.register(format!("sfe.{name}.bias"), Tensor::zeros(&[co]));
            (w, b)
        };
        let (reduce_w, reduce_b) = reg_conv(params, rng, "reduce", reduced, channels, 1);
        let (conv_a_w, conv_a_b) = reg_conv(params, rng, "conv_a", reduced, reduced, 3);
        let (conv_b_w, conv_b_b) = reg_conv(params, rng, "conv_b", reduced, reduced, 3);
        let (restore_w, restore_b) = reg_conv(params, rng, "restore", channels, reduced, 1);
        Ok(SfeLayer {
            reduce_w,
            reduce_b,
            conv_a_w,
            conv_a_b,
            conv_b_w,
            conv_b_b,
            restore_w,
            restore_b,
            channels,
            reduced,
            lif,
        })
    }

    /// `F = F0 + F1`: the self-correlation pattern is aggregated down to
    /// one value per (channel, position), LIF-activated, and added onto
    /// the input. Shape is preserved.
    pub fn forward(
        &self,
        f0: &Tensor,
        params: &ParamSet,
        probe: Option<&mut EnergyProbe>,
    ) -> TensorResult<Tensor> {
        let [t, b, c, h, w] = [
            f0.shape()[0],
            f0.shape()[1],
            f0.shape()[2],
            f0.shape()[3],
            f0.shape()[4],
        ];
        if c != self.channels {
            return Err(TensorError::shape(
                "sfe_forward",
                format!("feature has {c} channels, block built for {}", self.channels),
            ));
        }
        let corr = self_correlation(f0, NEIGHBORHOOD, NEIGHBORHOOD)?;
        // Treat every spatial position as a batch row; the convolutions
        // run over the (U,V) axes.
        let rows = t * b * h * w;
        let corr = corr
            .reshape(&[t * b, c, h * w, NEIGHBORHOOD * NEIGHBORHOOD])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[rows, c, NEIGHBORHOOD, NEIGHBORHOOD])?;
        if let Some(p) = probe {
            let npos = (h * w) as f64;
            let per_pos = energy::count_flops(&energy::LayerKind::Conv2d {
                out_channels: self.reduced,
                out_hw: (NEIGHBORHOOD, NEIGHBORHOOD),
                in_channels: c,
                kernel: (1, 1),
            }) + energy::count_flops(&energy::LayerKind::Conv2d {
                out_channels: self.reduced,
                out_hw: (3, 3),
                in_channels: self.reduced,
                kernel: (3, 3),
            }) + energy::count_flops(&energy::LayerKind::Conv2d {
                out_channels: self.reduced,
                out_hw: (1, 1),
                in_channels: self.reduced,
                kernel: (3, 3),
            }) + energy::count_flops(&energy::LayerKind::Conv2d {
                out_channels: c,
                out_hw: (1, 1),
                in_channels: self.reduced,
                kernel: (1, 1),
            });
            p.record("sfe.bottleneck", &corr, per_pos * npos, t, b);
        }
        let y = corr
            .conv2d(params.get(self.reduce_w), 1, 0)?
            .add_channel(params.get(self.reduce_b))?;
        let y = y
            .conv2d(params.get(self.conv_a_w), 1, 0)?
            .add_channel(params.get(self.conv_a_b))?;
        let y = y
            .conv2d(params.get(self.conv_b_w), 1, 0)?
            .add_channel(params.get(self.conv_b_b))?;
        let y = y
            .conv2d(params.get(self.restore_w), 1, 0)?
            .add_channel(params.get(self.restore_b))?;
        // [T*B*H*W, C, 1, 1] -> [T,B,C,H,W]
        let pre = y
            .reshape(&[t * b, h * w, c])?
            .permute(&[0, 2, 1])?
            .reshape(&[t, b, c, h, w])?;
        let f1 = lif_layer(&pre, &self.lif).map_err(|e| match e {
            crate::spiking::SpikingError::Tensor(t) => t,
            other => TensorError::shape("sfe_forward", other.to_string()),
        })?;
        f0.add(&f1)
    }

    /// Zeroes every weight and bias in the bottleneck block; with the
    /// residual connection this makes the layer an exact identity.
    pub fn zero_block(&self, params: &mut ParamSet) {
        for id in [
            self.reduce_w,
            self.reduce_b,
            self.conv_a_w,
            self.conv_a_b,
            self.conv_b_w,
            self.conv_b_b,
            self.restore_w,
            self.restore_b,
        ] {
            let t = params.get(id);
            let zero = Tensor::zeros(t.shape());
            params.overwrite(id, zero);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamSet;

    fn rand_f0(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..crate::tensor::numel(shape))
            .map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn center_offset_is_self_cosine() {
        let f0 = rand_f0(&[1, 1, 4, 3, 3], 2);
        let corr = self_correlation(&f0, 5, 5).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let mut vec_norm = 0.0;
                for ch in 0..4 {
                    let v = f0.at(&[0, 0, ch, y, x]);
                    vec_norm += v * v;
                }
                let sum: f64 = (0..4).map(|ch| corr.at(&[0, 0, ch, y, x, 2, 2])).sum();
                if vec_norm > 0.0 {
                    assert!((sum - 1.0).abs() < 1e-12, "self-cosine at ({y},{x}): {sum}");
                } else {
                    assert_eq!(sum, 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_feature_gives_unit_cosine_in_bounds() {
        let f0 = Tensor::full(&[1, 1, 3, 4, 4], 0.7);
        let corr = self_correlation(&f0, 5, 5).unwrap();
        let y = 2usize;
        let x = 2usize;
        for i in 0..5usize {
            for j in 0..5usize {
                let ny = y as isize + i as isize - 2;
                let nx = x as isize + j as isize - 2;
                let in_bounds = (0..4).contains(&ny) && (0..4).contains(&nx);
                let sum: f64 = (0..3).map(|ch| corr.at(&[0, 0, ch, y, x, i, j])).sum();
                if in_bounds {
                    assert!((sum - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(sum, 0.0);
                }
            }
        }
    }

    #[test]
    fn matches_direct_loop_oracle() {
        let shape = [1, 1, 4, 3, 3];
        let mut rng = Rng::new(33);
        let data: Vec<f64> = (0..crate::tensor::numel(&shape)).map(|_| rng.normal()).collect();
        let f0 = Tensor::from_vec(&shape, data).unwrap();
        let corr = self_correlation(&f0, 5, 5).unwrap();
        // direct nested-loop evaluation of the definition
        let norm_at = |y: usize, x: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..4).map(|ch| f0.at(&[0, 0, ch, y, x])).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 0.0 {
                for a in &mut v {
                    *a /= n;
                }
            }
            v
        };
        for y in 0..3isize {
            for x in 0..3isize {
                let center = norm_at(y as usize, x as usize);
                for i in 0..5isize {
                    for j in 0..5isize {
                        let (ny, nx) = (y + i - 2, x + j - 2);
                        for ch in 0..4usize {
                            let expect = if (0..3).contains(&ny) && (0..3).contains(&nx) {
                                center[ch] * norm_at(ny as usize, nx as usize)[ch]
                            } else {
                                0.0
                            };
                            let got = corr.at(&[
                                0,
                                0,
                                ch,
                                y as usize,
                                x as usize,
                                i as usize,
                                j as usize,
                            ]);
                            assert!(
                                (got - expect).abs() < 1e-12,
                                "mismatch at ch={ch} y={y} x={x} i={i} j={j}: {got} vs {expect}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn correlation_bounded_and_even_rejected() {
        let f0 = rand_f0(&[2, 1, 3, 4, 4], 8);
        assert!(self_correlation(&f0, 4, 5).is_err());
        let corr = self_correlation(&f0, 5, 5).unwrap();
        assert!(corr.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // binary (nonnegative) features give nonnegative correlations
        assert!(corr.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn translation_equivariance_in_interior() {
        // shift the feature map by one row; positions whose 5x5
        // neighborhood stays in bounds in both maps shift with it
        let (h, w) = (6usize, 5usize);
        let mut rng = Rng::new(21);
        let base: Vec<f64> = (0..3 * h * w).map(|_| rng.normal()).collect();
        let mut shifted = vec![0.0; base.len()];
        for ch in 0..3 {
            for y in 0..h - 1 {
                for x in 0..w {
                    shifted[(ch * h + (y + 1)) * w + x] = base[(ch * h + y) * w + x];
                }
            }
        }
        let f_a = Tensor::from_vec(&[1, 1, 3, h, w], base).unwrap();
        let f_b = Tensor::from_vec(&[1, 1, 3, h, w], shifted).unwrap();
        let ca = self_correlation(&f_a, 5, 5).unwrap();
        let cb = self_correlation(&f_b, 5, 5).unwrap();
        // rows 0..4 fit at y=2 in the original and rows 1..5 at y=3 in
        // the shifted map
        let y = 2usize;
        let x = 2usize;
        for ch in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    let a = ca.at(&[0, 0, ch, y, x, i, j]);
                    let b = cb.at(&[0, 0, ch, y + 1, x, i, j]);
                    assert!((a - b).abs() < 1e-12, "ch={ch} i={i} j={j}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn zero_block_makes_residual_identity() {
        let mut params = ParamSet::default();
        let mut rng = Rng::new(4);
        let layer = SfeLayer::init(8, LifParams::default(), &mut params, &mut rng).unwrap();
        layer.zero_block(&mut params);
        let f0 = rand_f0(&[2, 1, 8, 4, 4], 6);
        let f = layer.forward(&f0, &params, None).unwrap();
        assert_eq!(f.data(), f0.data(), "zero weights must reduce to F = F0");
    }

    #[test]
    fn shape_preserved_and_values_in_spike_sum_range() {
        let mut params = ParamSet::default();
        let mut rng = Rng::new(4);
        let layer = SfeLayer::init(8, LifParams::default(), &mut params, &mut rng).unwrap();
        let f0 = rand_f0(&[2, 2, 8, 4, 4], 16);
        let f = layer.forward(&f0, &params, None).unwrap();
        assert_eq!(f.shape(), f0.shape());
        assert!(f.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
    }
}
