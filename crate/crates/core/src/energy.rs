//! Theoretical energy accounting: dense multiply-accumulate counts per
//! layer, measured firing rates on binary spike inputs, synaptic-operation
//! counts `SOPs = fr * T * FLOPs`, and the energy estimate
//! `E = 0.9 pJ/SOP + 4.6 pJ/FLOP` for the analog (non-spiking) portion.
//!
//! Counting convention: one multiply-accumulate pair counts as one FLOP.
//! Layers are classified by their measured input: an exactly binary input
//! tensor marks a spiking layer (energy via SOPs); anything else marks an
//! analog layer (energy via dense FLOPs, timestep-multiplied).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;

/// Energy per synaptic operation (accumulate), joules.
pub const E_SOP_JOULES: f64 = 0.9e-12;
/// Energy per dense FLOP (multiply-accumulate), joules.
pub const E_FLOP_JOULES: f64 = 4.6e-12;

/// Counting convention recorded in every report.
pub const MAC_CONVENTION: &str = "one multiply-accumulate pair counted as one FLOP";

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("firing rate requires a binary spike tensor (found value {0})")]
    NonBinaryInput(f64),
}

/// Layer geometry for dense multiply-accumulate counting.
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        out_hw: (usize, usize),
        in_channels: usize,
        kernel: (usize, usize),
    },
    Conv4d {
        out_channels: usize,
        in_channels: usize,
        /// Number of 4-D output positions (product of the four axes).
        positions: usize,
        /// Kernel taps per position (product of the four kernel dims).
        kernel_taps: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

/// Dense multiply-accumulate pairs for one forward of one item.
pub fn count_flops(layer: &LayerKind) -> f64 {
    match layer {
        LayerKind::Conv2d {
            out_channels,
            out_hw,
            in_channels,
            kernel,
        } => (out_channels * out_hw.0 * out_hw.1 * in_channels * kernel.0 * kernel.1) as f64,
        LayerKind::Conv4d {
            out_channels,
            in_channels,
            positions,
            kernel_taps,
        } => (out_channels * in_channels * positions * kernel_taps) as f64,
        LayerKind::Linear { inputs, outputs } => (inputs * outputs) as f64,
    }
}

/// Mean of a binary spike tensor over all elements and time steps.
pub fn measure_firing_rate(spikes: &Tensor) -> Result<f64, EnergyError> {
    for &v in spikes.data() {
        if v != 0.0 && v != 1.0 {
            return Err(EnergyError::NonBinaryInput(v));
        }
    }
    Ok(spikes.mean_value())
}

/// `SOPs = fr * T * FLOPs`, rounded to the nearest whole operation.
pub fn sops(fr: f64, t: usize, flops: f64) -> f64 {
    (fr * t as f64 * flops).round()
}

/// One layer's contribution to the energy estimate. `flops` is the dense
/// multiply-accumulate count for a single forward at T=1 on the report's
/// per-item basis; `firing_rate` is `None` for analog (non-spike) inputs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerCostProfile {
    pub name: String,
    pub flops: f64,
    pub firing_rate: Option<f64>,
    pub timesteps: usize,
}

impl LayerCostProfile {
    pub fn sops(&self) -> f64 {
        match self.firing_rate {
            Some(fr) => sops(fr, self.timesteps, self.flops),
            None => 0.0,
        }
    }

    /// Dense FLOPs executed on the analog path (timestep-multiplied).
    pub fn analog_flops(&self) -> f64 {
        match self.firing_rate {
            Some(_) => 0.0,
            None => self.flops * self.timesteps as f64,
        }
    }
}

/// Assembled energy estimate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EnergyReport {
    pub convention: String,
    /// Basis note: what "one inference" means for the per-layer numbers.
    pub basis: String,
    pub layers: Vec<LayerCostProfile>,
    pub total_sops: f64,
    pub total_flops_analog: f64,
    pub e_snn_joules: f64,
    /// Iso-architecture dense single-pass equivalent.
    pub e_ann_equiv_joules: f64,
}

/// Energy of a spiking model: SOP portion plus the analog (real-valued)
/// portion.
pub fn snn_energy_joules(total_sops: f64, total_flops_analog: f64) -> f64 {
    E_SOP_JOULES * total_sops + E_FLOP_JOULES * total_flops_analog
}

/// Energy of a conventional network executing `flops` dense FLOPs.
pub fn ann_energy_joules(flops: f64) -> f64 {
    E_FLOP_JOULES * flops
}

impl EnergyReport {
    /// Report from pre-computed totals (no per-layer breakdown).
    pub fn from_totals(total_sops: f64, total_flops_analog: f64, ann_flops: f64) -> Self {
        EnergyReport {
            convention: MAC_CONVENTION.to_string(),
            basis: "totals supplied directly".to_string(),
            layers: Vec::new(),
            total_sops,
            total_flops_analog,
            e_snn_joules: snn_energy_joules(total_sops, total_flops_analog),
            e_ann_equiv_joules: ann_energy_joules(ann_flops),
        }
    }

    /// Report from instrumented per-layer profiles. The ANN equivalent
    /// executes every layer densely once (T=1).
    pub fn from_profiles(layers: Vec<LayerCostProfile>, basis: impl Into<String>) -> Self {
        let total_sops: f64 = layers.iter().map(|l| l.sops()).sum();
        let total_flops_analog: f64 = layers.iter().map(|l| l.analog_flops()).sum();
        let ann_flops: f64 = layers.iter().map(|l| l.flops).sum();
        EnergyReport {
            convention: MAC_CONVENTION.to_string(),
            basis: basis.into(),
            layers,
            total_sops,
            total_flops_analog,
            e_snn_joules: snn_energy_joules(total_sops, total_flops_analog),
            e_ann_equiv_joules: ann_energy_joules(ann_flops),
        }
    }

    /// Human-readable table with one row per layer and the totals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("energy model: {}\n", self.convention));
        out.push_str(&format!("basis: {}\n", self.basis));
        out.push_str(&format!(
            "{:<24} {:>14} {:>8} {:>4} {:>14} {:>14}\n",
            "layer", "FLOPs", "fr", "T", "SOPs", "analog FLOPs"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<24} {:>14.0} {:>8} {:>4} {:>14.0} {:>14.0}\n",
                l.name,
                l.flops,
                l.firing_rate
                    .map(|f| format!("{f:.4}"))
                    .unwrap_or_else(|| "-".to_string()),
                l.timesteps,
                l.sops(),
                l.analog_flops(),
            ));
        }
        out.push_str(&format!(
            "total: SOPs {:.4e}, analog FLOPs {:.4e}, E_snn {:.6} mJ, E_ann-equiv {:.6} mJ\n",
            self.total_sops,
            self.total_flops_analog,
            self.e_snn_joules * 1e3,
            self.e_ann_equiv_joules * 1e3,
        ));
        out
    }
}

// ── instrumentation ──────────────────────────────────────────────────

struct ProbeLayer {
    flops_per_item_step: f64,
    timesteps: usize,
    items: f64,
    ones: f64,
    elements: f64,
    binary: bool,
}

/// Accumulates per-layer input statistics across instrumented forward
/// passes. Layer identity is the record name; repeated records (more
/// episodes, more pairs) accumulate.
#[derive(Default)]
pub struct EnergyProbe {
    layers: Vec<(String, ProbeLayer)>,
    index: BTreeMap<String, usize>,
    /// Query items seen; the per-layer numbers are normalized by this to
    /// express energy per classified query.
    pub queries: f64,
}

impl EnergyProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one execution of a layer: `input` is the tensor feeding it,
    /// `flops_per_item_step` the dense MACs for one item and one time
    /// step, `timesteps` the temporal multiplicity, and `items` how many
    /// items this call processed.
    pub fn record(
        &mut self,
        name: &str,
        input: &Tensor,
        flops_per_item_step: f64,
        timesteps: usize,
        items: usize,
    ) {
        let idx = match self.index.get(name) {
            Some(&i) => i,
            None => {
                let i = self.layers.len();
                self.layers.push((
                    name.to_string(),
                    ProbeLayer {
                        flops_per_item_step,
                        timesteps,
                        items: 0.0,
                        ones: 0.0,
                        elements: 0.0,
                        binary: true,
                    },
                ));
                self.index.insert(name.to_string(), i);
                i
            }
        };
        let layer = &mut self.layers[idx].1;
        debug_assert_eq!(layer.timesteps, timesteps, "layer {name} changed T");
        layer.items += items as f64;
        layer.binary &= input.is_binary();
        if layer.binary {
            layer.ones += input.data().iter().sum::<f64>();
        }
        layer.elements += input.numel() as f64;
    }

    /// Builds per-query-item profiles from everything recorded so far.
    pub fn finish(self) -> EnergyReport {
        let queries = if self.queries > 0.0 { self.queries } else { 1.0 };
        let profiles = self
            .layers
            .into_iter()
            .map(|(name, l)| {
                let fr = if l.binary && l.elements > 0.0 {
                    Some(l.ones / l.elements)
                } else {
                    None
                };
                LayerCostProfile {
                    name,
                    flops: l.flops_per_item_step * l.items / queries,
                    firing_rate: fr,
                    timesteps: l.timesteps,
                }
            })
            .collect();
        EnergyReport::from_profiles(
            profiles,
            "one query classification; support encoding amortized over the episode's queries",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_counting_examples() {
        assert_eq!(
            count_flops(&LayerKind::Conv2d {
                out_channels: 1,
                out_hw: (4, 4),
                in_channels: 1,
                kernel: (3, 3),
            }),
            144.0
        );
        assert_eq!(
            count_flops(&LayerKind::Conv2d {
                out_channels: 1,
                out_hw: (7, 5),
                in_channels: 1,
                kernel: (1, 1),
            }),
            35.0
        );
        assert_eq!(
            count_flops(&LayerKind::Linear {
                inputs: 512,
                outputs: 5
            }),
            2560.0
        );
    }

    #[test]
    fn firing_rate_measurement() {
        let z = Tensor::zeros(&[4, 4]);
        assert_eq!(measure_firing_rate(&z).unwrap(), 0.0);
        let o = Tensor::ones(&[4, 4]);
        assert_eq!(measure_firing_rate(&o).unwrap(), 1.0);
        let half = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(measure_firing_rate(&half).unwrap(), 0.5);
        let analog = Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            measure_firing_rate(&analog),
            Err(EnergyError::NonBinaryInput(_))
        ));
    }

    #[test]
    fn sops_arithmetic() {
        assert_eq!(sops(0.25, 4, 1000.0), 1000.0);
        assert_eq!(sops(0.0, 10, 12345.0), 0.0);
        assert_eq!(sops(1.0, 1, 777.0), 777.0);
    }

    #[test]
    fn paper_scale_totals_reproduce() {
        let report = EnergyReport::from_totals(1.39e9, 0.13e9, 4.84e9);
        assert!((report.e_snn_joules - 1.849e-3).abs() < 0.0005e-3);
        assert!((report.e_ann_equiv_joules - 22.264e-3).abs() < 0.0005e-3);
    }

    #[test]
    fn zero_activity_energy_is_analog_only() {
        let layers = vec![
            LayerCostProfile {
                name: "encoder".into(),
                flops: 1e6,
                firing_rate: None,
                timesteps: 2,
            },
            LayerCostProfile {
                name: "conv".into(),
                flops: 5e6,
                firing_rate: Some(0.0),
                timesteps: 2,
            },
        ];
        let report = EnergyReport::from_profiles(layers, "test");
        assert_eq!(report.total_sops, 0.0);
        assert_eq!(report.total_flops_analog, 2e6);
        assert!((report.e_snn_joules - E_FLOP_JOULES * 2e6).abs() < 1e-18);
    }

    #[test]
    fn sops_double_when_t_doubles_at_fixed_fr() {
        let mk = |t: usize| LayerCostProfile {
            name: "conv".into(),
            flops: 1e6,
            firing_rate: Some(0.3),
            timesteps: t,
        };
        assert_eq!(mk(8).sops(), 2.0 * mk(4).sops());
    }

    #[test]
    fn energy_monotone_in_firing_rate() {
        let energy_at = |fr: f64| {
            let layers = vec![LayerCostProfile {
                name: "conv".into(),
                flops: 1e6,
                firing_rate: Some(fr),
                timesteps: 4,
            }];
            EnergyReport::from_profiles(layers, "test").e_snn_joules
        };
        let mut prev = -1.0;
        for k in 0..=10 {
            let e = energy_at(k as f64 / 10.0);
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn probe_accumulates_and_normalizes_per_query() {
        let mut probe = EnergyProbe::new();
        let spikes = Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        probe.record("conv", &spikes, 100.0, 2, 2);
        probe.record("conv", &spikes, 100.0, 2, 2);
        probe.queries = 2.0;
        let report = probe.finish();
        assert_eq!(report.layers.len(), 1);
        let l = &report.layers[0];
        assert_eq!(l.flops, 100.0 * 4.0 / 2.0);
        assert_eq!(l.firing_rate, Some(0.25));
        assert_eq!(l.timesteps, 2);
    }

    #[test]
    fn table_lists_convention_banner() {
        let report = EnergyReport::from_totals(1.0e6, 1.0e6, 1.0e6);
        let table = report.render_table();
        assert!(table.contains("multiply-accumulate"));
    }
}
