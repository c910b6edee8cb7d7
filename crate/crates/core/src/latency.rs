//! Compute and communication latency models and the threshold penalty.
//!
//! Units are fixed crate-wide: milliseconds for latency, bits for data,
//! FLOPs for compute, GFLOPS for device power. All conversions happen here.
//!
//! Compute latency comes from either a measured per-(layer, block, device)
//! table or from FLOPs divided by a fitted device power. Communication
//! latency is the transmitted bit count over the link throughput; packet
//! loss adds no latency (the link is stable but unreliable) and affects only
//! the loss function via dropout emulation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{self, ArchSample, NetworkPart, SearchSpaceSpec};

/// Table row index carrying the fixed-prefix compute cost.
pub const PREFIX_LAYER: i32 = -1;
/// Table row index carrying the fixed-suffix compute cost.
pub const SUFFIX_LAYER: i32 = -2;

/// Measured per-block compute latency, keyed by (layer, block, device).
///
/// Rows at layer -1 / -2 carry the fixed prefix / suffix cost for a device;
/// several rows per fixed stage are summed. Tables that omit them contribute
/// zero fixed cost (`has_fixed_rows` lets callers warn).
#[derive(Debug, Default, Clone, PartialEq)]
pub struct LatencyTable {
    entries: BTreeMap<(i32, String, String), f64>,
    devices: BTreeSet<String>,
}

impl LatencyTable {
    /// Parse delimited text with columns `layer_index, block_id, device_id,
    /// latency_ms`. Lines starting with `#` and a leading header line are
    /// skipped; fields are comma-separated.
    pub fn parse(name: &str, text: &str) -> Result<LatencyTable> {
        let mut table = LatencyTable::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    name: name.into(),
                    line: line_no + 1,
                    message: format!("expected 4 comma-separated fields, got {}", fields.len()),
                });
            }
            if line_no == 0 && fields[0].parse::<i32>().is_err() {
                continue; // header
            }
            let layer: i32 = fields[0].parse().map_err(|_| Error::Parse {
                name: name.into(),
                line: line_no + 1,
                message: format!("bad layer index '{}'", fields[0]),
            })?;
            let latency: f64 = fields[3].parse().map_err(|_| Error::Parse {
                name: name.into(),
                line: line_no + 1,
                message: format!("bad latency '{}'", fields[3]),
            })?;
            if !(latency >= 0.0) {
                return Err(Error::Parse {
                    name: name.into(),
                    line: line_no + 1,
                    message: format!("negative latency {latency}"),
                });
            }
            table.insert(layer, fields[1], fields[2], latency);
        }
        Ok(table)
    }

    pub fn insert(&mut self, layer: i32, block: &str, device: &str, latency_ms: f64) {
        self.devices.insert(device.to_string());
        *self
            .entries
            .entry((layer, block.to_string(), device.to_string()))
            .or_insert(0.0) += latency_ms;
    }

    pub fn devices(&self) -> impl Iterator<Item = &str> {
        self.devices.iter().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, layer: i32, block: &str, device: &str) -> Result<f64> {
        self.entries
            .get(&(layer, block.to_string(), device.to_string()))
            .copied()
            .ok_or_else(|| Error::MissingLatency {
                layer,
                block: block.into(),
                device: device.into(),
            })
    }

    /// Summed fixed-stage cost for a device; zero when the table has no such
    /// rows.
    fn fixed_cost(&self, layer: i32, device: &str) -> f64 {
        self.entries
            .iter()
            .filter(|((l, _, d), _)| *l == layer && d == device)
            .map(|(_, &v)| v)
            .sum()
    }

    pub fn has_fixed_rows(&self, device: &str) -> bool {
        self.entries
            .keys()
            .any(|(l, _, d)| (*l == PREFIX_LAYER || *l == SUFFIX_LAYER) && d == device)
    }

    /// Check that every (layer, candidate) pair of a space resolves for a
    /// device.
    pub fn validate_against(&self, space: &SearchSpaceSpec, device: &str) -> Result<()> {
        for (index, layer) in space.layers.iter().enumerate() {
            for id in &layer.candidates {
                self.lookup(index as i32, id, device)?;
            }
        }
        Ok(())
    }

    /// All (latency_ms, flops) pairs for a device over the searchable part of
    /// a space, the input to the power estimator.
    pub fn measurement_pairs(
        &self,
        space: &SearchSpaceSpec,
        device: &str,
    ) -> Result<Vec<(f64, f64)>> {
        let mut pairs = Vec::new();
        for (index, layer) in space.layers.iter().enumerate() {
            for id in &layer.candidates {
                let latency = self.lookup(index as i32, id, device)?;
                let block = space.block(id)?;
                pairs.push((latency, space::block_flops(block, layer) as f64));
            }
        }
        Ok(pairs)
    }
}

/// A device's effective compute power in GFLOPS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevicePower {
    pub device_id: String,
    pub gflops: f64,
}

/// Parse delimited text with columns `device_id, gflops`.
pub fn parse_device_powers(name: &str, text: &str) -> Result<BTreeMap<String, f64>> {
    let mut powers = BTreeMap::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                name: name.into(),
                line: line_no + 1,
                message: format!("expected 2 comma-separated fields, got {}", fields.len()),
            });
        }
        if line_no == 0 && fields[1].parse::<f64>().is_err() {
            continue; // header
        }
        let gflops: f64 = fields[1].parse().map_err(|_| Error::Parse {
            name: name.into(),
            line: line_no + 1,
            message: format!("bad power '{}'", fields[1]),
        })?;
        if !(gflops > 0.0) {
            return Err(Error::Parse {
                name: name.into(),
                line: line_no + 1,
                message: "device power must be positive".into(),
            });
        }
        powers.insert(fields[0].to_string(), gflops);
    }
    Ok(powers)
}

/// The communication link: stable throughput, per-element quantization, and
/// the element-drop probability (which never adds latency).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// Throughput in bit/s.
    pub throughput_bps: f64,
    /// Quantization bits per transmitted element.
    pub bits_per_element: f64,
    /// Element drop probability on the link.
    pub loss_prob: f64,
}

impl LinkModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.throughput_bps > 0.0) {
            return Err(Error::config("link.throughput", "must be > 0"));
        }
        if !(self.bits_per_element > 0.0) {
            return Err(Error::config("link.bits_per_element", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            return Err(Error::config("link.loss_prob", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Transmission time of `n` elements in milliseconds: `q * n / r`, scaled so
/// exact integer inputs stay exact.
pub fn comm_latency_ms(element_count: usize, link: &LinkModel) -> f64 {
    let bits = link.bits_per_element * element_count as f64;
    bits * 1e3 / link.throughput_bps
}

/// FLOPs-derived compute time in milliseconds: `C / Pi`.
pub fn comp_latency_flops_ms(flops: f64, gflops: f64) -> f64 {
    flops / (gflops * 1e6)
}

/// Latency excess over the threshold: `max(0, T - T_th)`.
pub fn penalty_ms(total_ms: f64, threshold_ms: f64) -> f64 {
    (total_ms - threshold_ms).max(0.0)
}

/// Fit device power from (latency_ms, flops) measurements by least squares
/// on `sum (T - C/pi)^2`. Substituting x = 1/pi makes the problem linear,
/// giving the closed form `pi = sum(C^2) / sum(T*C)`; returned in GFLOPS.
pub fn estimate_power_gflops(pairs: &[(f64, f64)]) -> Result<f64> {
    if !pairs.iter().any(|&(t, c)| t > 0.0 && c > 0.0) {
        return Err(Error::PowerEstimation(
            "need at least one measurement with positive latency and FLOPs".into(),
        ));
    }
    let sum_c2: f64 = pairs.iter().map(|&(_, c)| c * c).sum();
    let sum_tc: f64 = pairs.iter().map(|&(t, c)| t * c).sum();
    if !(sum_tc > 0.0) {
        return Err(Error::PowerEstimation(format!(
            "sum of latency*FLOPs is {sum_tc}, cannot fit a positive power"
        )));
    }
    Ok(sum_c2 / sum_tc / 1e6)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMode {
    Tabular,
    Flops,
}

/// Per-term latency of one end-to-end evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEval {
    pub head_comp_ms: f64,
    pub comm_ms: f64,
    pub tail_comp_ms: f64,
    pub total_ms: f64,
    pub intermediate_elements: usize,
}

/// Everything needed to score a sample's latency: mode, table and/or device
/// powers, the link, and the head/tail device assignment.
#[derive(Debug)]
pub struct LatencyModel {
    pub mode: LatencyMode,
    pub table: Option<LatencyTable>,
    pub powers: BTreeMap<String, f64>,
    pub link: LinkModel,
    pub head_device: String,
    pub tail_device: String,
    comm_evals: AtomicU64,
}

impl Clone for LatencyModel {
    fn clone(&self) -> Self {
        LatencyModel {
            mode: self.mode,
            table: self.table.clone(),
            powers: self.powers.clone(),
            link: self.link,
            head_device: self.head_device.clone(),
            tail_device: self.tail_device.clone(),
            comm_evals: AtomicU64::new(0),
        }
    }
}

impl LatencyModel {
    pub fn new(
        mode: LatencyMode,
        table: Option<LatencyTable>,
        powers: BTreeMap<String, f64>,
        link: LinkModel,
        head_device: impl Into<String>,
        tail_device: impl Into<String>,
    ) -> Result<LatencyModel> {
        link.validate()?;
        let model = LatencyModel {
            mode,
            table,
            powers,
            link,
            head_device: head_device.into(),
            tail_device: tail_device.into(),
            comm_evals: AtomicU64::new(0),
        };
        match model.mode {
            LatencyMode::Tabular => {
                if model.table.is_none() {
                    return Err(Error::config("latency.table", "required in tabular mode"));
                }
            }
            LatencyMode::Flops => {
                for device in [&model.head_device, &model.tail_device] {
                    if !model.powers.contains_key(device) {
                        return Err(Error::UnknownDevice(device.clone()));
                    }
                }
            }
        }
        Ok(model)
    }

    fn gflops(&self, device: &str) -> Result<f64> {
        self.powers
            .get(device)
            .copied()
            .ok_or_else(|| Error::UnknownDevice(device.into()))
    }

    /// Compute latency of one network part on one device.
    ///
    /// Tabular mode sums the table rows of the part's blocks plus its fixed
    /// stages. A mid-split block has no per-portion table rows, so its whole
    /// row is charged to the side holding the up-to-depthwise portion; the
    /// other side's portion costs nothing. This keeps head + tail equal to
    /// the whole-model cost. FLOPs mode divides the part's exact FLOPs
    /// (portions included) by the device power.
    pub fn part_comp_ms(
        &self,
        part: &NetworkPart,
        space: &SearchSpaceSpec,
        device: &str,
    ) -> Result<f64> {
        match self.mode {
            LatencyMode::Tabular => {
                let table = self.table.as_ref().expect("validated at construction");
                let mut total = 0.0;
                if part.includes_prefix {
                    total += table.fixed_cost(PREFIX_LAYER, device);
                }
                if part.includes_suffix {
                    total += table.fixed_cost(SUFFIX_LAYER, device);
                }
                for pb in &part.blocks {
                    total += table.lookup(pb.layer_index as i32, &pb.block_id, device)?;
                }
                if let Some(partial) = &part.partial {
                    if partial.portion == space::BlockPortion::UpToDepthwise {
                        total +=
                            table.lookup(partial.layer_index as i32, &partial.block_id, device)?;
                    }
                }
                Ok(total)
            }
            LatencyMode::Flops => {
                let flops = space::part_flops(part, space)? as f64;
                Ok(comp_latency_flops_ms(flops, self.gflops(device)?))
            }
        }
    }

    /// Communication term for an intermediate representation of `n` elements.
    pub fn comm_ms(&self, element_count: usize) -> f64 {
        self.comm_evals.fetch_add(1, Ordering::Relaxed);
        comm_latency_ms(element_count, &self.link)
    }

    /// Number of communication-latency evaluations since construction.
    /// Protocols that must ignore communication are checked against this.
    pub fn comm_eval_count(&self) -> u64 {
        self.comm_evals.load(Ordering::Relaxed)
    }

    /// End-to-end latency of a decoded sample: head compute on the head
    /// device, transmission of the boundary representation, tail compute on
    /// the tail device.
    pub fn end_to_end(&self, sample: &ArchSample, space: &SearchSpaceSpec) -> Result<LatencyEval> {
        let decoded = space::decode(sample, space)?;
        let head_comp_ms = self.part_comp_ms(&decoded.head, space, &self.head_device)?;
        let tail_comp_ms = self.part_comp_ms(&decoded.tail, space, &self.tail_device)?;
        let intermediate_elements = decoded.split.element_count();
        let comm_ms = self.comm_ms(intermediate_elements);
        Ok(LatencyEval {
            head_comp_ms,
            comm_ms,
            tail_comp_ms,
            total_ms: head_comp_ms + comm_ms + tail_comp_ms,
            intermediate_elements,
        })
    }

    /// Whole-model compute on one device, no communication. Used by search
    /// protocols that assume the entire model runs on the end device.
    pub fn whole_model_ms(
        &self,
        layer_choices: &[usize],
        space: &SearchSpaceSpec,
        device: &str,
    ) -> Result<f64> {
        match self.mode {
            LatencyMode::Tabular => {
                let table = self.table.as_ref().expect("validated at construction");
                let mut total = table.fixed_cost(PREFIX_LAYER, device)
                    + table.fixed_cost(SUFFIX_LAYER, device);
                for (index, &choice) in layer_choices.iter().enumerate() {
                    let id = space.layers[index].candidates.get(choice).ok_or_else(|| {
                        Error::InvalidSpace(format!("layer {index}: candidate {choice} missing"))
                    })?;
                    total += table.lookup(index as i32, id, device)?;
                }
                Ok(total)
            }
            LatencyMode::Flops => {
                let flops = space::total_flops(layer_choices, space)? as f64;
                Ok(comp_latency_flops_ms(flops, self.gflops(device)?))
            }
        }
    }
}
