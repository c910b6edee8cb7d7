//! The joint search domain: per-layer candidate blocks plus the split-point
//! dimension, with geometry queries (intermediate sizes, FLOPs, cardinality).
//!
//! A space is loaded from a declarative JSON file so that the full layer-wise
//! space, the extended space with sub-unit expansion ratios, and small test
//! spaces all share one code path. All types are immutable after
//! construction.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational expansion ratio, e.g. 6, 1, or 1/8.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expansion {
    pub num: u32,
    pub den: u32,
}

impl Expansion {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidSpace(format!(
                "expansion must be positive, got {num}/{den}"
            )));
        }
        Ok(Expansion { num, den })
    }

    pub fn is_sub_unit(&self) -> bool {
        self.num < self.den
    }

    /// Mid-channel count: round-half-up of `e * channels`.
    pub fn apply(&self, channels: usize) -> usize {
        let n = self.num as u64 * channels as u64;
        let d = self.den as u64;
        ((2 * n + d) / (2 * d)) as usize
    }
}

impl fmt::Display for Expansion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl std::str::FromStr for Expansion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpace(format!("cannot parse expansion '{s}'"));
        match s.split_once('/') {
            Some((n, d)) => Expansion::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => Expansion::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for Expansion {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expansion {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One entry of the candidate-block menu. A block is either the identity
/// ("skip") or a three-stage unit: pointwise conv, K x K depthwise conv
/// (where the stride acts), pointwise conv. Blocks with a sub-unit expansion
/// may move the split boundary to just after the depthwise stage, so the
/// narrow mid representation is what gets transmitted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CandidateBlock {
    pub id: String,
    #[serde(default)]
    pub skip: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<Expansion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<u32>,
    #[serde(default)]
    pub split_after_depthwise: bool,
}

impl CandidateBlock {
    pub fn validate(&self) -> Result<()> {
        if self.skip {
            if self.kernel.is_some() || self.expansion.is_some() || self.groups.is_some() {
                return Err(Error::InvalidSpace(format!(
                    "skip block '{}' must not define kernel/expansion/groups",
                    self.id
                )));
            }
            if self.split_after_depthwise {
                return Err(Error::InvalidSpace(format!(
                    "skip block '{}' cannot split after a depthwise stage",
                    self.id
                )));
            }
            return Ok(());
        }
        let expansion = self.expansion.ok_or_else(|| {
            Error::InvalidSpace(format!("block '{}' is missing an expansion ratio", self.id))
        })?;
        if self.kernel.is_none() {
            return Err(Error::InvalidSpace(format!(
                "block '{}' is missing a kernel size",
                self.id
            )));
        }
        if self.groups() == 0 {
            return Err(Error::InvalidSpace(format!(
                "block '{}' must have groups >= 1",
                self.id
            )));
        }
        if self.split_after_depthwise && !expansion.is_sub_unit() {
            return Err(Error::InvalidSpace(format!(
                "block '{}': split_after_depthwise requires expansion < 1",
                self.id
            )));
        }
        Ok(())
    }

    pub fn groups(&self) -> u32 {
        self.groups.unwrap_or(1)
    }
}

/// A fixed (non-searchable) stage before or after the searchable layers,
/// carried for boundary dimensions and FLOPs accounting only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FixedStage {
    pub name: String,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    #[serde(default)]
    pub flops: u64,
}

/// One searchable layer: its fixed input/output geometry plus the ids of the
/// candidate blocks it may choose from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub candidates: Vec<String>,
}

impl LayerSpec {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InputDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// The full search-space definition as loaded from file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SearchSpaceSpec {
    pub name: String,
    #[serde(default)]
    pub notes: String,
    pub input: InputDims,
    pub blocks: Vec<CandidateBlock>,
    #[serde(default)]
    pub fixed_prefix: Vec<FixedStage>,
    #[serde(default)]
    pub fixed_suffix: Vec<FixedStage>,
    pub layers: Vec<LayerSpec>,
    /// Split position 0 is after the fixed prefix; position l is after
    /// searchable layer l (1-based).
    pub split_candidates: Vec<usize>,
}

impl SearchSpaceSpec {
    pub fn from_json(text: &str) -> Result<SearchSpaceSpec> {
        let space: SearchSpaceSpec = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpace("space has no searchable layers".into()));
        }
        let mut menu: BTreeMap<&str, &CandidateBlock> = BTreeMap::new();
        for block in &self.blocks {
            block.validate()?;
            if menu.insert(&block.id, block).is_some() {
                return Err(Error::InvalidSpace(format!(
                    "duplicate block id '{}'",
                    block.id
                )));
            }
        }

        // Geometry must chain: each layer consumes the previous output.
        let (mut channels, mut height, mut width) = self.prefix_out_dims();
        for (index, layer) in self.layers.iter().enumerate() {
            if layer.stride == 0 {
                return Err(Error::InvalidSpace(format!("layer {index}: stride 0")));
            }
            if (layer.in_channels, layer.height, layer.width) != (channels, height, width) {
                return Err(Error::InvalidSpace(format!(
                    "layer {index}: input {}x{}x{} does not chain from previous output {}x{}x{}",
                    layer.in_channels, layer.height, layer.width, channels, height, width
                )));
            }
            if layer.candidates.is_empty() {
                return Err(Error::InvalidSpace(format!("layer {index}: no candidates")));
            }
            let shape_preserved = layer.in_channels == layer.out_channels && layer.stride == 1;
            for id in &layer.candidates {
                let block = menu.get(id.as_str()).ok_or_else(|| {
                    Error::InvalidSpace(format!("layer {index}: unknown block id '{id}'"))
                })?;
                if block.skip && !shape_preserved {
                    return Err(Error::InvalidSpace(format!(
                        "layer {index}: skip candidate requires matching input/output shapes"
                    )));
                }
                if !block.skip {
                    let g = block.groups() as usize;
                    let mid = block.expansion.unwrap().apply(layer.in_channels);
                    if mid == 0 {
                        return Err(Error::InvalidSpace(format!(
                            "layer {index}, block '{id}': expansion collapses {} channels to 0",
                            layer.in_channels
                        )));
                    }
                    if layer.in_channels % g != 0 || mid % g != 0 || layer.out_channels % g != 0 {
                        return Err(Error::InvalidSpace(format!(
                            "layer {index}, block '{id}': groups {g} must divide channel counts \
                             {}/{}/{}",
                            layer.in_channels, mid, layer.out_channels
                        )));
                    }
                }
            }
            channels = layer.out_channels;
            height = layer.out_height();
            width = layer.out_width();
        }

        let expected: Vec<usize> = (0..=self.layers.len()).collect();
        if self.split_candidates != expected {
            return Err(Error::InvalidSpace(format!(
                "split_candidates must be exactly 0..={} (one per block boundary plus the \
                 post-prefix position), got {:?}",
                self.layers.len(),
                self.split_candidates
            )));
        }
        Ok(())
    }

    pub fn block(&self, id: &str) -> Result<&CandidateBlock> {
        self.blocks
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::InvalidSpace(format!("unknown block id '{id}'")))
    }

    fn layer_block(&self, layer_index: usize, choice: usize) -> Result<&CandidateBlock> {
        let layer = &self.layers[layer_index];
        let id = layer.candidates.get(choice).ok_or_else(|| {
            Error::InvalidSpace(format!(
                "layer {layer_index}: candidate index {choice} out of range ({} candidates)",
                layer.candidates.len()
            ))
        })?;
        self.block(id)
    }

    /// Output dimensions of the fixed prefix (the raw input if there is none).
    pub fn prefix_out_dims(&self) -> (usize, usize, usize) {
        match self.fixed_prefix.last() {
            Some(stage) => (stage.out_channels, stage.out_height, stage.out_width),
            None => (self.input.channels, self.input.height, self.input.width),
        }
    }

    /// Per-dimension category counts of the joint categorical variable:
    /// one dimension per searchable layer, then the split dimension last.
    pub fn categorical_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(|l| l.candidates.len()).collect();
        dims.push(self.split_candidates.len());
        dims
    }

    /// Category counts of the architecture dimensions only (no split).
    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.candidates.len()).collect()
    }

    pub fn num_dims(&self) -> usize {
        self.layers.len() + 1
    }

    /// Number of members of the joint space, as an exact big integer.
    pub fn cardinality(&self) -> BigUint {
        let mut n = BigUint::from(self.split_candidates.len());
        for layer in &self.layers {
            n *= BigUint::from(layer.candidates.len());
        }
        n
    }

    pub fn validate_sample(&self, sample: &ArchSample) -> Result<()> {
        let dims = self.categorical_dims();
        if sample.categories.len() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                got: sample.categories.len(),
            });
        }
        for (d, (&c, &k)) in sample.categories.iter().zip(dims.iter()).enumerate() {
            if c >= k {
                return Err(Error::InvalidSpace(format!(
                    "dimension {d}: category {c} out of range (K={k})"
                )));
            }
        }
        Ok(())
    }
}

/// One joint sample: a category index per searchable layer, then the split
/// position index as the last dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSample {
    pub categories: Vec<usize>,
}

impl ArchSample {
    pub fn new(layer_choices: Vec<usize>, split_index: usize) -> ArchSample {
        let mut categories = layer_choices;
        categories.push(split_index);
        ArchSample { categories }
    }

    pub fn layer_choices(&self) -> &[usize] {
        &self.categories[..self.categories.len() - 1]
    }

    pub fn split_index(&self) -> usize {
        *self.categories.last().expect("sample has no dimensions")
    }

    /// One-hot encoding per dimension, for tests and gradient checks.
    pub fn onehots(&self, dims: &[usize]) -> Vec<Vec<f64>> {
        self.categories
            .iter()
            .zip(dims)
            .map(|(&c, &k)| {
                let mut v = vec![0.0; k];
                v[c] = 1.0;
                v
            })
            .collect()
    }
}

/// Canonical mixed-radix id of a sample: layer dimensions first (layer 0 most
/// significant), split last. Fixes one ordering for reports and diffs.
pub fn sample_id(sample: &ArchSample, space: &SearchSpaceSpec) -> u128 {
    let dims = space.categorical_dims();
    let mut id: u128 = 0;
    for (&c, &k) in sample.categories.iter().zip(dims.iter()) {
        id = id * k as u128 + c as u128;
    }
    id
}

pub fn sample_from_id(mut id: u128, space: &SearchSpaceSpec) -> ArchSample {
    let dims = space.categorical_dims();
    let mut categories = vec![0usize; dims.len()];
    for (slot, &k) in categories.iter_mut().zip(dims.iter()).rev() {
        *slot = (id % k as u128) as usize;
        id /= k as u128;
    }
    ArchSample { categories }
}

/// A block assigned to its layer in a decoded network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedBlock {
    pub layer_index: usize,
    pub block_id: String,
}

/// Which portion of a mid-split block a network part owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPortion {
    /// First pointwise conv plus the depthwise conv (head side).
    UpToDepthwise,
    /// The final pointwise conv (tail side).
    AfterDepthwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialBlock {
    pub layer_index: usize,
    pub block_id: String,
    pub portion: BlockPortion,
}

/// One side of a decoded split: the fixed stages it includes, its whole
/// blocks, and at most one partial block when the split falls mid-block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPart {
    pub includes_prefix: bool,
    pub includes_suffix: bool,
    pub blocks: Vec<PlacedBlock>,
    pub partial: Option<PartialBlock>,
}

impl NetworkPart {
    fn empty() -> NetworkPart {
        NetworkPart {
            includes_prefix: false,
            includes_suffix: false,
            blocks: Vec::new(),
            partial: None,
        }
    }
}

/// Where the split boundary sits and the tensor shape crossing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub position: usize,
    /// True when the boundary is inside a block, after its depthwise stage.
    pub mid_block: bool,
    pub boundary_channels: usize,
    pub boundary_height: usize,
    pub boundary_width: usize,
}

impl SplitMeta {
    /// Element count of the transmitted intermediate representation.
    pub fn element_count(&self) -> usize {
        self.boundary_channels * self.boundary_height * self.boundary_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub head: NetworkPart,
    pub tail: NetworkPart,
    pub split: SplitMeta,
}

/// Decode a joint sample into head and tail block lists plus split metadata.
///
/// The split dimension is a single categorical: position 0 is after the fixed
/// prefix, position l after searchable layer l. When the chosen block of the
/// split layer moves its boundary after the depthwise stage, the split falls
/// mid-block and the boundary shape is the narrow mid representation;
/// otherwise it falls after the whole block.
pub fn decode(sample: &ArchSample, space: &SearchSpaceSpec) -> Result<Decoded> {
    space.validate_sample(sample)?;
    let position = space.split_candidates[sample.split_index()];

    let placed = |layer_index: usize| -> Result<PlacedBlock> {
        let choice = sample.layer_choices()[layer_index];
        let block = space.layer_block(layer_index, choice)?;
        Ok(PlacedBlock {
            layer_index,
            block_id: block.id.clone(),
        })
    };

    let mut head = NetworkPart::empty();
    let mut tail = NetworkPart::empty();
    head.includes_prefix = true;
    tail.includes_suffix = true;

    let split = if position == 0 {
        let (c, h, w) = space.prefix_out_dims();
        for i in 0..space.layers.len() {
            tail.blocks.push(placed(i)?);
        }
        SplitMeta {
            position,
            mid_block: false,
            boundary_channels: c,
            boundary_height: h,
            boundary_width: w,
        }
    } else {
        let split_layer = position - 1;
        let layer = &space.layers[split_layer];
        let block = space.layer_block(split_layer, sample.layer_choices()[split_layer])?;
        for i in 0..split_layer {
            head.blocks.push(placed(i)?);
        }
        for i in (split_layer + 1)..space.layers.len() {
            tail.blocks.push(placed(i)?);
        }
        if block.split_after_depthwise {
            head.partial = Some(PartialBlock {
                layer_index: split_layer,
                block_id: block.id.clone(),
                portion: BlockPortion::UpToDepthwise,
            });
            tail.partial = Some(PartialBlock {
                layer_index: split_layer,
                block_id: block.id.clone(),
                portion: BlockPortion::AfterDepthwise,
            });
            SplitMeta {
                position,
                mid_block: true,
                boundary_channels: block.expansion.unwrap().apply(layer.in_channels),
                boundary_height: layer.out_height(),
                boundary_width: layer.out_width(),
            }
        } else {
            head.blocks.push(placed(split_layer)?);
            SplitMeta {
                position,
                mid_block: false,
                boundary_channels: layer.out_channels,
                boundary_height: layer.out_height(),
                boundary_width: layer.out_width(),
            }
        }
    };

    Ok(Decoded { head, tail, split })
}

/// Rebuild the sample from a decoded network. `encode(decode(s)) == s`.
pub fn encode(decoded: &Decoded, space: &SearchSpaceSpec) -> Result<ArchSample> {
    let mut ids: Vec<Option<&str>> = vec![None; space.layers.len()];
    for pb in decoded.head.blocks.iter().chain(&decoded.tail.blocks) {
        if pb.layer_index >= ids.len() {
            return Err(Error::InvalidSpace(format!(
                "decoded block at layer {} outside the space",
                pb.layer_index
            )));
        }
        ids[pb.layer_index] = Some(&pb.block_id);
    }
    if let Some(partial) = &decoded.head.partial {
        if partial.layer_index >= ids.len() {
            return Err(Error::InvalidSpace(format!(
                "decoded block at layer {} outside the space",
                partial.layer_index
            )));
        }
        ids[partial.layer_index] = Some(&partial.block_id);
    }

    let mut choices = Vec::with_capacity(space.layers.len());
    for (index, id) in ids.iter().enumerate() {
        let id = id.ok_or_else(|| {
            Error::InvalidSpace(format!("decoded network is missing layer {index}"))
        })?;
        let choice = space.layers[index]
            .candidates
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| {
                Error::InvalidSpace(format!("layer {index}: block '{id}' is not a candidate"))
            })?;
        choices.push(choice);
    }
    let split_index = space
        .split_candidates
        .iter()
        .position(|&p| p == decoded.split.position)
        .ok_or_else(|| {
            Error::InvalidSpace(format!(
                "split position {} is not a candidate",
                decoded.split.position
            ))
        })?;
    Ok(ArchSample::new(choices, split_index))
}

/// Element count of the head-network output for this sample.
pub fn intermediate_size(sample: &ArchSample, space: &SearchSpaceSpec) -> Result<usize> {
    Ok(decode(sample, space)?.split.element_count())
}

/// FLOPs of one candidate block at one layer, counting a multiply-accumulate
/// as 2 FLOPs. Skip blocks cost nothing.
pub fn block_flops(block: &CandidateBlock, layer: &LayerSpec) -> u64 {
    portion_flops(block, layer, None)
}

/// FLOPs of a block or, for mid-split blocks, of one of its two portions.
fn portion_flops(block: &CandidateBlock, layer: &LayerSpec, portion: Option<BlockPortion>) -> u64 {
    if block.skip {
        return 0;
    }
    let g = block.groups() as u64;
    let c_in = layer.in_channels as u64;
    let c_out = layer.out_channels as u64;
    let c_mid = block.expansion.unwrap().apply(layer.in_channels) as u64;
    let k = u64::from(block.kernel.unwrap());
    let hw = (layer.height * layer.width) as u64;
    let out_hw = (layer.out_height() * layer.out_width()) as u64;

    let pointwise_in = 2 * hw * c_in * c_mid / g;
    let depthwise = 2 * out_hw * c_mid * k * k;
    let pointwise_out = 2 * out_hw * c_mid * c_out / g;
    match portion {
        None => pointwise_in + depthwise + pointwise_out,
        Some(BlockPortion::UpToDepthwise) => pointwise_in + depthwise,
        Some(BlockPortion::AfterDepthwise) => pointwise_out,
    }
}

/// Total FLOPs of one side of a split, including its fixed stages.
pub fn part_flops(part: &NetworkPart, space: &SearchSpaceSpec) -> Result<u64> {
    let mut total: u64 = 0;
    if part.includes_prefix {
        total += space.fixed_prefix.iter().map(|s| s.flops).sum::<u64>();
    }
    if part.includes_suffix {
        total += space.fixed_suffix.iter().map(|s| s.flops).sum::<u64>();
    }
    for pb in &part.blocks {
        let block = space.block(&pb.block_id)?;
        total += block_flops(block, &space.layers[pb.layer_index]);
    }
    if let Some(partial) = &part.partial {
        let block = space.block(&partial.block_id)?;
        total += portion_flops(block, &space.layers[partial.layer_index], Some(partial.portion));
    }
    Ok(total)
}

/// FLOPs of the whole model (prefix + every chosen block + suffix), used by
/// protocols that place the entire model on one device.
pub fn total_flops(layer_choices: &[usize], space: &SearchSpaceSpec) -> Result<u64> {
    if layer_choices.len() != space.layers.len() {
        return Err(Error::DimensionMismatch {
            expected: space.layers.len(),
            got: layer_choices.len(),
        });
    }
    let mut total: u64 = space.fixed_prefix.iter().map(|s| s.flops).sum::<u64>()
        + space.fixed_suffix.iter().map(|s| s.flops).sum::<u64>();
    for (index, &choice) in layer_choices.iter().enumerate() {
        let block = space.layer_block(index, choice)?;
        total += block_flops(block, &space.layers[index]);
    }
    Ok(total)
}


#[cfg(test)]
mod tests {
    use super::tests_support::{block, skip_block, small_space};
    use super::*;

    #[test]
    fn expansion_rounding_is_half_up() {
        let e = Expansion::new(1, 8).unwrap();
        assert_eq!(e.apply(64), 8);
        assert_eq!(e.apply(4), 1); // 0.5 rounds up
        assert_eq!(e.apply(3), 0); // 0.375 rounds down; validation rejects this
        let e = Expansion::new(6, 1).unwrap();
        assert_eq!(e.apply(16), 96);
    }

    #[test]
    fn expansion_parse_and_display_round_trip() {
        for s in ["1", "6", "1/2", "1/8", "3"] {
            let e: Expansion = s.parse().unwrap();
            assert_eq!(e.to_string(), s);
        }
        assert!("0".parse::<Expansion>().is_err());
        assert!("1/0".parse::<Expansion>().is_err());
        assert!("x".parse::<Expansion>().is_err());
    }

    #[test]
    fn cardinality_small_cases() {
        let space = small_space();
        // 3 layers x 3 candidates, 4 splits.
        assert_eq!(space.cardinality(), BigUint::from(3u32 * 3 * 3 * 4));
    }

    #[test]
    fn cardinality_single_layer_two_splits() {
        let mut space = small_space();
        space.layers.truncate(1);
        space.layers[0].candidates = vec!["e2".into()];
        space.split_candidates = vec![0, 1];
        space.validate().unwrap();
        assert_eq!(space.cardinality(), BigUint::from(2u32));
    }

    #[test]
    fn cardinality_four_layers_three_blocks_five_splits() {
        let mut space = small_space();
        let layer = space.layers[0].clone();
        space.layers = vec![layer; 4];
        space.split_candidates = (0..=4).collect();
        space.validate().unwrap();
        assert_eq!(space.cardinality(), BigUint::from(405u32)); // 3^4 * 5
    }

    #[test]
    fn cardinality_matches_independent_enumeration() {
        // Count members by walking the candidate lists directly, without
        // going through dims or ids.
        let space = small_space();
        fn walk(space: &SearchSpaceSpec, layer: usize) -> u64 {
            if layer == space.layers.len() {
                return space.split_candidates.len() as u64;
            }
            space.layers[layer]
                .candidates
                .iter()
                .map(|_| walk(space, layer + 1))
                .sum()
        }
        let counted = walk(&space, 0);
        assert_eq!(space.cardinality(), BigUint::from(counted));
    }

    #[test]
    fn cardinality_full_scale_layerwise_space() {
        // 22 layers x 9 candidates and 23 split points: 9^22 * 23 members,
        // on the order of 1e21 architectures before the split factor.
        let nine: Vec<String> = (0..8)
            .map(|i| format!("b{i}"))
            .chain(std::iter::once("skip".to_string()))
            .collect();
        let blocks: Vec<CandidateBlock> = (0..8)
            .map(|i| block(&format!("b{i}"), 3, "1", 1))
            .chain(std::iter::once(skip_block()))
            .collect();
        let space = SearchSpaceSpec {
            name: "wide".into(),
            notes: String::new(),
            input: InputDims {
                channels: 16,
                height: 8,
                width: 8,
            },
            blocks,
            fixed_prefix: vec![],
            fixed_suffix: vec![],
            layers: (0..22)
                .map(|_| LayerSpec {
                    in_channels: 16,
                    out_channels: 16,
                    height: 8,
                    width: 8,
                    stride: 1,
                    candidates: nine.clone(),
                })
                .collect(),
            split_candidates: (0..=22).collect(),
        };
        space.validate().unwrap();
        let expected = BigUint::from(9u32).pow(22) * BigUint::from(23u32);
        assert_eq!(space.cardinality(), expected);
        let approx: f64 = expected.to_string().parse().unwrap();
        assert!(approx > 2.2e22 && approx < 2.3e22);
    }

    #[test]
    fn decode_boundary_splits() {
        let space = small_space();
        let sample = ArchSample::new(vec![0, 0, 0], 0);
        let d = decode(&sample, &space).unwrap();
        assert!(d.head.includes_prefix && d.head.blocks.is_empty());
        assert_eq!(d.tail.blocks.len(), 3);
        assert!(d.tail.includes_suffix);
        assert_eq!(d.split.element_count(), 8);

        let sample = ArchSample::new(vec![0, 0, 0], 3);
        let d = decode(&sample, &space).unwrap();
        assert_eq!(d.head.blocks.len(), 3);
        assert!(d.tail.blocks.is_empty() && d.tail.partial.is_none());
        assert!(d.tail.includes_suffix);
    }

    #[test]
    fn decode_mid_block_split() {
        let space = small_space();
        // Layer 1 chooses the bottleneck; split after layer 1.
        let sample = ArchSample::new(vec![0, 1, 0], 2);
        let d = decode(&sample, &space).unwrap();
        assert!(d.split.mid_block);
        assert_eq!(d.split.boundary_channels, 4); // round(8 / 2)
        assert_eq!(d.head.blocks.len(), 1);
        assert_eq!(
            d.head.partial.as_ref().unwrap().portion,
            BlockPortion::UpToDepthwise
        );
        assert_eq!(
            d.tail.partial.as_ref().unwrap().portion,
            BlockPortion::AfterDepthwise
        );
        assert_eq!(d.tail.blocks.len(), 1);

        // Same split position but a non-bottleneck choice: whole-block split.
        let sample = ArchSample::new(vec![0, 0, 0], 2);
        let d = decode(&sample, &space).unwrap();
        assert!(!d.split.mid_block);
        assert_eq!(d.split.boundary_channels, 8);
        assert_eq!(d.head.blocks.len(), 2);
    }

    #[test]
    fn decode_twenty_two_layer_split_positions() {
        // Hand-enumerated positions on a deeper space: split after block 5
        // leaves 5 blocks in the head and 17 in the tail.
        let mut space = small_space();
        let layer = space.layers[0].clone();
        space.layers = vec![layer; 22];
        space.split_candidates = (0..=22).collect();
        space.validate().unwrap();
        let sample = ArchSample::new(vec![0; 22], 5);
        let d = decode(&sample, &space).unwrap();
        assert_eq!(d.head.blocks.len(), 5);
        assert_eq!(d.tail.blocks.len(), 17);
        assert_eq!(d.head.blocks.last().unwrap().layer_index, 4);
        assert_eq!(d.tail.blocks.first().unwrap().layer_index, 5);
    }

    #[test]
    fn decode_rejects_dimension_mismatch() {
        let space = small_space();
        let sample = ArchSample::new(vec![0, 0], 0);
        assert!(matches!(
            decode(&sample, &space),
            Err(Error::DimensionMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn encode_round_trips_every_sample() {
        let space = small_space();
        let dims = space.categorical_dims();
        let total: usize = dims.iter().product();
        for id in 0..total {
            let sample = sample_from_id(id as u128, &space);
            let decoded = decode(&sample, &space).unwrap();
            assert_eq!(encode(&decoded, &space).unwrap(), sample);
        }
    }

    #[test]
    fn sample_id_round_trips_and_orders() {
        let space = small_space();
        let sample = ArchSample::new(vec![2, 1, 0], 3);
        let id = sample_id(&sample, &space);
        // Mixed radix: ((2*3 + 1)*3 + 0)*4 + 3
        assert_eq!(id, ((2 * 3 + 1) * 3) * 4 + 3);
        assert_eq!(sample_from_id(id, &space), sample);
    }

    #[test]
    fn intermediate_size_cases() {
        let space = small_space();
        // Split 0: prefix output 8x1x1.
        assert_eq!(
            intermediate_size(&ArchSample::new(vec![0, 0, 0], 0), &space).unwrap(),
            8
        );
        // Mid-block split of the 1/2 bottleneck: 4 elements.
        assert_eq!(
            intermediate_size(&ArchSample::new(vec![1, 0, 0], 1), &space).unwrap(),
            4
        );
        // Skip at the split layer keeps the layer input size.
        assert_eq!(
            intermediate_size(&ArchSample::new(vec![2, 0, 0], 1), &space).unwrap(),
            8
        );
    }

    #[test]
    fn intermediate_size_ignores_choices_after_the_split() {
        let space = small_space();
        for first in 0..3 {
            let base =
                intermediate_size(&ArchSample::new(vec![first, 0, 0], 1), &space).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    let n =
                        intermediate_size(&ArchSample::new(vec![first, a, b], 1), &space).unwrap();
                    assert_eq!(n, base);
                }
            }
        }
    }

    #[test]
    fn extended_block_intermediate_size_example() {
        // e = 1/8 bottleneck on a 64-channel layer at 8x8 output: the
        // transmitted representation is 8 * 8 * 8 = 512 elements.
        let mut narrow = block("e8th", 3, "1/8", 1);
        narrow.split_after_depthwise = true;
        let space = SearchSpaceSpec {
            name: "ext".into(),
            notes: String::new(),
            input: InputDims {
                channels: 64,
                height: 8,
                width: 8,
            },
            blocks: vec![narrow],
            fixed_prefix: vec![],
            fixed_suffix: vec![],
            layers: vec![LayerSpec {
                in_channels: 64,
                out_channels: 64,
                height: 8,
                width: 8,
                stride: 1,
                candidates: vec!["e8th".into()],
            }],
            split_candidates: vec![0, 1],
        };
        space.validate().unwrap();
        let n = intermediate_size(&ArchSample::new(vec![0], 1), &space).unwrap();
        assert_eq!(n, 8 * 8 * 8);
    }

    #[test]
    fn flops_hand_computed_case() {
        let layer = LayerSpec {
            in_channels: 16,
            out_channels: 16,
            height: 8,
            width: 8,
            stride: 1,
            candidates: vec![],
        };
        let b = block("k3_e1", 3, "1", 1);
        // 2*64*16*16 + 2*64*16*9 + 2*64*16*16
        assert_eq!(block_flops(&b, &layer), 83_968);
        assert_eq!(block_flops(&skip_block(), &layer), 0);
    }

    #[test]
    fn flops_groups_halve_pointwise_terms() {
        let layer = LayerSpec {
            in_channels: 16,
            out_channels: 16,
            height: 8,
            width: 8,
            stride: 1,
            candidates: vec![],
        };
        let g1 = block("g1", 3, "1", 1);
        let g2 = block("g2", 3, "1", 2);
        let depthwise = 2 * 64 * 16 * 9;
        let pointwise_g1 = block_flops(&g1, &layer) - depthwise;
        let pointwise_g2 = block_flops(&g2, &layer) - depthwise;
        assert_eq!(pointwise_g1, 2 * pointwise_g2);
    }

    #[test]
    fn flops_monotone_in_expansion_and_kernel() {
        let layer = LayerSpec {
            in_channels: 16,
            out_channels: 32,
            height: 8,
            width: 8,
            stride: 2,
            candidates: vec![],
        };
        let expansions = ["1/8", "1/4", "1/2", "1", "3", "6"];
        let mut last = 0;
        for e in expansions {
            let f = block_flops(&block("b", 3, e, 1), &layer);
            assert!(f >= last, "expansion {e}: {f} < {last}");
            last = f;
        }
        for e in expansions {
            let f3 = block_flops(&block("b", 3, e, 1), &layer);
            let f5 = block_flops(&block("b", 5, e, 1), &layer);
            assert!(f5 >= f3);
        }
    }

    #[test]
    fn part_flops_split_portions_sum_to_whole() {
        let space = small_space();
        for id in 0..(3 * 3 * 3 * 4) {
            let sample = sample_from_id(id as u128, &space);
            let d = decode(&sample, &space).unwrap();
            let head = part_flops(&d.head, &space).unwrap();
            let tail = part_flops(&d.tail, &space).unwrap();
            let whole = total_flops(sample.layer_choices(), &space).unwrap();
            assert_eq!(head + tail, whole, "sample {id}");
        }
    }

    #[test]
    fn validate_rejects_skip_on_shape_change() {
        let mut space = small_space();
        space.layers[1].out_channels = 16;
        space.layers[2].in_channels = 16;
        assert!(space.validate().is_err());
    }

    #[test]
    fn validate_rejects_bad_split_list() {
        let mut space = small_space();
        space.split_candidates = vec![0, 1, 2];
        assert!(space.validate().is_err());
        space.split_candidates = vec![0, 1, 2, 4];
        assert!(space.validate().is_err());
    }

    #[test]
    fn validate_rejects_mid_split_on_expanding_block() {
        let mut space = small_space();
        space.blocks[0].split_after_depthwise = true; // e2 block
        assert!(space.validate().is_err());
    }
}
