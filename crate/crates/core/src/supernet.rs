//! Desk-scale one-shot supernet with trainable shared weights.
//!
//! Candidate operations are width-varying affine stages with a ReLU between
//! them, mirroring the pointwise / depthwise / pointwise block structure at
//! a fraction of the cost: a block expands its input to `round(e * in)`
//! units, applies the nonlinearity, and projects to the output width with no
//! trailing activation. The skip candidate is the identity. Each (layer,
//! candidate) pair owns a disjoint weight set.
//!
//! At the split boundary the intermediate representation has each element
//! zeroed independently with the drop probability, WITHOUT inverse-probability
//! rescaling: this emulates packet loss on the link rather than regularizing
//! dropout (a config switch restores conventional rescaling for ablation).
//! Forward and backward are written out by hand; gradients are exact for the
//! sampled sub-network and zero elsewhere.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{EvalCtx, Evaluator};
use crate::rng;
use crate::space::{self, ArchSample, SearchSpaceSpec};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn he_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        let scale = (2.0 / cols as f64).sqrt();
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| scale * rng::normal(rng)).collect(),
        }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *slot = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
    }

    /// Transposed apply: `out = M^T x`.
    pub fn matvec_t(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &xv) in x.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (slot, &w) in out.iter_mut().zip(row) {
                *slot += w * xv;
            }
        }
    }

    /// Rank-one accumulate: `M += scale * dy x^T`.
    pub fn add_outer(&mut self, dy: &[f64], x: &[f64], scale: f64) {
        for (r, &d) in dy.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (slot, &v) in row.iter_mut().zip(x) {
                *slot += scale * d * v;
            }
        }
    }
}

/// Affine map `y = W x + b`; doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Affine {
    fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Affine {
        Affine {
            w: Matrix::he_init(out_dim, in_dim, rng),
            b: vec![0.0; out_dim],
        }
    }

    fn zeros_like(&self) -> Affine {
        Affine {
            w: Matrix::zeros(self.w.rows, self.w.cols),
            b: vec![0.0; self.b.len()],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.w.rows];
        self.w.matvec(x, &mut out);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += b;
        }
        out
    }

    fn sgd_step(&mut self, grad: &Affine, velocity: &mut Affine, lr: f64, momentum: f64) {
        for ((w, g), v) in self
            .w
            .data
            .iter_mut()
            .zip(&grad.w.data)
            .zip(&mut velocity.w.data)
        {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
        for ((b, g), v) in self.b.iter_mut().zip(&grad.b).zip(&mut velocity.b) {
            *v = momentum * *v + g;
            *b -= lr * *v;
        }
    }
}

/// One candidate operation of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CandidateOp {
    Identity,
    Block {
        expand: Affine,
        project: Affine,
        /// The split boundary of this block sits after the expand stage.
        split_after_expand: bool,
    },
}

/// Where the packet-loss mask applies for a given sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLocation {
    AfterPrefix,
    AfterLayer(usize),
    MidLayer(usize),
}

/// Decoded execution plan of one sample: per-layer choices plus the mask
/// position and the width of the transmitted representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub choices: Vec<usize>,
    pub mask_at: MaskLocation,
    pub boundary_dim: usize,
}

/// Identifies one active tensor of a plan, in the canonical order used for
/// gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorId {
    Prefix,
    Expand { layer: usize, choice: usize },
    Project { layer: usize, choice: usize },
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySupernet {
    pub space: SearchSpaceSpec,
    pub input_dim: usize,
    pub classes: usize,
    pub prefix: Option<Affine>,
    /// `layers[l][c]` is candidate c of layer l; weight sets are disjoint.
    pub layers: Vec<Vec<CandidateOp>>,
    pub classifier: Affine,
}

/// Gradients for exactly the tensors a sample touched; untouched candidates
/// stay `None` (exactly zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub prefix: Option<Affine>,
    pub layers: Vec<Vec<Option<Affine>>>,
    pub projects: Vec<Vec<Option<Affine>>>,
    pub classifier: Affine,
}

impl ParamGrads {
    fn zeros_for(net: &ToySupernet) -> ParamGrads {
        ParamGrads {
            prefix: net.prefix.as_ref().map(Affine::zeros_like),
            layers: net
                .layers
                .iter()
                .map(|cands| vec![None; cands.len()])
                .collect(),
            projects: net
                .layers
                .iter()
                .map(|cands| vec![None; cands.len()])
                .collect(),
            classifier: net.classifier.zeros_like(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let scale_affine = |a: &mut Affine| {
            a.w.data.iter_mut().for_each(|v| *v *= factor);
            a.b.iter_mut().for_each(|v| *v *= factor);
        };
        if let Some(p) = &mut self.prefix {
            scale_affine(p);
        }
        for a in self.layers.iter_mut().chain(&mut self.projects).flatten().flatten() {
            scale_affine(a);
        }
        scale_affine(&mut self.classifier);
    }

    /// Global L2 norm over every stored gradient entry.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        let add = |acc: &mut f64, a: &Affine| {
            *acc += a.w.data.iter().map(|v| v * v).sum::<f64>();
            *acc += a.b.iter().map(|v| v * v).sum::<f64>();
        };
        if let Some(p) = &self.prefix {
            add(&mut acc, p);
        }
        for a in self.layers.iter().chain(&self.projects).flatten().flatten() {
            add(&mut acc, a);
        }
        add(&mut acc, &self.classifier);
        acc.sqrt()
    }

    /// Rescale so the global norm does not exceed `max_norm` (no-op for
    /// non-positive thresholds).
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        if max_norm > 0.0 {
            let norm = self.global_norm();
            if norm > max_norm {
                self.scale(max_norm / norm);
            }
        }
    }

    /// Accumulate another gradient buffer (same network shape).
    pub fn accumulate(&mut self, other: &ParamGrads) {
        let add = |a: &mut Affine, b: &Affine| {
            for (x, y) in a.w.data.iter_mut().zip(&b.w.data) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        };
        if let (Some(a), Some(b)) = (&mut self.prefix, &other.prefix) {
            add(a, b);
        }
        for (mine, theirs) in self
            .layers
            .iter_mut()
            .flatten()
            .chain(self.projects.iter_mut().flatten())
            .zip(
                other
                    .layers
                    .iter()
                    .flatten()
                    .chain(other.projects.iter().flatten()),
            )
        {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => add(a, b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
        add(&mut self.classifier, &other.classifier);
    }
}

/// Per-example activation cache for the backward pass.
struct ExampleTrace {
    x_index: usize,
    prefix_pre: Option<Vec<f64>>,
    h0: Vec<f64>,
    prefix_mask: Option<Vec<bool>>,
    steps: Vec<StepTrace>,
    prob: Vec<f64>,
    label: usize,
}

struct StepTrace {
    input: Vec<f64>,
    mid_pre: Option<Vec<f64>>,
    mid_masked: Option<Vec<f64>>,
    mid_mask: Option<Vec<bool>>,
    out_mask: Option<Vec<bool>>,
    out: Vec<f64>,
}

/// Forward cache over a batch: everything backward needs.
pub struct ForwardCache {
    traces: Vec<ExampleTrace>,
    rescale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOutcome {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl ForwardOutcome {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

// Leaky rectifier: a small negative-side slope keeps gradient flowing
// through units the split mask and weight sharing would otherwise kill off.
const LEAK: f64 = 0.05;

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x *= LEAK;
        }
    }
}

fn apply_mask(v: &mut [f64], mask: &[bool], rescale: Option<f64>) {
    for (x, &keep) in v.iter_mut().zip(mask) {
        if keep {
            if let Some(r) = rescale {
                *x *= r;
            }
        } else {
            *x = 0.0;
        }
    }
}

fn mask_grad(dh: &mut [f64], mask: &[bool], rescale: Option<f64>) {
    for (d, &keep) in dh.iter_mut().zip(mask) {
        if keep {
            if let Some(r) = rescale {
                *d *= r;
            }
        } else {
            *d = 0.0;
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl ToySupernet {
    /// Build shared weights for every candidate of every layer. Requires a
    /// vector-shaped space (all spatial dims 1) whose input channel count is
    /// the task input width.
    pub fn new(
        space: &SearchSpaceSpec,
        input_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<ToySupernet> {
        if space.input.height != 1 || space.input.width != 1 {
            return Err(Error::InvalidSpace(
                "the toy supernet requires a vector-shaped space (height = width = 1)".into(),
            ));
        }
        if space.input.channels != input_dim {
            return Err(Error::config(
                "dataset.input_dim",
                format!(
                    "dataset width {input_dim} does not match space input channels {}",
                    space.input.channels
                ),
            ));
        }
        if space.fixed_prefix.len() > 1 {
            return Err(Error::InvalidSpace(
                "the toy supernet supports at most one fixed prefix stage".into(),
            ));
        }
        for (index, layer) in space.layers.iter().enumerate() {
            if layer.height != 1 || layer.width != 1 || layer.stride != 1 {
                return Err(Error::InvalidSpace(format!(
                    "layer {index}: the toy supernet requires 1x1 spatial dims and stride 1"
                )));
            }
        }

        let mut init_rng = rng::stream(seed, "supernet-init", 0);
        let prefix = space
            .fixed_prefix
            .first()
            .map(|stage| Affine::init(stage.out_channels, input_dim, &mut init_rng));

        let mut layers = Vec::with_capacity(space.layers.len());
        for layer in &space.layers {
            let mut ops = Vec::with_capacity(layer.candidates.len());
            for id in &layer.candidates {
                let block = space.block(id)?;
                if block.skip {
                    ops.push(CandidateOp::Identity);
                } else {
                    let mid = block.expansion.unwrap().apply(layer.in_channels);
                    ops.push(CandidateOp::Block {
                        expand: Affine::init(mid, layer.in_channels, &mut init_rng),
                        project: Affine::init(layer.out_channels, mid, &mut init_rng),
                        split_after_expand: block.split_after_depthwise,
                    });
                }
            }
            layers.push(ops);
        }

        let last_out = space.layers.last().unwrap().out_channels;
        let classifier = Affine::init(classes, last_out, &mut init_rng);
        Ok(ToySupernet {
            space: space.clone(),
            input_dim,
            classes,
            prefix,
            layers,
            classifier,
        })
    }

    /// Decode a sample into the execution plan used by forward/backward.
    pub fn plan(&self, sample: &ArchSample) -> Result<SamplePlan> {
        let decoded = space::decode(sample, &self.space)?;
        let boundary_dim = decoded.split.element_count();
        let mask_at = if decoded.split.position == 0 {
            MaskLocation::AfterPrefix
        } else if decoded.split.mid_block {
            MaskLocation::MidLayer(decoded.split.position - 1)
        } else {
            MaskLocation::AfterLayer(decoded.split.position - 1)
        };
        Ok(SamplePlan {
            choices: sample.layer_choices().to_vec(),
            mask_at,
            boundary_dim,
        })
    }

    fn rescale_factor(rate: f64, inverted: bool) -> Option<f64> {
        if inverted && rate > 0.0 {
            Some(1.0 / (1.0 - rate))
        } else {
            None
        }
    }

    /// Draw one element-drop mask of the plan's boundary width.
    pub fn draw_mask(plan: &SamplePlan, rate: f64, rng: &mut ChaCha12Rng) -> Option<Vec<bool>> {
        if rate == 0.0 {
            return None;
        }
        Some(
            (0..plan.boundary_dim)
                .map(|_| rng.random::<f64>() >= rate)
                .collect(),
        )
    }

    /// Forward over a batch with per-example masks (None means no masking
    /// for that example). Returns the batch-mean loss and the cache.
    pub fn forward_batch(
        &self,
        plan: &SamplePlan,
        dataset: &Dataset,
        examples: &[usize],
        masks: &[Option<Vec<bool>>],
        rate: f64,
        inverted_rescale: bool,
    ) -> Result<(ForwardOutcome, ForwardCache)> {
        if examples.len() != masks.len() {
            return Err(Error::Eval(format!(
                "{} examples with {} masks",
                examples.len(),
                masks.len()
            )));
        }
        let rescale = Self::rescale_factor(rate, inverted_rescale);
        let mut traces = Vec::with_capacity(examples.len());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (&index, mask) in examples.iter().zip(masks) {
            let (x, label) = dataset.example(index);
            let trace = self.forward_example(plan, x, label, index, mask.as_deref(), rescale)?;
            let p = trace.prob[label];
            loss_sum += -(p.max(f64::MIN_POSITIVE)).ln();
            if argmax(&trace.prob) == label {
                correct += 1;
            }
            traces.push(trace);
        }
        let outcome = ForwardOutcome {
            loss: loss_sum / examples.len().max(1) as f64,
            correct,
            count: examples.len(),
        };
        if !outcome.loss.is_finite() {
            return Err(Error::Diverged(format!("loss {}", outcome.loss)));
        }
        Ok((outcome, ForwardCache { traces, rescale }))
    }

    fn forward_example(
        &self,
        plan: &SamplePlan,
        x: &[f64],
        label: usize,
        x_index: usize,
        mask: Option<&[bool]>,
        rescale: Option<f64>,
    ) -> Result<ExampleTrace> {
        if let Some(m) = mask {
            if m.len() != plan.boundary_dim {
                return Err(Error::Eval(format!(
                    "mask width {} does not match boundary width {}",
                    m.len(),
                    plan.boundary_dim
                )));
            }
        }
        if x.len() != self.input_dim {
            return Err(Error::Eval(format!(
                "input width {} does not match network input {}",
                x.len(),
                self.input_dim
            )));
        }

        let mask_here = |loc: MaskLocation| -> Option<&[bool]> {
            if plan.mask_at == loc {
                mask
            } else {
                None
            }
        };

        let (prefix_pre, mut h) = match &self.prefix {
            Some(affine) => {
                let pre = affine.apply(x);
                let mut post = pre.clone();
                relu(&mut post);
                (Some(pre), post)
            }
            None => (None, x.to_vec()),
        };
        let prefix_mask = mask_here(MaskLocation::AfterPrefix).map(|m| {
            apply_mask(&mut h, m, rescale);
            m.to_vec()
        });
        let h0 = h.clone();

        let mut steps = Vec::with_capacity(self.layers.len());
        for (layer_index, &choice) in plan.choices.iter().enumerate() {
            let input = h;
            let mut step = match &self.layers[layer_index][choice] {
                CandidateOp::Identity => StepTrace {
                    out: input.clone(),
                    input,
                    mid_pre: None,
                    mid_masked: None,
                    mid_mask: None,
                    out_mask: None,
                },
                CandidateOp::Block {
                    expand, project, ..
                } => {
                    let mid_pre = expand.apply(&input);
                    let mut mid = mid_pre.clone();
                    relu(&mut mid);
                    let mid_mask = mask_here(MaskLocation::MidLayer(layer_index)).map(|m| {
                        apply_mask(&mut mid, m, rescale);
                        m.to_vec()
                    });
                    let out = project.apply(&mid);
                    StepTrace {
                        input,
                        mid_pre: Some(mid_pre),
                        mid_masked: Some(mid),
                        mid_mask,
                        out_mask: None,
                        out,
                    }
                }
            };
            step.out_mask = mask_here(MaskLocation::AfterLayer(layer_index)).map(|m| {
                apply_mask(&mut step.out, m, rescale);
                m.to_vec()
            });
            h = step.out.clone();
            steps.push(step);
        }

        let logits = self.classifier.apply(&h);
        Ok(ExampleTrace {
            x_index,
            prefix_pre,
            h0,
            prefix_mask,
            steps,
            prob: softmax(&logits),
            label,
        })
    }

    /// Exact gradients of the batch-mean loss for every weight the plan
    /// touched; all other candidates receive no gradient at all.
    pub fn backward_batch(
        &self,
        plan: &SamplePlan,
        dataset: &Dataset,
        cache: &ForwardCache,
    ) -> ParamGrads {
        let mut grads = ParamGrads::zeros_for(self);
        let inv_n = 1.0 / cache.traces.len().max(1) as f64;
        for trace in &cache.traces {
            // d loss / d logits for softmax cross-entropy, scaled for the
            // batch mean.
            let mut dh: Vec<f64> = trace.prob.clone();
            dh[trace.label] -= 1.0;
            dh.iter_mut().for_each(|v| *v *= inv_n);

            let last_h = trace.steps.last().map(|s| &s.out).unwrap_or(&trace.h0);
            grads.classifier.w.add_outer(&dh, last_h, 1.0);
            for (g, &d) in grads.classifier.b.iter_mut().zip(&dh) {
                *g += d;
            }
            let mut upstream = vec![0.0; self.classifier.w.cols];
            self.classifier.w.matvec_t(&dh, &mut upstream);
            dh = upstream;

            for (layer_index, step) in trace.steps.iter().enumerate().rev() {
                let choice = plan.choices[layer_index];
                if let Some(m) = &step.out_mask {
                    mask_grad(&mut dh, m, cache.rescale);
                }
                match &self.layers[layer_index][choice] {
                    CandidateOp::Identity => {}
                    CandidateOp::Block {
                        expand, project, ..
                    } => {
                        let mid_masked = step.mid_masked.as_ref().unwrap();
                        let mid_pre = step.mid_pre.as_ref().unwrap();

                        let proj_grad = grads.projects[layer_index][choice]
                            .get_or_insert_with(|| project.zeros_like());
                        proj_grad.w.add_outer(&dh, mid_masked, 1.0);
                        for (g, &d) in proj_grad.b.iter_mut().zip(&dh) {
                            *g += d;
                        }
                        let mut dmid = vec![0.0; project.w.cols];
                        project.w.matvec_t(&dh, &mut dmid);
                        if let Some(m) = &step.mid_mask {
                            mask_grad(&mut dmid, m, cache.rescale);
                        }
                        for (d, &pre) in dmid.iter_mut().zip(mid_pre) {
                            if pre <= 0.0 {
                                *d *= LEAK;
                            }
                        }
                        let exp_grad = grads.layers[layer_index][choice]
                            .get_or_insert_with(|| expand.zeros_like());
                        exp_grad.w.add_outer(&dmid, &step.input, 1.0);
                        for (g, &d) in exp_grad.b.iter_mut().zip(&dmid) {
                            *g += d;
                        }
                        let mut dinput = vec![0.0; expand.w.cols];
                        expand.w.matvec_t(&dmid, &mut dinput);
                        dh = dinput;
                    }
                }
            }

            if let Some(grad) = grads.prefix.as_mut() {
                if let Some(m) = &trace.prefix_mask {
                    mask_grad(&mut dh, m, cache.rescale);
                }
                let pre = trace.prefix_pre.as_ref().unwrap();
                for (d, &p) in dh.iter_mut().zip(pre) {
                    if p <= 0.0 {
                        *d *= LEAK;
                    }
                }
                let (x, _) = dataset.example(trace.x_index);
                grad.w.add_outer(&dh, x, 1.0);
                for (g, &d) in grad.b.iter_mut().zip(&dh) {
                    *g += d;
                }
            }
        }
        grads
    }

    /// Apply one SGD-with-momentum step to every tensor the gradients touch.
    pub fn sgd_step(&mut self, grads: &ParamGrads, velocity: &mut Velocity, lr: f64, momentum: f64) {
        if let (Some(p), Some(g)) = (&mut self.prefix, &grads.prefix) {
            let v = velocity.prefix.get_or_insert_with(|| g.zeros_like());
            p.sgd_step(g, v, lr, momentum);
        }
        for (layer_index, cands) in self.layers.iter_mut().enumerate() {
            for (choice, op) in cands.iter_mut().enumerate() {
                if let CandidateOp::Block {
                    expand, project, ..
                } = op
                {
                    if let Some(g) = &grads.layers[layer_index][choice] {
                        let v = velocity.layers[layer_index][choice]
                            .get_or_insert_with(|| g.zeros_like());
                        expand.sgd_step(g, v, lr, momentum);
                    }
                    if let Some(g) = &grads.projects[layer_index][choice] {
                        let v = velocity.projects[layer_index][choice]
                            .get_or_insert_with(|| g.zeros_like());
                        project.sgd_step(g, v, lr, momentum);
                    }
                }
            }
        }
        let v = velocity
            .classifier
            .get_or_insert_with(|| grads.classifier.zeros_like());
        self.classifier.sgd_step(&grads.classifier, v, lr, momentum);
    }

    /// Active tensors of a plan in canonical order: prefix, then per layer
    /// (expand, project) of the chosen block, then the classifier.
    pub fn active_tensors(&self, plan: &SamplePlan) -> Vec<TensorId> {
        let mut ids = Vec::new();
        if self.prefix.is_some() {
            ids.push(TensorId::Prefix);
        }
        for (layer, &choice) in plan.choices.iter().enumerate() {
            if matches!(self.layers[layer][choice], CandidateOp::Block { .. }) {
                ids.push(TensorId::Expand { layer, choice });
                ids.push(TensorId::Project { layer, choice });
            }
        }
        ids.push(TensorId::Classifier);
        ids
    }

    fn tensor_dims(&self, id: TensorId) -> (usize, usize) {
        let affine = match id {
            TensorId::Prefix => self.prefix.as_ref().unwrap(),
            TensorId::Expand { layer, choice } => match &self.layers[layer][choice] {
                CandidateOp::Block { expand, .. } => expand,
                CandidateOp::Identity => unreachable!("identity has no tensors"),
            },
            TensorId::Project { layer, choice } => match &self.layers[layer][choice] {
                CandidateOp::Block { project, .. } => project,
                CandidateOp::Identity => unreachable!("identity has no tensors"),
            },
            TensorId::Classifier => &self.classifier,
        };
        (affine.w.rows, affine.w.cols)
    }

    /// Total scalar parameter count of the plan's active tensors.
    pub fn active_param_count(&self, plan: &SamplePlan) -> usize {
        self.active_tensors(plan)
            .iter()
            .map(|&id| {
                let (r, c) = self.tensor_dims(id);
                r * c + r
            })
            .sum()
    }

    /// Add `delta` to the flat-indexed active parameter (weights first, then
    /// biases, per tensor in canonical order).
    pub fn perturb_active_param(&mut self, plan: &SamplePlan, flat_index: usize, delta: f64) {
        let (id, offset) = self.locate(plan, flat_index);
        let affine = match id {
            TensorId::Prefix => self.prefix.as_mut().unwrap(),
            TensorId::Expand { layer, choice } => match &mut self.layers[layer][choice] {
                CandidateOp::Block { expand, .. } => expand,
                CandidateOp::Identity => unreachable!(),
            },
            TensorId::Project { layer, choice } => match &mut self.layers[layer][choice] {
                CandidateOp::Block { project, .. } => project,
                CandidateOp::Identity => unreachable!(),
            },
            TensorId::Classifier => &mut self.classifier,
        };
        let w_len = affine.w.data.len();
        if offset < w_len {
            affine.w.data[offset] += delta;
        } else {
            affine.b[offset - w_len] += delta;
        }
    }

    /// Read the flat-indexed gradient value matching `perturb_active_param`.
    pub fn active_grad_value(
        &self,
        plan: &SamplePlan,
        grads: &ParamGrads,
        flat_index: usize,
    ) -> f64 {
        let (id, offset) = self.locate(plan, flat_index);
        let affine = match id {
            TensorId::Prefix => grads.prefix.as_ref(),
            TensorId::Expand { layer, choice } => grads.layers[layer][choice].as_ref(),
            TensorId::Project { layer, choice } => grads.projects[layer][choice].as_ref(),
            TensorId::Classifier => Some(&grads.classifier),
        };
        match affine {
            None => 0.0,
            Some(a) => {
                let w_len = a.w.data.len();
                if offset < w_len {
                    a.w.data[offset]
                } else {
                    a.b[offset - w_len]
                }
            }
        }
    }

    fn locate(&self, plan: &SamplePlan, mut flat_index: usize) -> (TensorId, usize) {
        for id in self.active_tensors(plan) {
            let (r, c) = self.tensor_dims(id);
            let len = r * c + r;
            if flat_index < len {
                return (id, flat_index);
            }
            flat_index -= len;
        }
        panic!("flat index out of range");
    }

    /// Output of the head portion of the plan (up to and including the split
    /// boundary, mask applied). Composing this with `tail_logits` matches the
    /// monolithic forward exactly.
    pub fn head_output(
        &self,
        plan: &SamplePlan,
        x: &[f64],
        mask: Option<&[bool]>,
        rescale: Option<f64>,
    ) -> Vec<f64> {
        let mut h = match &self.prefix {
            Some(a) => {
                let mut v = a.apply(x);
                relu(&mut v);
                v
            }
            None => x.to_vec(),
        };
        if plan.mask_at == MaskLocation::AfterPrefix {
            if let Some(m) = mask {
                apply_mask(&mut h, m, rescale);
            }
            return h;
        }
        for (layer_index, &choice) in plan.choices.iter().enumerate() {
            match &self.layers[layer_index][choice] {
                CandidateOp::Identity => {}
                CandidateOp::Block {
                    expand, project, ..
                } => {
                    let mut mid = expand.apply(&h);
                    relu(&mut mid);
                    if plan.mask_at == MaskLocation::MidLayer(layer_index) {
                        if let Some(m) = mask {
                            apply_mask(&mut mid, m, rescale);
                        }
                        return mid;
                    }
                    h = project.apply(&mid);
                }
            }
            if plan.mask_at == MaskLocation::AfterLayer(layer_index) {
                if let Some(m) = mask {
                    apply_mask(&mut h, m, rescale);
                }
                return h;
            }
        }
        unreachable!("plan mask location not reached");
    }

    /// Logits of the tail portion applied to a received boundary vector.
    pub fn tail_logits(&self, plan: &SamplePlan, boundary: &[f64]) -> Vec<f64> {
        let start_layer = match plan.mask_at {
            MaskLocation::AfterPrefix => 0,
            MaskLocation::AfterLayer(l) => l + 1,
            MaskLocation::MidLayer(l) => {
                // Finish the split block's project stage first.
                let mut h = match &self.layers[l][plan.choices[l]] {
                    CandidateOp::Block { project, .. } => project.apply(boundary),
                    CandidateOp::Identity => unreachable!("identity cannot split mid-block"),
                };
                for (layer_index, &choice) in plan.choices.iter().enumerate().skip(l + 1) {
                    h = self.apply_op(layer_index, choice, &h);
                }
                return self.classifier.apply(&h);
            }
        };
        let mut h = boundary.to_vec();
        for (layer_index, &choice) in plan.choices.iter().enumerate().skip(start_layer) {
            h = self.apply_op(layer_index, choice, &h);
        }
        self.classifier.apply(&h)
    }

    fn apply_op(&self, layer_index: usize, choice: usize, h: &[f64]) -> Vec<f64> {
        match &self.layers[layer_index][choice] {
            CandidateOp::Identity => h.to_vec(),
            CandidateOp::Block {
                expand, project, ..
            } => {
                let mut mid = expand.apply(h);
                relu(&mut mid);
                project.apply(&mid)
            }
        }
    }
}

/// Momentum buffers mirroring the supernet's tensors; created on first use.
pub struct Velocity {
    prefix: Option<Affine>,
    layers: Vec<Vec<Option<Affine>>>,
    projects: Vec<Vec<Option<Affine>>>,
    classifier: Option<Affine>,
}

impl Velocity {
    pub fn new(net: &ToySupernet) -> Velocity {
        Velocity {
            prefix: None,
            layers: net
                .layers
                .iter()
                .map(|cands| vec![None; cands.len()])
                .collect(),
            projects: net
                .layers
                .iter()
                .map(|cands| vec![None; cands.len()])
                .collect(),
            classifier: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

/// Deterministic synthetic classification task: class-conditional Gaussian
/// blobs with means on random directions. With two modes per class, each
/// class occupies an antipodal mean pair, which no linear model separates,
/// so network depth and width genuinely matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub noise_std: f64,
    pub separation: f64,
    pub modes_per_class: usize,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            input_dim: 16,
            classes: 12,
            train_size: 2048,
            val_size: 512,
            noise_std: 0.6,
            separation: 2.2,
            modes_per_class: 2,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(Error::config("dataset", "need input_dim >= 1, classes >= 2"));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::config("dataset", "train/val sizes must be positive"));
        }
        if !(self.noise_std > 0.0) || !(self.separation > 0.0) {
            return Err(Error::config("dataset", "noise/separation must be positive"));
        }
        if !(1..=2).contains(&self.modes_per_class) {
            return Err(Error::config("dataset.modes_per_class", "must be 1 or 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, index: usize) -> (&[f64], usize) {
        let start = index * self.input_dim;
        (
            &self.inputs[start..start + self.input_dim],
            self.labels[index],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub train: Dataset,
    pub val: Dataset,
    pub classes: usize,
    pub input_dim: usize,
}

pub fn generate_task(config: &ToyDatasetConfig, seed: u64) -> Result<ToyTask> {
    config.validate()?;
    let mut means_rng = rng::stream(seed, "task-means", 0);
    let means: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..config.input_dim)
                .map(|_| rng::normal(&mut means_rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter_mut().for_each(|x| *x *= config.separation / norm);
            v
        })
        .collect();

    let split = |tag: &str, size: usize| -> Dataset {
        let mut point_rng = rng::stream(seed, tag, 0);
        let mut inputs = Vec::with_capacity(size * config.input_dim);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let label = i % config.classes;
            // Second mode mirrors the mean through the origin.
            let sign = if config.modes_per_class == 2 && (i / config.classes) % 2 == 1 {
                -1.0
            } else {
                1.0
            };
            for &m in &means[label] {
                inputs.push(sign * m + config.noise_std * rng::normal(&mut point_rng));
            }
            labels.push(label);
        }
        Dataset {
            inputs,
            labels,
            input_dim: config.input_dim,
        }
    };
    Ok(ToyTask {
        train: split("task-train", config.train_size),
        val: split("task-val", config.val_size),
        classes: config.classes,
        input_dim: config.input_dim,
    })
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

/// Hyperparameters of the weight-training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub retrain_epochs: usize,
    /// Samples averaged per weight update during pre-training.
    pub lambda_x: usize,
    /// Monte-Carlo mask draws for evaluation at a nonzero rate.
    pub eval_mask_draws: usize,
    /// Conventional inverted-dropout rescaling (ablation switch); off by
    /// default to keep the packet-loss semantics.
    pub inverted_rescale: bool,
    /// Global gradient-norm clip; non-positive disables it.
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            pretrain_epochs: 30,
            retrain_epochs: 300,
            lambda_x: 2,
            eval_mask_draws: 8,
            inverted_rescale: false,
            grad_clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.lambda_x == 0 {
            return Err(Error::config("train.lambda_x", "must be positive"));
        }
        if self.eval_mask_draws == 0 {
            return Err(Error::config("train.eval_mask_draws", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// Uniform joint sample over categorical dimensions.
pub fn uniform_sample(dims: &[usize], rng: &mut ChaCha12Rng) -> ArchSample {
    ArchSample {
        categories: dims
            .iter()
            .map(|&k| (rng.random::<u64>() % k as u64) as usize)
            .collect(),
    }
}

/// Weight pre-training: for every minibatch, draw `lambda_x` joint samples
/// from the uniform distribution, average the gradients of the single-rate
/// loss across them, and take one SGD-with-momentum step.
pub fn pretrain(
    net: &mut ToySupernet,
    task: &ToyTask,
    train: &TrainConfig,
    eps_loss: f64,
    train_dropout_rate: f64,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    train.validate()?;
    let dims = net.space.categorical_dims();
    let mut velocity = Velocity::new(net);
    let mut arch_rng = rng::stream(seed, "pretrain-arch", 0);
    let mut mask_rng = rng::stream(seed, "pretrain-mask", 0);
    let mut metrics = Vec::with_capacity(train.pretrain_epochs);

    for epoch in 0..train.pretrain_epochs {
        let mut shuffle_rng = rng::stream(seed, "pretrain-shuffle", epoch as u64);
        let order = shuffled_indices(task.train.len(), &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(train.batch_size) {
            let mut combined: Option<ParamGrads> = None;
            let mut batch_loss = 0.0;
            for _ in 0..train.lambda_x {
                let sample = uniform_sample(&dims, &mut arch_rng);
                let plan = net.plan(&sample)?;
                let masks: Vec<Option<Vec<bool>>> = batch
                    .iter()
                    .map(|_| ToySupernet::draw_mask(&plan, train_dropout_rate, &mut mask_rng))
                    .collect();
                let (outcome, cache) = net.forward_batch(
                    &plan,
                    &task.train,
                    batch,
                    &masks,
                    train_dropout_rate,
                    train.inverted_rescale,
                )?;
                batch_loss += outcome.loss;
                let mut grads = net.backward_batch(&plan, &task.train, &cache);
                grads.scale(eps_loss / train.lambda_x as f64);
                match &mut combined {
                    None => combined = Some(grads),
                    Some(acc) => acc.accumulate(&grads),
                }
            }
            if let Some(mut grads) = combined {
                grads.clip_global_norm(train.grad_clip_norm);
                net.sgd_step(&grads, &mut velocity, train.learning_rate, train.momentum);
            }
            epoch_loss += batch_loss / train.lambda_x as f64;
            steps += 1;
        }

        // Probe validation loss on a few uniform samples at rate 0.
        let mut probe_rng = rng::stream(seed, "pretrain-probe", epoch as u64);
        let mut val_loss = 0.0;
        let mut val_acc = 0.0;
        let probes = 4;
        for _ in 0..probes {
            let sample = uniform_sample(&dims, &mut probe_rng);
            let (loss, acc) = evaluate(net, &sample, 0.0, &task.val, 1, seed, train)?;
            val_loss += loss;
            val_acc += acc;
        }
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / steps.max(1) as f64,
            val_loss: val_loss / probes as f64,
            val_accuracy: val_acc / probes as f64,
        });
    }
    Ok(metrics)
}

/// Train only the chosen sub-network, optionally with the split-boundary
/// mask active at the training rate. Used for re-training from fresh weights
/// after a search and by the comparison protocols.
pub fn train_subnetwork(
    net: &mut ToySupernet,
    sample: &ArchSample,
    task: &ToyTask,
    train: &TrainConfig,
    epochs: usize,
    train_dropout_rate: f64,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    train.validate()?;
    let plan = net.plan(sample)?;
    let mut velocity = Velocity::new(net);
    let mut mask_rng = rng::stream(seed, "retrain-mask", 0);
    let mut metrics = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut shuffle_rng = rng::stream(seed, "retrain-shuffle", epoch as u64);
        let order = shuffled_indices(task.train.len(), &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(train.batch_size) {
            let masks: Vec<Option<Vec<bool>>> = batch
                .iter()
                .map(|_| ToySupernet::draw_mask(&plan, train_dropout_rate, &mut mask_rng))
                .collect();
            let (outcome, cache) = net.forward_batch(
                &plan,
                &task.train,
                batch,
                &masks,
                train_dropout_rate,
                train.inverted_rescale,
            )?;
            let mut grads = net.backward_batch(&plan, &task.train, &cache);
            grads.clip_global_norm(train.grad_clip_norm);
            net.sgd_step(&grads, &mut velocity, train.learning_rate, train.momentum);
            epoch_loss += outcome.loss;
            steps += 1;
        }
        let (val_loss, val_accuracy) = evaluate(net, sample, 0.0, &task.val, 1, seed, train)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / steps.max(1) as f64,
            val_loss,
            val_accuracy,
        });
    }
    Ok(metrics)
}

/// Mean loss and accuracy of one sample on a dataset split. A zero rate is
/// one deterministic pass; a nonzero rate averages `draws` mask draws.
pub fn evaluate(
    net: &ToySupernet,
    sample: &ArchSample,
    rate: f64,
    dataset: &Dataset,
    draws: usize,
    seed: u64,
    train: &TrainConfig,
) -> Result<(f64, f64)> {
    let plan = net.plan(sample)?;
    let examples: Vec<usize> = (0..dataset.len()).collect();
    let effective_draws = if rate == 0.0 { 1 } else { draws.max(1) };
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for draw in 0..effective_draws {
        let mut mask_rng = rng::stream(seed, "eval-mask", draw as u64);
        let masks: Vec<Option<Vec<bool>>> = examples
            .iter()
            .map(|_| ToySupernet::draw_mask(&plan, rate, &mut mask_rng))
            .collect();
        let (outcome, _) = net.forward_batch(
            &plan,
            dataset,
            &examples,
            &masks,
            rate,
            train.inverted_rescale,
        )?;
        loss_sum += outcome.loss;
        acc_sum += outcome.accuracy();
    }
    Ok((
        loss_sum / effective_draws as f64,
        acc_sum / effective_draws as f64,
    ))
}

/// Frozen-weight evaluator over validation minibatches, fulfilling the
/// objective contract during the distribution update. The batch index of the
/// context cycles through contiguous validation minibatches; the seed drives
/// the mask draw, shared across the rate set of one dropout-averaged loss so
/// the rate is the only varying factor.
pub struct SupernetEvaluator {
    net: ToySupernet,
    val: Dataset,
    batch_size: usize,
    inverted_rescale: bool,
}

impl SupernetEvaluator {
    pub fn new(net: ToySupernet, val: Dataset, batch_size: usize, inverted_rescale: bool) -> Self {
        SupernetEvaluator {
            net,
            val,
            batch_size: batch_size.max(1),
            inverted_rescale,
        }
    }

    pub fn num_batches(&self) -> u64 {
        (self.val.len() as u64).div_ceil(self.batch_size as u64)
    }

    pub fn net(&self) -> &ToySupernet {
        &self.net
    }

    fn batch_indices(&self, batch: u64) -> Vec<usize> {
        let b = (batch % self.num_batches()) as usize;
        let start = b * self.batch_size;
        let end = (start + self.batch_size).min(self.val.len());
        (start..end).collect()
    }
}

impl Evaluator for SupernetEvaluator {
    fn eval_loss(&self, sample: &ArchSample, rate: f64, ctx: &EvalCtx) -> Result<f64> {
        let plan = self.net.plan(sample)?;
        let examples = self.batch_indices(ctx.batch);
        let mut mask_rng = rng::stream(ctx.seed, "sc-mask", 0);
        let masks: Vec<Option<Vec<bool>>> = examples
            .iter()
            .map(|_| ToySupernet::draw_mask(&plan, rate, &mut mask_rng))
            .collect();
        let (outcome, _) = self.net.forward_batch(
            &plan,
            &self.val,
            &examples,
            &masks,
            rate,
            self.inverted_rescale,
        )?;
        Ok(outcome.loss)
    }
}
