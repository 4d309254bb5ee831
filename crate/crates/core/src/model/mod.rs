//! Mask-classification network: a strided convolutional encoder, a pixel
//! decoder, an `L`-layer transformer decoder driven by per-step prompt sets,
//! and per-step classifier heads.

pub mod checkpoint;
pub mod net;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TaskProtocol;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use net::{
    apply_heads, decode_steps, encode, forward_all, forward_all_counted, forward_step,
    image_tensor, Encoding, StepOutput,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Prompts enter at the first decoder layer only.
    Shallow,
    /// One prompt block per decoder layer, added to that layer's input.
    Deep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input `(H, W)`; both divisible by 8.
    pub image_size: [usize; 2],
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub pixel_embed_dim: usize,
    /// Must equal `image_size / 4`.
    pub mask_resolution: [usize; 2],
    pub mlp_hidden: usize,
    /// Hidden layers of every head and of the mask-embedding MLP.
    pub mlp_depth: usize,
    pub prompt_mode: PromptMode,
    /// Width of the decoder feed-forward block; 0 means `2·embed_dim`.
    pub ffn_dim: usize,
    /// Channels of the three encoder stages.
    pub encoder_channels: [usize; 3],
    /// Lower bound on queries per step.
    pub min_prompts: usize,
    /// Per-step query counts overriding the `max(|C^t|, min_prompts)` rule
    /// when non-empty.
    pub prompt_counts: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: [64, 64],
            embed_dim: 64,
            num_layers: 3,
            num_heads: 4,
            pixel_embed_dim: 64,
            mask_resolution: [16, 16],
            mlp_hidden: 64,
            mlp_depth: 2,
            prompt_mode: PromptMode::Deep,
            ffn_dim: 0,
            encoder_channels: [16, 32, 64],
            min_prompts: 10,
            prompt_counts: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return bad(format!("image size {h}x{w} must be positive multiples of 8"));
        }
        if self.mask_resolution != [h / 4, w / 4] {
            return bad(format!(
                "mask resolution {:?} must be image size / 4 = {:?}",
                self.mask_resolution,
                [h / 4, w / 4]
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return bad(format!("embed_dim {} must be divisible by 4", self.embed_dim));
        }
        if self.num_layers == 0 || self.mlp_depth == 0 {
            return bad("num_layers and mlp_depth must be at least 1".into());
        }
        if self.pixel_embed_dim == 0 || self.mlp_hidden == 0 || self.min_prompts == 0 {
            return bad("pixel_embed_dim, mlp_hidden and min_prompts must be positive".into());
        }
        if self.encoder_channels.contains(&0) || self.prompt_counts.contains(&0) {
            return bad("encoder channels and prompt counts must be positive".into());
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            2 * self.embed_dim
        } else {
            self.ffn_dim
        }
    }

    /// Memory tokens seen by cross-attention.
    pub fn memory_tokens(&self) -> usize {
        (self.image_size[0] / 8) * (self.image_size[1] / 8)
    }

    pub fn mask_pixels(&self) -> usize {
        self.mask_resolution[0] * self.mask_resolution[1]
    }

    /// Prompt blocks per step.
    pub fn prompt_blocks(&self) -> usize {
        match self.prompt_mode {
            PromptMode::Shallow => 1,
            PromptMode::Deep => self.num_layers,
        }
    }

    /// `N^t` for a step with `classes` classes.
    pub fn num_queries(&self, t: usize, classes: usize) -> usize {
        match self.prompt_counts.get(t - 1) {
            Some(&n) => n,
            None => classes.max(self.min_prompts),
        }
    }

    /// Layer widths of a step head.
    pub fn head_widths(&self, classes: usize) -> Vec<usize> {
        let mut w = vec![self.embed_dim];
        w.extend(std::iter::repeat_n(self.mlp_hidden, self.mlp_depth));
        w.push(classes);
        w
    }

    /// Trainable scalars of one step after the base step: prompts plus head.
    pub fn step_param_count(&self, queries: usize, classes: usize) -> usize {
        self.prompt_blocks() * queries * self.embed_dim + mlp_param_count(&self.head_widths(classes))
    }
}

/// Weights plus biases of a dense MLP with the given layer widths.
pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    PixelDecoder,
    TransformerDecoder,
    Prompts(usize),
    Head(usize),
}

impl ParamGroup {
    pub fn label(&self) -> String {
        match self {
            ParamGroup::Backbone => "backbone".into(),
            ParamGroup::PixelDecoder => "pixel_decoder".into(),
            ParamGroup::TransformerDecoder => "transformer_decoder".into(),
            ParamGroup::Prompts(t) => format!("prompts.{t}"),
            ParamGroup::Head(t) => format!("head.{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub step: usize,
    pub num_queries: usize,
    /// Global class ids of `C^t`, in head-output order.
    pub local_classes: Vec<u32>,
    /// 1 in shallow mode, `L` in deep mode.
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepHead {
    pub step: usize,
    /// `D`, hidden widths, `|C^t|`.
    pub widths: Vec<usize>,
}

impl StepHead {
    pub fn num_classes(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Parameter registry plus the per-step prompt sets and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub protocol: TaskProtocol,
    pub prompt_sets: Vec<PromptSet>,
    pub heads: Vec<StepHead>,
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    frozen: BTreeMap<ParamGroup, bool>,
}

impl<T: Scalar> ModelState<T> {
    /// Number of steps allocated so far.
    pub fn current_step(&self) -> usize {
        self.prompt_sets.len()
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    /// Position of a parameter in [`ModelState::params`], which is also its
    /// graph id.
    pub fn param_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.param_id(name).map(|i| &self.params[i])
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.get(&group).copied().unwrap_or(true)
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        !self.is_frozen(self.params[id].group)
    }

    /// Group label → frozen flag.
    pub fn frozen_mask(&self) -> BTreeMap<String, bool> {
        self.frozen.iter().map(|(g, f)| (g.label(), *f)).collect()
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.frozen.insert(group, frozen);
    }

    pub fn unfreeze_all(&mut self) {
        for f in self.frozen.values_mut() {
            *f = false;
        }
    }

    /// Mutable access to the values of trainable parameters only, by id.
    pub fn trainable_mut(&mut self) -> Vec<(usize, &mut Tensor<T>)> {
        let frozen = &self.frozen;
        self.params
            .iter_mut()
            .enumerate()
            .filter(|(_, p)| !frozen.get(&p.group).copied().unwrap_or(true))
            .map(|(i, p)| (i, &mut p.value))
            .collect()
    }

    pub fn prompt_set(&self, t: usize) -> Result<&PromptSet> {
        if t == 0 || t > self.prompt_sets.len() {
            return Err(Error::State(format!(
                "step {t} not allocated (model has {} steps)",
                self.prompt_sets.len()
            )));
        }
        Ok(&self.prompt_sets[t - 1])
    }

    pub fn head(&self, t: usize) -> Result<&StepHead> {
        self.prompt_set(t)?;
        Ok(&self.heads[t - 1])
    }

    /// Scalars with `frozen_mask = false`.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !self.is_frozen(p.group))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn count_total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Symbolic multiply-accumulate count of `forward_all(·, upto)`.
    pub fn count_flops(&self, upto: usize) -> Result<u64> {
        self.prompt_set(upto)?;
        let c = &self.config;
        let [h, w] = c.image_size;
        let [c1, c2, c3] = c.encoder_channels;
        let (d, e) = (c.embed_dim, c.pixel_embed_dim);
        let (m, p) = (c.memory_tokens(), c.mask_pixels());
        let s2 = (h / 2) * (w / 2);
        let s8 = (h / 8) * (w / 8);
        let mut macs = c1 * 5 * 9 * s2
            + c2 * c1 * 9 * p
            + c3 * c2 * 9 * s8
            + c3 * c3 * 9 * s8
            + d * c3 * m
            + d * c2 * p
            + e * d * p
            + c.num_layers * 2 * m * d * d;
        for t in 1..=upto {
            let n = self.prompt_sets[t - 1].num_queries;
            let f = c.ffn_width();
            macs += c.num_layers * (6 * n * d * d + 2 * n * d * f);
            let hidden = c.mlp_hidden;
            let mlp = |out: usize| n * (d * hidden + hidden * hidden * (c.mlp_depth - 1) + hidden * out);
            macs += mlp(self.heads[t - 1].num_classes()) + mlp(e) + n * e * p;
        }
        Ok(macs as u64 + self.count_attention_flops(upto)?)
    }

    /// Symbolic attention cost of `forward_all(·, upto)`: `Σ_k f(N^k)`.
    pub fn count_attention_flops(&self, upto: usize) -> Result<u64> {
        self.prompt_set(upto)?;
        Ok(self.prompt_sets[..upto]
            .iter()
            .map(|s| attention_cost(&self.config, s.num_queries))
            .sum())
    }

    fn push_param(&mut self, name: String, group: ParamGroup, value: Tensor<T>) {
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, group, value });
    }

    /// Rebuilds a state from a registry, checking every expected parameter is
    /// present with its expected shape.
    pub(crate) fn from_parts(
        config: ModelConfig,
        protocol: TaskProtocol,
        prompt_sets: Vec<PromptSet>,
        params: Vec<Parameter<T>>,
        frozen: BTreeMap<ParamGroup, bool>,
    ) -> Result<Self> {
        let heads = prompt_sets
            .iter()
            .map(|s| StepHead {
                step: s.step,
                widths: config.head_widths(s.local_classes.len()),
            })
            .collect();
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        let state = ModelState {
            config,
            protocol,
            prompt_sets,
            heads,
            params,
            index,
            frozen,
        };
        let layout = layout(&state.config, &state.prompt_sets);
        if layout.len() != state.params.len() {
            return Err(Error::State(format!(
                "registry holds {} tensors, layout expects {}",
                state.params.len(),
                layout.len()
            )));
        }
        for (entry, p) in layout.iter().zip(&state.params) {
            if entry.name != p.name || entry.shape != p.value.shape() || entry.group != p.group {
                return Err(Error::State(format!(
                    "tensor {} {:?} does not match layout {} {:?}",
                    p.name,
                    p.value.shape(),
                    entry.name,
                    entry.shape
                )));
            }
        }
        Ok(state)
    }
}

/// Attention multiply-accumulates of one prompt set of `n` queries:
/// `L · 2 · D · (n·M + n²)`.
pub fn attention_cost(cfg: &ModelConfig, n: usize) -> u64 {
    (cfg.num_layers * 2 * cfg.embed_dim * (n * cfg.memory_tokens() + n * n)) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform `±sqrt(6 / fan_in)`.
    Kaiming(usize),
    /// Uniform `±sqrt(6 / (fan_in + fan_out))`.
    Xavier(usize, usize),
    /// Normal `σ = 0.02` truncated at `2σ`.
    TruncNormal,
    Zeros,
    Ones,
}

struct LayoutEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    init: Init,
}

fn push_linear(out: &mut Vec<LayoutEntry>, name: &str, group: ParamGroup, i: usize, o: usize, w: Init) {
    out.push(LayoutEntry {
        name: format!("{name}.w"),
        group,
        shape: vec![i, o],
        init: w,
    });
    out.push(LayoutEntry {
        name: format!("{name}.b"),
        group,
        shape: vec![o],
        init: Init::Zeros,
    });
}

fn push_conv(out: &mut Vec<LayoutEntry>, name: &str, group: ParamGroup, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k;
    out.push(LayoutEntry {
        name: format!("{name}.w"),
        group,
        shape: vec![cout, fan_in],
        init: Init::Kaiming(fan_in),
    });
    out.push(LayoutEntry {
        name: format!("{name}.b"),
        group,
        shape: vec![cout],
        init: Init::Zeros,
    });
}

fn push_mlp(out: &mut Vec<LayoutEntry>, name: &str, group: ParamGroup, widths: &[usize], head: bool) {
    for (i, w) in widths.windows(2).enumerate() {
        let init = if head {
            Init::TruncNormal
        } else {
            Init::Xavier(w[0], w[1])
        };
        push_linear(out, &format!("{name}.{i}"), group, w[0], w[1], init);
    }
}

fn base_layout(cfg: &ModelConfig) -> Vec<LayoutEntry> {
    let mut out = Vec::new();
    let [c1, c2, c3] = cfg.encoder_channels;
    let (d, e) = (cfg.embed_dim, cfg.pixel_embed_dim);
    let bb = ParamGroup::Backbone;
    push_conv(&mut out, "enc.0", bb, 5, c1, 3);
    push_conv(&mut out, "enc.1", bb, c1, c2, 3);
    push_conv(&mut out, "enc.2", bb, c2, c3, 3);
    push_conv(&mut out, "enc.3", bb, c3, c3, 3);
    let pd = ParamGroup::PixelDecoder;
    push_conv(&mut out, "pix.lat3", pd, c3, d, 1);
    push_conv(&mut out, "pix.lat2", pd, c2, d, 1);
    push_conv(&mut out, "pix.out", pd, d, e, 1);
    let td = ParamGroup::TransformerDecoder;
    let f = cfg.ffn_width();
    let ln = |out: &mut Vec<LayoutEntry>, name: String| {
        out.push(LayoutEntry {
            name: format!("{name}.g"),
            group: td,
            shape: vec![d],
            init: Init::Ones,
        });
        out.push(LayoutEntry {
            name: format!("{name}.b"),
            group: td,
            shape: vec![d],
            init: Init::Zeros,
        });
    };
    for l in 0..cfg.num_layers {
        for part in ["cross", "self"] {
            for proj in ["q", "k", "v", "o"] {
                push_linear(&mut out, &format!("dec.{l}.{part}.{proj}"), td, d, d, Init::Xavier(d, d));
            }
        }
        push_linear(&mut out, &format!("dec.{l}.ffn.0"), td, d, f, Init::Xavier(d, f));
        push_linear(&mut out, &format!("dec.{l}.ffn.1"), td, f, d, Init::Xavier(f, d));
        for i in 1..=3 {
            ln(&mut out, format!("dec.{l}.ln{i}"));
        }
    }
    ln(&mut out, "dec.final_ln".into());
    let mut mask_widths = vec![d];
    mask_widths.extend(std::iter::repeat_n(cfg.mlp_hidden, cfg.mlp_depth));
    mask_widths.push(e);
    push_mlp(&mut out, "mask", td, &mask_widths, false);
    out
}

fn step_layout(cfg: &ModelConfig, set: &PromptSet) -> Vec<LayoutEntry> {
    let mut out = Vec::new();
    let t = set.step;
    for l in 0..set.blocks {
        out.push(LayoutEntry {
            name: format!("prompts.{t}.{l}"),
            group: ParamGroup::Prompts(t),
            shape: vec![set.num_queries, cfg.embed_dim],
            init: Init::TruncNormal,
        });
    }
    let widths = cfg.head_widths(set.local_classes.len());
    push_mlp(&mut out, &format!("head.{t}"), ParamGroup::Head(t), &widths, true);
    out
}

fn layout(cfg: &ModelConfig, sets: &[PromptSet]) -> Vec<LayoutEntry> {
    let mut out = base_layout(cfg);
    for s in sets {
        out.extend(step_layout(cfg, s));
    }
    out
}

fn materialize<T: Scalar>(entry: &LayoutEntry, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = entry.shape.iter().product();
    let normal = Normal::new(0.0, 0.02).unwrap();
    let data = (0..n)
        .map(|_| {
            let v: f64 = match entry.init {
                Init::Kaiming(fan_in) => {
                    let a = (6.0 / fan_in as f64).sqrt();
                    rng.random_range(-a..a)
                }
                Init::Xavier(i, o) => {
                    let a = (6.0 / (i + o) as f64).sqrt();
                    rng.random_range(-a..a)
                }
                Init::TruncNormal => loop {
                    let x: f64 = normal.sample(rng);
                    if x.abs() <= 0.04 {
                        break x;
                    }
                },
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
            };
            T::lit(v)
        })
        .collect();
    Tensor::from_vec(&entry.shape, data).unwrap()
}

fn make_prompt_set(cfg: &ModelConfig, t: usize, classes: &[u32]) -> Result<PromptSet> {
    if classes.is_empty() {
        return Err(Error::Protocol(format!("step {t} has no classes")));
    }
    Ok(PromptSet {
        step: t,
        num_queries: cfg.num_queries(t, classes.len()),
        local_classes: classes.to_vec(),
        blocks: cfg.prompt_blocks(),
    })
}

/// Fresh model for step 1 of `protocol`: every group trainable.
pub fn init_model<T: Scalar>(
    cfg: &ModelConfig,
    protocol: &TaskProtocol,
    seed: u64,
) -> Result<ModelState<T>> {
    cfg.validate()?;
    let first = make_prompt_set(cfg, 1, protocol.step_classes(1)?)?;
    let mut state = ModelState {
        config: cfg.clone(),
        protocol: protocol.clone(),
        prompt_sets: Vec::new(),
        heads: Vec::new(),
        params: Vec::new(),
        index: HashMap::new(),
        frozen: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for entry in base_layout(cfg) {
        let v = materialize(&entry, &mut rng);
        state.push_param(entry.name, entry.group, v);
    }
    for g in [
        ParamGroup::Backbone,
        ParamGroup::PixelDecoder,
        ParamGroup::TransformerDecoder,
    ] {
        state.frozen.insert(g, false);
    }
    allocate_step(&mut state, first, seed);
    Ok(state)
}

fn allocate_step<T: Scalar>(state: &mut ModelState<T>, set: PromptSet, seed: u64) {
    let t = set.step;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    for entry in step_layout(&state.config, &set) {
        let v = materialize(&entry, &mut rng);
        state.push_param(entry.name, entry.group, v);
    }
    state.frozen.insert(ParamGroup::Prompts(t), false);
    state.frozen.insert(ParamGroup::Head(t), false);
    state.heads.push(StepHead {
        step: t,
        widths: state.config.head_widths(set.local_classes.len()),
    });
    state.prompt_sets.push(set);
}

/// Freezes every existing group and allocates a trainable prompt set and head
/// for `new_classes` as the next step.
pub fn add_step<T: Scalar>(state: &mut ModelState<T>, new_classes: &[u32], seed: u64) -> Result<()> {
    let seen: BTreeSet<u32> = state
        .prompt_sets
        .iter()
        .flat_map(|s| s.local_classes.iter().copied())
        .collect();
    let fresh: BTreeSet<u32> = new_classes.iter().copied().collect();
    if fresh.len() != new_classes.len() {
        return Err(Error::Protocol("new classes contain duplicates".into()));
    }
    if let Some(c) = fresh.intersection(&seen).next() {
        return Err(Error::Protocol(format!(
            "class {c} already belongs to an earlier step"
        )));
    }
    let t = state.current_step() + 1;
    let set = make_prompt_set(&state.config, t, new_classes)?;
    for f in state.frozen.values_mut() {
        *f = true;
    }
    allocate_step(state, set, seed);
    Ok(())
}
