//! Aspect features, the sentiment aggregation window and the output head.

use std::fmt;
use std::str::FromStr;

use lsa_autodiff::{Bindings, Checkpoint, ParamId, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{adjacent_aspects, AspectAnnotation, Example, Polarity};
use crate::distance::{relative_token_distance, syntactic_distance, DependencyTree, TokenAlignment};
use crate::encoder::{
    build_spc_input, encode, self_attention_head_pool, weighted_head_pool, BlockParams, EncoderConfig, EncoderParams, Linear, SharedProjections, Vocabulary,
};
use crate::error::{Error, Result};

/// Parameter group of encoder and head weights.
pub const GROUP_MODEL: usize = 0;
/// Parameter group of the two window weights.
pub const GROUP_ETA: usize = 1;

/// LCF weight of a token at distance `d`: 1 inside `alpha`, then a linear
/// decay by `1/n` per token, never below 0.
pub fn position_weight(d: f64, alpha: f64, n: usize) -> f64 {
    if d <= alpha {
        1.0
    } else {
        (1.0 - (d - alpha) / n as f64).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Sentence-pair input per aspect.
    #[serde(rename = "lsa_p")]
    LsaP,
    /// Positional distance weighting.
    #[serde(rename = "lsa_t")]
    LsaT,
    /// Dependency-tree distance weighting.
    #[serde(rename = "lsa_s")]
    LsaS,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::LsaP => "lsa_p",
            Variant::LsaT => "lsa_t",
            Variant::LsaS => "lsa_s",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lsa_p" | "lsa-p" => Ok(Variant::LsaP),
            "lsa_t" | "lsa-t" => Ok(Variant::LsaT),
            "lsa_s" | "lsa-s" => Ok(Variant::LsaS),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// Which slots make up the window fed to the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLayout {
    /// `[left; target; right]`.
    Full,
    /// `[left; target]`.
    LeftOnly,
    /// `[target; right]`.
    RightOnly,
    /// `[target; target; target]` for every aspect, neighbours ignored.
    TargetOnly,
}

impl WindowLayout {
    pub fn slots(self, k: usize) -> usize {
        match self {
            WindowLayout::Full | WindowLayout::TargetOnly => 2 * k + 1,
            WindowLayout::LeftOnly | WindowLayout::RightOnly => k + 1,
        }
    }
}

/// How the window weights take part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// Neighbour slots scaled by trainable weights.
    Learned,
    /// Neighbour slots scaled by the stored, untrained weights.
    Fixed,
    /// No scaling at all.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub k: usize,
    pub alpha: f64,
    pub layout: WindowLayout,
    pub eta: EtaMode,
    pub initial_eta: [f64; 2],
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.alpha)));
        }
        if self.initial_eta.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("initial eta must be finite".into()));
        }
        Ok(())
    }
}

/// Per-token distances over `[CLS] context [SEP]`. The two markers get `n`.
pub fn positional_distances(context_len: usize, aspect: &AspectAnnotation) -> Result<Vec<f64>> {
    let positions: Vec<usize> = aspect.positions().collect();
    let n = context_len as f64;
    let mut out = Vec::with_capacity(context_len + 2);
    out.push(n);
    for i in 0..context_len {
        out.push(relative_token_distance(i, &positions)?);
    }
    out.push(n);
    Ok(out)
}

/// Like [`positional_distances`] with tree path lengths for context tokens.
pub fn syntactic_distances(
    context_len: usize,
    aspect: &AspectAnnotation,
    tree: &DependencyTree,
    alignment: &TokenAlignment,
) -> Result<Vec<f64>> {
    let positions: Vec<usize> = aspect.positions().collect();
    let n = context_len as f64;
    let mut out = Vec::with_capacity(context_len + 2);
    out.push(n);
    for i in 0..context_len {
        out.push(syntactic_distance(tree, alignment, i, &positions)?);
    }
    out.push(n);
    Ok(out)
}

pub fn lcf_weights(distances: &[f64], alpha: f64, context_len: usize) -> Vec<f64> {
    distances
        .iter()
        .map(|&d| position_weight(d, alpha, context_len.max(1)))
        .collect()
}

/// Model inputs for one aspect, computed once ahead of training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedAspect {
    /// Row weights over the shared context sequence (LSA_T, LSA_S).
    pub weights: Vec<f64>,
    /// Sentence-pair ids (LSA_P).
    pub spc_ids: Vec<usize>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    /// `[CLS] context [SEP]` ids, empty for LSA_P.
    pub ids: Vec<usize>,
    pub aspects: Vec<PreparedAspect>,
    /// Whether tree distances were replaced by positional ones.
    pub used_fallback: bool,
}

/// Alignment of an example's tokens to a parse, if the parse covers them.
pub fn align_to_parse(example: &Example, tree: &DependencyTree) -> Option<TokenAlignment> {
    if let Some(forms) = tree.forms() {
        TokenAlignment::from_strings(&example.tokens, forms)
    } else if tree.word_count() == example.tokens.len() {
        Some(TokenAlignment::identity(example.tokens.len()))
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AspectOutput {
    pub logits: Var,
    pub probs: Var,
}

/// Neighbour slot of a window. Padding slots hold the target feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub feature: Var,
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationWindow {
    /// Outermost first, nearest last.
    pub left: Vec<Slot>,
    pub target: Var,
    /// Nearest first.
    pub right: Vec<Slot>,
}

/// Fills `k` slots per side from the example's neighbours; missing slots on
/// the outer side are copies of the target feature.
pub fn build_window(example: &Example, features: &[Var], target: usize, k: usize) -> Result<AggregationWindow> {
    if features.len() != example.aspects.len() {
        return Err(Error::InvalidExample {
            example: 0,
            message: format!(
                "{} features for {} aspects",
                features.len(),
                example.aspects.len()
            ),
        });
    }
    let (left, right) = adjacent_aspects(example, target, k)?;
    let t = features[target];
    let pad = Slot {
        feature: t,
        padded: true,
    };
    let real = |i: usize| Slot {
        feature: features[i],
        padded: false,
    };
    let mut l: Vec<Slot> = vec![pad; k - left.len()];
    l.extend(left.into_iter().map(real));
    let mut r: Vec<Slot> = right.into_iter().map(real).collect();
    r.resize(k, pad);
    Ok(AggregationWindow {
        left: l,
        target: t,
        right: r,
    })
}

/// Concatenates the window, scaling real neighbour slots by `eta`.
pub fn apply_dwa(tape: &mut Tape, window: &AggregationWindow, eta: Option<(Var, Var)>, layout: WindowLayout) -> Result<Var> {
    let scaled = |tape: &mut Tape, slot: &Slot, e: Option<Var>| -> Result<Var> {
        match e {
            Some(e) if !slot.padded => Ok(tape.scale(slot.feature, e)?),
            _ => Ok(slot.feature),
        }
    };
    let mut parts = Vec::new();
    let with_left = matches!(layout, WindowLayout::Full | WindowLayout::LeftOnly);
    let with_right = matches!(layout, WindowLayout::Full | WindowLayout::RightOnly);
    if layout == WindowLayout::TargetOnly {
        parts = vec![window.target; window.left.len() + window.right.len() + 1];
    } else {
        if with_left {
            for slot in &window.left {
                parts.push(scaled(tape, slot, eta.map(|e| e.0))?);
            }
        }
        parts.push(window.target);
        if with_right {
            for slot in &window.right {
                parts.push(scaled(tape, slot, eta.map(|e| e.1))?);
            }
        }
    }
    Ok(tape.concat(&parts, 1)?)
}

#[derive(Debug, Clone)]
pub struct LsaModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub encoder: EncoderParams,
    /// Pre-head block over position-weighted (or sentence-pair) states.
    pub local: BlockParams,
    /// Pre-head block pooling the global context; absent for LSA_P.
    pub global: Option<BlockParams>,
    pub window_proj: Linear,
    pub decision: Linear,
    pub eta_l: ParamId,
    pub eta_r: ParamId,
}

impl LsaModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} differs from vocabulary size {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc_cfg = config.encoder.clone();
        let (d, ff, heads) = (enc_cfg.d_model, enc_cfg.ff_dim, enc_cfg.heads);
        let encoder = EncoderParams::register(enc_cfg, &mut params, GROUP_MODEL, &mut rng)?;
        let local = BlockParams::register(&mut params, "head.local", d, ff, heads, GROUP_MODEL, &mut rng);
        let global = (config.variant != Variant::LsaP)
            .then(|| BlockParams::register(&mut params, "head.global", d, ff, heads, GROUP_MODEL, &mut rng));
        let slots = config.layout.slots(config.k);
        let window_proj = Linear::register(&mut params, "head.window", slots * d, d, GROUP_MODEL, &mut rng);
        let head_in = if global.is_some() { 2 * d } else { d };
        let decision = Linear::register(&mut params, "head.decision", head_in, Polarity::COUNT, GROUP_MODEL, &mut rng);
        let eta_l = params.add("dwa.eta_l", Tensor::scalar(config.initial_eta[0]), GROUP_ETA);
        let eta_r = params.add("dwa.eta_r", Tensor::scalar(config.initial_eta[1]), GROUP_ETA);
        if config.eta != EtaMode::Learned {
            params.set_trainable(eta_l, false);
            params.set_trainable(eta_r, false);
        }
        Ok(LsaModel {
            config,
            vocab,
            params,
            encoder,
            local,
            global,
            window_proj,
            decision,
            eta_l,
            eta_r,
        })
    }

    /// Rebuilds a model from a checkpoint written with [`LsaModel::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| Error::Incompatible(format!("model config: {e}")))?;
        let vocab: Vocabulary = serde_json::from_value(meta["vocab"].clone())
            .map_err(|e| Error::Incompatible(format!("vocabulary: {e}")))?;
        let mut model = LsaModel::new(config, vocab, 0)?;
        ckpt.restore_into(&mut model.params)
            .map_err(|e| Error::Incompatible(e.to_string()))?;
        Ok(model)
    }

    /// Checkpoint carrying the model config and vocabulary plus `extra` meta.
    pub fn checkpoint(&self, extra: serde_json::Map<String, serde_json::Value>) -> Checkpoint {
        let mut meta = serde_json::Map::new();
        meta.insert("model".into(), serde_json::to_value(&self.config).expect("config serializes"));
        meta.insert("vocab".into(), serde_json::to_value(&self.vocab).expect("vocab serializes"));
        meta.extend(extra);
        Checkpoint::from_params(&self.params, serde_json::Value::Object(meta))
    }

    pub fn eta(&self) -> (f64, f64) {
        (self.params.value(self.eta_l).data()[0], self.params.value(self.eta_r).data()[0])
    }

    pub fn set_eta(&mut self, eta_l: f64, eta_r: f64) {
        self.params.set_value(self.eta_l, Tensor::scalar(eta_l)).expect("scalar");
        self.params.set_value(self.eta_r, Tensor::scalar(eta_r)).expect("scalar");
    }

    /// Freezes or unfreezes every encoder parameter.
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        for id in self.encoder.param_ids(&self.params) {
            self.params.set_trainable(id, trainable);
        }
    }

    /// Ids, weights and labels for one example.
    pub fn prepare(&self, example: &Example, parse: Option<&DependencyTree>) -> Result<PreparedExample> {
        let cfg = &self.config;
        let n = example.tokens.len();
        let mut used_fallback = false;
        let alignment = match (cfg.variant, parse) {
            (Variant::LsaS, Some(tree)) => {
                let al = align_to_parse(example, tree);
                used_fallback = al.is_none();
                al.map(|a| (tree, a))
            }
            (Variant::LsaS, None) => {
                used_fallback = true;
                None
            }
            _ => None,
        };
        let ids = if cfg.variant == Variant::LsaP {
            Vec::new()
        } else {
            if n + 2 > cfg.encoder.max_len {
                return Err(Error::TooLong {
                    len: n + 2,
                    max: cfg.encoder.max_len,
                });
            }
            let mut ids = Vec::with_capacity(n + 2);
            ids.push(Vocabulary::CLS_ID);
            ids.extend(self.vocab.ids(&example.tokens));
            ids.push(Vocabulary::SEP_ID);
            ids
        };
        let mut aspects = Vec::with_capacity(example.aspects.len());
        for a in &example.aspects {
            let (weights, spc_ids) = match cfg.variant {
                Variant::LsaP => (
                    Vec::new(),
                    build_spc_input(&self.vocab, &example.tokens, &a.term, cfg.encoder.max_len)?,
                ),
                _ => {
                    let distances = match &alignment {
                        Some((tree, al)) => syntactic_distances(n, a, tree, al)?,
                        None => positional_distances(n, a)?,
                    };
                    (lcf_weights(&distances, cfg.alpha, n), Vec::new())
                }
            };
            aspects.push(PreparedAspect {
                weights,
                spc_ids,
                gold: a.polarity.index(),
            });
        }
        Ok(PreparedExample {
            ids,
            aspects,
            used_fallback,
        })
    }

    fn needs_neighbours(&self) -> bool {
        self.config.layout != WindowLayout::TargetOnly
    }

    /// Aspect feature for LSA_T/LSA_S: weighted rows through the local block,
    /// pooled at position 0.
    pub fn aspect_feature_local(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        shared: &SharedProjections,
        weights: &[f64],
    ) -> Result<Var> {
        let rows = tape.shape(shared.x)[0];
        if weights.len() != rows {
            return Err(Error::InvalidExample {
                example: 0,
                message: format!("{} weights for {rows} positions", weights.len()),
            });
        }
        weighted_head_pool(tape, p, &self.local, shared, weights)
    }

    /// Key and value projections of the encoder output for the local block.
    pub fn local_projections(&self, tape: &mut Tape, p: &Bindings, hidden: Var) -> Result<SharedProjections> {
        SharedProjections::new(tape, p, &self.local, hidden)
    }

    /// Aspect feature for LSA_P from its sentence-pair ids.
    pub fn aspect_feature_spc(&self, tape: &mut Tape, p: &Bindings, spc_ids: &[usize]) -> Result<Var> {
        let hidden = encode(tape, p, &self.encoder, spc_ids, None)?;
        self_attention_head_pool(tape, p, &self.local, hidden)
    }

    pub fn project_window(&self, tape: &mut Tape, p: &Bindings, window: Var) -> Result<Var> {
        self.window_proj.forward(tape, p, window)
    }

    /// Logits and probabilities from `H^o` and, when present, the pooled
    /// global context.
    pub fn classify(&self, tape: &mut Tape, p: &Bindings, h_o: Var, global: Option<Var>) -> Result<AspectOutput> {
        let input = match global {
            Some(g) => tape.concat(&[h_o, g], 1)?,
            None => h_o,
        };
        let logits = self.decision.forward(tape, p, input)?;
        let probs = tape.softmax(logits)?;
        Ok(AspectOutput { logits, probs })
    }

    fn eta_vars(&self, p: &Bindings) -> Option<(Var, Var)> {
        match self.config.eta {
            EtaMode::Off => None,
            _ => Some((p[self.eta_l], p[self.eta_r])),
        }
    }

    /// Forward pass for the given target aspects of one example.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        example: &Example,
        prepared: &PreparedExample,
        targets: &[usize],
    ) -> Result<Vec<AspectOutput>> {
        let m = example.aspects.len();
        if prepared.aspects.len() != m {
            return Err(Error::InvalidExample {
                example: 0,
                message: "prepared input does not match example".into(),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::IndexOutOfRange {
                what: "aspect",
                index: t,
                len: m,
            });
        }
        let k = self.config.k;
        let mut needed = vec![false; m];
        for &t in targets {
            needed[t] = true;
            if self.needs_neighbours() {
                needed[t.saturating_sub(k)..(t + k + 1).min(m)].fill(true);
            }
        }
        let (hidden, global) = match self.config.variant {
            Variant::LsaP => (None, None),
            _ => {
                let h = encode(tape, p, &self.encoder, &prepared.ids, None)?;
                let g = self_attention_head_pool(tape, p, self.global.as_ref().expect("global block"), h)?;
                (Some(self.local_projections(tape, p, h)?), Some(g))
            }
        };
        // Unneeded slots hold a placeholder that is never read.
        let mut features: Vec<Option<Var>> = vec![None; m];
        for (j, a) in prepared.aspects.iter().enumerate() {
            if !needed[j] {
                continue;
            }
            features[j] = Some(match hidden {
                Some(ref shared) => self.aspect_feature_local(tape, p, shared, &a.weights)?,
                None => self.aspect_feature_spc(tape, p, &a.spc_ids)?,
            });
        }
        let placeholder = features.iter().flatten().next().copied();
        let features: Vec<Var> = features
            .into_iter()
            .map(|f| f.or(placeholder).expect("at least one target"))
            .collect();
        let eta = self.eta_vars(p);
        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            let window = build_window(example, &features, t, k)?;
            let h_dwa = apply_dwa(tape, &window, eta, self.config.layout)?;
            let h_o = self.project_window(tape, p, h_dwa)?;
            out.push(self.classify(tape, p, h_o, global)?);
        }
        Ok(out)
    }

    /// Probabilities for every aspect of `example` without recording gradients.
    pub fn predict(&self, example: &Example, prepared: &PreparedExample) -> Result<Vec<[f64; 3]>> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let targets: Vec<usize> = (0..example.aspects.len()).collect();
        let outputs = self.forward(&mut tape, &p, example, prepared, &targets)?;
        Ok(outputs
            .iter()
            .map(|o| {
                let d = tape.value(o.probs).data();
                [d[0], d[1], d[2]]
            })
            .collect())
    }
}
