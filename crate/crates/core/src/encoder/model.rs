use lsa_autodiff::{Bindings, ParamId, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Number of learned positions; inputs may not be longer.
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return fail("vocabulary needs at least the four reserved tokens".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return fail("encoder dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        Ok(())
    }
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// Normal weights with standard deviation `1 / sqrt(fan_in)`.
fn projection(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    Tensor::new(
        vec![fan_in, fan_out],
        (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect(),
    )
    .expect("shape matches")
}

/// Weight and bias of an affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, group: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: params.add(format!("{name}.w"), projection(rng, fan_in, fan_out), group),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        Ok(tape.add_row(y, p[self.b])?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register(params: &mut ParamSet, name: &str, d: usize, group: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.g"), Tensor::full(&[d], 1.0), group),
            bias: params.add(format!("{name}.b"), Tensor::zeros(&[d]), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, LN_EPS)?;
        let y = tape.mul_row(y, p[self.gain])?;
        Ok(tape.add_row(y, p[self.bias])?)
    }
}

/// Multi-head self-attention followed by a feed-forward layer, each with a
/// residual connection and a trailing layer norm.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl BlockParams {
    pub fn register(params: &mut ParamSet, name: &str, d: usize, ff: usize, heads: usize, group: usize, rng: &mut impl Rng) -> Self {
        BlockParams {
            query: Linear::register(params, &format!("{name}.q"), d, d, group, rng),
            key: Linear::register(params, &format!("{name}.k"), d, d, group, rng),
            value: Linear::register(params, &format!("{name}.v"), d, d, group, rng),
            output: Linear::register(params, &format!("{name}.o"), d, d, group, rng),
            norm1: LayerNorm::register(params, &format!("{name}.ln1"), d, group),
            ff1: Linear::register(params, &format!("{name}.ff1"), d, ff, group, rng),
            ff2: Linear::register(params, &format!("{name}.ff2"), ff, d, group, rng),
            norm2: LayerNorm::register(params, &format!("{name}.ln2"), d, group),
            heads,
        }
    }
}

/// Which rows of the block output to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rows {
    All,
    /// Only row 0; identical to row 0 of [`Rows::All`].
    First,
}

/// Output of one block plus the per-head attention matrices.
pub struct BlockOutput {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

pub fn self_attention_block_detailed(
    tape: &mut Tape,
    p: &Bindings,
    block: &BlockParams,
    x: Var,
    keep: Option<&[bool]>,
    rows: Rows,
) -> Result<BlockOutput> {
    let xq = match rows {
        Rows::All => x,
        Rows::First => tape.slice(x, 0, 0, 1)?,
    };
    let k = block.key.forward(tape, p, x)?;
    let v = block.value.forward(tape, p, x)?;
    block_from_keys(tape, p, block, xq, k, v, keep)
}

fn block_from_keys(
    tape: &mut Tape,
    p: &Bindings,
    block: &BlockParams,
    xq: Var,
    k: Var,
    v: Var,
    keep: Option<&[bool]>,
) -> Result<BlockOutput> {
    let d = tape.shape(xq)[1];
    let dh = d / block.heads;
    let q = block.query.forward(tape, p, xq)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(block.heads);
    let mut attention = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let (qh, kh, vh) = if block.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, h * dh, dh)?,
                tape.slice(k, 1, h * dh, dh)?,
                tape.slice(v, 1, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_const(scores, scale)?;
        let probs = tape.softmax_masked(scores, keep)?;
        contexts.push(tape.matmul(probs, vh)?);
        attention.push(probs);
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat(&contexts, 1)?
    };
    let attn = block.output.forward(tape, p, ctx)?;
    let h1 = tape.add(xq, attn)?;
    let h1 = block.norm1.forward(tape, p, h1)?;
    let f = block.ff1.forward(tape, p, h1)?;
    let f = tape.gelu(f)?;
    let f = block.ff2.forward(tape, p, f)?;
    let h2 = tape.add(h1, f)?;
    let hidden = block.norm2.forward(tape, p, h2)?;
    Ok(BlockOutput { hidden, attention })
}

/// Bias-free key and value projections of `x`, shared by every call to
/// [`weighted_head_pool`] over the same input.
#[derive(Debug, Clone, Copy)]
pub struct SharedProjections {
    pub x: Var,
    pub keys: Var,
    pub values: Var,
}

impl SharedProjections {
    pub fn new(tape: &mut Tape, p: &Bindings, block: &BlockParams, x: Var) -> Result<Self> {
        Ok(SharedProjections {
            x,
            keys: tape.matmul(x, p[block.key.w])?,
            values: tape.matmul(x, p[block.value.w])?,
        })
    }
}

/// Row 0 of [`self_attention_block`] applied to `x` with row `i` scaled by
/// `weights[i]`. Row scaling commutes with the key and value projections, so
/// only the cheap per-row rescaling is recomputed per call.
pub fn weighted_head_pool(
    tape: &mut Tape,
    p: &Bindings,
    block: &BlockParams,
    shared: &SharedProjections,
    weights: &[f64],
) -> Result<Var> {
    let k = tape.scale_rows(shared.keys, weights)?;
    let k = tape.add_row(k, p[block.key.b])?;
    let v = tape.scale_rows(shared.values, weights)?;
    let v = tape.add_row(v, p[block.value.b])?;
    let first = tape.slice(shared.x, 0, 0, 1)?;
    let xq = tape.mul_const(first, weights[0])?;
    Ok(block_from_keys(tape, p, block, xq, k, v, None)?.hidden)
}

/// One block application. `keep` masks key positions (padding).
pub fn self_attention_block(
    tape: &mut Tape,
    p: &Bindings,
    block: &BlockParams,
    x: Var,
    keep: Option<&[bool]>,
) -> Result<Var> {
    Ok(self_attention_block_detailed(tape, p, block, x, keep, Rows::All)?.hidden)
}

/// Row 0 of [`self_attention_block`], computed without the other query rows.
pub fn self_attention_head_pool(tape: &mut Tape, p: &Bindings, block: &BlockParams, x: Var) -> Result<Var> {
    Ok(self_attention_block_detailed(tape, p, block, x, None, Rows::First)?.hidden)
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn register(config: EncoderConfig, params: &mut ParamSet, group: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = params.add("enc.tok", uniform_tensor(rng, &[config.vocab_size, d], 0.1), group);
        let position_embedding = params.add("enc.pos", uniform_tensor(rng, &[config.max_len, d], 0.1), group);
        let blocks = (0..config.layers)
            .map(|l| BlockParams::register(params, &format!("enc.l{l}"), d, config.ff_dim, config.heads, group, rng))
            .collect();
        Ok(EncoderParams {
            config,
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    pub fn param_ids(&self, params: &ParamSet) -> Vec<ParamId> {
        params
            .iter()
            .filter(|(_, p)| p.name.starts_with("enc."))
            .map(|(id, _)| id)
            .collect()
    }
}

/// Hidden states (n x d) for an id sequence. `keep` marks non-padding
/// positions; masked positions are ignored as attention keys.
pub fn encode(tape: &mut Tape, p: &Bindings, enc: &EncoderParams, ids: &[usize], keep: Option<&[bool]>) -> Result<Var> {
    let cfg = &enc.config;
    if ids.len() > cfg.max_len {
        return Err(Error::TooLong {
            len: ids.len(),
            max: cfg.max_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::IndexOutOfRange {
            what: "token id",
            index: bad,
            len: cfg.vocab_size,
        });
    }
    let tok = tape.gather_rows(p[enc.token_embedding], ids)?;
    let pos = tape.slice(p[enc.position_embedding], 0, 0, ids.len())?;
    let mut h = tape.add(tok, pos)?;
    for block in &enc.blocks {
        h = self_attention_block(tape, p, block, h, keep)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(heads: usize) -> (ParamSet, EncoderParams) {
        let mut params = ParamSet::new();
        let cfg = EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            layers: 2,
            heads,
            ff_dim: 16,
            max_len: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = EncoderParams::register(cfg, &mut params, 0, &mut rng).unwrap();
        (params, enc)
    }

    #[test]
    fn output_shape_and_determinism() {
        let (params, enc) = setup(2);
        let run = || {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let h = encode(&mut tape, &b, &enc, &[2, 5, 6, 3], None).unwrap();
            tape.value(h).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[4, 8]);
        assert_eq!(a, run());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (params, enc) = setup(2);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        assert!(matches!(encode(&mut tape, &b, &enc, &[4; 11], None), Err(Error::TooLong { .. })));
        assert!(encode(&mut tape, &b, &enc, &[12], None).is_err());
        let mut bad = enc.config.clone();
        bad.heads = 3;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (params, enc) = setup(2);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.constant(uniform_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[5, 8], 1.0));
        let out = self_attention_block_detailed(&mut tape, &b, &enc.blocks[0], x, None, Rows::All).unwrap();
        for probs in out.attention {
            let t = tape.value(probs);
            for r in 0..5 {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let (params, enc) = setup(2);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.constant(uniform_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[1, 8], 1.0));
        let out = self_attention_block_detailed(&mut tape, &b, &enc.blocks[0], x, None, Rows::All).unwrap();
        for probs in out.attention {
            assert_eq!(tape.value(probs).data(), &[1.0]);
        }
    }

    #[test]
    fn head_pool_equals_first_row() {
        let (params, enc) = setup(2);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.constant(uniform_tensor(&mut ChaCha8Rng::seed_from_u64(3), &[6, 8], 1.0));
        let full = self_attention_block(&mut tape, &b, &enc.blocks[1], x, None).unwrap();
        let pooled = self_attention_head_pool(&mut tape, &b, &enc.blocks[1], x).unwrap();
        assert_eq!(tape.value(full).row(0), tape.value(pooled).data());
    }

    #[test]
    fn padding_does_not_leak_into_prefix() {
        let (params, enc) = setup(4);
        let ids = [2, 7, 8, 9, 3];
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let plain = encode(&mut tape, &b, &enc, &ids, None).unwrap();
        let padded_ids = [2, 7, 8, 9, 3, 0, 0, 0];
        let keep = [true, true, true, true, true, false, false, false];
        let padded = encode(&mut tape, &b, &enc, &padded_ids, Some(&keep)).unwrap();
        let n = ids.len() * 8;
        assert_eq!(tape.value(plain).data(), &tape.value(padded).data()[..n]);
    }
}
