use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph_encoder::{embedding_matrix, xavier_matrix};
use crate::numerics::{ParamId, ParamSet, Session, Tensor, ValueId};

use super::{ContextError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_lm: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_lm: 32,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 64,
            max_len: 64,
        }
    }
}

struct HeadParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

struct Block {
    heads: Vec<HeadParams>,
    wo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

/// Post-norm causal transformer encoder: token + learned positional
/// embeddings, multi-head self-attention, two-layer feed-forward, residual
/// connections and layer normalization.
pub struct ContextEncoder {
    pub config: TransformerConfig,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    blocks: Vec<Block>,
}

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e30;

impl ContextEncoder {
    /// Register all transformer parameters under the `ctx.` prefix.
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        vocab_size: usize,
        config: TransformerConfig,
    ) -> Result<Self> {
        assert!(
            config.d_lm % config.n_heads == 0,
            "d_lm must be divisible by n_heads"
        );
        let d = config.d_lm;
        let dh = d / config.n_heads;
        let token_emb = ps.add("ctx.token_emb", embedding_matrix(rng, vocab_size, d))?;
        let pos_emb = ps.add("ctx.pos_emb", embedding_matrix(rng, config.max_len, d))?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let mut heads = Vec::with_capacity(config.n_heads);
            for h in 0..config.n_heads {
                heads.push(HeadParams {
                    wq: ps.add(format!("ctx.b{b}.h{h}.wq"), xavier_matrix(rng, d, dh))?,
                    wk: ps.add(format!("ctx.b{b}.h{h}.wk"), xavier_matrix(rng, d, dh))?,
                    wv: ps.add(format!("ctx.b{b}.h{h}.wv"), xavier_matrix(rng, d, dh))?,
                });
            }
            blocks.push(Block {
                heads,
                wo: ps.add(format!("ctx.b{b}.wo"), xavier_matrix(rng, d, d))?,
                ln1_gamma: ps.add(format!("ctx.b{b}.ln1.gamma"), ones(1, d))?,
                ln1_beta: ps.add(format!("ctx.b{b}.ln1.beta"), Tensor::zeros(1, d))?,
                ff_w1: ps.add(format!("ctx.b{b}.ff.w1"), xavier_matrix(rng, d, config.d_ff))?,
                ff_b1: ps.add(format!("ctx.b{b}.ff.b1"), Tensor::zeros(1, config.d_ff))?,
                ff_w2: ps.add(format!("ctx.b{b}.ff.w2"), xavier_matrix(rng, config.d_ff, d))?,
                ff_b2: ps.add(format!("ctx.b{b}.ff.b2"), Tensor::zeros(1, d))?,
                ln2_gamma: ps.add(format!("ctx.b{b}.ln2.gamma"), ones(1, d))?,
                ln2_beta: ps.add(format!("ctx.b{b}.ln2.beta"), Tensor::zeros(1, d))?,
            });
        }
        Ok(ContextEncoder {
            config,
            token_emb,
            pos_emb,
            blocks,
        })
    }

    /// Encode token ids into one contextual vector per position.
    ///
    /// `attn_mask[j] = false` removes position j from every attention
    /// softmax (PAD positions); rows are additionally causally masked.
    pub fn encode(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        token_ids: &[usize],
        attn_mask: &[bool],
    ) -> Result<ValueId> {
        Ok(self.encode_with_attention(sess, ps, token_ids, attn_mask)?.0)
    }

    /// Like [`encode`](Self::encode) but also returns every attention matrix
    /// (blocks x heads, in order) for diagnostics and tests.
    pub fn encode_with_attention(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        token_ids: &[usize],
        attn_mask: &[bool],
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let n = token_ids.len();
        if n > self.config.max_len {
            return Err(ContextError::TooLong {
                len: n,
                max_len: self.config.max_len,
            });
        }
        if attn_mask.len() != n {
            return Err(ContextError::MaskLength {
                mask_len: attn_mask.len(),
                len: n,
            });
        }
        let dh = self.config.d_lm / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let token_table = sess.param(ps, self.token_emb)?;
        let pos_table = sess.param(ps, self.pos_emb)?;
        let tok = sess.tape.gather_rows(token_table, token_ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = sess.tape.gather_rows(pos_table, &positions)?;
        let mut x = sess.tape.add(tok, pos)?;

        // keep[i][j]: causal and not masked out.
        let keep: Vec<bool> = (0..n)
            .flat_map(|i| (0..n).map(move |j| j <= i && attn_mask[j]))
            .collect();

        let mut attentions = Vec::new();
        for block in &self.blocks {
            let mut head_outputs = Vec::with_capacity(block.heads.len());
            for head in &block.heads {
                let wq = sess.param(ps, head.wq)?;
                let wk = sess.param(ps, head.wk)?;
                let wv = sess.param(ps, head.wv)?;
                let q = sess.tape.matmul(x, wq)?;
                let k = sess.tape.matmul(x, wk)?;
                let v = sess.tape.matmul(x, wv)?;
                let kt = sess.tape.transpose(k)?;
                let scores = sess.tape.matmul(q, kt)?;
                let scaled = sess.tape.scale(scores, scale)?;
                let masked = sess.tape.masked_fill(scaled, keep.clone(), MASK_FILL)?;
                let attn = sess.tape.softmax_rows(masked)?;
                attentions.push(attn);
                head_outputs.push(sess.tape.matmul(attn, v)?);
            }
            let concat = sess.tape.concat_cols(&head_outputs)?;
            let wo = sess.param(ps, block.wo)?;
            let attn_out = sess.tape.matmul(concat, wo)?;
            let res1 = sess.tape.add(x, attn_out)?;
            let g1 = sess.param(ps, block.ln1_gamma)?;
            let b1 = sess.param(ps, block.ln1_beta)?;
            x = sess.tape.layer_norm_rows(res1, g1, b1, LN_EPS)?;

            let w1 = sess.param(ps, block.ff_w1)?;
            let fb1 = sess.param(ps, block.ff_b1)?;
            let w2 = sess.param(ps, block.ff_w2)?;
            let fb2 = sess.param(ps, block.ff_b2)?;
            let h1 = sess.tape.matmul(x, w1)?;
            let h1 = sess.tape.add_bias_rows(h1, fb1)?;
            let h1 = sess.tape.relu(h1)?;
            let h2 = sess.tape.matmul(h1, w2)?;
            let h2 = sess.tape.add_bias_rows(h2, fb2)?;
            let res2 = sess.tape.add(x, h2)?;
            let g2 = sess.param(ps, block.ln2_gamma)?;
            let b2 = sess.param(ps, block.ln2_beta)?;
            x = sess.tape.layer_norm_rows(res2, g2, b2, LN_EPS)?;
        }
        Ok((x, attentions))
    }
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, vec![1.0; rows * cols]).expect("finite")
}

/// Linear head scoring entities from a fused token representation.
pub struct EntityHead {
    pub weight: ParamId,
    pub n_entities: usize,
}

impl EntityHead {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        d_fused: usize,
        n_entities: usize,
    ) -> Result<Self> {
        let weight = ps.add("head.entity", xavier_matrix(rng, d_fused, n_entities))?;
        Ok(EntityHead { weight, n_entities })
    }

    /// Unnormalized scores over entities for one fused row (1 x d).
    pub fn logits(&self, sess: &mut Session, ps: &ParamSet, fused_row: ValueId) -> Result<ValueId> {
        let w = sess.param(ps, self.weight)?;
        Ok(sess.tape.matmul(fused_row, w)?)
    }
}

/// Linear head scoring next tokens from fused representations.
pub struct VocabHead {
    pub weight: ParamId,
    pub vocab_size: usize,
}

impl VocabHead {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        d_fused: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        let weight = ps.add("head.vocab", xavier_matrix(rng, d_fused, vocab_size))?;
        Ok(VocabHead { weight, vocab_size })
    }

    /// Next-token scores for every row of a fused matrix (n x d).
    pub fn logits(&self, sess: &mut Session, ps: &ParamSet, fused: ValueId) -> Result<ValueId> {
        let w = sess.param(ps, self.weight)?;
        Ok(sess.tape.matmul(fused, w)?)
    }
}
