//! Knowledge-aware attention and gated fusion.
//!
//! For token i with linked entity set E_i, attention over exactly E_i builds
//! a knowledge vector:
//!
//! ```text
//! z_i = sum_j softmax_j( (h_i Q) . (e_j K) / sqrt(d_a) ) * (e_j V)
//! ```
//!
//! and a learned sigmoid gate mixes it with the contextual vector:
//!
//! ```text
//! lambda_i = sigmoid( [h_i ; z_i] W_g + b_g )
//! fused_i  = lambda_i * h_i + (1 - lambda_i) * z_i
//! ```
//!
//! Tokens with an empty entity set pass through unchanged (`fused_i = h_i`,
//! bit-exact), which makes a run with no resolvable entities identical to a
//! knowledge-free model. A mention whose entity is missing from the encoded
//! subgraph falls back to the empty set and bumps `unresolved_mentions`;
//! with low subgraph coverage this is the expected signal path, not an error.

use rand::Rng;

use crate::graph_encoder::{xavier_matrix, EncodedNodes};
use crate::numerics::{ParamId, ParamSet, Result, Session, Tensor, ValueId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub d_lm: usize,
    pub d_kg: usize,
    /// Attention projection width (the softmax scale is 1/sqrt(d_attn)).
    pub d_attn: usize,
    /// Scalar gate per token instead of the default per-dimension gate.
    pub scalar_gate: bool,
}

/// Query/key/value attention maps plus the gate parameters.
pub struct FusionParams {
    pub config: FusionConfig,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
}

/// A mention span resolved to a graph node id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedMention {
    pub start: usize,
    pub end: usize,
    pub entity: usize,
}

/// Tape handles for one fused token.
pub struct TokenFusion {
    pub lm_row: ValueId,
    /// The knowledge vector z_i; `None` for tokens with empty entity sets.
    pub knowledge_row: Option<ValueId>,
    pub fused_row: ValueId,
    pub lambda_row: Option<ValueId>,
}

/// Result of fusing one sentence.
pub struct FuseOutput {
    /// n_tokens x d_lm fused matrix.
    pub fused: ValueId,
    pub tokens: Vec<TokenFusion>,
    pub knowledge_mask: Vec<bool>,
    pub unresolved_mentions: usize,
}

impl FuseOutput {
    /// Mean gate value over knowledge-bearing tokens; 1.0 (the passthrough
    /// sentinel) when no token carries knowledge.
    pub fn mean_lambda(&self, sess: &Session) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in &self.tokens {
            if let Some(l) = t.lambda_row {
                for &v in sess.tape.values(l) {
                    sum += v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            1.0
        } else {
            sum / count as f64
        }
    }

    /// Materialize the per-token diagnostics as plain tensors.
    pub fn to_representation(&self, sess: &Session) -> FusedRepresentation {
        let (n, d) = sess.tape.dims(self.fused);
        let h_fused = sess.tape.to_tensor(self.fused);
        let mut lambda = vec![1.0; n * d];
        let mut knowledge = vec![0.0; n * d];
        for (i, t) in self.tokens.iter().enumerate() {
            if let Some(l) = t.lambda_row {
                let lv = sess.tape.values(l);
                if lv.len() == 1 {
                    lambda[i * d..(i + 1) * d].fill(lv[0]);
                } else {
                    lambda[i * d..(i + 1) * d].copy_from_slice(lv);
                }
            }
            if let Some(k) = t.knowledge_row {
                knowledge[i * d..(i + 1) * d].copy_from_slice(sess.tape.values(k));
            }
        }
        FusedRepresentation {
            h_fused,
            lambda: Tensor::matrix(n, d, lambda).expect("finite"),
            knowledge_vectors: Tensor::matrix(n, d, knowledge).expect("finite"),
            knowledge_mask: self.knowledge_mask.clone(),
            unresolved_mentions: self.unresolved_mentions,
        }
    }
}

/// Per-token fusion diagnostics: gate values (all-ones sentinel rows for
/// tokens without knowledge), knowledge vectors (zero rows where absent), and
/// the knowledge mask.
#[derive(Debug, Clone)]
pub struct FusedRepresentation {
    pub h_fused: Tensor,
    pub lambda: Tensor,
    pub knowledge_vectors: Tensor,
    pub knowledge_mask: Vec<bool>,
    pub unresolved_mentions: usize,
}

impl FusionParams {
    /// Register attention and gate parameters under the `fuse.` prefix.
    ///
    /// The value projection maps into d_lm, so the gate's convex combination
    /// is well-typed without an extra projection.
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, config: FusionConfig) -> Result<Self> {
        let gate_cols = if config.scalar_gate { 1 } else { config.d_lm };
        Ok(FusionParams {
            q: ps.add("fuse.q", xavier_matrix(rng, config.d_lm, config.d_attn))?,
            k: ps.add("fuse.k", xavier_matrix(rng, config.d_kg, config.d_attn))?,
            v: ps.add("fuse.v", xavier_matrix(rng, config.d_kg, config.d_lm))?,
            w_g: ps.add("fuse.w_g", xavier_matrix(rng, 2 * config.d_lm, gate_cols))?,
            b_g: ps.add("fuse.b_g", Tensor::zeros(1, gate_cols))?,
            config,
        })
    }

    /// Attention of one token query over its entity rows, returning z_i.
    pub fn knowledge_attention(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        h_row: ValueId,
        entity_rows: ValueId,
    ) -> Result<ValueId> {
        Ok(self.attention_with_weights(sess, ps, h_row, entity_rows)?.0)
    }

    /// As [`knowledge_attention`](Self::knowledge_attention), also returning
    /// the softmax weights over the entity set.
    pub fn attention_with_weights(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        h_row: ValueId,
        entity_rows: ValueId,
    ) -> Result<(ValueId, ValueId)> {
        let q = sess.param(ps, self.q)?;
        let k = sess.param(ps, self.k)?;
        let v = sess.param(ps, self.v)?;
        let query = sess.tape.matmul(h_row, q)?;
        let keys = sess.tape.matmul(entity_rows, k)?;
        let keys_t = sess.tape.transpose(keys)?;
        let scores = sess.tape.matmul(query, keys_t)?;
        let scaled = sess.tape.scale(scores, 1.0 / (self.config.d_attn as f64).sqrt())?;
        let weights = sess.tape.softmax_rows(scaled)?;
        let values = sess.tape.matmul(entity_rows, v)?;
        let z = sess.tape.matmul(weights, values)?;
        Ok((z, weights))
    }

    /// Fuse every token of a sentence with its linked knowledge.
    ///
    /// The entity set of token i is the set of entities of all resolvable
    /// mentions covering i; mentions whose entity is not in `encoded` are
    /// counted in `unresolved_mentions` and contribute nothing.
    pub fn fuse_tokens(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        h_lm: ValueId,
        n_tokens: usize,
        mentions: &[ResolvedMention],
        encoded: &EncodedNodes,
    ) -> Result<FuseOutput> {
        let d = self.config.d_lm;
        debug_assert_eq!(sess.tape.dims(h_lm), (n_tokens, d));

        let mut unresolved = 0usize;
        let mut entity_sets: Vec<Vec<usize>> = vec![Vec::new(); n_tokens];
        for m in mentions {
            match encoded.row_of(m.entity) {
                Some(row) => {
                    for i in m.start..m.end.min(n_tokens) {
                        if !entity_sets[i].contains(&row) {
                            entity_sets[i].push(row);
                        }
                    }
                }
                None => unresolved += 1,
            }
        }
        for set in &mut entity_sets {
            set.sort_unstable();
        }

        let mut tokens = Vec::with_capacity(n_tokens);
        let mut fused_rows = Vec::with_capacity(n_tokens);
        let mut knowledge_mask = vec![false; n_tokens];
        for (i, set) in entity_sets.iter().enumerate() {
            let lm_row = sess.tape.gather_rows(h_lm, &[i])?;
            if set.is_empty() {
                fused_rows.push(lm_row);
                tokens.push(TokenFusion {
                    lm_row,
                    knowledge_row: None,
                    fused_row: lm_row,
                    lambda_row: None,
                });
                continue;
            }
            knowledge_mask[i] = true;
            let entity_rows = sess.tape.gather_rows(encoded.rows, set)?;
            let z = self.knowledge_attention(sess, ps, lm_row, entity_rows)?;
            let cat = sess.tape.concat_cols(&[lm_row, z])?;
            let w_g = sess.param(ps, self.w_g)?;
            let b_g = sess.param(ps, self.b_g)?;
            let pre = sess.tape.matmul(cat, w_g)?;
            let pre = sess.tape.add_bias_rows(pre, b_g)?;
            let lambda = sess.tape.sigmoid(pre)?;
            let fused = if self.config.scalar_gate {
                let one = sess.constant(&Tensor::scalar(1.0)?)?;
                let om = sess.tape.sub(one, lambda)?;
                let th = sess.tape.mul_scalar(lm_row, lambda)?;
                let tk = sess.tape.mul_scalar(z, om)?;
                sess.tape.add(th, tk)?
            } else {
                let ones = sess.constant(&Tensor::matrix(1, d, vec![1.0; d])?)?;
                let om = sess.tape.sub(ones, lambda)?;
                let th = sess.tape.mul(lambda, lm_row)?;
                let tk = sess.tape.mul(om, z)?;
                sess.tape.add(th, tk)?
            };
            fused_rows.push(fused);
            tokens.push(TokenFusion {
                lm_row,
                knowledge_row: Some(z),
                fused_row: fused,
                lambda_row: Some(lambda),
            });
        }
        let fused = sess.tape.stack_rows(&fused_rows)?;
        Ok(FuseOutput {
            fused,
            tokens,
            knowledge_mask,
            unresolved_mentions: unresolved,
        })
    }
}
