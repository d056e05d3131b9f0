use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context_encoder::{
    greedy_decode, ContextEncoder, EntityHead, TransformerConfig, VocabHead, Vocabulary, PAD_ID,
};
use crate::fusion::{FuseOutput, FusionConfig, FusionParams, ResolvedMention};
use crate::graph_encoder::{EncodedNodes, RgcnConfig, RgcnEncoder};
use crate::kgdata::hash::derive_seed;
use crate::kgdata::{KnowledgeGraph, LinkedSentence};
use crate::numerics::{ParamSet, Session, Tensor, ValueId};

use super::{streams, Result, TrainConfig, TrainError};

/// A sentence prepared for the model: token ids, graph-resolved mentions,
/// and the gold target.
#[derive(Debug, Clone)]
pub struct PreparedSentence {
    pub token_ids: Vec<usize>,
    pub mentions: Vec<ResolvedMention>,
    pub target_position: usize,
    pub target_entity: usize,
}

/// Model output for one sentence during evaluation.
#[derive(Debug, Clone)]
pub struct SentencePrediction {
    pub predicted_entity: usize,
    pub gold_entity: usize,
    pub unresolved_mentions: usize,
}

/// Tape handles for one sentence's losses.
pub struct SentenceLosses {
    pub task: ValueId,
    pub align: Option<ValueId>,
    pub fuse: Option<FuseOutput>,
}

/// The assembled model: R-GCN graph encoder, transformer context encoder,
/// fusion gate, and the two heads, all over one parameter set.
pub struct Model {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub vocab: Vocabulary,
    /// Entity and relation indices the model was built against; checkpoints
    /// embed them and evaluation validates the graph against them.
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub rgcn: RgcnEncoder,
    pub encoder: ContextEncoder,
    pub fusion: FusionParams,
    pub entity_head: EntityHead,
    pub vocab_head: VocabHead,
}

impl Model {
    /// Build a fresh model with seeded initialization.
    ///
    /// The parameter set is identical for every configuration flag that only
    /// changes the forward wiring (`knowledge_free`, `disable_alignment`), so
    /// equivalence runs start from bit-identical weights.
    pub fn new(config: &TrainConfig, graph: &KnowledgeGraph, vocab: Vocabulary) -> Result<Model> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, streams::INIT));
        let rgcn = RgcnEncoder::new(
            &mut params,
            &mut rng,
            graph.n_entities(),
            graph.n_relations(),
            RgcnConfig {
                d_kg: config.d_kg,
                n_layers: config.rgcn_layers,
                add_inverse_edges: config.add_inverse_edges,
            },
        )?;
        let encoder = ContextEncoder::new(
            &mut params,
            &mut rng,
            vocab.len(),
            TransformerConfig {
                d_lm: config.d_lm,
                n_heads: config.n_heads,
                n_blocks: config.n_blocks,
                d_ff: config.d_ff,
                max_len: config.max_len,
            },
        )?;
        let fusion = FusionParams::new(
            &mut params,
            &mut rng,
            FusionConfig {
                d_lm: config.d_lm,
                d_kg: config.d_kg,
                d_attn: config.d_attn,
                scalar_gate: config.scalar_gate,
            },
        )?;
        let entity_head = EntityHead::new(&mut params, &mut rng, config.d_lm, graph.n_entities())?;
        let vocab_head = VocabHead::new(&mut params, &mut rng, config.d_lm, vocab.len())?;
        if config.freeze_context_encoder {
            params.freeze_prefix("ctx.");
        }
        Ok(Model {
            config: config.clone(),
            params,
            vocab,
            entities: graph.entity_names().to_vec(),
            relations: graph.relation_names().to_vec(),
            rgcn,
            encoder,
            fusion,
            entity_head,
            vocab_head,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    /// Resolve a corpus against the vocabulary and graph.
    pub fn prepare_sentences(
        &self,
        graph: &KnowledgeGraph,
        corpus: &[LinkedSentence],
    ) -> Result<Vec<PreparedSentence>> {
        prepare_sentences(&self.vocab, graph, corpus, self.config.max_len)
    }

    /// Encode and fuse one sentence, returning the fused matrix and the
    /// fusion handles (absent on the knowledge-free path).
    pub fn fused_forward(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        sentence: &PreparedSentence,
        encoded: Option<&EncodedNodes>,
    ) -> Result<(ValueId, Option<FuseOutput>)> {
        let n = sentence.token_ids.len();
        let mask = vec![true; n];
        let h_lm = self.encoder.encode(sess, ps, &sentence.token_ids, &mask)?;
        match encoded {
            None => Ok((h_lm, None)),
            Some(encoded) => {
                let fuse = self
                    .fusion
                    .fuse_tokens(sess, ps, h_lm, n, &sentence.mentions, encoded)?;
                Ok((fuse.fused, Some(fuse)))
            }
        }
    }

    /// Task loss (entity cross-entropy + weighted LM term) and, when active,
    /// the alignment term for one sentence.
    pub fn sentence_losses(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        sentence: &PreparedSentence,
        encoded: Option<&EncodedNodes>,
    ) -> Result<SentenceLosses> {
        let (fused, fuse) = self.fused_forward(sess, ps, sentence, encoded)?;
        let n = sentence.token_ids.len();

        let target_row = sess.tape.gather_rows(fused, &[sentence.target_position])?;
        let entity_logits = self.entity_head.logits(sess, ps, target_row)?;
        let mut task = sess
            .tape
            .cross_entropy_sum_rows(entity_logits, &[sentence.target_entity])?;

        if self.config.lm_loss_weight != 0.0 && n >= 2 {
            let context_rows: Vec<usize> = (0..n - 1).collect();
            let inputs = sess.tape.gather_rows(fused, &context_rows)?;
            let logits = self.vocab_head.logits(sess, ps, inputs)?;
            let lm_sum = sess
                .tape
                .cross_entropy_sum_rows(logits, &sentence.token_ids[1..])?;
            let lm_mean = sess
                .tape
                .scale(lm_sum, self.config.lm_loss_weight / (n - 1) as f64)?;
            task = sess.tape.add(task, lm_mean)?;
        }

        let align = match (&fuse, self.config.alignment_active()) {
            (Some(fuse), true) => {
                alignment_loss_on_tape(sess, fuse, self.config.align_stop_grad_kg)?
            }
            _ => None,
        };
        Ok(SentenceLosses { task, align, fuse })
    }

    /// Entity prediction for one sentence (argmax, smallest id on ties).
    pub fn predict(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        sentence: &PreparedSentence,
        encoded: Option<&EncodedNodes>,
    ) -> Result<SentencePrediction> {
        let (fused, fuse) = self.fused_forward(sess, ps, sentence, encoded)?;
        let target_row = sess.tape.gather_rows(fused, &[sentence.target_position])?;
        let logits = self.entity_head.logits(sess, ps, target_row)?;
        let predicted = crate::context_encoder::argmax_ties_low(sess.tape.values(logits));
        Ok(SentencePrediction {
            predicted_entity: predicted,
            gold_entity: sentence.target_entity,
            unresolved_mentions: fuse.map_or(0, |f| f.unresolved_mentions),
        })
    }

    /// Greedy continuation of a prompt, fusing knowledge for mentions that
    /// lie fully inside the prompt. PAD acts as the end marker.
    pub fn generate(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        prompt_ids: &[usize],
        mentions: &[ResolvedMention],
        max_new: usize,
        encoded: Option<&EncodedNodes>,
    ) -> Result<Vec<usize>> {
        let budget = max_new.min(self.config.max_len.saturating_sub(prompt_ids.len()));
        let prompt_mentions: Vec<ResolvedMention> = mentions
            .iter()
            .copied()
            .filter(|m| m.end <= prompt_ids.len())
            .collect();
        greedy_decode(prompt_ids, budget, PAD_ID, |seq| -> Result<Vec<f64>> {
            let sentence = PreparedSentence {
                token_ids: seq.to_vec(),
                mentions: prompt_mentions.clone(),
                target_position: 0,
                target_entity: 0,
            };
            let (fused, _) = self.fused_forward(sess, ps, &sentence, encoded)?;
            let last = sess.tape.gather_rows(fused, &[seq.len() - 1])?;
            let logits = self.vocab_head.logits(sess, ps, last)?;
            Ok(sess.tape.values(logits).to_vec())
        })
    }
}

/// Resolve tokens, mentions, and targets for the model.
pub fn prepare_sentences(
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
    corpus: &[LinkedSentence],
    max_len: usize,
) -> Result<Vec<PreparedSentence>> {
    let mut out = Vec::with_capacity(corpus.len());
    for (index, s) in corpus.iter().enumerate() {
        if s.tokens.len() > max_len {
            return Err(TrainError::SentenceTooLong {
                index,
                len: s.tokens.len(),
                max_len,
            });
        }
        let mut mentions = Vec::with_capacity(s.mentions.len());
        for m in &s.mentions {
            let entity = graph
                .entity_id(&m.entity)
                .ok_or_else(|| TrainError::UnknownEntity(m.entity.clone()))?;
            mentions.push(ResolvedMention {
                start: m.start,
                end: m.end,
                entity,
            });
        }
        let target_entity = graph
            .entity_id(&s.target.entity)
            .ok_or_else(|| TrainError::UnknownEntity(s.target.entity.clone()))?;
        out.push(PreparedSentence {
            token_ids: vocab.encode(&s.tokens),
            mentions,
            target_position: s.target.position,
            target_entity,
        });
    }
    Ok(out)
}

/// Alignment term on the tape: sum over knowledge-bearing tokens of the
/// squared distance between the contextual row and the knowledge vector.
/// Returns `None` when no token carries knowledge.
pub fn alignment_loss_on_tape(
    sess: &mut Session,
    fuse: &FuseOutput,
    stop_grad_kg: bool,
) -> Result<Option<ValueId>> {
    let mut total: Option<ValueId> = None;
    for token in &fuse.tokens {
        let Some(z) = token.knowledge_row else { continue };
        let z = if stop_grad_kg {
            let detached = sess.tape.to_tensor(z);
            sess.constant(&detached)?
        } else {
            z
        };
        let diff = sess.tape.sub(token.lm_row, z)?;
        let sq = sess.tape.mul(diff, diff)?;
        let s = sess.tape.sum_all(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => sess.tape.add(t, s)?,
        });
    }
    Ok(total)
}

/// Value-level alignment loss: sum over masked-in rows of the squared
/// Euclidean distance. Shapes must agree; rows with `mask == false`
/// contribute zero.
pub fn alignment_loss_value(
    h_lm: &Tensor,
    knowledge: &Tensor,
    mask: &[bool],
) -> Result<f64> {
    if h_lm.dims() != knowledge.dims() || mask.len() != h_lm.dims().0 {
        return Err(TrainError::Numerics(
            crate::numerics::NumericsError::ShapeMismatch {
                op: "alignment_loss",
                left: h_lm.shape().to_vec(),
                right: knowledge.shape().to_vec(),
            },
        ));
    }
    let (n, d) = h_lm.dims();
    let mut total = 0.0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for j in 0..d {
            let diff = h_lm.values()[i * d + j] - knowledge.values()[i * d + j];
            total += diff * diff;
        }
    }
    Ok(total)
}
