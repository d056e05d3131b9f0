//! Relational graph convolution over entity subgraphs.
//!
//! Each layer computes, per node v:
//!
//! ```text
//! h_v' = relu( h_v * W_self  +  sum over incoming edges (u, r, v) of
//!              (1 / c_{v,r}) * h_u * W_r )
//! ```
//!
//! where `c_{v,r}` is the number of incoming r-edges at v inside the
//! subgraph. Node vectors are rows and linear maps multiply on the right.
//! Messages flow head -> tail; `add_inverse_edges` additionally sends each
//! edge's message tail -> head with the same relation weight, normalized by
//! the outgoing count.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use thiserror::Error;

use crate::kgdata::EntitySubgraph;
use crate::numerics::{NumericsError, ParamId, ParamSet, Session, Tensor, ValueId};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("no weight matrix for relation id {relation}; encoder has {available} relations")]
    MissingRelationWeight { relation: usize, available: usize },
    #[error("node id {0} outside the entity embedding table")]
    NodeOutOfTable(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RgcnConfig {
    pub d_kg: usize,
    pub n_layers: usize,
    pub add_inverse_edges: bool,
}

impl Default for RgcnConfig {
    fn default() -> Self {
        RgcnConfig {
            d_kg: 32,
            n_layers: 2,
            add_inverse_edges: false,
        }
    }
}

struct RgcnLayer {
    w_self: ParamId,
    w_rel: Vec<ParamId>,
}

/// The R-GCN parameter bundle: a shared entity embedding table plus one
/// self-loop and one per-relation weight matrix per layer.
pub struct RgcnEncoder {
    pub config: RgcnConfig,
    pub n_entities: usize,
    pub n_relations: usize,
    pub entity_table: ParamId,
    layers: Vec<RgcnLayer>,
}

/// Embeddings for the nodes of one encoded subgraph: `rows` holds one row per
/// node in `node_ids` order.
#[derive(Debug)]
pub struct EncodedNodes {
    pub node_ids: Vec<usize>,
    pub rows: ValueId,
    index: HashMap<usize, usize>,
}

impl EncodedNodes {
    fn new(node_ids: Vec<usize>, rows: ValueId) -> Self {
        let index = node_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        EncodedNodes { node_ids, rows, index }
    }

    /// Wrap an existing tape value as node embeddings, one row per id.
    pub fn from_rows(node_ids: Vec<usize>, rows: ValueId) -> Self {
        Self::new(node_ids, rows)
    }

    /// Row index of a graph node id, if that node was encoded.
    pub fn row_of(&self, node: usize) -> Option<usize> {
        self.index.get(&node).copied()
    }
}

pub fn xavier_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, values).expect("finite init")
}

pub fn embedding_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-0.5..0.5)).collect();
    Tensor::matrix(rows, cols, values).expect("finite init")
}

impl RgcnEncoder {
    /// Register all R-GCN parameters under the `kg.` prefix.
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        n_entities: usize,
        n_relations: usize,
        config: RgcnConfig,
    ) -> Result<Self> {
        let d = config.d_kg;
        let entity_table = ps.add("kg.entity_table", embedding_matrix(rng, n_entities, d))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let w_self = ps.add(format!("kg.l{l}.w_self"), xavier_matrix(rng, d, d))?;
            let mut w_rel = Vec::with_capacity(n_relations);
            for r in 0..n_relations {
                w_rel.push(ps.add(format!("kg.l{l}.w_rel{r}"), xavier_matrix(rng, d, d))?);
            }
            layers.push(RgcnLayer { w_self, w_rel });
        }
        Ok(RgcnEncoder {
            config,
            n_entities,
            n_relations,
            entity_table,
            layers,
        })
    }

    /// Layer-0 features: the embedding-table rows of the subgraph nodes.
    pub fn init_node_features(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        sub: &EntitySubgraph,
    ) -> Result<EncodedNodes> {
        let node_ids = sub.node_ids();
        for &v in &node_ids {
            if v >= self.n_entities {
                return Err(EncoderError::NodeOutOfTable(v));
            }
        }
        let table = sess.param(ps, self.entity_table)?;
        let rows = sess.tape.gather_rows(table, &node_ids)?;
        Ok(EncodedNodes::new(node_ids, rows))
    }

    /// One relational convolution layer over the subgraph.
    pub fn layer_forward(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        layer: usize,
        sub: &EntitySubgraph,
        features: &EncodedNodes,
    ) -> Result<EncodedNodes> {
        let n = features.node_ids.len();
        let params = &self.layers[layer];
        let w_self = sess.param(ps, params.w_self)?;
        let mut pre = sess.tape.matmul(features.rows, w_self)?;

        // Group edges by relation; BTreeMap keeps relation order stable.
        let mut by_rel: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for &(h, r, t) in &sub.edges {
            by_rel.entry(r).or_default().push((h, t));
        }
        for (r, edges) in by_rel {
            if r >= params.w_rel.len() {
                return Err(EncoderError::MissingRelationWeight {
                    relation: r,
                    available: params.w_rel.len(),
                });
            }
            let w_r = sess.param(ps, params.w_rel[r])?;
            pre = self.relation_messages(
                sess,
                &edges,
                features,
                w_r,
                pre,
                n,
                /*reverse=*/ false,
            )?;
            if self.config.add_inverse_edges {
                pre = self.relation_messages(sess, &edges, features, w_r, pre, n, true)?;
            }
        }
        let rows = sess.tape.relu(pre)?;
        Ok(EncodedNodes::new(features.node_ids.clone(), rows))
    }

    fn relation_messages(
        &self,
        sess: &mut Session,
        edges: &[(usize, usize)],
        features: &EncodedNodes,
        w_r: ValueId,
        pre: ValueId,
        n: usize,
        reverse: bool,
    ) -> Result<ValueId> {
        let (src, dst): (Vec<usize>, Vec<usize>) = edges
            .iter()
            .map(|&(h, t)| if reverse { (t, h) } else { (h, t) })
            .unzip();
        let src_local: Vec<usize> = src
            .iter()
            .map(|v| features.row_of(*v).expect("edge endpoint inside subgraph"))
            .collect();
        let dst_local: Vec<usize> = dst
            .iter()
            .map(|v| features.row_of(*v).expect("edge endpoint inside subgraph"))
            .collect();
        // c: per-destination incoming count under this relation/direction.
        let mut count: HashMap<usize, f64> = HashMap::new();
        for &d in &dst_local {
            *count.entry(d).or_insert(0.0) += 1.0;
        }
        let weights: Vec<f64> = dst_local.iter().map(|d| 1.0 / count[d]).collect();
        let gathered = sess.tape.gather_rows(features.rows, &src_local)?;
        let msg = sess.tape.matmul(gathered, w_r)?;
        let agg = sess.tape.scatter_add_rows(msg, &dst_local, &weights, n)?;
        Ok(sess.tape.add(pre, agg)?)
    }

    /// Full encode: layer-0 features through all convolution layers.
    pub fn encode(
        &self,
        sess: &mut Session,
        ps: &ParamSet,
        sub: &EntitySubgraph,
    ) -> Result<EncodedNodes> {
        let mut features = self.init_node_features(sess, ps, sub)?;
        for l in 0..self.layers.len() {
            features = self.layer_forward(sess, ps, l, sub, &features)?;
        }
        Ok(features)
    }
}
