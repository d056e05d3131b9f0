use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use super::{DataError, Result};

/// One head–relation–tail fact with string identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// An edge in integer id space: (head id, relation id, tail id).
pub type Edge = (usize, usize, usize);

/// A knowledge graph with first-appearance entity/relation indices,
/// deduplicated edges, and per-node incoming/outgoing adjacency.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    entity_index: HashMap<String, usize>,
    relations: Vec<String>,
    relation_index: HashMap<String, usize>,
    edges: Vec<Edge>,
    /// Per node: outgoing (relation, tail) pairs in edge insertion order.
    out_adj: Vec<Vec<(usize, usize)>>,
    /// Per node: incoming (relation, head) pairs in edge insertion order.
    in_adj: Vec<Vec<(usize, usize)>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build a graph from triples, assigning ids in first-appearance order
    /// and dropping duplicate edges.
    pub fn from_triples<I: IntoIterator<Item = Triple>>(triples: I) -> Self {
        let mut g = KnowledgeGraph::new();
        let mut seen: HashSet<Edge> = HashSet::new();
        for t in triples {
            let h = g.intern_entity(&t.head);
            let r = g.intern_relation(&t.relation);
            let tl = g.intern_entity(&t.tail);
            let edge = (h, r, tl);
            if seen.insert(edge) {
                g.push_edge(edge);
            }
        }
        g
    }

    fn intern_entity(&mut self, name: &str) -> usize {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = self.entities.len();
        self.entities.push(name.to_string());
        self.entity_index.insert(name.to_string(), id);
        self.out_adj.push(Vec::new());
        self.in_adj.push(Vec::new());
        id
    }

    fn intern_relation(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        let id = self.relations.len();
        self.relations.push(name.to_string());
        self.relation_index.insert(name.to_string(), id);
        id
    }

    fn push_edge(&mut self, (h, r, t): Edge) {
        self.edges.push((h, r, t));
        self.out_adj[h].push((r, t));
        self.in_adj[t].push((r, h));
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entities[id]
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn outgoing(&self, node: usize) -> &[(usize, usize)] {
        &self.out_adj[node]
    }

    pub fn incoming(&self, node: usize) -> &[(usize, usize)] {
        &self.in_adj[node]
    }

    /// Serialize as the same TSV format `parse_triples` reads.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for &(h, r, t) in &self.edges {
            out.push_str(&self.entities[h]);
            out.push('\t');
            out.push_str(&self.relations[r]);
            out.push('\t');
            out.push_str(&self.entities[t]);
            out.push('\n');
        }
        out
    }

    /// Check that adjacency is exactly the inverse image of the edge list.
    pub fn validate(&self) -> bool {
        let mut rebuilt_out: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.entities.len()];
        let mut rebuilt_in: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.entities.len()];
        let mut seen = HashSet::new();
        for &(h, r, t) in &self.edges {
            if h >= self.entities.len() || t >= self.entities.len() || r >= self.relations.len() {
                return false;
            }
            if !seen.insert((h, r, t)) {
                return false;
            }
            rebuilt_out[h].push((r, t));
            rebuilt_in[t].push((r, h));
        }
        rebuilt_out == self.out_adj && rebuilt_in == self.in_adj
    }
}

/// Parse UTF-8 TSV triples: one `head<TAB>relation<TAB>tail` per line,
/// `#` comment lines and blank lines ignored.
pub fn parse_triples<R: BufRead>(reader: R) -> Result<KnowledgeGraph> {
    let mut triples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::BadFieldCount {
                line: line_no,
                got: fields.len(),
            });
        }
        let trimmed: Vec<&str> = fields.iter().map(|f| f.trim()).collect();
        if trimmed.iter().any(|f| f.is_empty()) {
            return Err(DataError::EmptyField { line: line_no });
        }
        triples.push(Triple {
            head: trimmed[0].to_string(),
            relation: trimmed[1].to_string(),
            tail: trimmed[2].to_string(),
        });
    }
    Ok(KnowledgeGraph::from_triples(triples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_triple() {
        let g = parse_triples("Paris\tcapital_of\tFrance\n".as_bytes()).unwrap();
        assert_eq!(g.n_entities(), 2);
        assert_eq!(g.n_relations(), 1);
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.entity_name(0), "Paris");
        assert_eq!(g.entity_name(1), "France");
        assert!(g.validate());
    }

    #[test]
    fn empty_input_gives_empty_graph() {
        let g = parse_triples("".as_bytes()).unwrap();
        assert_eq!(g.n_entities(), 0);
        assert_eq!(g.n_edges(), 0);
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let src = "# header\n\na\tr\tb\n   \n# trailing\n";
        let g = parse_triples(src.as_bytes()).unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn duplicate_lines_dedup_to_one_edge() {
        let src = "a\tr\tb\na\tr\tb\n";
        let g = parse_triples(src.as_bytes()).unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn field_count_error_carries_line_number() {
        let err = parse_triples("a\tr\tb\nx\ty\n".as_bytes()).unwrap_err();
        match err {
            DataError::BadFieldCount { line, got } => {
                assert_eq!(line, 2);
                assert_eq!(got, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_field_is_rejected() {
        let err = parse_triples("a\t\tb\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::EmptyField { line: 1 }));
    }

    #[test]
    fn dedup_matches_set_oracle_on_random_files() {
        use rand::{Rng, SeedableRng};
        use std::collections::HashSet;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n_lines = rng.random_range(1..120);
            let mut text = String::new();
            let mut oracle: HashSet<(u8, u8, u8)> = HashSet::new();
            for _ in 0..n_lines {
                let h: u8 = rng.random_range(0..12);
                let r: u8 = rng.random_range(0..4);
                let t: u8 = rng.random_range(0..12);
                text.push_str(&format!("e{h}\tr{r}\te{t}\n"));
                oracle.insert((h, r, t));
            }
            let g = parse_triples(text.as_bytes()).unwrap();
            assert_eq!(g.n_edges(), oracle.len());
            assert!(g.validate());
        }
    }

    #[test]
    fn ids_follow_first_appearance_order() {
        let g = parse_triples("b\tr\ta\na\ts\tc\n".as_bytes()).unwrap();
        assert_eq!(g.entity_id("b"), Some(0));
        assert_eq!(g.entity_id("a"), Some(1));
        assert_eq!(g.entity_id("c"), Some(2));
        assert_eq!(g.relation_id("r"), Some(0));
        assert_eq!(g.relation_id("s"), Some(1));
    }

    #[test]
    fn tsv_round_trip() {
        let src = "a\tr\tb\nb\ts\tc\na\tr\tc\n";
        let g = parse_triples(src.as_bytes()).unwrap();
        let g2 = parse_triples(g.to_tsv().as_bytes()).unwrap();
        assert_eq!(g.entity_names(), g2.entity_names());
        assert_eq!(g.relation_names(), g2.relation_names());
        assert_eq!(g.edges(), g2.edges());
    }
}
