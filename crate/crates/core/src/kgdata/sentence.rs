use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::graph::KnowledgeGraph;
use super::{DataError, Result};

/// A mention span: token range `[start, end)` linked to an entity id string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

/// The masked prediction target of a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub position: usize,
    pub entity: String,
}

/// A tokenized sentence with entity mentions and one masked entity target;
/// the unit of supervised training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSentence {
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
    pub target: Target,
}

impl LinkedSentence {
    /// Check span bounds, non-overlap, target placement, and that every
    /// mentioned entity exists in the graph.
    pub fn validate(&self, graph: &KnowledgeGraph) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        let mut sorted: Vec<&Mention> = self.mentions.iter().collect();
        sorted.sort_by_key(|m| m.start);
        let mut prev_end = 0;
        for m in &sorted {
            if m.start >= m.end {
                return Err(format!("mention span [{}, {}) is empty", m.start, m.end));
            }
            if m.end > n {
                return Err(format!("mention span [{}, {}) exceeds {n} tokens", m.start, m.end));
            }
            if m.start < prev_end {
                return Err(format!("mention spans overlap at token {}", m.start));
            }
            prev_end = m.end;
            if graph.entity_id(&m.entity).is_none() {
                return Err(format!("entity `{}` not in graph", m.entity));
            }
        }
        if graph.entity_id(&self.target.entity).is_none() {
            return Err(format!("target entity `{}` not in graph", self.target.entity));
        }
        let covering = self
            .mentions
            .iter()
            .filter(|m| m.start <= self.target.position && self.target.position < m.end)
            .count();
        if covering != 1 {
            return Err(format!(
                "target position {} is covered by {covering} mentions, expected 1",
                self.target.position
            ));
        }
        Ok(())
    }

    /// Entity ids (graph node ids) of all mentions covering token `i`.
    pub fn entities_at(&self, i: usize, graph: &KnowledgeGraph) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .mentions
            .iter()
            .filter(|m| m.start <= i && i < m.end)
            .filter_map(|m| graph.entity_id(&m.entity))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Read a JSONL corpus, validating every sentence against the graph.
pub fn read_sentences<R: BufRead>(reader: R, graph: &KnowledgeGraph) -> Result<Vec<LinkedSentence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: LinkedSentence =
            serde_json::from_str(&line).map_err(|source| DataError::Json { line: line_no, source })?;
        sentence
            .validate(graph)
            .map_err(|reason| DataError::BadSentence { line: line_no, reason })?;
        out.push(sentence);
    }
    Ok(out)
}

/// Write a corpus as one JSON object per line.
pub fn write_sentences<W: Write>(writer: &mut W, sentences: &[LinkedSentence]) -> Result<()> {
    for s in sentences {
        serde_json::to_writer(&mut *writer, s).map_err(|source| DataError::Json { line: 0, source })?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::parse_triples;

    fn graph() -> KnowledgeGraph {
        parse_triples("paris\tcapital_of\tfrance\n".as_bytes()).unwrap()
    }

    fn sentence() -> LinkedSentence {
        LinkedSentence {
            tokens: vec!["paris".into(), "capital", "of".into(), "[MASK]".into()]
                .into_iter()
                .map(Into::into)
                .collect(),
            mentions: vec![
                Mention { start: 0, end: 1, entity: "paris".into() },
                Mention { start: 3, end: 4, entity: "france".into() },
            ],
            target: Target { position: 3, entity: "france".into() },
        }
    }

    #[test]
    fn json_round_trip_with_normative_field_names() {
        let s = sentence();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"tokens\""));
        assert!(json.contains("\"mentions\""));
        assert!(json.contains("\"start\""));
        assert!(json.contains("\"end\""));
        assert!(json.contains("\"entity\""));
        assert!(json.contains("\"target\""));
        assert!(json.contains("\"position\""));
        let back: LinkedSentence = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn jsonl_round_trip() {
        let g = graph();
        let corpus = vec![sentence(), sentence()];
        let mut buf = Vec::new();
        write_sentences(&mut buf, &corpus).unwrap();
        let back = read_sentences(&buf[..], &g).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn validation_rejects_overlap_and_bad_target() {
        let g = graph();
        let mut s = sentence();
        s.mentions[1].start = 0; // overlaps the first mention
        assert!(read_or_err(&s, &g).contains("overlap"));

        let mut s = sentence();
        s.target.position = 1; // not inside any mention
        assert!(read_or_err(&s, &g).contains("covered by 0"));

        let mut s = sentence();
        s.mentions[0].entity = "atlantis".into();
        assert!(read_or_err(&s, &g).contains("atlantis"));
    }

    fn read_or_err(s: &LinkedSentence, g: &KnowledgeGraph) -> String {
        let mut buf = Vec::new();
        write_sentences(&mut buf, std::slice::from_ref(s)).unwrap();
        match read_sentences(&buf[..], g) {
            Ok(_) => String::new(),
            Err(e) => e.to_string(),
        }
    }

    #[test]
    fn entities_at_collects_covering_mentions() {
        let g = graph();
        let s = sentence();
        assert_eq!(s.entities_at(0, &g), vec![g.entity_id("paris").unwrap()]);
        assert!(s.entities_at(1, &g).is_empty());
        assert_eq!(s.entities_at(3, &g), vec![g.entity_id("france").unwrap()]);
    }
}
