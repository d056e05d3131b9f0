use std::collections::HashMap;

use super::graph::KnowledgeGraph;
use super::sentence::Mention;

/// Link entity mentions in a token sequence against the graph's entity
/// lexicon: longest-match-first, then leftmost, exact token match,
/// non-overlapping.
///
/// Entity identifiers double as surface forms after underscore-to-space
/// expansion; if two identifiers expand to the same surface, the one with
/// the smaller entity id wins.
pub fn link_entities(tokens: &[String], graph: &KnowledgeGraph) -> Vec<Mention> {
    // Lexicon: surface token sequence -> entity id (first/lowest id wins).
    let mut lexicon: HashMap<Vec<&str>, usize> = HashMap::new();
    let mut max_len = 0;
    let surfaces: Vec<Vec<&str>> = graph
        .entity_names()
        .iter()
        .map(|name| name.split('_').flat_map(|p| p.split_whitespace()).collect())
        .collect();
    for (id, surface) in surfaces.iter().enumerate() {
        if surface.is_empty() {
            continue;
        }
        max_len = max_len.max(surface.len());
        lexicon.entry(surface.clone()).or_insert(id);
    }

    let mut mentions = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = max_len.min(tokens.len() - i);
        let mut matched = None;
        for len in (1..=longest).rev() {
            let window: Vec<&str> = tokens[i..i + len].iter().map(|t| t.as_str()).collect();
            if let Some(&id) = lexicon.get(&window) {
                matched = Some((len, id));
                break;
            }
        }
        match matched {
            Some((len, id)) => {
                mentions.push(Mention {
                    start: i,
                    end: i + len,
                    entity: graph.entity_name(id).to_string(),
                });
                i += len;
            }
            None => i += 1,
        }
    }
    mentions
}
