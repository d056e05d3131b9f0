use super::argmax_ties_low;

/// Greedy decoding: extend `prompt` with argmax next-token picks until
/// `max_new` tokens have been added or the model emits `end_id`.
///
/// `next_logits` maps the current token sequence to next-token scores; ties
/// resolve to the smallest id, so decoding is fully deterministic.
pub fn greedy_decode<E>(
    prompt: &[usize],
    max_new: usize,
    end_id: usize,
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<f64>, E>,
) -> Result<Vec<usize>, E> {
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let logits = next_logits(&seq)?;
        let next = argmax_ties_low(&logits);
        if next == end_id {
            break;
        }
        seq.push(next);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Toy model: next token is (last + 1) % 5, via a score table.
    fn toy(seq: &[usize]) -> Result<Vec<f64>, std::convert::Infallible> {
        let last = *seq.last().unwrap();
        let mut scores = vec![0.0; 6];
        scores[(last + 1) % 5] = 1.0;
        Ok(scores)
    }

    #[test]
    fn max_new_zero_returns_prompt_unchanged() {
        let out = greedy_decode(&[3, 1], 0, 5, toy).unwrap();
        assert_eq!(out, vec![3, 1]);
    }

    #[test]
    fn decoding_is_deterministic() {
        let a = greedy_decode(&[0], 7, 99, toy).unwrap();
        let b = greedy_decode(&[0], 7, 99, toy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![0, 1, 2, 3, 4, 0, 1, 2]);
    }

    #[test]
    fn end_marker_stops_decoding() {
        // end_id 2 is reached after two steps from 0.
        let out = greedy_decode(&[0], 10, 2, toy).unwrap();
        assert_eq!(out, vec![0, 1]);
    }

    #[test]
    fn ties_resolve_to_smallest_id() {
        let flat = |_: &[usize]| -> Result<Vec<f64>, std::convert::Infallible> {
            Ok(vec![1.0, 1.0, 1.0])
        };
        // Always picks id 0, which is also the end marker here.
        let out = greedy_decode(&[2], 3, 0, flat).unwrap();
        assert_eq!(out, vec![2]);
        let out = greedy_decode(&[2], 3, 9, flat).unwrap();
        assert_eq!(out, vec![2, 0, 0, 0]);
    }
}
