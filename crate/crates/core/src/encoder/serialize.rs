//! Joint input serialization with span masks.
//!
//! Pair layout: `BOS src SEP mt_a SEP mt_b EOS`; single-candidate layout:
//! `BOS src SEP mt EOS`. Span masks select exactly the content tokens of
//! each span and are zero at special-token positions.

use super::vocab::{Vocabulary, BOS_ID, EOS_ID, SEP_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    /// Positions of BOS/SEP/EOS markers.
    pub special_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanMasks {
    pub m_src: Vec<u8>,
    pub m_a: Vec<u8>,
    /// Absent for single-candidate serialization.
    pub m_b: Option<Vec<u8>>,
}

/// Tail-truncate to fit `budget` tokens: trim candidates first (the longer
/// one first, so they end up equal-length), then the source.
fn truncate_lengths(
    mut ls: usize,
    mut la: usize,
    mut lb: usize,
    budget: usize,
) -> Result<(usize, usize, usize)> {
    while ls + la + lb > budget && (la > 0 || lb > 0) {
        if la >= lb && la > 0 {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    if ls + la + lb > budget {
        ls = budget;
    }
    if ls == 0 {
        return Err(Error::UnusableInput(
            "source span truncated to zero tokens".into(),
        ));
    }
    Ok((ls, la, lb))
}

/// Serialize a source and two candidates into one sequence with span masks.
pub fn serialize_pair(
    vocab: &Vocabulary,
    max_len: usize,
    source: &str,
    mt_a: &str,
    mt_b: &str,
) -> Result<(TokenSequence, SpanMasks)> {
    let src = vocab.tokenize(source);
    let a = vocab.tokenize(mt_a);
    let b = vocab.tokenize(mt_b);
    if src.is_empty() {
        return Err(Error::UnusableInput("empty source span".into()));
    }
    const SPECIALS: usize = 4; // BOS, SEP, SEP, EOS
    if max_len <= SPECIALS {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no room for content tokens"
        )));
    }
    let (ls, la, lb) = truncate_lengths(src.len(), a.len(), b.len(), max_len - SPECIALS)?;

    let total = ls + la + lb + SPECIALS;
    let mut ids = Vec::with_capacity(total);
    let mut m_src = vec![0u8; total];
    let mut m_a = vec![0u8; total];
    let mut m_b = vec![0u8; total];
    let mut specials = Vec::with_capacity(SPECIALS);

    specials.push(ids.len());
    ids.push(BOS_ID);
    for &t in &src[..ls] {
        m_src[ids.len()] = 1;
        ids.push(t);
    }
    specials.push(ids.len());
    ids.push(SEP_ID);
    for &t in &a[..la] {
        m_a[ids.len()] = 1;
        ids.push(t);
    }
    specials.push(ids.len());
    ids.push(SEP_ID);
    for &t in &b[..lb] {
        m_b[ids.len()] = 1;
        ids.push(t);
    }
    specials.push(ids.len());
    ids.push(EOS_ID);
    debug_assert_eq!(ids.len(), total);

    Ok((
        TokenSequence { token_ids: ids, special_positions: specials },
        SpanMasks { m_src, m_a, m_b: Some(m_b) },
    ))
}

/// Serialize a source and one candidate: `BOS src SEP mt EOS`.
pub fn serialize_single(
    vocab: &Vocabulary,
    max_len: usize,
    source: &str,
    mt: &str,
) -> Result<(TokenSequence, SpanMasks)> {
    let src = vocab.tokenize(source);
    let a = vocab.tokenize(mt);
    if src.is_empty() {
        return Err(Error::UnusableInput("empty source span".into()));
    }
    const SPECIALS: usize = 3; // BOS, SEP, EOS
    if max_len <= SPECIALS {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no room for content tokens"
        )));
    }
    let (ls, la, _) = truncate_lengths(src.len(), a.len(), 0, max_len - SPECIALS)?;

    let total = ls + la + SPECIALS;
    let mut ids = Vec::with_capacity(total);
    let mut m_src = vec![0u8; total];
    let mut m_a = vec![0u8; total];
    let mut specials = Vec::with_capacity(SPECIALS);

    specials.push(ids.len());
    ids.push(BOS_ID);
    for &t in &src[..ls] {
        m_src[ids.len()] = 1;
        ids.push(t);
    }
    specials.push(ids.len());
    ids.push(SEP_ID);
    for &t in &a[..la] {
        m_a[ids.len()] = 1;
        ids.push(t);
    }
    specials.push(ids.len());
    ids.push(EOS_ID);

    Ok((
        TokenSequence { token_ids: ids, special_positions: specials },
        SpanMasks { m_src, m_a, m_b: None },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let words: Vec<String> = ["hola", "hello", "hi", "w1", "w2", "w3", "w4", "w5", "w6"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Vocabulary::new(words, 8).unwrap()
    }

    #[test]
    fn pair_layout_and_masks() {
        let v = vocab();
        let (seq, masks) = serialize_pair(&v, 256, "hola", "hello", "hi").unwrap();
        assert_eq!(seq.len(), 7); // BOS src SEP a SEP b EOS
        assert_eq!(seq.token_ids[0], BOS_ID);
        assert_eq!(*seq.token_ids.last().unwrap(), EOS_ID);
        assert_eq!(seq.special_positions, vec![0, 2, 4, 6]);
        assert_eq!(masks.m_src.iter().sum::<u8>(), 1);
        assert_eq!(masks.m_a.iter().sum::<u8>(), 1);
        assert_eq!(masks.m_b.as_ref().unwrap().iter().sum::<u8>(), 1);
        assert_eq!(masks.m_src[1], 1);
        assert_eq!(masks.m_a[3], 1);
        assert_eq!(masks.m_b.as_ref().unwrap()[5], 1);
    }

    #[test]
    fn empty_candidate_gives_all_zero_mask() {
        let v = vocab();
        let (seq, masks) = serialize_pair(&v, 256, "hola", "hello", "").unwrap();
        assert_eq!(seq.len(), 6);
        assert!(masks.m_b.as_ref().unwrap().iter().all(|&m| m == 0));
    }

    #[test]
    fn single_layout() {
        let v = vocab();
        let (seq, masks) = serialize_single(&v, 256, "w1", "w2").unwrap();
        assert_eq!(seq.len(), 5); // BOS src SEP mt EOS
        assert!(masks.m_b.is_none());
        let (seq2, _) = serialize_single(&v, 256, "w1", "w2").unwrap();
        assert_eq!(seq, seq2);
    }

    #[test]
    fn over_length_trims_candidates_before_source() {
        let v = vocab();
        // src 2, a 4, b 3 => 9 content + 4 specials = 13; budget forces
        // candidate trimming down to equal lengths before touching src.
        let (seq, masks) = serialize_pair(&v, 10, "w1 w2", "w1 w2 w3 w4", "w1 w2 w3").unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(masks.m_src.iter().map(|&m| m as usize).sum::<usize>(), 2);
        let la: usize = masks.m_a.iter().map(|&m| m as usize).sum();
        let lb: usize = masks.m_b.as_ref().unwrap().iter().map(|&m| m as usize).sum();
        assert_eq!(la + lb, 4);
        assert!(la.abs_diff(lb) <= 1);
        // masks never index outside the sequence
        assert_eq!(masks.m_a.len(), seq.len());
    }

    #[test]
    fn source_truncated_to_zero_is_an_error() {
        let v = vocab();
        let err = serialize_pair(&v, 5, "w1 w2", "", "").unwrap_err();
        assert!(matches!(err, Error::UnusableInput(_)));
        // single: candidate trimmed before source, so a long candidate
        // alone still leaves room for the source
        let ok = serialize_single(&v, 5, "w1", "w2 w3 w4 w5 w6").unwrap();
        assert_eq!(ok.0.len(), 5);
    }

    #[test]
    fn swapped_candidates_swap_mask_roles() {
        let v = vocab();
        let (seq_ab, m_ab) = serialize_pair(&v, 64, "w1 w2", "w3 w4", "w5").unwrap();
        let (seq_ba, m_ba) = serialize_pair(&v, 64, "w1 w2", "w5", "w3 w4").unwrap();
        assert_eq!(seq_ab.len(), seq_ba.len());
        let ones = |m: &[u8]| m.iter().map(|&x| x as usize).sum::<usize>();
        assert_eq!(ones(&m_ab.m_a), ones(m_ba.m_b.as_ref().unwrap()));
        assert_eq!(ones(m_ab.m_b.as_ref().unwrap()), ones(&m_ba.m_a));
    }
}
