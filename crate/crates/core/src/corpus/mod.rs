//! Evaluation data model, pairwise supervision construction, dataset
//! splitting, and seeded synthetic generation.
//!
//! All collections are kept in id-sorted maps so iteration order (and thus
//! every serialized artifact) is deterministic regardless of input order.

mod io;
mod synth;

pub use synth::{generate_synthetic, generate_synthetic_candidates, SynthConfig, SynthInfo,
    SynthMbrConfig};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A source segment to be translated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub source_text: String,
    /// Informational language-pair tag, e.g. `"en-de"`.
    pub language_pair: String,
}

/// One system's translation of one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemOutput {
    pub system_id: String,
    pub segment_id: String,
    pub translation: String,
}

/// A human segment-level quality score for one system output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanJudgment {
    pub segment_id: String,
    pub system_id: String,
    pub score: f64,
}

/// One training unit: a source, two candidates, and the gold difference of
/// their human scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseExample {
    pub segment_id: String,
    pub system_a: String,
    pub system_b: String,
    pub source: String,
    pub mt_a: String,
    pub mt_b: String,
    /// `score(a) - score(b)`, in raw human units.
    pub delta_star: f64,
}

impl PairwiseExample {
    /// The same supervision with the candidates swapped; negates `delta_star`.
    pub fn reversed(&self) -> PairwiseExample {
        PairwiseExample {
            segment_id: self.segment_id.clone(),
            system_a: self.system_b.clone(),
            system_b: self.system_a.clone(),
            source: self.source.clone(),
            mt_a: self.mt_b.clone(),
            mt_b: self.mt_a.clone(),
            delta_star: -self.delta_star,
        }
    }
}

/// An evaluation dataset with referential integrity between segments,
/// system outputs, judgments, and optional references.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalDataset {
    segments: BTreeMap<String, Segment>,
    /// Keyed by (system_id, segment_id).
    outputs: BTreeMap<(String, String), SystemOutput>,
    /// Keyed by (system_id, segment_id).
    judgments: BTreeMap<(String, String), HumanJudgment>,
    /// Optional reference translation per segment.
    references: BTreeMap<String, String>,
}

impl EvalDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_segment(&mut self, seg: Segment) -> Result<()> {
        if seg.source_text.is_empty() {
            return Err(Error::Integrity(format!("segment {} has empty source", seg.id)));
        }
        if self.segments.contains_key(&seg.id) {
            return Err(Error::Integrity(format!("duplicate segment id {}", seg.id)));
        }
        self.segments.insert(seg.id.clone(), seg);
        Ok(())
    }

    pub fn add_output(&mut self, out: SystemOutput) -> Result<()> {
        if !self.segments.contains_key(&out.segment_id) {
            return Err(Error::Integrity(format!(
                "output for system {} references unknown segment {}",
                out.system_id, out.segment_id
            )));
        }
        let key = (out.system_id.clone(), out.segment_id.clone());
        if self.outputs.contains_key(&key) {
            return Err(Error::Integrity(format!(
                "duplicate output for system {} on segment {}",
                out.system_id, out.segment_id
            )));
        }
        self.outputs.insert(key, out);
        Ok(())
    }

    pub fn add_judgment(&mut self, j: HumanJudgment) -> Result<()> {
        if !self.segments.contains_key(&j.segment_id) {
            return Err(Error::Integrity(format!(
                "judgment references unknown segment {}",
                j.segment_id
            )));
        }
        if !j.score.is_finite() {
            return Err(Error::Integrity(format!(
                "non-finite judgment score for system {} on segment {}",
                j.system_id, j.segment_id
            )));
        }
        let key = (j.system_id.clone(), j.segment_id.clone());
        if self.judgments.contains_key(&key) {
            return Err(Error::Integrity(format!(
                "duplicate judgment for system {} on segment {}",
                j.system_id, j.segment_id
            )));
        }
        self.judgments.insert(key, j);
        Ok(())
    }

    pub fn add_reference(&mut self, segment_id: &str, reference: &str) -> Result<()> {
        if !self.segments.contains_key(segment_id) {
            return Err(Error::Integrity(format!(
                "reference for unknown segment {segment_id}"
            )));
        }
        self.references.insert(segment_id.to_string(), reference.to_string());
        Ok(())
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values()
    }

    pub fn segment(&self, id: &str) -> Option<&Segment> {
        self.segments.get(id)
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = &str> {
        self.segments.keys().map(String::as_str)
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &SystemOutput> {
        self.outputs.values()
    }

    pub fn output(&self, system_id: &str, segment_id: &str) -> Option<&SystemOutput> {
        self.outputs.get(&(system_id.to_string(), segment_id.to_string()))
    }

    pub fn judgments(&self) -> impl Iterator<Item = &HumanJudgment> {
        self.judgments.values()
    }

    pub fn judgment(&self, system_id: &str, segment_id: &str) -> Option<f64> {
        self.judgments
            .get(&(system_id.to_string(), segment_id.to_string()))
            .map(|j| j.score)
    }

    pub fn reference(&self, segment_id: &str) -> Option<&str> {
        self.references.get(segment_id).map(String::as_str)
    }

    pub fn references(&self) -> impl Iterator<Item = (&str, &str)> {
        self.references.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// All system ids appearing in outputs, sorted.
    pub fn system_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.outputs.keys().map(|(sys, _)| sys.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Segments for which `system_id` produced an output, sorted.
    pub fn segments_covered_by(&self, system_id: &str) -> BTreeSet<String> {
        self.outputs
            .keys()
            .filter(|(sys, _)| sys == system_id)
            .map(|(_, seg)| seg.clone())
            .collect()
    }
}

/// How candidate pairs are drawn from the judged systems of each segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairingPolicy {
    /// Every unordered pair of judged systems, in canonical order.
    AllSystemPairs,
    /// At most `k` pairs per segment, sampled without replacement.
    SampledPerSegment { k: usize, seed: u64 },
}

/// Result of pairwise supervision construction.
#[derive(Debug, Clone)]
pub struct PairwiseBuild {
    pub examples: Vec<PairwiseExample>,
    /// Pairs of outputs skipped because one side lacked a judgment.
    pub skipped_incomplete: usize,
}

/// Construct pairwise supervision from human judgments.
///
/// Each unordered pair of systems is emitted once, oriented so that
/// `system_a < system_b` lexicographically; `delta_star` is the difference
/// of human scores in that orientation. Ties (`delta_star == 0`) are kept.
pub fn build_pairwise_examples(
    dataset: &EvalDataset,
    policy: PairingPolicy,
) -> Result<PairwiseBuild> {
    let mut examples = Vec::new();
    let mut skipped = 0usize;

    for seg in dataset.segments() {
        // Systems that translated this segment, sorted for canonical order.
        let systems: Vec<&SystemOutput> = dataset
            .outputs
            .iter()
            .filter(|((_, seg_id), _)| seg_id == &seg.id)
            .map(|(_, out)| out)
            .collect();

        let mut seg_examples = Vec::new();
        for i in 0..systems.len() {
            for j in (i + 1)..systems.len() {
                let (a, b) = (systems[i], systems[j]);
                let score_a = dataset.judgment(&a.system_id, &seg.id);
                let score_b = dataset.judgment(&b.system_id, &seg.id);
                match (score_a, score_b) {
                    (Some(sa), Some(sb)) => seg_examples.push(PairwiseExample {
                        segment_id: seg.id.clone(),
                        system_a: a.system_id.clone(),
                        system_b: b.system_id.clone(),
                        source: seg.source_text.clone(),
                        mt_a: a.translation.clone(),
                        mt_b: b.translation.clone(),
                        delta_star: sa - sb,
                    }),
                    _ => skipped += 1,
                }
            }
        }

        if let PairingPolicy::SampledPerSegment { k, seed } = policy {
            if seg_examples.len() > k {
                // Per-segment derived seed keeps sampling independent of
                // segment iteration order.
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(seg.id.as_bytes()));
                seg_examples.shuffle(&mut rng);
                seg_examples.truncate(k);
                seg_examples.sort_by(|x, y| (&x.system_a, &x.system_b).cmp(&(&y.system_a, &y.system_b)));
            }
        }

        examples.extend(seg_examples);
    }

    if examples.is_empty() {
        return Err(Error::NoUsablePairs);
    }
    Ok(PairwiseBuild {
        examples,
        skipped_incomplete: skipped,
    })
}

/// Stable 64-bit FNV-1a, used wherever a deterministic sub-seed or hash
/// bucket is derived from a string.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Segment-level train/dev split. Deterministic for a fixed seed; no segment
/// appears on both sides.
pub fn split(
    dataset: &EvalDataset,
    ratios: (f64, f64),
    seed: u64,
) -> Result<(EvalDataset, EvalDataset)> {
    let (train_frac, dev_frac) = ratios;
    if !(train_frac > 0.0 && dev_frac > 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be positive, got ({train_frac}, {dev_frac})"
        )));
    }
    if train_frac + dev_frac > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split ratios sum to {} > 1",
            train_frac + dev_frac
        )));
    }

    let mut ids: Vec<String> = dataset.segment_ids().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    let exhaustive = (train_frac + dev_frac - 1.0).abs() < 1e-12;
    let n_dev = if exhaustive {
        n.saturating_sub(n_train)
    } else {
        (n as f64 * dev_frac).round() as usize
    };

    if n_train == 0 {
        return Err(Error::EmptySplit { side: "train" });
    }
    if n_dev == 0 || n_train + n_dev > n {
        return Err(Error::EmptySplit { side: "dev" });
    }

    let train_ids: BTreeSet<&str> = ids[..n_train].iter().map(String::as_str).collect();
    let dev_ids: BTreeSet<&str> = ids[n_train..n_train + n_dev].iter().map(String::as_str).collect();

    Ok((restrict(dataset, &train_ids), restrict(dataset, &dev_ids)))
}

/// A copy of `dataset` keeping only the given segments.
pub fn restrict(dataset: &EvalDataset, keep: &BTreeSet<&str>) -> EvalDataset {
    let mut out = EvalDataset::new();
    for seg in dataset.segments() {
        if keep.contains(seg.id.as_str()) {
            out.segments.insert(seg.id.clone(), seg.clone());
        }
    }
    for o in dataset.outputs() {
        if keep.contains(o.segment_id.as_str()) {
            out.outputs
                .insert((o.system_id.clone(), o.segment_id.clone()), o.clone());
        }
    }
    for j in dataset.judgments() {
        if keep.contains(j.segment_id.as_str()) {
            out.judgments
                .insert((j.system_id.clone(), j.segment_id.clone()), j.clone());
        }
    }
    for (seg, r) in dataset.references() {
        if keep.contains(seg) {
            out.references.insert(seg.to_string(), r.to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> EvalDataset {
        let mut d = EvalDataset::new();
        d.add_segment(Segment {
            id: "seg1".into(),
            source_text: "der kleine fuchs".into(),
            language_pair: "de-en".into(),
        })
        .unwrap();
        for (sys, mt) in [("A", "the little fox"), ("B", "the small fox"), ("C", "a fox")] {
            d.add_output(SystemOutput {
                system_id: sys.into(),
                segment_id: "seg1".into(),
                translation: mt.into(),
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn pair_construction_subtracts_scores() {
        let mut d = toy_dataset();
        d.add_judgment(HumanJudgment { segment_id: "seg1".into(), system_id: "A".into(), score: 90.0 }).unwrap();
        d.add_judgment(HumanJudgment { segment_id: "seg1".into(), system_id: "B".into(), score: 85.0 }).unwrap();
        let built = build_pairwise_examples(&d, PairingPolicy::AllSystemPairs).unwrap();
        assert_eq!(built.examples.len(), 1);
        let ex = &built.examples[0];
        assert_eq!(ex.system_a, "A");
        assert_eq!(ex.system_b, "B");
        assert_eq!(ex.delta_star, 5.0);
        // C has an output but no judgment: pairs (A,C) and (B,C) skipped.
        assert_eq!(built.skipped_incomplete, 2);
    }

    #[test]
    fn ties_are_kept() {
        let mut d = toy_dataset();
        d.add_judgment(HumanJudgment { segment_id: "seg1".into(), system_id: "A".into(), score: 70.0 }).unwrap();
        d.add_judgment(HumanJudgment { segment_id: "seg1".into(), system_id: "B".into(), score: 70.0 }).unwrap();
        let built = build_pairwise_examples(&d, PairingPolicy::AllSystemPairs).unwrap();
        assert_eq!(built.examples.len(), 1);
        assert_eq!(built.examples[0].delta_star, 0.0);
    }

    #[test]
    fn missing_judgment_is_skipped_and_counted() {
        let mut d = toy_dataset();
        d.add_judgment(HumanJudgment { segment_id: "seg1".into(), system_id: "A".into(), score: 90.0 }).unwrap();
        let err = build_pairwise_examples(&d, PairingPolicy::AllSystemPairs).unwrap_err();
        assert!(matches!(err, Error::NoUsablePairs));
    }

    #[test]
    fn all_pairs_count_is_n_choose_2() {
        let mut d = toy_dataset();
        for sys in ["A", "B", "C"] {
            d.add_judgment(HumanJudgment { segment_id: "seg1".into(), system_id: sys.into(), score: 1.0 }).unwrap();
        }
        let built = build_pairwise_examples(&d, PairingPolicy::AllSystemPairs).unwrap();
        assert_eq!(built.examples.len(), 3); // 3*2/2
        assert_eq!(built.skipped_incomplete, 0);
    }

    #[test]
    fn reversed_negates_delta() {
        let mut d = toy_dataset();
        d.add_judgment(HumanJudgment { segment_id: "seg1".into(), system_id: "A".into(), score: 90.0 }).unwrap();
        d.add_judgment(HumanJudgment { segment_id: "seg1".into(), system_id: "B".into(), score: 85.0 }).unwrap();
        let built = build_pairwise_examples(&d, PairingPolicy::AllSystemPairs).unwrap();
        let ex = &built.examples[0];
        let rev = ex.reversed();
        assert_eq!(rev.delta_star, -ex.delta_star);
        assert_eq!(rev.mt_a, ex.mt_b);
    }

    #[test]
    fn sampled_policy_is_deterministic_and_bounded() {
        let mut d = EvalDataset::new();
        d.add_segment(Segment { id: "s".into(), source_text: "x".into(), language_pair: "xx".into() }).unwrap();
        for i in 0..6 {
            let sys = format!("sys{i}");
            d.add_output(SystemOutput { system_id: sys.clone(), segment_id: "s".into(), translation: format!("t{i}") }).unwrap();
            d.add_judgment(HumanJudgment { segment_id: "s".into(), system_id: sys, score: i as f64 }).unwrap();
        }
        let policy = PairingPolicy::SampledPerSegment { k: 4, seed: 7 };
        let a = build_pairwise_examples(&d, policy).unwrap();
        let b = build_pairwise_examples(&d, policy).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_eq!(a.examples.len(), 4);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let mut d = EvalDataset::new();
        for i in 0..10 {
            d.add_segment(Segment {
                id: format!("s{i:02}"),
                source_text: "src".into(),
                language_pair: "xx".into(),
            })
            .unwrap();
        }
        let (tr1, dev1) = split(&d, (0.8, 0.2), 1).unwrap();
        let (tr2, dev2) = split(&d, (0.8, 0.2), 1).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(dev1, dev2);
        assert_eq!(tr1.n_segments(), 8);
        assert_eq!(dev1.n_segments(), 2);
        let train_ids: BTreeSet<_> = tr1.segment_ids().collect();
        let dev_ids: BTreeSet<_> = dev1.segment_ids().collect();
        assert!(train_ids.is_disjoint(&dev_ids));
        let union: BTreeSet<_> = train_ids.union(&dev_ids).cloned().collect();
        let all: BTreeSet<_> = d.segment_ids().collect();
        assert_eq!(union, all);
    }

    #[test]
    fn split_rejects_empty_dev() {
        let mut d = EvalDataset::new();
        d.add_segment(Segment { id: "s".into(), source_text: "x".into(), language_pair: "xx".into() }).unwrap();
        assert!(matches!(
            split(&d, (1.0, 0.0), 0).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn integrity_rejects_dangling_segment() {
        let mut d = EvalDataset::new();
        let err = d
            .add_output(SystemOutput {
                system_id: "A".into(),
                segment_id: "ghost".into(),
                translation: "x".into(),
            })
            .unwrap_err();
        match err {
            Error::Integrity(msg) => assert!(msg.contains("ghost")),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
