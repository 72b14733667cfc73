//! Seeded synthetic data with a planted, learnable quality signal.
//!
//! Each source token maps to one target token through an index-aligned toy
//! lexicon. A system with latent quality `q` keeps each ideal target token
//! with probability `sigmoid(q - mid)` and otherwise substitutes a random
//! wrong token, so token overlap with the ideal translation grows
//! monotonically with `q`. Human scores are `q` plus Gaussian noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EvalDataset, HumanJudgment, Segment, SystemOutput};
use crate::error::{Error, Result};
use crate::mbr::CandidateList;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_segments: usize,
    pub n_systems: usize,
    /// Spacing between adjacent systems' latent skills.
    pub latent_gap_scale: f64,
    /// Standard deviation of the observation noise added to human scores.
    pub noise_sd: f64,
    /// Number of distinct word types per side of the toy lexicon.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_segments: 100,
            n_systems: 4,
            latent_gap_scale: 1.0,
            noise_sd: 0.0,
            vocab_size: 200,
            seed: 0,
        }
    }
}

/// Generation byproducts: the hidden latent qualities and the logged
/// correlation between emitted human scores and latents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthInfo {
    /// Latent quality per (system_id, segment_id).
    pub latents: BTreeMap<(String, String), f64>,
    /// Pearson correlation between `s_h` and `q` over all judged outputs;
    /// `None` when one side has zero variance (e.g. a single system with
    /// no noise).
    pub corr_sh_q: Option<f64>,
}

const SEG_LEN_MIN: usize = 6;
const SEG_LEN_MAX: usize = 10;

fn src_word(i: usize) -> String {
    format!("src{i:04}")
}

fn tgt_word(i: usize) -> String {
    format!("tgt{i:04}")
}

pub fn system_name(j: usize) -> String {
    format!("sys{j:02}")
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.n_segments < 1 || cfg.n_systems < 1 || cfg.vocab_size < 1 {
        return Err(Error::Config("synthetic counts must be >= 1".into()));
    }
    if cfg.noise_sd < 0.0 {
        return Err(Error::Config("noise_sd must be >= 0".into()));
    }
    Ok(())
}

/// Corrupt the ideal token sequence: keep each token with probability
/// `keep_p`, otherwise substitute a different random target word.
fn corrupt(ideal: &[usize], keep_p: f64, vocab_size: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    ideal
        .iter()
        .map(|&w| {
            if rng.gen::<f64>() < keep_p {
                tgt_word(w)
            } else if vocab_size > 1 {
                let mut other = rng.gen_range(0..vocab_size - 1);
                if other >= w {
                    other += 1;
                }
                tgt_word(other)
            } else {
                tgt_word(w)
            }
        })
        .collect::<Vec<_>>()
}

fn sigmoid(x: f64) -> f64 {
    crate::scalar::sigmoid(x)
}

/// Generate a fully judged synthetic dataset. Deterministic given `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(EvalDataset, SynthInfo)> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let jitter = Normal::new(0.0, 0.5 * cfg.latent_gap_scale.max(f64::MIN_POSITIVE))
        .expect("valid sd");

    // Evenly spaced skills, best system first; centered for the keep-prob map.
    let skills: Vec<f64> = (0..cfg.n_systems)
        .map(|j| cfg.latent_gap_scale * (cfg.n_systems - 1 - j) as f64)
        .collect();
    let mid = skills.iter().sum::<f64>() / cfg.n_systems as f64;

    let mut dataset = EvalDataset::new();
    let mut latents = BTreeMap::new();
    let mut sh_values = Vec::new();
    let mut q_values = Vec::new();

    for i in 0..cfg.n_segments {
        let seg_id = format!("seg{i:05}");
        let len = rng.gen_range(SEG_LEN_MIN..=SEG_LEN_MAX);
        let ideal: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let source: Vec<String> = ideal.iter().map(|&w| src_word(w)).collect();
        dataset.add_segment(Segment {
            id: seg_id.clone(),
            source_text: source.join(" "),
            language_pair: "syn-syn".into(),
        })?;
        let reference: Vec<String> = ideal.iter().map(|&w| tgt_word(w)).collect();
        dataset.add_reference(&seg_id, &reference.join(" "))?;

        for (j, &skill) in skills.iter().enumerate() {
            let sys_id = system_name(j);
            let q = if cfg.latent_gap_scale > 0.0 {
                skill + jitter.sample(&mut rng)
            } else {
                skill
            };
            let keep_p = sigmoid(q - mid);
            let translation = corrupt(&ideal, keep_p, cfg.vocab_size, &mut rng);
            dataset.add_output(SystemOutput {
                system_id: sys_id.clone(),
                segment_id: seg_id.clone(),
                translation: translation.join(" "),
            })?;
            let s_h = if cfg.noise_sd > 0.0 {
                q + noise.sample(&mut rng)
            } else {
                q
            };
            dataset.add_judgment(HumanJudgment {
                segment_id: seg_id.clone(),
                system_id: sys_id.clone(),
                score: s_h,
            })?;
            latents.insert((sys_id, seg_id.clone()), q);
            sh_values.push(s_h);
            q_values.push(q);
        }
    }

    let corr_sh_q = pearson(&sh_values, &q_values);
    Ok((dataset, SynthInfo { latents, corr_sh_q }))
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Write the hidden latents as a TSV sidecar: `sys<TAB>seg<TAB>q`.
pub fn save_latents_tsv(info: &SynthInfo, path: &Path) -> Result<()> {
    let mut out = String::from("sys\tseg\tq\n");
    for ((sys, seg), q) in &info.latents {
        out.push_str(&format!("{sys}\t{seg}\t{q}\n"));
    }
    fs::write(path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Read a latents sidecar written by [`save_latents_tsv`].
pub fn load_latents_tsv(path: &Path) -> Result<BTreeMap<(String, String), f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (sys, seg, q) = (parts.next(), parts.next(), parts.next());
        match (sys, seg, q.and_then(|v| v.parse::<f64>().ok())) {
            (Some(sys), Some(seg), Some(q)) => {
                map.insert((sys.to_string(), seg.to_string()), q);
            }
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: "expected sys\\tseg\\tq".into(),
                })
            }
        }
    }
    Ok(map)
}

/// Configuration for synthetic N-best candidate lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMbrConfig {
    pub n_segments: usize,
    pub n_candidates: usize,
    /// Width of the quality range spanned by each list.
    pub quality_spread: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthMbrConfig {
    fn default() -> Self {
        SynthMbrConfig {
            n_segments: 200,
            n_candidates: 8,
            quality_spread: 4.0,
            vocab_size: 200,
            seed: 0,
        }
    }
}

/// Gold latent quality for each candidate of one list, aligned by index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateGold {
    pub segment_id: String,
    pub qualities: Vec<f64>,
}

/// Generate candidate lists as ranked perturbations of an ideal sequence,
/// then shuffle each list so position carries no quality information.
pub fn generate_synthetic_candidates(
    cfg: &SynthMbrConfig,
) -> Result<(Vec<CandidateList>, Vec<CandidateGold>)> {
    if cfg.n_segments < 1 || cfg.n_candidates < 1 || cfg.vocab_size < 1 {
        return Err(Error::Config("candidate counts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lists = Vec::with_capacity(cfg.n_segments);
    let mut golds = Vec::with_capacity(cfg.n_segments);

    for i in 0..cfg.n_segments {
        let seg_id = format!("mbr{i:05}");
        let len = rng.gen_range(SEG_LEN_MIN..=SEG_LEN_MAX);
        let ideal: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let source: Vec<String> = ideal.iter().map(|&w| src_word(w)).collect();

        let mut ranked: Vec<(String, f64)> = (0..cfg.n_candidates)
            .map(|c| {
                let frac = if cfg.n_candidates > 1 {
                    c as f64 / (cfg.n_candidates - 1) as f64
                } else {
                    0.5
                };
                let q = cfg.quality_spread * (0.5 - frac);
                let keep_p = sigmoid(q);
                let text = corrupt(&ideal, keep_p, cfg.vocab_size, &mut rng).join(" ");
                (text, q)
            })
            .collect();
        ranked.shuffle(&mut rng);

        let (candidates, qualities): (Vec<String>, Vec<f64>) = ranked.into_iter().unzip();
        lists.push(CandidateList {
            segment_id: seg_id.clone(),
            source: source.join(" "),
            candidates,
        });
        golds.push(CandidateGold {
            segment_id: seg_id,
            qualities,
        });
    }
    Ok((lists, golds))
}
