//! N-way K-shot episode construction with disjoint class splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset, LabeledSentence};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("inventory of {size} classes cannot be split into three non-empty parts with fractions {fractions:?}")]
    InventoryTooSmall { size: usize, fractions: (f64, f64, f64) },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions((f64, f64, f64)),
    #[error("class {class:?} has too few instances for a {k_shot}+{query_shots} shot episode")]
    Starved { class: String, k_shot: usize, query_shots: usize },
    #[error("pool offers {available} usable classes, episode needs {n_way}")]
    TooFewClasses { available: usize, n_way: usize },
    #[error("n_way and k_shot must be positive")]
    ZeroShape,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Disjoint train/dev/test class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: BTreeSet<String>,
    pub dev: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Shuffle the inventory under `seed` and cut it into rounded-fraction parts.
pub fn partition_classes(
    inventory: &BTreeSet<String>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<ClassSplit, EpisodeError> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(EpisodeError::BadFractions(fractions));
    }
    let n = inventory.len();
    let dev = (b * n as f64).round() as usize;
    let test = (c * n as f64).round() as usize;
    if n < 3 || dev == 0 || test == 0 || dev + test >= n {
        return Err(EpisodeError::InventoryTooSmall { size: n, fractions });
    }
    let mut classes: Vec<String> = inventory.iter().cloned().collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_n = n - dev - test;
    Ok(ClassSplit {
        train: classes[..train_n].iter().cloned().collect(),
        dev: classes[train_n..train_n + dev].iter().cloned().collect(),
        test: classes[train_n + dev..].iter().cloned().collect(),
    })
}

/// One few-shot task: support set, query set and the ordered class list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<LabeledSentence>,
    pub query: Vec<LabeledSentence>,
    /// Dataset indices of the support sentences, when sampled from a dataset.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub support_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub query_ids: Vec<usize>,
}

/// Episode shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_shots: usize,
}

impl EpisodeShape {
    pub fn new(n_way: usize, k_shot: usize) -> Self {
        Self { n_way, k_shot, query_shots: k_shot }
    }
}

fn class_counts(sentence: &LabeledSentence) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for sp in sentence.spans.as_deref().unwrap_or_default() {
        if let Some(l) = &sp.label {
            *m.entry(l.as_str()).or_default() += 1;
        }
    }
    m
}

/// Keep only spans whose label is in `classes`; tokens are untouched.
pub fn relabel_to_episode(sentence: &LabeledSentence, classes: &[String]) -> Result<LabeledSentence, CorpusError> {
    let spans = sentence
        .spans
        .as_deref()
        .unwrap_or_default()
        .iter()
        .filter(|sp| sp.label.as_ref().is_some_and(|l| classes.contains(l)))
        .cloned()
        .collect();
    LabeledSentence::from_spans(sentence.tokens.clone(), spans)
}

/// Greedy sentence-level N-way K-shot sampling.
pub fn sample_episode(
    dataset: &Dataset,
    pool: &BTreeSet<String>,
    shape: EpisodeShape,
    seed: u64,
) -> Result<Episode, EpisodeError> {
    let EpisodeShape { n_way, k_shot, query_shots } = shape;
    if n_way == 0 || k_shot == 0 {
        return Err(EpisodeError::ZeroShape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let per_sentence: Vec<BTreeMap<&str, usize>> = dataset.sentences.iter().map(class_counts).collect();
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for counts in &per_sentence {
        for (c, n) in counts {
            *totals.entry(c).or_default() += n;
        }
    }
    let need = k_shot + query_shots;
    let mut eligible: Vec<&String> = Vec::new();
    let mut starved: Option<&String> = None;
    for c in pool {
        if totals.get(c.as_str()).copied().unwrap_or(0) >= need {
            eligible.push(c);
        } else if starved.is_none() {
            starved = Some(c);
        }
    }
    if eligible.len() < n_way {
        return Err(match starved {
            Some(c) => EpisodeError::Starved { class: c.clone(), k_shot, query_shots },
            None => EpisodeError::TooFewClasses { available: eligible.len(), n_way },
        });
    }
    eligible.shuffle(&mut rng);
    let mut classes: Vec<String> = eligible[..n_way].iter().map(|c| (*c).clone()).collect();
    classes.sort();

    let mut order: Vec<usize> = (0..dataset.sentences.len())
        .filter(|&i| classes.iter().any(|c| per_sentence[i].contains_key(c.as_str())))
        .collect();
    order.shuffle(&mut rng);

    let mut used = vec![false; dataset.sentences.len()];
    let mut fill = |target: usize| -> Result<Vec<usize>, EpisodeError> {
        let mut have: BTreeMap<&str, usize> = classes.iter().map(|c| (c.as_str(), 0)).collect();
        let mut picked = Vec::new();
        for &i in &order {
            if have.values().all(|&n| n >= target) {
                break;
            }
            if used[i] {
                continue;
            }
            let helps = per_sentence[i].keys().any(|c| have.get(c).is_some_and(|&n| n < target));
            if !helps {
                continue;
            }
            used[i] = true;
            picked.push(i);
            for (c, n) in &per_sentence[i] {
                if let Some(h) = have.get_mut(c) {
                    *h += n;
                }
            }
        }
        if let Some((c, _)) = have.iter().find(|(_, &n)| n < target) {
            return Err(EpisodeError::Starved { class: c.to_string(), k_shot, query_shots });
        }
        Ok(picked)
    };
    let support_ids = fill(k_shot)?;
    let query_ids = fill(query_shots)?;

    let take = |ids: &[usize]| -> Result<Vec<LabeledSentence>, EpisodeError> {
        ids.iter()
            .map(|&i| relabel_to_episode(&dataset.sentences[i], &classes).map_err(EpisodeError::from))
            .collect()
    };
    Ok(Episode { support: take(&support_ids)?, query: take(&query_ids)?, classes, support_ids, query_ids })
}

/// `count` episodes with seeds `base_seed + index`, sampled in parallel.
pub fn sample_episodes(
    dataset: &Dataset,
    pool: &BTreeSet<String>,
    shape: EpisodeShape,
    count: usize,
    base_seed: u64,
) -> Result<Vec<Episode>, EpisodeError> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| sample_episode(dataset, pool, shape, base_seed.wrapping_add(i as u64)))
        .collect()
}

/// Violations of the episode invariants, empty when the episode is valid.
pub fn episode_violations(ep: &Episode, shape: EpisodeShape) -> Vec<String> {
    let mut v = Vec::new();
    let distinct: BTreeSet<&String> = ep.classes.iter().collect();
    if ep.classes.len() != shape.n_way || distinct.len() != shape.n_way {
        v.push(format!("expected {} distinct classes, got {:?}", shape.n_way, ep.classes));
    }
    let count = |set: &[LabeledSentence], c: &str| -> usize {
        set.iter().map(|s| class_counts(s).get(c).copied().unwrap_or(0)).sum()
    };
    for c in &ep.classes {
        if count(&ep.support, c) < shape.k_shot {
            v.push(format!("class {c} has fewer than {} support spans", shape.k_shot));
        }
        if count(&ep.query, c) < shape.query_shots {
            v.push(format!("class {c} has fewer than {} query spans", shape.query_shots));
        }
    }
    let s: BTreeSet<usize> = ep.support_ids.iter().copied().collect();
    if ep.query_ids.iter().any(|q| s.contains(q)) {
        v.push("support and query share a sentence".to_string());
    }
    for sent in ep.support.iter().chain(&ep.query) {
        for sp in sent.spans.as_deref().unwrap_or_default() {
            match &sp.label {
                Some(l) if ep.classes.contains(l) => {}
                other => v.push(format!("span label {other:?} outside the episode classes")),
            }
        }
    }
    v
}

pub fn write_episodes<W: Write>(mut w: W, episodes: &[Episode]) -> Result<(), EpisodeError> {
    for e in episodes {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes<R: BufRead>(r: R) -> Result<Vec<Episode>, EpisodeError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| EpisodeError::Malformed { line: i + 1, message };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        for key in ["classes", "support", "query"] {
            if value.get(key).is_none() {
                return Err(malformed(format!("missing key {key:?}")));
            }
        }
        let ep: Episode = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        for s in ep.support.iter().chain(&ep.query) {
            let line = serde_json::to_string(s).map_err(|e| malformed(e.to_string()))?;
            crate::corpus::parse_sentence_record(&line, i + 1).map_err(|e| malformed(e.to_string()))?;
        }
        out.push(ep);
    }
    Ok(out)
}

pub fn persist_episodes(episodes: &[Episode], path: impl AsRef<Path>) -> Result<(), EpisodeError> {
    write_episodes(BufWriter::new(File::create(path)?), episodes)
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>, EpisodeError> {
    read_episodes(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_synthetic_corpus;

    fn inv(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn partition_sizes_follow_rounding() {
        let s = partition_classes(&inv(&["a", "b", "c", "d"]), (0.5, 0.25, 0.25), 1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (2, 1, 1));
        assert!(s.train.is_disjoint(&s.dev) && s.train.is_disjoint(&s.test) && s.dev.is_disjoint(&s.test));
        assert_eq!(s, partition_classes(&inv(&["a", "b", "c", "d"]), (0.5, 0.25, 0.25), 1).unwrap());
    }

    #[test]
    fn partition_rejects_small_inventory() {
        assert!(matches!(
            partition_classes(&inv(&["a", "b"]), (0.5, 0.25, 0.25), 1),
            Err(EpisodeError::InventoryTooSmall { .. })
        ));
        assert!(matches!(
            partition_classes(&inv(&["a", "b", "c"]), (0.5, 0.5, 0.5), 1),
            Err(EpisodeError::BadFractions(_))
        ));
    }

    #[test]
    fn two_way_two_shot() {
        let d = generate_synthetic_corpus(6, 10, 2);
        let shape = EpisodeShape::new(2, 2);
        let ep = sample_episode(&d, &d.class_inventory, shape, 9).unwrap();
        assert!(episode_violations(&ep, shape).is_empty());
        assert_eq!(ep.classes.len(), 2);
    }

    #[test]
    fn minimal_episode() {
        let d = generate_synthetic_corpus(3, 4, 2);
        let shape = EpisodeShape::new(1, 1);
        let ep = sample_episode(&d, &d.class_inventory, shape, 0).unwrap();
        assert!(episode_violations(&ep, shape).is_empty());
        assert!(ep.support_ids.iter().all(|i| !ep.query_ids.contains(i)));
    }

    #[test]
    fn starved_class_is_named() {
        let d = generate_synthetic_corpus(2, 1, 2);
        let err = sample_episode(&d, &inv(&["syn00"]), EpisodeShape::new(1, 5), 0).unwrap_err();
        match err {
            EpisodeError::Starved { class, .. } => assert_eq!(class, "syn00"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn relabel_keeps_tokens() {
        let s = LabeledSentence::from_spans(
            vec!["a".into(), "b".into(), "c".into()],
            vec![crate::tagging::Span::typed(0, 0, "x"), crate::tagging::Span::typed(2, 2, "y")],
        )
        .unwrap();
        let r = relabel_to_episode(&s, &["y".to_string()]).unwrap();
        assert_eq!(r.tokens, s.tokens);
        assert_eq!(r.spans.unwrap().len(), 1);
        assert_eq!(r.tags.unwrap()[0], crate::tagging::Tag::O);
    }

    #[test]
    fn episode_file_round_trip_and_errors() {
        let d = generate_synthetic_corpus(6, 6, 5);
        let eps = sample_episodes(&d, &d.class_inventory, EpisodeShape::new(2, 1), 5, 10).unwrap();
        let mut buf = Vec::new();
        write_episodes(&mut buf, &eps).unwrap();
        assert_eq!(read_episodes(buf.as_slice()).unwrap(), eps);

        let mut empty = Vec::new();
        write_episodes(&mut empty, &[]).unwrap();
        assert!(empty.is_empty());
        assert!(read_episodes(empty.as_slice()).unwrap().is_empty());

        let bad = "{\"support\": [], \"query\": []}\n";
        assert!(matches!(read_episodes(bad.as_bytes()), Err(EpisodeError::Malformed { line: 1, .. })));
    }
}
