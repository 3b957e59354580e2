//! Jaccard word-overlap computation and Easy/Hard test-set partitioning.
//!
//! A caption whose word set overlaps its context word set with Jaccard score
//! strictly above the threshold (default 0.5) is labeled `Easy`: it could be
//! produced by copying from the context alone. The word normalization defined
//! here (lowercase, whitespace split, edge punctuation stripped) is the single
//! definition of "word" shared by corpus statistics and the caption metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ContextualSample};

/// One word occurrence: byte offsets into the source text plus the
/// normalized form used for set comparisons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordToken {
    pub start: usize,
    pub end: usize,
    pub norm: String,
}

/// Split on Unicode whitespace, trim non-alphanumeric characters from both
/// ends of each token, lowercase, and drop tokens that end up empty.
/// Offsets are byte positions of the trimmed token in the original text.
pub fn word_tokens(text: &str) -> Vec<WordToken> {
    let mut out = Vec::new();
    let mut offset = 0;
    for chunk in text.split_whitespace() {
        // split_whitespace does not report positions; find each chunk from
        // the running offset (chunks appear in order).
        let rel = text[offset..].find(chunk).expect("chunk comes from text");
        let chunk_start = offset + rel;
        offset = chunk_start + chunk.len();

        let trimmed = chunk.trim_matches(|c: char| !c.is_alphanumeric());
        if trimmed.is_empty() {
            continue;
        }
        let lead = chunk.find(trimmed).expect("trimmed is a substring");
        out.push(WordToken {
            start: chunk_start + lead,
            end: chunk_start + lead + trimmed.len(),
            norm: trimmed.to_lowercase(),
        });
    }
    out
}

/// The set of normalized word types in a text.
pub fn word_set(text: &str) -> BTreeSet<String> {
    word_tokens(text).into_iter().map(|w| w.norm).collect()
}

/// Jaccard similarity |a ∩ b| / |a ∪ b|. Both sets empty yields 0.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Which text fields count as "context" when scoring overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    Description,
    Section,
    /// description ⊕ " " ⊕ section
    Wiki,
}

impl ContextMode {
    pub fn context_text(&self, sample: &ContextualSample) -> String {
        match self {
            ContextMode::Description => sample.description.clone(),
            ContextMode::Section => sample.section.clone(),
            ContextMode::Wiki => format!("{} {}", sample.description, sample.section),
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "description" => Ok(ContextMode::Description),
            "section" => Ok(ContextMode::Section),
            "wiki" => Ok(ContextMode::Wiki),
            other => Err(crate::Error::InvalidArgument(format!(
                "unknown context mode `{other}` (expected description|section|wiki)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsetLabel {
    Easy,
    Hard,
}

/// Per-sample overlap score and subset label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JaccardRecord {
    pub sample_id: String,
    pub score: f64,
    pub label: SubsetLabel,
    pub context_mode: ContextMode,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Score every sample's caption against its context and label it `Easy`
/// iff the score is strictly greater than `threshold`.
pub fn assign(corpus: &Corpus, context_mode: ContextMode, threshold: f64) -> Vec<JaccardRecord> {
    corpus
        .samples
        .iter()
        .map(|s| {
            let caption = word_set(&s.caption);
            let context = word_set(&context_mode.context_text(s));
            let score = jaccard(&caption, &context);
            JaccardRecord {
                sample_id: s.id.clone(),
                score,
                label: if score > threshold { SubsetLabel::Easy } else { SubsetLabel::Hard },
                context_mode,
            }
        })
        .collect()
}

/// Mean caption-context overlap for ground truth and generated captions,
/// overall and per Easy/Hard subset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OverlapReport {
    pub gt_overlap: f64,
    pub gen_overlap: f64,
    pub easy: SubsetOverlap,
    pub hard: SubsetOverlap,
    /// Sample ids with no generated caption; excluded from the means.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SubsetOverlap {
    pub n: usize,
    pub gt_overlap: f64,
    pub gen_overlap: f64,
}

/// Compare generated captions against their context the same way the ground
/// truth is compared. A generated overlap exceeding the ground-truth overlap
/// is the copy-shortcut diagnostic.
///
/// Sums run in corpus order so the report is bit-reproducible.
pub fn overlap_report(
    generated: &std::collections::HashMap<String, String>,
    corpus: &Corpus,
    records: &[JaccardRecord],
) -> OverlapReport {
    let label_of: std::collections::HashMap<&str, SubsetLabel> =
        records.iter().map(|r| (r.sample_id.as_str(), r.label)).collect();
    let mode = records.first().map(|r| r.context_mode).unwrap_or(ContextMode::Wiki);

    let mut missing = Vec::new();
    // (n, gt_sum, gen_sum) for overall / easy / hard
    let mut acc = [(0usize, 0.0f64, 0.0f64); 3];
    for sample in &corpus.samples {
        let Some(gen_caption) = generated.get(&sample.id) else {
            missing.push(sample.id.clone());
            continue;
        };
        let context = word_set(&mode.context_text(sample));
        let gt = jaccard(&word_set(&sample.caption), &context);
        let gen = jaccard(&word_set(gen_caption), &context);
        let subset = match label_of.get(sample.id.as_str()) {
            Some(SubsetLabel::Easy) => 1,
            _ => 2,
        };
        for idx in [0, subset] {
            acc[idx].0 += 1;
            acc[idx].1 += gt;
            acc[idx].2 += gen;
        }
    }
    let mean = |(n, gt, gen): (usize, f64, f64)| {
        if n == 0 {
            (0.0, 0.0)
        } else {
            (gt / n as f64, gen / n as f64)
        }
    };
    let (gt_overlap, gen_overlap) = mean(acc[0]);
    let (easy_gt, easy_gen) = mean(acc[1]);
    let (hard_gt, hard_gen) = mean(acc[2]);
    OverlapReport {
        gt_overlap,
        gen_overlap,
        easy: SubsetOverlap { n: acc[1].0, gt_overlap: easy_gt, gen_overlap: easy_gen },
        hard: SubsetOverlap { n: acc[2].0, gt_overlap: hard_gt, gen_overlap: hard_gen },
        missing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;

    fn sample(id: &str, caption: &str, section: &str, description: &str) -> ContextualSample {
        ContextualSample {
            id: id.to_string(),
            page_title: String::new(),
            caption: caption.to_string(),
            section: section.to_string(),
            description: description.to_string(),
            image_feature_id: None,
            source: Source::Wiki,
        }
    }

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn word_set_normalizes_and_dedups() {
        assert_eq!(word_set("Zurich, Zurich!"), set(&["zurich"]));
        assert_eq!(word_set(""), BTreeSet::new());
        assert_eq!(word_set("Lake Zurich view"), set(&["lake", "zurich", "view"]));
    }

    #[test]
    fn word_tokens_report_trimmed_offsets() {
        let toks = word_tokens("  Hello, world! ");
        assert_eq!(toks.len(), 2);
        assert_eq!(&toks[0].norm, "hello");
        assert_eq!((toks[0].start, toks[0].end), (2, 7));
        assert_eq!((toks[1].start, toks[1].end), (9, 14));
    }

    #[test]
    fn word_tokens_keep_inner_punctuation() {
        let toks = word_tokens("don't stop");
        assert_eq!(toks[0].norm, "don't");
    }

    #[test]
    fn jaccard_basic() {
        let a = set(&["a", "b", "c"]);
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &set(&["x", "y"])), 0.0);
        // {a,b,c} vs {a,b,d,e}: |∩|=2, |∪|=5
        assert_eq!(jaccard(&a, &set(&["a", "b", "d", "e"])), 0.4);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 0.0);
    }

    #[test]
    fn assign_uses_strict_threshold() {
        // caption {a,b,c} ⊂ context {a,b,c,d,e}: J = 3/5 = 0.6 → Easy
        let easy = sample("easy", "a b c", "", "a b c d e");
        // caption {a,b} vs context {a,b,c,d}: J = 2/4 = 0.5 exactly → Hard
        let boundary = sample("boundary", "a b", "", "a b c d");
        let empty = sample("empty", "", "", "a b");
        let corpus = Corpus { samples: vec![easy, boundary, empty] };
        let records = assign(&corpus, ContextMode::Description, DEFAULT_THRESHOLD);
        assert_eq!(records[0].label, SubsetLabel::Easy);
        assert!((records[0].score - 0.6).abs() < 1e-12);
        assert_eq!(records[1].label, SubsetLabel::Hard);
        assert!((records[1].score - 0.5).abs() < 1e-12);
        assert_eq!(records[2].label, SubsetLabel::Hard);
        assert_eq!(records[2].score, 0.0);
    }

    #[test]
    fn assign_is_order_independent() {
        let a = sample("a", "x y", "", "x y z");
        let b = sample("b", "p", "", "q r");
        let fwd = assign(&Corpus { samples: vec![a.clone(), b.clone()] }, ContextMode::Wiki, 0.5);
        let rev = assign(&Corpus { samples: vec![b, a] }, ContextMode::Wiki, 0.5);
        let find = |rs: &[JaccardRecord], id: &str| {
            rs.iter().find(|r| r.sample_id == id).map(|r| r.score).unwrap()
        };
        assert_eq!(find(&fwd, "a"), find(&rev, "a"));
        assert_eq!(find(&fwd, "b"), find(&rev, "b"));
    }

    #[test]
    fn overlap_report_hand_computed_fixture() {
        // Four samples, description-only context, hand-computed Jaccard scores.
        let s1 = sample("1", "a b", "", "a b");       // gt J = 1.0
        let s2 = sample("2", "a b", "", "a b c d");   // gt J = 2/4 = 0.5
        let s3 = sample("3", "x", "", "a b");         // gt J = 0
        let s4 = sample("4", "a", "", "a b c");       // gt J = 1/3
        let corpus = Corpus { samples: vec![s1, s2, s3, s4] };
        let records = assign(&corpus, ContextMode::Description, 0.5);

        let mut generated = std::collections::HashMap::new();
        generated.insert("1".to_string(), "a b".to_string());     // gen J = 1.0
        generated.insert("2".to_string(), "a b c d".to_string()); // gen J = 1.0 (verbatim context)
        generated.insert("3".to_string(), "a".to_string());       // gen J = 1/2
        generated.insert("4".to_string(), "q".to_string());       // gen J = 0

        let report = overlap_report(&generated, &corpus, &records);
        let expected_gt = (1.0 + 0.5 + 0.0 + 1.0 / 3.0) / 4.0;
        let expected_gen = (1.0 + 1.0 + 0.5 + 0.0) / 4.0;
        assert!((report.gt_overlap - expected_gt).abs() < 1e-12);
        assert!((report.gen_overlap - expected_gen).abs() < 1e-12);
        // Only sample 1 is Easy (score 1.0 > 0.5); sample 2 sits on the boundary.
        assert_eq!(report.easy.n, 1);
        assert_eq!(report.hard.n, 3);
        assert!(report.missing.is_empty());
    }

    #[test]
    fn overlap_report_gen_equals_gt_when_copied() {
        let s = sample("1", "a b c", "", "a b d");
        let corpus = Corpus { samples: vec![s] };
        let records = assign(&corpus, ContextMode::Description, 0.5);
        let mut generated = std::collections::HashMap::new();
        generated.insert("1".to_string(), "a b c".to_string());
        let report = overlap_report(&generated, &corpus, &records);
        assert_eq!(report.gt_overlap, report.gen_overlap);
    }

    #[test]
    fn overlap_report_counts_missing() {
        let corpus = Corpus { samples: vec![sample("1", "a", "", "a"), sample("2", "b", "", "b")] };
        let records = assign(&corpus, ContextMode::Description, 0.5);
        let mut generated = std::collections::HashMap::new();
        generated.insert("1".to_string(), "a".to_string());
        let report = overlap_report(&generated, &corpus, &records);
        assert_eq!(report.missing, vec!["2".to_string()]);
        assert_eq!(report.gt_overlap, 1.0);
    }
}
