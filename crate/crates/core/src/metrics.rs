//! Caption evaluation: BLEU-4, ROUGE-L, CIDEr-D, and named-entity insertion
//! precision/recall, reported overall and per Easy/Hard subset.
//!
//! Metric tokenization is the split module's word normalization, so metrics
//! and overlap scores agree on word identity. All reductions run in a fixed
//! order; scores are independent of input permutation.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::ner::{tag_heuristic, EntityLabel, Gazetteer};
use crate::split::{
    self, word_tokens, JaccardRecord, OverlapReport, SubsetLabel,
};
use crate::{Error, Result};

const MAX_NGRAM: usize = 4;
/// ROUGE-L recall weight.
const ROUGE_BETA: f64 = 1.2;
/// CIDEr-D length-penalty sigma.
const CIDER_SIGMA: f64 = 6.0;

/// Lowercased, punctuation-trimmed word tokens.
pub fn metric_tokens(text: &str) -> Vec<String> {
    word_tokens(text).into_iter().map(|w| w.norm).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4: geometric mean of clipped n-gram precisions for
/// n = 1..4 with brevity penalty. Without smoothing any zero precision zeroes
/// the score; with smoothing, counts for n ≥ 2 get add-1.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<String>], smooth: bool) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "bleu4 needs one reference per candidate, got {} candidates / {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    let mut matches = [0u64; MAX_NGRAM];
    let mut totals = [0u64; MAX_NGRAM];
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=MAX_NGRAM {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &cand_counts {
                totals[n - 1] += count;
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_NGRAM {
        let (m, t) = if smooth && n >= 1 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let precision = (log_sum / MAX_NGRAM as f64).exp();
    let bp = if cand_len < ref_len && cand_len > 0 {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(precision * bp)
}

/// LCS length between two token sequences.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure for one pair, recall-weighted with β = 1.2.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 || candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + beta2) * r * p / (r + beta2 * p)
}

/// Mean ROUGE-L over pairs.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::InvalidArgument("rouge_l needs aligned candidate/reference lists".into()));
    }
    let sum: f64 =
        candidates.iter().zip(references).map(|(c, r)| rouge_l_pair(c, r)).sum();
    Ok(sum / candidates.len() as f64)
}

/// Document frequencies of reference n-grams (n = 1..4).
#[derive(Debug, Clone, Default)]
pub struct IdfTable {
    df: HashMap<Vec<String>, u64>,
    n_docs: u64,
    scale: f64,
}

impl IdfTable {
    /// Count each distinct n-gram once per reference document.
    pub fn build(references: &[Vec<String>]) -> Self {
        let mut df: HashMap<Vec<String>, u64> = HashMap::new();
        for reference in references {
            let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
            for n in 1..=MAX_NGRAM {
                if reference.len() >= n {
                    for gram in reference.windows(n) {
                        seen.insert(gram.to_vec());
                    }
                }
            }
            for gram in seen {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        IdfTable { df, n_docs: references.len() as u64, scale: 1.0 }
    }

    pub fn n_docs(&self) -> u64 {
        self.n_docs
    }

    /// ln(N / df), with unseen n-grams treated as df = 1 (maximum weight).
    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(1).max(1);
        self.scale * ((self.n_docs as f64).ln() - (df as f64).ln())
    }

    /// Uniformly scaled copy; CIDEr-D must be invariant to this.
    pub fn scaled(&self, factor: f64) -> Self {
        IdfTable { df: self.df.clone(), n_docs: self.n_docs, scale: self.scale * factor }
    }
}

/// CIDEr-D for one pair: cosine similarity of TF-IDF n-gram vectors with
/// candidate counts clipped to reference counts and a Gaussian length
/// penalty, averaged over n = 1..4 and scaled by 10.
pub fn cider_d_pair(candidate: &[String], reference: &[String], idf: &IdfTable) -> f64 {
    let delta = candidate.len() as f64 - reference.len() as f64;
    let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let cand_counts = ngram_counts(candidate, n);
        let ref_counts = ngram_counts(reference, n);
        let weight = |gram: &[String], tf: u64| tf as f64 * idf.idf(gram);
        let mut dot = 0.0;
        for (gram, &tf_c) in &cand_counts {
            if let Some(&tf_r) = ref_counts.get(gram) {
                // clip candidate counts to reference counts
                dot += weight(gram, tf_c.min(tf_r)) * weight(gram, tf_r);
            }
        }
        let norm = |counts: &HashMap<&[String], u64>| {
            counts
                .iter()
                .map(|(gram, &tf)| {
                    let w = weight(gram, tf);
                    w * w
                })
                .sum::<f64>()
                .sqrt()
        };
        let nc = norm(&cand_counts);
        let nr = norm(&ref_counts);
        if nc > 0.0 && nr > 0.0 {
            sum += penalty * dot / (nc * nr);
        }
    }
    10.0 * sum / MAX_NGRAM as f64
}

/// Mean CIDEr-D over pairs. The IDF table must come from a non-empty
/// reference corpus.
pub fn cider_d(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    idf: &IdfTable,
) -> Result<f64> {
    if idf.n_docs == 0 {
        return Err(Error::InvalidArgument("cider_d requires a non-empty IDF table".into()));
    }
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::InvalidArgument("cider_d needs aligned candidate/reference lists".into()));
    }
    let sum: f64 =
        candidates.iter().zip(references).map(|(c, r)| cider_d_pair(c, r, idf)).sum();
    Ok(sum / candidates.len() as f64)
}

/// Normalize an entity surface for exact-match comparison.
pub fn normalize_entity(surface: &str) -> String {
    metric_tokens(surface).join(" ")
}

/// Micro-averaged precision/recall over per-caption entity surface sets.
/// Captions with an empty generated set are excluded from the precision
/// sums, and captions with an empty ground-truth set from the recall sums.
pub fn ne_precision_recall(
    generated: &[BTreeSet<String>],
    ground_truth: &[BTreeSet<String>],
) -> (f64, f64) {
    let mut p_hits = 0usize;
    let mut p_total = 0usize;
    let mut r_hits = 0usize;
    let mut r_total = 0usize;
    for (gen, gt) in generated.iter().zip(ground_truth) {
        let inter = gen.intersection(gt).count();
        if !gen.is_empty() {
            p_hits += inter;
            p_total += gen.len();
        }
        if !gt.is_empty() {
            r_hits += inter;
            r_total += gt.len();
        }
    }
    let precision = if p_total == 0 { 0.0 } else { p_hits as f64 / p_total as f64 };
    let recall = if r_total == 0 { 0.0 } else { r_hits as f64 / r_total as f64 };
    (precision, recall)
}

/// Aggregate scores for one caption set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ne_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ne_recall: Option<f64>,
    pub avg_gen_length: f64,
    pub n_evaluated: usize,
}

/// Full evaluation output: overall report, optional Easy/Hard breakdown,
/// optional overlap diagnostic, and coverage gaps.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub easy: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<OverlapReport>,
    pub missing_ids: Vec<String>,
}

/// Entity surfaces of one caption, tagged with the gazetteer and filtered to
/// real labels (`Other` runs do not count).
fn entity_set(text: &str, gazetteer: &Gazetteer) -> BTreeSet<String> {
    tag_heuristic(text, gazetteer)
        .into_iter()
        .filter(|s| s.label != EntityLabel::Other)
        .map(|s| normalize_entity(&s.surface))
        .collect()
}

struct PairData {
    cand: Vec<String>,
    reference: Vec<String>,
    gen_entities: BTreeSet<String>,
    gt_entities: BTreeSet<String>,
    label: Option<SubsetLabel>,
}

fn report_for(pairs: &[&PairData], idf: &IdfTable, with_ne: bool, smooth: bool) -> Result<MetricReport> {
    let cands: Vec<Vec<String>> = pairs.iter().map(|p| p.cand.clone()).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.reference.clone()).collect();
    let (ne_precision, ne_recall) = if with_ne {
        let gens: Vec<BTreeSet<String>> = pairs.iter().map(|p| p.gen_entities.clone()).collect();
        let gts: Vec<BTreeSet<String>> = pairs.iter().map(|p| p.gt_entities.clone()).collect();
        let (p, r) = ne_precision_recall(&gens, &gts);
        (Some(p), Some(r))
    } else {
        (None, None)
    };
    Ok(MetricReport {
        bleu4: bleu4(&cands, &refs, smooth)?,
        rouge_l: rouge_l(&cands, &refs)?,
        cider_d: cider_d(&cands, &refs, idf)?,
        ne_precision,
        ne_recall,
        avg_gen_length: cands.iter().map(|c| c.len() as f64).sum::<f64>() / cands.len() as f64,
        n_evaluated: pairs.len(),
    })
}

/// Evaluate generated captions against the corpus ground truth.
///
/// Entity precision/recall is computed only when a gazetteer is supplied;
/// both sides then go through the same tagging pathway. When split records
/// are given, Easy/Hard sub-reports and the overlap diagnostic are included.
/// The IDF table is built once over the full evaluated reference set and
/// shared by the subset scores.
pub fn evaluate(
    generated: &HashMap<String, String>,
    corpus: &Corpus,
    gazetteer: Option<&Gazetteer>,
    split_records: Option<&[JaccardRecord]>,
    smooth: bool,
) -> Result<EvalReport> {
    let label_of: HashMap<&str, SubsetLabel> = split_records
        .map(|rs| rs.iter().map(|r| (r.sample_id.as_str(), r.label)).collect())
        .unwrap_or_default();

    let mut pairs: Vec<PairData> = Vec::new();
    let mut missing_ids = Vec::new();
    for sample in &corpus.samples {
        let Some(gen_text) = generated.get(&sample.id) else {
            missing_ids.push(sample.id.clone());
            continue;
        };
        pairs.push(PairData {
            cand: metric_tokens(gen_text),
            reference: metric_tokens(&sample.caption),
            gen_entities: gazetteer.map(|g| entity_set(gen_text, g)).unwrap_or_default(),
            gt_entities: gazetteer.map(|g| entity_set(&sample.caption, g)).unwrap_or_default(),
            label: label_of.get(sample.id.as_str()).copied(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no generated captions cover the corpus".into()));
    }
    let idf = IdfTable::build(&pairs.iter().map(|p| p.reference.clone()).collect::<Vec<_>>());
    let all: Vec<&PairData> = pairs.iter().collect();
    let overall = report_for(&all, &idf, gazetteer.is_some(), smooth)?;

    let (easy, hard, overlap) = if let Some(records) = split_records {
        let easy_pairs: Vec<&PairData> =
            pairs.iter().filter(|p| p.label == Some(SubsetLabel::Easy)).collect();
        let hard_pairs: Vec<&PairData> =
            pairs.iter().filter(|p| p.label != Some(SubsetLabel::Easy)).collect();
        let easy = if easy_pairs.is_empty() {
            None
        } else {
            Some(report_for(&easy_pairs, &idf, gazetteer.is_some(), smooth)?)
        };
        let hard = if hard_pairs.is_empty() {
            None
        } else {
            Some(report_for(&hard_pairs, &idf, gazetteer.is_some(), smooth)?)
        };
        let overlap = split::overlap_report(generated, corpus, records);
        (easy, hard, Some(overlap))
    } else {
        (None, None, None)
    };

    Ok(EvalReport { overall, easy, hard, overlap, missing_ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        metric_tokens(s)
    }

    #[test]
    fn bleu_identity_pair_scores_one() {
        let c = vec![toks("a lake under the winter sun")];
        assert!((bleu4(&c, &c, false).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_no_common_fourgram_scores_zero() {
        let c = vec![toks("alpha beta gamma delta epsilon")];
        let r = vec![toks("one two three four five")];
        assert_eq!(bleu4(&c, &r, false).unwrap(), 0.0);
    }

    #[test]
    fn bleu_smoothing_lifts_zero_precisions() {
        let c = vec![toks("the lake in winter light")];
        let r = vec![toks("the lake under winter light")];
        let plain = bleu4(&c, &r, false).unwrap();
        let smooth = bleu4(&c, &r, true).unwrap();
        assert!(smooth > 0.0);
        assert!(plain == 0.0 || smooth >= plain * 0.5);
    }

    #[test]
    fn bleu_empty_reference_set_is_error() {
        assert!(bleu4(&[], &[], false).is_err());
    }

    #[test]
    fn bleu_matches_hand_computation() {
        // cand "a b c d", ref "a b c e": 1-gram 3/4, 2-gram 2/3, 3-gram 1/2,
        // 4-gram 0/1 → unsmoothed 0. With add-1 smoothing on n≥2:
        // p2 = 3/4, p3 = 2/3... wait: matches+1/total+1 = (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1).
        let c = vec![toks("a b c d")];
        let r = vec![toks("a b c e")];
        assert_eq!(bleu4(&c, &r, false).unwrap(), 0.0);
        let expected = ((3.0f64 / 4.0).ln() / 4.0
            + (3.0f64 / 4.0).ln() / 4.0
            + (2.0f64 / 3.0).ln() / 4.0
            + (1.0f64 / 2.0).ln() / 4.0)
            .exp();
        assert!((bleu4(&c, &r, true).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let a = toks("the same sentence here");
        assert!((rouge_l_pair(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l_pair(&toks("aa bb"), &toks("cc dd")), 0.0);
    }

    #[test]
    fn rouge_hand_lcs() {
        // "a b c d" vs "a c d e": LCS = a c d = 3, P = R = 3/4 → F = 0.75
        let f = rouge_l_pair(&toks("a b c d"), &toks("a c d e"));
        assert!((f - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cider_identity_unique_ngrams_scores_ten() {
        let refs = vec![toks("red boats moor in the old harbor"), toks("snow falls over quiet rooftops at dusk")];
        let idf = IdfTable::build(&refs);
        let score = cider_d_pair(&refs[0], &refs[0], &idf);
        assert!((score - 10.0).abs() < 1e-9, "score {score}");
    }

    #[test]
    fn cider_single_document_corpus_degenerates_to_zero() {
        let refs = vec![toks("a b c d")];
        let idf = IdfTable::build(&refs);
        // idf = ln(1/1) = 0 → zero vectors → similarity contributes 0
        assert_eq!(cider_d(&refs.clone(), &refs, &idf).unwrap(), 0.0);
    }

    #[test]
    fn cider_invariant_to_uniform_idf_scaling() {
        let refs = vec![
            toks("red boats moor in the old harbor"),
            toks("snow falls over quiet rooftops at dusk"),
            toks("a festival parade crosses the stone bridge"),
        ];
        let cands = vec![
            toks("boats moor in the old harbor"),
            toks("snow falls over rooftops at night"),
            toks("a parade crosses the bridge"),
        ];
        let idf = IdfTable::build(&refs);
        let doubled = idf.scaled(2.0);
        let a = cider_d(&cands, &refs, &idf).unwrap();
        let b = cider_d(&cands, &refs, &doubled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cider_empty_idf_is_error() {
        assert!(cider_d(&[toks("a")], &[toks("a")], &IdfTable::default()).is_err());
    }

    #[test]
    fn cider_length_penalty_applies() {
        let refs = vec![toks("one two three four five six"), toks("seven eight nine ten")];
        let idf = IdfTable::build(&refs);
        let short = toks("one two");
        let full = cider_d_pair(&refs[0], &refs[0], &idf);
        let trunc = cider_d_pair(&short, &refs[0], &idf);
        assert!(trunc < full);
    }

    #[test]
    fn ne_precision_recall_set_enumeration() {
        let gen = vec![["zurich", "ubs"].iter().map(|s| s.to_string()).collect()];
        let gt = vec![["zurich", "credit suisse"].iter().map(|s| s.to_string()).collect()];
        let (p, r) = ne_precision_recall(&gen, &gt);
        assert_eq!((p, r), (0.5, 0.5));
    }

    #[test]
    fn ne_equal_sets_score_one() {
        let sets: Vec<BTreeSet<String>> =
            vec![["a".to_string(), "b".to_string()].into_iter().collect()];
        let (p, r) = ne_precision_recall(&sets, &sets);
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn ne_empty_gen_affects_recall_only() {
        let gen = vec![BTreeSet::new(), ["x".to_string()].into_iter().collect()];
        let gt: Vec<BTreeSet<String>> = vec![
            ["a".to_string()].into_iter().collect(),
            ["x".to_string()].into_iter().collect(),
        ];
        let (p, r) = ne_precision_recall(&gen, &gt);
        assert_eq!(p, 1.0); // the empty-gen caption is excluded from precision
        assert_eq!(r, 0.5); // but its ground truth still counts against recall
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let cands = vec![toks("a b c d"), toks("e f g h"), toks("i j k l")];
        let refs = vec![toks("a b c x"), toks("e f y h"), toks("i j k l")];
        let idf = IdfTable::build(&refs);
        let fwd = (
            bleu4(&cands, &refs, true).unwrap(),
            rouge_l(&cands, &refs).unwrap(),
            cider_d(&cands, &refs, &idf).unwrap(),
        );
        let perm = [2usize, 0, 1];
        let cands_p: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let rev = (
            bleu4(&cands_p, &refs_p, true).unwrap(),
            rouge_l(&cands_p, &refs_p).unwrap(),
            cider_d(&cands_p, &refs_p, &idf).unwrap(),
        );
        assert!((fwd.0 - rev.0).abs() < 1e-12);
        assert!((fwd.1 - rev.1).abs() < 1e-12);
        assert!((fwd.2 - rev.2).abs() < 1e-12);
    }

    #[test]
    fn evaluate_ground_truth_as_generated_is_perfect() {
        use crate::corpus::{ContextualSample, Source};
        let mk = |id: &str, caption: &str| ContextualSample {
            id: id.into(),
            page_title: String::new(),
            caption: caption.into(),
            section: "context words".into(),
            description: String::new(),
            image_feature_id: None,
            source: Source::Wiki,
        };
        let corpus = Corpus {
            samples: vec![
                mk("1", "Kala visits the harbor at dawn"),
                mk("2", "Dorun stands beside the old gate"),
            ],
        };
        let mut gaz = Gazetteer::new();
        gaz.insert("Kala", EntityLabel::Person).unwrap();
        gaz.insert("Dorun", EntityLabel::Person).unwrap();
        let generated: HashMap<String, String> =
            corpus.samples.iter().map(|s| (s.id.clone(), s.caption.clone())).collect();
        let report = evaluate(&generated, &corpus, Some(&gaz), None, false).unwrap();
        assert!((report.overall.bleu4 - 1.0).abs() < 1e-12);
        assert!((report.overall.rouge_l - 1.0).abs() < 1e-12);
        assert_eq!(report.overall.ne_precision, Some(1.0));
        assert_eq!(report.overall.ne_recall, Some(1.0));
        assert_eq!(report.overall.n_evaluated, 2);
        assert!(report.missing_ids.is_empty());
    }

    #[test]
    fn evaluate_reports_coverage_gaps() {
        use crate::corpus::{ContextualSample, Source};
        let corpus = Corpus {
            samples: vec![ContextualSample {
                id: "only".into(),
                page_title: String::new(),
                caption: "some caption here".into(),
                section: String::new(),
                description: String::new(),
                image_feature_id: None,
                source: Source::Wiki,
            }],
        };
        let report = evaluate(&HashMap::new(), &corpus, None, None, false);
        assert!(report.is_err());
        let mut generated = HashMap::new();
        generated.insert("only".into(), "some caption here".into());
        generated.insert("phantom".into(), "ignored".into());
        let report = evaluate(&generated, &corpus, None, None, false).unwrap();
        assert!(report.missing_ids.is_empty());
        assert!(report.overall.ne_precision.is_none());
    }
}
