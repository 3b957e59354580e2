//! Named-entity spans: sidecar annotation files, a gazetteer fallback tagger,
//! label filtering per domain, and alignment of character spans to whole-word
//! token ranges.
//!
//! External NER output (e.g. from a statistical tagger) is consumed through
//! sidecar JSONL files carrying character offsets. Internally spans are kept
//! as byte offsets into the UTF-8 text; the conversion happens when a record
//! is resolved against its sample text.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Reject;
use crate::split::word_tokens;
use crate::tokenize::{word_groups, TokenSeq};
use crate::{Error, Result};

/// Closed label set. `Other` marks capitalized runs the gazetteer does not
/// know; it is filtered out before masking in every mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityLabel {
    Person,
    Org,
    Gpe,
    Norp,
    Loc,
    Fac,
    Other,
}

impl std::str::FromStr for EntityLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PERSON" => Ok(EntityLabel::Person),
            "ORG" => Ok(EntityLabel::Org),
            "GPE" => Ok(EntityLabel::Gpe),
            "NORP" => Ok(EntityLabel::Norp),
            "LOC" => Ok(EntityLabel::Loc),
            "FAC" => Ok(EntityLabel::Fac),
            "OTHER" => Ok(EntityLabel::Other),
            other => Err(Error::InvalidArgument(format!("unknown entity label `{other}`"))),
        }
    }
}

impl std::fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EntityLabel::Person => "PERSON",
            EntityLabel::Org => "ORG",
            EntityLabel::Gpe => "GPE",
            EntityLabel::Norp => "NORP",
            EntityLabel::Loc => "LOC",
            EntityLabel::Fac => "FAC",
            EntityLabel::Other => "OTHER",
        };
        f.write_str(s)
    }
}

/// Which text field of a sample a span annotates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Caption,
    Section,
    Description,
}

/// A span as stored in sidecar files: character offsets, end exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSpan {
    pub start: usize,
    pub end: usize,
    pub label: EntityLabel,
}

/// One sidecar line: all spans for one (sample, field).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub field: Field,
    pub spans: Vec<RawSpan>,
}

/// An entity occurrence resolved against its text: byte offsets, and the
/// surface is exactly the text slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: EntityLabel,
    pub surface: String,
}

/// All loaded annotations, keyed by (sample id, field).
#[derive(Debug, Clone, Default)]
pub struct AnnotationSet {
    records: BTreeMap<(String, Field), Vec<RawSpan>>,
}

impl AnnotationSet {
    /// Insert a record: spans are sorted by start and must not overlap
    /// (within the record or with previously loaded spans for the same key).
    pub fn add_record(&mut self, record: AnnotationRecord) -> Result<()> {
        let key = (record.sample_id, record.field);
        let mut spans = self.records.get(&key).cloned().unwrap_or_default();
        spans.extend(record.spans);
        spans.sort_by_key(|s| (s.start, s.end));
        for s in &spans {
            if s.start >= s.end {
                return Err(Error::Validation(format!(
                    "empty or inverted span ({}, {}) for sample `{}`",
                    s.start, s.end, key.0
                )));
            }
        }
        for w in spans.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::Validation(format!(
                    "overlapping spans ({}, {}) and ({}, {}) for sample `{}`",
                    w[0].start, w[0].end, w[1].start, w[1].end, key.0
                )));
            }
        }
        self.records.insert(key, spans);
        Ok(())
    }

    pub fn raw_spans(&self, sample_id: &str, field: Field) -> &[RawSpan] {
        self.records
            .get(&(sample_id.to_string(), field))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Convert the character spans stored for (sample, field) into byte-offset
    /// [`EntitySpan`]s against `text`. Offsets past the end of the text are a
    /// validation error; a missing record resolves to no spans.
    pub fn resolved_spans(
        &self,
        sample_id: &str,
        field: Field,
        text: &str,
    ) -> Result<Vec<EntitySpan>> {
        resolve_spans(self.raw_spans(sample_id, field), text)
    }

    pub fn iter_records(&self) -> impl Iterator<Item = AnnotationRecord> + '_ {
        self.records.iter().map(|((sample_id, field), spans)| AnnotationRecord {
            sample_id: sample_id.clone(),
            field: *field,
            spans: spans.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Map character offsets to byte offsets and slice surfaces.
pub fn resolve_spans(raw: &[RawSpan], text: &str) -> Result<Vec<EntitySpan>> {
    // byte offset of each char start, plus the end sentinel
    let mut char_starts: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    char_starts.push(text.len());
    let n_chars = char_starts.len() - 1;
    let mut out = Vec::with_capacity(raw.len());
    for span in raw {
        if span.end > n_chars {
            return Err(Error::Validation(format!(
                "span ({}, {}) beyond text of {n_chars} chars",
                span.start, span.end
            )));
        }
        if span.start >= span.end {
            return Err(Error::Validation(format!(
                "empty or inverted span ({}, {})",
                span.start, span.end
            )));
        }
        let start = char_starts[span.start];
        let end = char_starts[span.end];
        out.push(EntitySpan {
            start,
            end,
            label: span.label,
            surface: text[start..end].to_string(),
        });
    }
    Ok(out)
}

/// Load a sidecar JSONL file. Malformed lines and records with overlapping
/// spans are rejected individually; they never abort the load.
pub fn load_annotations(path: &Path) -> Result<(AnnotationSet, Vec<Reject>)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut set = AnnotationSet::default();
    let mut rejects = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject { line_no, reason: format!("malformed JSON: {e}") });
                continue;
            }
        };
        if let Err(e) = set.add_record(record) {
            rejects.push(Reject { line_no, reason: e.to_string() });
        }
    }
    Ok((set, rejects))
}

/// Write one JSONL line per (sample, field), in sorted key order.
pub fn save_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for record in set.iter_records() {
        serde_json::to_writer(&mut w, &record).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// --- gazetteer tagger ---------------------------------------------------------

/// Surface-form lookup table. Keys are word sequences normalized the same way
/// the tagger tokenizes text: edge punctuation trimmed per word, words joined
/// by a single space. Case is preserved.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: HashMap<String, EntityLabel>,
    max_words: usize,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, label: EntityLabel) -> Result<()> {
        let words: Vec<String> = word_tokens(surface)
            .iter()
            .map(|w| surface[w.start..w.end].to_string())
            .collect();
        if words.is_empty() {
            return Err(Error::InvalidArgument("empty gazetteer surface".into()));
        }
        self.max_words = self.max_words.max(words.len());
        self.entries.insert(words.join(" "), label);
        Ok(())
    }

    pub fn lookup(&self, key: &str) -> Option<EntityLabel> {
        self.entries.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, EntityLabel)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// TSV format: `surface<TAB>LABEL`, one entry per line.
pub fn load_gazetteer(path: &Path) -> Result<Gazetteer> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut gaz = Gazetteer::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((surface, label)) = line.split_once('\t') else {
            return Err(Error::Format(format!("gazetteer line {} has no tab", idx + 1)));
        };
        gaz.insert(surface, label.trim().parse()?)?;
    }
    Ok(gaz)
}

pub fn save_gazetteer(gaz: &Gazetteer, path: &Path) -> Result<()> {
    let mut entries: Vec<(&str, EntityLabel)> = gaz.iter().collect();
    entries.sort();
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (surface, label) in entries {
        writeln!(w, "{surface}\t{label}")?;
    }
    w.flush()?;
    Ok(())
}

/// Gazetteer-first heuristic tagger.
///
/// Longest gazetteer match wins, scanning left to right; remaining maximal
/// runs of capitalized words that do not start a sentence are tagged `Other`.
/// No span crosses sentence-terminal punctuation.
pub fn tag_heuristic(text: &str, gazetteer: &Gazetteer) -> Vec<EntitySpan> {
    let tokens = word_tokens(text);
    let n = tokens.len();
    if n == 0 {
        return Vec::new();
    }
    // boundary_after[k]: sentence-terminal punctuation between token k and k+1
    let mut boundary_after = vec![false; n];
    for k in 0..n {
        let gap_end = if k + 1 < n { tokens[k + 1].start } else { text.len() };
        let gap = &text[tokens[k].end..gap_end];
        boundary_after[k] = gap.contains(['.', '!', '?']);
    }
    let sentence_start =
        |k: usize| -> bool { k == 0 || boundary_after[k - 1] };

    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut covered = vec![false; n];

    // Pass 1: longest gazetteer matches.
    let mut i = 0;
    while i < n {
        let mut matched = 0;
        let mut matched_label = EntityLabel::Other;
        let max_len = gazetteer.max_words.min(n - i);
        for len in (1..=max_len).rev() {
            if (i..i + len - 1).any(|k| boundary_after[k]) {
                continue;
            }
            let key = tokens[i..i + len]
                .iter()
                .map(|t| &text[t.start..t.end])
                .collect::<Vec<_>>()
                .join(" ");
            if let Some(label) = gazetteer.lookup(&key) {
                matched = len;
                matched_label = label;
                break;
            }
        }
        if matched > 0 {
            let start = tokens[i].start;
            let end = tokens[i + matched - 1].end;
            spans.push(EntitySpan {
                start,
                end,
                label: matched_label,
                surface: text[start..end].to_string(),
            });
            for slot in covered.iter_mut().skip(i).take(matched) {
                *slot = true;
            }
            i += matched;
        } else {
            i += 1;
        }
    }

    // Pass 2: capitalized runs not at a sentence start become Other.
    let capitalized = |k: usize| -> bool {
        text[tokens[k].start..tokens[k].end].chars().next().is_some_and(|c| c.is_uppercase())
    };
    let mut k = 0;
    while k < n {
        if covered[k] || !capitalized(k) || sentence_start(k) {
            k += 1;
            continue;
        }
        let run_start = k;
        while k + 1 < n && !boundary_after[k] && !covered[k + 1] && capitalized(k + 1) {
            k += 1;
        }
        let start = tokens[run_start].start;
        let end = tokens[k].end;
        spans.push(EntitySpan {
            start,
            end,
            label: EntityLabel::Other,
            surface: text[start..end].to_string(),
        });
        k += 1;
    }

    spans.sort_by_key(|s| s.start);
    spans
}

// --- label filtering ----------------------------------------------------------

/// Entity-label mode: wiki masks the dominant caption types, news adds three
/// more. `Other` is never kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Wiki,
    News,
}

impl LabelMode {
    pub fn keeps(&self, label: EntityLabel) -> bool {
        match (self, label) {
            (_, EntityLabel::Person | EntityLabel::Org | EntityLabel::Gpe) => true,
            (LabelMode::News, EntityLabel::Norp | EntityLabel::Loc | EntityLabel::Fac) => true,
            _ => false,
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wiki" => Ok(LabelMode::Wiki),
            "news" => Ok(LabelMode::News),
            other => Err(Error::InvalidArgument(format!("unknown label mode `{other}`"))),
        }
    }
}

pub fn filter_labels(spans: Vec<EntitySpan>, mode: LabelMode) -> Vec<EntitySpan> {
    spans.into_iter().filter(|s| mode.keeps(s.label)).collect()
}

// --- token alignment ----------------------------------------------------------

/// Strictly ordered, non-overlapping token-index ranges (end exclusive).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpanSet {
    spans: Vec<(usize, usize)>,
}

impl MaskSpanSet {
    pub fn new(spans: Vec<(usize, usize)>) -> Result<Self> {
        for &(s, e) in &spans {
            if s >= e {
                return Err(Error::Validation(format!("empty mask span ({s}, {e})")));
            }
        }
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Validation(format!(
                    "mask spans ({}, {}) and ({}, {}) are not strictly ordered",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(MaskSpanSet { spans })
    }

    pub fn empty() -> Self {
        MaskSpanSet::default()
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Map entity byte spans onto token-index ranges: the minimal contiguous
/// token range intersecting the entity, expanded to whole-word boundaries,
/// with touching ranges merged.
pub fn align_to_tokens(spans: &[EntitySpan], seq: &TokenSeq) -> Result<MaskSpanSet> {
    let text_end = seq.spans.iter().map(|&(_, e)| e).max().unwrap_or(0);
    for w in spans.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::InvalidArgument(format!(
                "entity spans ({}, {}) and ({}, {}) overlap or are unsorted",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    let words = word_groups(seq);
    let word_of = |token_idx: usize| -> usize {
        words
            .iter()
            .position(|&(s, e)| (s..e).contains(&token_idx))
            .expect("word groups cover all tokens")
    };

    let mut ranges: Vec<(usize, usize)> = Vec::new();
    for span in spans {
        if span.start >= span.end || span.end > text_end {
            return Err(Error::InvalidArgument(format!(
                "entity span ({}, {}) outside tokenized text of {} bytes",
                span.start, span.end, text_end
            )));
        }
        let mut first = None;
        let mut last = None;
        for (idx, &(ts, te)) in seq.spans.iter().enumerate() {
            if ts < span.end && span.start < te {
                if first.is_none() {
                    first = Some(idx);
                }
                last = Some(idx);
            }
        }
        let (Some(first), Some(last)) = (first, last) else {
            return Err(Error::InvalidArgument(format!(
                "entity span ({}, {}) intersects no token",
                span.start, span.end
            )));
        };
        // whole-word expansion
        let start = words[word_of(first)].0;
        let end = words[word_of(last)].1;
        match ranges.last_mut() {
            Some(prev) if start <= prev.1 => prev.1 = prev.1.max(end),
            _ => ranges.push((start, end)),
        }
    }
    MaskSpanSet::new(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{encode, train_bpe, BpeVocab, FIRST_LEARNED};

    fn gaz(entries: &[(&str, EntityLabel)]) -> Gazetteer {
        let mut g = Gazetteer::new();
        for (s, l) in entries {
            g.insert(s, *l).unwrap();
        }
        g
    }

    #[test]
    fn add_record_sorts_spans() {
        let mut set = AnnotationSet::default();
        set.add_record(AnnotationRecord {
            sample_id: "s".into(),
            field: Field::Caption,
            spans: vec![
                RawSpan { start: 10, end: 16, label: EntityLabel::Gpe },
                RawSpan { start: 0, end: 4, label: EntityLabel::Person },
            ],
        })
        .unwrap();
        let spans = set.raw_spans("s", Field::Caption);
        assert_eq!(spans[0].start, 0);
        assert_eq!(spans[1].start, 10);
    }

    #[test]
    fn overlapping_record_is_rejected() {
        let mut set = AnnotationSet::default();
        let err = set.add_record(AnnotationRecord {
            sample_id: "s".into(),
            field: Field::Caption,
            spans: vec![
                RawSpan { start: 0, end: 5, label: EntityLabel::Person },
                RawSpan { start: 3, end: 8, label: EntityLabel::Gpe },
            ],
        });
        assert!(err.is_err());
    }

    #[test]
    fn resolve_checks_text_length() {
        let raw = [RawSpan { start: 2, end: 99, label: EntityLabel::Person }];
        assert!(resolve_spans(&raw, "short").is_err());
    }

    #[test]
    fn resolve_converts_char_to_byte_offsets() {
        // "café de Flore": é is 2 bytes; chars 0..4 = bytes 0..5
        let text = "café de Flore";
        let raw = [RawSpan { start: 0, end: 4, label: EntityLabel::Fac }];
        let spans = resolve_spans(&raw, text).unwrap();
        assert_eq!(spans[0].surface, "café");
        assert_eq!((spans[0].start, spans[0].end), (0, 5));
    }

    #[test]
    fn annotations_roundtrip_many_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let mut set = AnnotationSet::default();
        for i in 0..100 {
            set.add_record(AnnotationRecord {
                sample_id: format!("s{i}"),
                field: if i % 2 == 0 { Field::Caption } else { Field::Section },
                spans: vec![
                    RawSpan { start: 0, end: 3 + (i % 5), label: EntityLabel::Person },
                    RawSpan { start: 10 + (i % 3), end: 20, label: EntityLabel::Org },
                ],
            })
            .unwrap();
        }
        save_annotations(&set, &path).unwrap();
        let (loaded, rejects) = load_annotations(&path).unwrap();
        assert!(rejects.is_empty());
        assert_eq!(loaded.len(), set.len());
        for record in set.iter_records() {
            assert_eq!(
                loaded.raw_spans(&record.sample_id, record.field),
                record.spans.as_slice()
            );
        }
    }

    #[test]
    fn load_rejects_bad_lines_without_aborting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"sample_id\":\"a\",\"field\":\"caption\",\"spans\":[{\"start\":0,\"end\":4,\"label\":\"PERSON\"}]}\n",
                "garbage\n",
                "{\"sample_id\":\"b\",\"field\":\"caption\",\"spans\":[{\"start\":0,\"end\":5,\"label\":\"ORG\"},{\"start\":3,\"end\":8,\"label\":\"GPE\"}]}\n",
            ),
        )
        .unwrap();
        let (set, rejects) = load_annotations(&path).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(rejects.len(), 2);
    }

    #[test]
    fn tagger_finds_gazetteer_entities_at_exact_offsets() {
        let g = gaz(&[("UBS", EntityLabel::Org), ("Zurich", EntityLabel::Gpe)]);
        let spans = tag_heuristic("UBS opened in Zurich", &g);
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end, spans[0].label), (0, 3, EntityLabel::Org));
        assert_eq!((spans[1].start, spans[1].end, spans[1].label), (14, 20, EntityLabel::Gpe));
        assert_eq!(spans[1].surface, "Zurich");
    }

    #[test]
    fn tagger_empty_gazetteer_lowercase_text() {
        assert!(tag_heuristic("nothing capitalized here", &Gazetteer::new()).is_empty());
    }

    #[test]
    fn tagger_longest_match_wins() {
        let g = gaz(&[("New York", EntityLabel::Gpe), ("York", EntityLabel::Gpe)]);
        let spans = tag_heuristic("We flew to New York today", &g);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].surface, "New York");
    }

    #[test]
    fn tagger_strips_edge_punctuation() {
        let g = gaz(&[("Zurich", EntityLabel::Gpe)]);
        let spans = tag_heuristic("He lives in Zurich.", &g);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].surface, "Zurich");
    }

    #[test]
    fn tagger_marks_unknown_capitalized_runs_as_other() {
        let spans = tag_heuristic("The tower of Credit Suisse fell", &Gazetteer::new());
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].label, EntityLabel::Other);
        assert_eq!(spans[0].surface, "Credit Suisse");
    }

    #[test]
    fn tagger_skips_sentence_initial_capitals() {
        let spans = tag_heuristic("Tall towers. Next sentence here", &Gazetteer::new());
        assert!(spans.is_empty(), "got {spans:?}");
    }

    #[test]
    fn tagger_runs_do_not_cross_sentence_boundaries() {
        let spans = tag_heuristic("by Alan Turing. Church proved it", &Gazetteer::new());
        // "Alan Turing" is one run; "Church" starts a sentence and is skipped.
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].surface, "Alan Turing");
    }

    #[test]
    fn tagger_gazetteer_match_respects_boundaries() {
        let g = gaz(&[("New York", EntityLabel::Gpe)]);
        let spans = tag_heuristic("It was New. York woke up", &g);
        assert!(spans.iter().all(|s| s.surface != "New. York" && s.surface != "New York"));
    }

    #[test]
    fn filter_labels_per_mode() {
        let spans = vec![
            EntitySpan { start: 0, end: 1, label: EntityLabel::Person, surface: "a".into() },
            EntitySpan { start: 2, end: 3, label: EntityLabel::Loc, surface: "b".into() },
            EntitySpan { start: 4, end: 5, label: EntityLabel::Other, surface: "c".into() },
        ];
        let wiki = filter_labels(spans.clone(), LabelMode::Wiki);
        assert_eq!(wiki.len(), 1);
        assert_eq!(wiki[0].label, EntityLabel::Person);
        let news = filter_labels(spans.clone(), LabelMode::News);
        assert_eq!(news.len(), 2);
        assert!(filter_labels(Vec::new(), LabelMode::Wiki).is_empty());
        // idempotent and monotone
        let again = filter_labels(news.clone(), LabelMode::News);
        assert_eq!(again, news);
        assert!(wiki.iter().all(|s| news.contains(s)));
    }

    #[test]
    fn align_single_word_entity() {
        let vocab = BpeVocab::from_merges(vec![]).unwrap();
        let text = "ab cd";
        let seq = encode(&vocab, text);
        // entity covering "ab" (bytes 0..2) → word 0 = tokens [0, 2)
        let spans = vec![EntitySpan {
            start: 0,
            end: 2,
            label: EntityLabel::Person,
            surface: "ab".into(),
        }];
        let aligned = align_to_tokens(&spans, &seq).unwrap();
        assert_eq!(aligned.spans(), &[(0, 2)]);
    }

    #[test]
    fn align_expands_partial_word_to_whole_word() {
        let vocab = BpeVocab::from_merges(vec![]).unwrap();
        let seq = encode(&vocab, "abcd ef");
        // entity covering only "ab" of "abcd" → whole word [0, 4)
        let spans = vec![EntitySpan {
            start: 0,
            end: 2,
            label: EntityLabel::Org,
            surface: "ab".into(),
        }];
        let aligned = align_to_tokens(&spans, &seq).unwrap();
        assert_eq!(aligned.spans(), &[(0, 4)]);
    }

    #[test]
    fn align_two_word_entity_with_known_merges() {
        // Vocab where "Credit" → 2 subtokens and "Suisse" (with leading
        // space) → 3: hand-tokenized fixture.
        let c = b'C' as u32;
        let r = b'r' as u32;
        let e = b'e' as u32;
        let d = b'd' as u32;
        let i = b'i' as u32;
        let t = b't' as u32;
        let vocab = BpeVocab::from_merges(vec![
            (c, r),                                 // 361 "Cr"
            (FIRST_LEARNED, e),                     // 362 "Cre"
            (d, i),                                 // 363 "di"
            (FIRST_LEARNED + 2, t),                 // 364 "dit"
            (b'S' as u32, b'u' as u32),             // 365 "Su"
            (i, b's' as u32),                       // 366 "is"
            (FIRST_LEARNED + 5, b's' as u32),       // 367 "iss"
            (b' ' as u32, FIRST_LEARNED + 4),       // 368 " Su"
        ])
        .unwrap();
        let text = "Credit Suisse";
        let seq = encode(&vocab, text);
        // "Credit" → [Cre][dit]; " Suisse" → [ Su][iss][e]
        assert_eq!(seq.ids, vec![362, 364, 368, 367, e]);
        let spans = vec![EntitySpan {
            start: 0,
            end: 13,
            label: EntityLabel::Org,
            surface: text.into(),
        }];
        let aligned = align_to_tokens(&spans, &seq).unwrap();
        assert_eq!(aligned.spans(), &[(0, 5)]);
    }

    #[test]
    fn align_merges_touching_ranges() {
        let vocab = BpeVocab::from_merges(vec![]).unwrap();
        let seq = encode(&vocab, "ab cd");
        let spans = vec![
            EntitySpan { start: 0, end: 2, label: EntityLabel::Person, surface: "ab".into() },
            EntitySpan { start: 3, end: 5, label: EntityLabel::Gpe, surface: "cd".into() },
        ];
        let aligned = align_to_tokens(&spans, &seq).unwrap();
        // word 1 is " cd" (tokens 2..5); ranges [0,2) and [2,5) touch → merged
        assert_eq!(aligned.spans(), &[(0, 5)]);
    }

    #[test]
    fn align_rejects_out_of_range_span() {
        let vocab = BpeVocab::from_merges(vec![]).unwrap();
        let seq = encode(&vocab, "ab");
        let spans = vec![EntitySpan {
            start: 0,
            end: 10,
            label: EntityLabel::Person,
            surface: "?".into(),
        }];
        assert!(align_to_tokens(&spans, &seq).is_err());
    }

    #[test]
    fn mask_span_set_validates_ordering() {
        assert!(MaskSpanSet::new(vec![(0, 2), (2, 4)]).is_ok());
        assert!(MaskSpanSet::new(vec![(0, 3), (2, 4)]).is_err());
        assert!(MaskSpanSet::new(vec![(1, 1)]).is_err());
    }

    #[test]
    fn gazetteer_tsv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gaz.tsv");
        let g = gaz(&[
            ("Zurich", EntityLabel::Gpe),
            ("Credit Suisse", EntityLabel::Org),
            ("Alan Turing", EntityLabel::Person),
        ]);
        save_gazetteer(&g, &path).unwrap();
        let loaded = load_gazetteer(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.lookup("Credit Suisse"), Some(EntityLabel::Org));
    }

    #[test]
    fn surfaces_reslice_from_text() {
        let g = gaz(&[("Lake Geneva", EntityLabel::Loc)]);
        let text = "boats on Lake Geneva today";
        for span in tag_heuristic(text, &g) {
            assert_eq!(span.surface, &text[span.start..span.end]);
        }
    }
}
