//! Corpus ingestion, filtering, de-duplication, splitting, and statistics.
//!
//! A corpus is a list of (image, caption, section, description) quadruples.
//! Image content never enters this crate; images are referenced by feature id
//! and their precomputed vectors live in a [`FeatureStore`].

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ner::{AnnotationSet, EntityLabel, Field};
use crate::rng::SplitMix64;
use crate::split::word_tokens;
use crate::{Error, Result};

/// Origin of a sample; decides the entity-label mode downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Wiki,
    News,
    Synthetic,
}

impl std::str::FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wiki" => Ok(Source::Wiki),
            "news" => Ok(Source::News),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(Error::InvalidArgument(format!("unknown source `{other}`"))),
        }
    }
}

/// One (image, caption, section, description) quadruple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualSample {
    pub id: String,
    #[serde(default)]
    pub page_title: String,
    pub caption: String,
    #[serde(default)]
    pub section: String,
    /// Empty for news-mode samples: news context is the section only.
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub image_feature_id: Option<String>,
    pub source: Source,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<ContextualSample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Maps keys of a foreign JSONL schema onto sample fields. A `None` mapping
/// leaves the field at its default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMap {
    /// Key holding the sample id; absent → ids are assigned from line numbers.
    pub id: Option<String>,
    pub page_title: Option<String>,
    /// Key holding the caption. Required on every kept line.
    pub caption: String,
    pub section: Option<String>,
    pub description: Option<String>,
    pub image_feature_id: Option<String>,
    /// Key holding the source tag; absent → `default_source` is used.
    pub source: Option<String>,
    pub default_source: Source,
}

impl Default for FieldMap {
    /// Identity mapping over the toolkit's own corpus JSONL schema.
    fn default() -> Self {
        FieldMap {
            id: Some("id".into()),
            page_title: Some("page_title".into()),
            caption: "caption".into(),
            section: Some("section".into()),
            description: Some("description".into()),
            image_feature_id: Some("image_feature_id".into()),
            source: Some("source".into()),
            default_source: Source::Wiki,
        }
    }
}

impl FieldMap {
    /// The WIT column names: `caption_reference_description` is the ground
    /// truth caption, `caption_attribution_description` the image description,
    /// `context_section_description` the article section.
    pub fn wit() -> Self {
        FieldMap {
            id: None,
            page_title: Some("page_title".into()),
            caption: "caption_reference_description".into(),
            section: Some("context_section_description".into()),
            description: Some("caption_attribution_description".into()),
            image_feature_id: None,
            source: None,
            default_source: Source::Wiki,
        }
    }
}

/// One dropped input line and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reject {
    pub line_no: usize,
    pub reason: String,
}

/// Outcome of [`ingest_jsonl`]: the kept samples plus a reject report.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub corpus: Corpus,
    pub rejects: Vec<Reject>,
}

fn json_str(value: &serde_json::Value, key: &str) -> Option<String> {
    match value.get(key) {
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(serde_json::Value::Number(n)) => Some(n.to_string()),
        _ => None,
    }
}

/// Read a JSONL corpus, keeping every line that has a caption and at least
/// one of section/description under the given field mapping. Malformed JSON
/// and missing required fields drop the line into the reject report; only an
/// unreadable file aborts.
pub fn ingest_jsonl(path: &Path, field_map: &FieldMap) -> Result<IngestReport> {
    let file = std::fs::File::open(path)?;
    ingest_reader(BufReader::new(file), field_map)
}

pub fn ingest_reader<R: BufRead>(reader: R, field_map: &FieldMap) -> Result<IngestReport> {
    let mut samples = Vec::new();
    let mut rejects = Vec::new();
    let mut seen_ids = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                rejects.push(Reject { line_no, reason: format!("malformed JSON: {e}") });
                continue;
            }
        };
        let Some(caption) = json_str(&value, &field_map.caption) else {
            rejects.push(Reject {
                line_no,
                reason: format!("missing required field `{}`", field_map.caption),
            });
            continue;
        };
        let section = field_map.section.as_deref().and_then(|k| json_str(&value, k));
        let description = field_map.description.as_deref().and_then(|k| json_str(&value, k));
        if section.is_none() && description.is_none() {
            rejects.push(Reject { line_no, reason: "missing both section and description".into() });
            continue;
        }
        let source = match field_map.source.as_deref().and_then(|k| json_str(&value, k)) {
            Some(tag) => match tag.parse::<Source>() {
                Ok(s) => s,
                Err(_) => {
                    rejects.push(Reject { line_no, reason: format!("unknown source `{tag}`") });
                    continue;
                }
            },
            None => field_map.default_source,
        };
        let id = field_map
            .id
            .as_deref()
            .and_then(|k| json_str(&value, k))
            .unwrap_or_else(|| line_no.to_string());
        if !seen_ids.insert(id.clone()) {
            rejects.push(Reject { line_no, reason: format!("duplicate id `{id}`") });
            continue;
        }
        let mut description = description.unwrap_or_default();
        if source == Source::News {
            // News mode conditions on the section only.
            description.clear();
        }
        samples.push(ContextualSample {
            id,
            page_title: field_map
                .page_title
                .as_deref()
                .and_then(|k| json_str(&value, k))
                .unwrap_or_default(),
            caption,
            section: section.unwrap_or_default(),
            description,
            image_feature_id: field_map
                .image_feature_id
                .as_deref()
                .and_then(|k| json_str(&value, k)),
            source,
        });
    }
    Ok(IngestReport { corpus: Corpus { samples }, rejects })
}

/// Write the corpus in the toolkit's own JSONL schema. `ingest_jsonl` with the
/// default field map reads it back exactly.
pub fn export_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for sample in &corpus.samples {
        serde_json::to_writer(&mut w, sample).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejects(rejects: &[Reject], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in rejects {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Punctuation retained by [`filter_corpus`]'s character allowlist, alongside
/// alphanumerics and whitespace. Everything else (control characters, symbols,
/// emoji, rare punctuation) is stripped.
pub const ALLOWED_PUNCTUATION: &str =
    ".,;:!?'\"()[]{}<>-–—/\\&%$#@*+=_~|^’‘“”…·°";

fn allowed_char(c: char) -> bool {
    c.is_alphanumeric() || c.is_whitespace() || ALLOWED_PUNCTUATION.contains(c)
}

/// Human-readable statement of the allowlist, printable from the CLI.
pub fn allowlist_description() -> String {
    format!(
        "kept characters: Unicode alphanumerics, Unicode whitespace, and the punctuation set:\n{ALLOWED_PUNCTUATION}"
    )
}

fn strip_disallowed(text: &str) -> String {
    text.chars().filter(|c| allowed_char(*c)).collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterCounts {
    pub input: usize,
    pub kept: usize,
    pub short_caption: usize,
    pub short_section: usize,
    pub chars_stripped: u64,
}

pub const DEFAULT_MIN_CAPTION_WORDS: usize = 3;
pub const DEFAULT_MIN_SECTION_WORDS: usize = 10;

/// Strip disallowed characters from every text field, then drop samples whose
/// caption or section falls below the word thresholds.
pub fn filter_corpus(
    corpus: &Corpus,
    min_caption_words: usize,
    min_section_words: usize,
) -> (Corpus, FilterCounts) {
    let mut counts = FilterCounts { input: corpus.len(), ..Default::default() };
    let mut kept = Vec::new();
    for sample in &corpus.samples {
        let mut s = sample.clone();
        for field in [&mut s.page_title, &mut s.caption, &mut s.section, &mut s.description] {
            let before = field.chars().count();
            *field = strip_disallowed(field);
            counts.chars_stripped += (before - field.chars().count()) as u64;
        }
        if word_tokens(&s.caption).len() < min_caption_words {
            counts.short_caption += 1;
            continue;
        }
        if word_tokens(&s.section).len() < min_section_words {
            counts.short_section += 1;
            continue;
        }
        kept.push(s);
    }
    counts.kept = kept.len();
    (Corpus { samples: kept }, counts)
}

fn normalize_for_dedup(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Keep the first occurrence of each distinct (image, context, caption)
/// triple. Text components are compared lowercased with whitespace collapsed;
/// a missing image id compares equal to any other missing image id.
pub fn dedup(corpus: &Corpus) -> Corpus {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for sample in &corpus.samples {
        let key = format!(
            "{}\u{1f}{}\u{1f}{}",
            sample.image_feature_id.as_deref().unwrap_or(""),
            normalize_for_dedup(&format!("{}\u{1f}{}", sample.section, sample.description)),
            normalize_for_dedup(&sample.caption),
        );
        if seen.insert(key) {
            kept.push(sample.clone());
        }
    }
    Corpus { samples: kept }
}

/// The paper-scale split sizes, kept as the default ratio preset.
pub const PAPER_SPLIT: (usize, usize, usize) = (2_600_000, 8_000, 20_000);

/// Scale the paper's train/val/test ratio down to a corpus of `total` samples.
pub fn preset_split_sizes(total: usize) -> (usize, usize) {
    let (train, val, test) = PAPER_SPLIT;
    let whole = (train + val + test) as f64;
    let n_val = ((total as f64) * val as f64 / whole).round() as usize;
    let n_test = ((total as f64) * test as f64 / whole).round() as usize;
    (n_val, n_test)
}

/// Deterministically partition a corpus into (train, val, test) by a seeded
/// shuffle of sample indices.
pub fn split_dataset(
    corpus: &Corpus,
    seed: u64,
    n_val: usize,
    n_test: usize,
) -> Result<(Corpus, Corpus, Corpus)> {
    let n = corpus.len();
    if n_val + n_test > n {
        return Err(Error::InvalidArgument(format!(
            "split sizes exceed corpus: n_val {n_val} + n_test {n_test} > {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut indices);
    let take = |range: &[usize]| Corpus {
        samples: range.iter().map(|&i| corpus.samples[i].clone()).collect(),
    };
    let val = take(&indices[..n_val]);
    let test = take(&indices[n_val..n_val + n_test]);
    let train = take(&indices[n_val + n_test..]);
    Ok((train, val, test))
}

/// Per-field mean word count and named-entity word fraction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FieldStats {
    pub avg_words: f64,
    pub ne_word_fraction: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_samples: usize,
    pub caption: FieldStats,
    pub section: FieldStats,
    pub description: FieldStats,
    pub label_histogram: BTreeMap<EntityLabel, u64>,
}

/// Word counts use the split module's segmentation; a word counts as a
/// named-entity word when its byte range overlaps any annotated span.
/// Samples without annotations contribute zero entity words.
pub fn compute_stats(corpus: &Corpus, annotations: &AnnotationSet) -> CorpusStats {
    let mut stats = CorpusStats { n_samples: corpus.len(), ..Default::default() };
    let mut totals = [(0u64, 0u64); 3]; // (words, ne_words) per field

    for sample in &corpus.samples {
        for (slot, field, text) in [
            (0, Field::Caption, &sample.caption),
            (1, Field::Section, &sample.section),
            (2, Field::Description, &sample.description),
        ] {
            let words = word_tokens(text);
            totals[slot].0 += words.len() as u64;
            let spans = annotations
                .resolved_spans(&sample.id, field, text)
                .unwrap_or_default();
            for span in &spans {
                *stats.label_histogram.entry(span.label).or_insert(0) += 1;
            }
            totals[slot].1 += words
                .iter()
                .filter(|w| spans.iter().any(|s| s.start < w.end && w.start < s.end))
                .count() as u64;
        }
    }

    let n = corpus.len().max(1) as f64;
    for (slot, field) in
        [(0usize, &mut stats.caption), (1, &mut stats.section), (2, &mut stats.description)]
    {
        let (words, ne_words) = totals[slot];
        field.avg_words = words as f64 / n;
        field.ne_word_fraction = if words == 0 { 0.0 } else { ne_words as f64 / words as f64 };
    }
    stats
}

// --- FeatureStore ------------------------------------------------------------

const FEATURE_MAGIC: &[u8; 4] = b"WFEA";
const FEATURE_VERSION: u32 = 1;

/// Precomputed image feature vectors, keyed by id. All vectors share one
/// dimensionality and must be finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    pub dim: usize,
    pub entries: BTreeMap<String, Vec<f32>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore { dim, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: &str, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "feature vector for `{id}` has length {}, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("feature vector for `{id}` is not finite")));
        }
        self.entries.insert(id.to_string(), vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Layout: magic "WFEA", u32 version, u32 dim, u64 count, then per entry a
/// u16 id length, the id bytes, and `dim` little-endian f32 values.
pub fn save_features(store: &FeatureStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(store.dim as u32).to_le_bytes())?;
    w.write_all(&(store.entries.len() as u64).to_le_bytes())?;
    for (id, vector) in &store.entries {
        let id_bytes = id.as_bytes();
        if id_bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("feature id too long: {} bytes", id_bytes.len())));
        }
        w.write_all(&(id_bytes.len() as u16).to_le_bytes())?;
        w.write_all(id_bytes)?;
        for v in vector {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureStore> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature-store magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature-store version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf);

    let mut store = FeatureStore::new(dim);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let id_len = u16::from_le_bytes(u16buf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes)?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::Format("feature id is not UTF-8".into()))?;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut u32buf)?;
            vector.push(f32::from_le_bytes(u32buf));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite feature vector for `{id}`")));
        }
        store.entries.insert(id, vector);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn mk(id: &str, caption: &str, section: &str, description: &str) -> ContextualSample {
        ContextualSample {
            id: id.into(),
            page_title: String::new(),
            caption: caption.into(),
            section: section.into(),
            description: description.into(),
            image_feature_id: None,
            source: Source::Wiki,
        }
    }

    #[test]
    fn ingest_drops_lines_missing_caption() {
        let data = concat!(
            "{\"id\":\"a\",\"caption\":\"x y\",\"section\":\"s\"}\n",
            "{\"id\":\"b\",\"section\":\"s\"}\n",
            "{\"id\":\"c\",\"caption\":\"z\",\"description\":\"d\"}\n",
        );
        let report = ingest_reader(Cursor::new(data), &FieldMap::default()).unwrap();
        assert_eq!(report.corpus.len(), 2);
        assert_eq!(report.rejects.len(), 1);
        assert_eq!(report.rejects[0].line_no, 2);
    }

    #[test]
    fn ingest_maps_wit_field_names() {
        let data = concat!(
            "{\"caption_reference_description\":\"cap\",",
            "\"context_section_description\":\"sec\",",
            "\"caption_attribution_description\":\"desc\"}\n",
        );
        let report = ingest_reader(Cursor::new(data), &FieldMap::wit()).unwrap();
        assert_eq!(report.corpus.len(), 1);
        let s = &report.corpus.samples[0];
        assert_eq!(s.caption, "cap");
        assert_eq!(s.section, "sec");
        assert_eq!(s.description, "desc");
        assert_eq!(s.id, "1"); // auto-assigned from line number
    }

    #[test]
    fn ingest_empty_file() {
        let report = ingest_reader(Cursor::new(""), &FieldMap::default()).unwrap();
        assert!(report.corpus.is_empty());
        assert!(report.rejects.is_empty());
    }

    #[test]
    fn ingest_records_malformed_json_without_aborting() {
        let data = "not json at all\n{\"id\":\"a\",\"caption\":\"x\",\"section\":\"s\"}\n";
        let report = ingest_reader(Cursor::new(data), &FieldMap::default()).unwrap();
        assert_eq!(report.corpus.len(), 1);
        assert_eq!(report.rejects.len(), 1);
        assert!(report.rejects[0].reason.contains("malformed JSON"));
    }

    #[test]
    fn ingest_rejects_duplicate_ids() {
        let data = concat!(
            "{\"id\":\"a\",\"caption\":\"x\",\"section\":\"s\"}\n",
            "{\"id\":\"a\",\"caption\":\"y\",\"section\":\"s\"}\n",
        );
        let report = ingest_reader(Cursor::new(data), &FieldMap::default()).unwrap();
        assert_eq!(report.corpus.len(), 1);
        assert_eq!(report.rejects.len(), 1);
    }

    #[test]
    fn ingest_clears_description_for_news() {
        let data = "{\"id\":\"a\",\"caption\":\"x\",\"section\":\"s\",\"description\":\"d\",\"source\":\"news\"}\n";
        let report = ingest_reader(Cursor::new(data), &FieldMap::default()).unwrap();
        assert_eq!(report.corpus.samples[0].description, "");
    }

    #[test]
    fn filter_removes_short_captions() {
        let corpus = Corpus { samples: vec![mk("1", "Lake", "a b c", "")] };
        let (kept, counts) = filter_corpus(&corpus, 2, 0);
        assert!(kept.is_empty());
        assert_eq!(counts.short_caption, 1);
    }

    #[test]
    fn filter_zero_thresholds_identity_on_clean_text() {
        let corpus = Corpus { samples: vec![mk("1", "Lake Zurich", "a b", "d")] };
        let (kept, _) = filter_corpus(&corpus, 0, 0);
        assert_eq!(kept, corpus);
    }

    #[test]
    fn filter_fixture_of_ten() {
        // 3 of 10 fall below thresholds (2 short captions, 1 short section).
        let mut samples = Vec::new();
        for i in 0..7 {
            samples.push(mk(&format!("ok{i}"), "three word caption", "one two three four", ""));
        }
        samples.push(mk("bad1", "one", "one two three four", ""));
        samples.push(mk("bad2", "two words", "one two three four", ""));
        samples.push(mk("bad3", "three word caption", "short", ""));
        let (kept, counts) = filter_corpus(&Corpus { samples }, 3, 4);
        assert_eq!(kept.len(), 7);
        assert_eq!(counts.short_caption, 2);
        assert_eq!(counts.short_section, 1);
    }

    #[test]
    fn filter_strips_control_and_rare_chars() {
        let corpus = Corpus { samples: vec![mk("1", "a\u{0007} b\u{200b} c☂", "s", "")] };
        let (kept, counts) = filter_corpus(&corpus, 0, 0);
        assert_eq!(kept.samples[0].caption, "a b c");
        assert_eq!(counts.chars_stripped, 3);
    }

    #[test]
    fn dedup_keeps_first_of_identical_pairs() {
        let a = mk("1", "cap", "sec", "desc");
        let mut b = a.clone();
        b.id = "2".into();
        let kept = dedup(&Corpus { samples: vec![a.clone(), b] });
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.samples[0].id, "1");
    }

    #[test]
    fn dedup_distinct_context_survives() {
        let a = mk("1", "cap", "sec one", "");
        let b = mk("2", "cap", "sec two", "");
        assert_eq!(dedup(&Corpus { samples: vec![a, b] }).len(), 2);
    }

    #[test]
    fn dedup_fixture_with_three_groups() {
        // Duplicate groups of sizes 2, 2, 3 among 10 samples → 6 survive.
        let mut samples = Vec::new();
        for (i, (cap, sec)) in [
            ("g1", "s"), ("g1", "s"),              // group of 2
            ("g2", "s"), ("g2", "s"),              // group of 2
            ("g3", "s"), ("g3", "s"), ("g3", "s"), // group of 3
            ("solo a", "s"), ("solo b", "s"), ("solo c", "s"),
        ]
        .iter()
        .enumerate()
        {
            samples.push(mk(&i.to_string(), cap, sec, ""));
        }
        assert_eq!(dedup(&Corpus { samples }).len(), 6);
    }

    #[test]
    fn dedup_normalizes_case_and_whitespace() {
        let a = mk("1", "Lake Zurich", "sec", "");
        let b = mk("2", "lake   zurich", "SEC", "");
        assert_eq!(dedup(&Corpus { samples: vec![a, b] }).len(), 1);
    }

    #[test]
    fn dedup_is_idempotent() {
        let samples = vec![mk("1", "a", "s", ""), mk("2", "a", "s", ""), mk("3", "b", "s", "")];
        let once = dedup(&Corpus { samples });
        let twice = dedup(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let samples: Vec<_> = (0..100).map(|i| mk(&i.to_string(), "c", "s", "")).collect();
        let corpus = Corpus { samples };
        let (train, val, test) = split_dataset(&corpus, 7, 10, 20).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (70, 10, 20));
        let mut ids: Vec<&str> = train
            .samples
            .iter()
            .chain(&val.samples)
            .chain(&test.samples)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100, "partition must cover the corpus disjointly");
    }

    #[test]
    fn split_is_deterministic() {
        let samples: Vec<_> = (0..30).map(|i| mk(&i.to_string(), "c", "s", "")).collect();
        let corpus = Corpus { samples };
        let a = split_dataset(&corpus, 99, 5, 5).unwrap();
        let b = split_dataset(&corpus, 99, 5, 5).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn split_rejects_oversized_request() {
        let corpus = Corpus { samples: vec![mk("1", "c", "s", "")] };
        assert!(matches!(split_dataset(&corpus, 0, 1, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn paper_split_preset_documented() {
        assert_eq!(PAPER_SPLIT, (2_600_000, 8_000, 20_000));
        let (n_val, n_test) = preset_split_sizes(2_628_000);
        assert_eq!(n_val, 8_000);
        assert_eq!(n_test, 20_000);
    }

    #[test]
    fn feature_store_roundtrip_small() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wfea");
        let mut store = FeatureStore::new(4);
        store.insert("a", vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        save_features(&store, &path).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(store, loaded);
    }

    #[test]
    fn feature_store_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wfea");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn feature_store_rejects_wrong_dim_insert() {
        let mut store = FeatureStore::new(3);
        assert!(store.insert("a", vec![1.0]).is_err());
        assert!(store.insert("nan", vec![f32::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn feature_store_roundtrip_many_random_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("many.wfea");
        let mut rng = SplitMix64::new(123);
        let mut store = FeatureStore::new(16);
        for i in 0..1000 {
            let v: Vec<f32> = (0..16).map(|_| (rng.next_f64() * 4.0 - 2.0) as f32).collect();
            store.insert(&format!("vec-{i}"), v).unwrap();
        }
        save_features(&store, &path).unwrap();
        let loaded = load_features(&path).unwrap();
        // Bit-exact comparison.
        for (id, v) in &store.entries {
            let w = loaded.get(id).unwrap();
            for (a, b) in v.iter().zip(w) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn export_ingest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = Corpus {
            samples: vec![
                ContextualSample {
                    id: "x1".into(),
                    page_title: "Title".into(),
                    caption: "A caption".into(),
                    section: "A section".into(),
                    description: "A description".into(),
                    image_feature_id: Some("img1".into()),
                    source: Source::Wiki,
                },
                mk("x2", "Another one", "sec", "desc"),
            ],
        };
        export_jsonl(&corpus, &path).unwrap();
        let report = ingest_jsonl(&path, &FieldMap::default()).unwrap();
        assert_eq!(report.corpus, corpus);
        assert!(report.rejects.is_empty());
    }

    #[test]
    fn stats_counts_entity_words() {
        use crate::ner::{AnnotationRecord, RawSpan};
        // caption "John visited Zurich": spans over John and Zurich → 2/3.
        let corpus = Corpus { samples: vec![mk("1", "John visited Zurich", "", "")] };
        let mut ann = AnnotationSet::default();
        ann.add_record(AnnotationRecord {
            sample_id: "1".into(),
            field: Field::Caption,
            spans: vec![
                RawSpan { start: 0, end: 4, label: EntityLabel::Person },
                RawSpan { start: 13, end: 19, label: EntityLabel::Gpe },
            ],
        })
        .unwrap();
        let stats = compute_stats(&corpus, &ann);
        assert!((stats.caption.ne_word_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(stats.label_histogram.get(&EntityLabel::Person), Some(&1));
    }

    #[test]
    fn stats_no_annotations_zero_fraction() {
        let corpus = Corpus { samples: vec![mk("1", "a b c d", "", "")] };
        let stats = compute_stats(&corpus, &AnnotationSet::default());
        assert_eq!(stats.caption.ne_word_fraction, 0.0);
        assert_eq!(stats.caption.avg_words, 4.0);
    }

    #[test]
    fn stats_average_word_count() {
        let corpus = Corpus {
            samples: vec![mk("1", "a b c d", "", ""), mk("2", "a b c d e f", "", "")],
        };
        let stats = compute_stats(&corpus, &AnnotationSet::default());
        assert_eq!(stats.caption.avg_words, 5.0);
    }
}
