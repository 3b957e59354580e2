//! Synthetic contextual-captioning corpus with controllable entity structure.
//!
//! Each sample draws a set of context entities mentioned in its section and
//! description; a random subset of them is "depicted". The image feature
//! vector is the mean of the depicted entities' signature vectors (plus
//! optional Gaussian noise), and the caption mentions exactly the depicted
//! entities — so picking the right caption entities requires the image, not
//! just the context. A configurable fraction of samples get captions that
//! near-verbatim copy their description, which lands them in the Easy subset
//! of the Jaccard split by construction.
//!
//! Per-sample draw order (one `SplitMix64` stream seeded from
//! `derive_seed(seed, sample_id)`): context entity selection, depicted
//! subset, easy/hard coin, template choice(s), then image noise.

use serde::{Deserialize, Serialize};

use crate::corpus::{ContextualSample, Corpus, FeatureStore, Source};
use crate::ner::{AnnotationRecord, AnnotationSet, EntityLabel, Field, Gazetteer, RawSpan};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

/// One known entity: a unique capitalized surface plus a unit-norm signature
/// vector carrying its identity in image space.
#[derive(Debug, Clone)]
pub struct InventoryEntry {
    pub surface: String,
    pub label: EntityLabel,
    pub signature: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct EntityInventory {
    pub entries: Vec<InventoryEntry>,
}

const PERSON_HEADS: [&str; 12] =
    ["Al", "Ber", "Cor", "Dra", "El", "Fen", "Gor", "Hal", "Ir", "Jor", "Kel", "Lor"];
const PERSON_TAILS: [&str; 10] =
    ["and", "bert", "dan", "fried", "gard", "hild", "mar", "mund", "rich", "wald"];
const ORG_HEADS: [&str; 12] = [
    "Astro", "Blue", "Cyto", "Delta", "Ecto", "Ferro", "Gande", "Helio", "Iono", "Krato",
    "Lumo", "Magno",
];
const ORG_TAILS: [&str; 10] =
    ["corp", "works", "labs", "dyne", "tech", "trust", "forge", "group", "systems", "guild"];
const GPE_HEADS: [&str; 12] =
    ["Arva", "Belto", "Calda", "Doria", "Esto", "Falno", "Garvo", "Holma", "Istra", "Jelto", "Kurno", "Lysta"];
const GPE_TAILS: [&str; 10] =
    ["burg", "dale", "ford", "grad", "heim", "lund", "mark", "stan", "ton", "via"];

impl EntityInventory {
    /// `n_per_label` surfaces for each of PERSON/ORG/GPE, built from fixed
    /// syllable tables (so surfaces depend only on the count), with signature
    /// vectors drawn from a seeded Gaussian and normalized.
    pub fn generate(n_per_label: usize, d_img: usize, seed: u64) -> Result<Self> {
        let mut entries = Vec::new();
        let mut rng = SplitMix64::new(derive_seed(seed, "inventory"));
        for (label, heads, tails) in [
            (EntityLabel::Person, &PERSON_HEADS[..], &PERSON_TAILS[..]),
            (EntityLabel::Org, &ORG_HEADS[..], &ORG_TAILS[..]),
            (EntityLabel::Gpe, &GPE_HEADS[..], &GPE_TAILS[..]),
        ] {
            if n_per_label > heads.len() * tails.len() {
                return Err(Error::InvalidArgument(format!(
                    "inventory exhausted: {n_per_label} {label} surfaces requested, {} possible",
                    heads.len() * tails.len()
                )));
            }
            for i in 0..n_per_label {
                let surface = format!("{}{}", heads[i % heads.len()], tails[i / heads.len()]);
                let mut signature: Vec<f64> = (0..d_img).map(|_| rng.normal()).collect();
                let norm = signature.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                signature.iter_mut().for_each(|v| *v /= norm);
                entries.push(InventoryEntry {
                    surface,
                    label,
                    signature: signature.into_iter().map(|v| v as f32).collect(),
                });
            }
        }
        let mut surfaces: Vec<&str> = entries.iter().map(|e| e.surface.as_str()).collect();
        surfaces.sort_unstable();
        surfaces.dedup();
        if surfaces.len() != entries.len() {
            return Err(Error::Validation("inventory surfaces collide across labels".into()));
        }
        Ok(EntityInventory { entries })
    }

    pub fn gazetteer(&self) -> Gazetteer {
        let mut gaz = Gazetteer::new();
        for entry in &self.entries {
            gaz.insert(&entry.surface, entry.label).expect("inventory surface is non-empty");
        }
        gaz
    }

    /// Indices of the `k` entries whose signatures best match `vector` by
    /// dot product.
    pub fn nearest(&self, vector: &[f32], k: usize) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let dot: f64 =
                    e.signature.iter().zip(vector).map(|(a, b)| *a as f64 * *b as f64).sum();
                (i, dot)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(i, _)| i).collect()
    }
}

/// Template pools use a single `{}` token standing for the entity list
/// ("Arvaburg" / "Aland and Magnoguild" / "A, B and C").
///
/// Every sample draws its description from the same pool, so nothing in the
/// context reveals whether a sample is easy (caption = description minus its
/// final word) or hard (caption from its own template pool). A captioner can
/// therefore pick up the copying shortcut from the easy share of the corpus
/// and carry it over to hard samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_entities_per_label: usize,
    /// Entities mentioned across section + description.
    pub entities_per_context: usize,
    /// Depicted subset size; these appear in the caption and the image.
    pub entities_per_caption: usize,
    /// Share of samples whose caption near-verbatim copies the description.
    pub easy_fraction: f64,
    /// Probability that the second depicted entity is the first one's fixed
    /// partner rather than a uniform draw. This plants a named-entity
    /// language prior in the captions: a captioner can guess the next entity
    /// from the previous one and ignore the image, and be right this often.
    pub pair_bias: f64,
    /// Std-dev of Gaussian noise added per image-feature component.
    pub noise_level: f64,
    pub d_img: usize,
    pub seed: u64,
    /// Hard-sample caption templates.
    pub caption_templates: Vec<String>,
    /// Entity-free scene descriptions, shared by both sample kinds. An easy
    /// caption is the description minus its final word plus "with" and the
    /// depicted entities.
    pub description_templates: Vec<String>,
    /// Section templates; the slot takes the full context entity list.
    pub section_templates: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 1000,
            n_entities_per_label: 12,
            entities_per_context: 4,
            entities_per_caption: 2,
            easy_fraction: 0.4,
            pair_bias: 0.8,
            noise_level: 0.05,
            d_img: 32,
            seed: 1,
            caption_templates: vec![
                "{} pictured at the harbor pavilion".into(),
                "{} seen before the evening ceremony".into(),
                "{} standing near the museum entrance".into(),
                "{} greeting visitors at the spring festival".into(),
                "{} photographed beside the old fountain".into(),
            ],
            description_templates: vec![
                "Weathered portrait plate showing the quiet stone fountain in the west gallery".into(),
                "Detailed archival study of the carved upper balcony beside the winter garden".into(),
                "Framed ceremonial view across the old council doorway and its painted arch".into(),
                "Faded exhibition print depicting the narrow harbor stair below the signal tower".into(),
            ],
            section_templates: vec![
                "The chronicle features {} with commentary".into(),
                "Regional notes list {} among local residents".into(),
                "Old registers mention {} only in passing".into(),
                "Festival rolls record {} together once annually".into(),
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, inventory_size: usize) -> Result<()> {
        if self.entities_per_caption > self.entities_per_context {
            return Err(Error::InvalidArgument(
                "entities_per_caption exceeds entities_per_context".into(),
            ));
        }
        if self.entities_per_context > inventory_size {
            return Err(Error::InvalidArgument(format!(
                "entities_per_context {} exceeds inventory of {inventory_size}",
                self.entities_per_context
            )));
        }
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            return Err(Error::InvalidArgument("easy_fraction outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.pair_bias) {
            return Err(Error::InvalidArgument("pair_bias outside [0, 1]".into()));
        }
        for pool in [&self.caption_templates, &self.section_templates] {
            if pool.is_empty() {
                return Err(Error::InvalidArgument("empty template pool".into()));
            }
            for t in pool {
                if t.split_whitespace().filter(|w| *w == "{}").count() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "template must contain exactly one {{}} token: `{t}`"
                    )));
                }
            }
        }
        if self.description_templates.is_empty() {
            return Err(Error::InvalidArgument("empty template pool".into()));
        }
        for t in &self.description_templates {
            if t.contains("{}") {
                return Err(Error::InvalidArgument(format!(
                    "description templates are entity-free: `{t}`"
                )));
            }
            if t.split_whitespace().count() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "description template too short: `{t}`"
                )));
            }
        }
        Ok(())
    }
}

/// Text assembled from a template, with entity char spans recorded.
struct BuiltText {
    text: String,
    spans: Vec<RawSpan>,
}

fn push_words(text: &mut String, chars: &mut usize, words: &str) {
    if words.is_empty() {
        return;
    }
    if !text.is_empty() {
        text.push(' ');
        *chars += 1;
    }
    text.push_str(words);
    *chars += words.chars().count();
}

/// Join entities as "A", "A and B", or "A, B and C", recording spans.
fn fill_template(template: &str, entities: &[&InventoryEntry]) -> BuiltText {
    let mut text = String::new();
    let mut chars = 0usize;
    let mut spans = Vec::new();
    for word in template.split_whitespace() {
        if word == "{}" {
            for (i, entity) in entities.iter().enumerate() {
                if i > 0 {
                    let joiner = if i + 1 == entities.len() { " and" } else { "," };
                    if joiner == "," {
                        text.push(',');
                        chars += 1;
                    } else {
                        push_words(&mut text, &mut chars, "and");
                    }
                }
                push_words(&mut text, &mut chars, &entity.surface);
                let len = entity.surface.chars().count();
                spans.push(RawSpan { start: chars - len, end: chars, label: entity.label });
            }
        } else {
            push_words(&mut text, &mut chars, word);
        }
    }
    BuiltText { text, spans }
}

/// Drop the final word of a built text (spans are unaffected because easy
/// templates never end with the entity slot).
fn drop_last_word(built: &BuiltText) -> BuiltText {
    let trimmed = built.text.trim_end();
    let cut = trimmed.rfind(' ').unwrap_or(0);
    BuiltText { text: trimmed[..cut].to_string(), spans: built.spans.clone() }
}

pub struct SynthOutput {
    pub corpus: Corpus,
    pub annotations: AnnotationSet,
    pub features: FeatureStore,
    pub inventory: EntityInventory,
}

/// Generate the corpus, its exact entity annotations, and the feature store.
/// Deterministic in the config.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    let inventory =
        EntityInventory::generate(config.n_entities_per_label, config.d_img, config.seed)?;
    config.validate(inventory.entries.len())?;

    let mut corpus = Corpus::default();
    let mut annotations = AnnotationSet::default();
    let mut features = FeatureStore::new(config.d_img);

    for idx in 0..config.n_samples {
        let id = format!("syn-{idx:05}");
        let mut rng = SplitMix64::new(derive_seed(config.seed, &id));

        // 1. depicted entities: the first uniform, each later one following
        // its predecessor's fixed partner (index ^ 1) with probability
        // pair_bias, otherwise uniform; duplicates probe forward. 2. the
        // remaining context entities. 3. a shuffle of the context listing
        // order, so positions never reveal which entities are depicted.
        let n = inventory.entries.len();
        let mut depicted_idx: Vec<usize> = Vec::with_capacity(config.entities_per_caption);
        for slot in 0..config.entities_per_caption {
            let candidate = if slot == 0 {
                rng.below(n)
            } else if rng.bernoulli(config.pair_bias) {
                depicted_idx[slot - 1] ^ 1
            } else {
                rng.below(n)
            };
            let mut candidate = candidate % n;
            while depicted_idx.contains(&candidate) {
                candidate = (candidate + 1) % n;
            }
            depicted_idx.push(candidate);
        }
        let mut context_idx = depicted_idx.clone();
        while context_idx.len() < config.entities_per_context {
            let mut candidate = rng.below(n);
            while context_idx.contains(&candidate) {
                candidate = (candidate + 1) % n;
            }
            context_idx.push(candidate);
        }
        rng.shuffle(&mut context_idx);
        let context: Vec<&InventoryEntry> =
            context_idx.iter().map(|&i| &inventory.entries[i]).collect();
        let depicted: Vec<&InventoryEntry> =
            depicted_idx.iter().map(|&i| &inventory.entries[i]).collect();

        // 3. easy coin, 4. template choices. Descriptions carry no entities
        // and the section always lists the full context set, so the context
        // distribution is identical for both sample kinds: only the caption
        // differs, and a captioner cannot tell which kind it is generating.
        let easy = rng.bernoulli(config.easy_fraction);
        let description = fill_template(
            &config.description_templates[rng.below(config.description_templates.len())],
            &[],
        );
        let section = fill_template(
            &config.section_templates[rng.below(config.section_templates.len())],
            &context,
        );
        let caption = if easy {
            let mut caption = drop_last_word(&description);
            let mut chars = caption.text.chars().count();
            push_words(&mut caption.text, &mut chars, "with");
            for (i, entity) in depicted.iter().enumerate() {
                if i > 0 {
                    push_words(&mut caption.text, &mut chars, "and");
                }
                push_words(&mut caption.text, &mut chars, &entity.surface);
                let len = entity.surface.chars().count();
                caption
                    .spans
                    .push(RawSpan { start: chars - len, end: chars, label: entity.label });
            }
            caption
        } else {
            fill_template(
                &config.caption_templates[rng.below(config.caption_templates.len())],
                &depicted,
            )
        };

        // 5. image feature: mean of depicted signatures (+ noise)
        let mut vector = vec![0.0f64; config.d_img];
        for entity in &depicted {
            for (v, s) in vector.iter_mut().zip(&entity.signature) {
                *v += *s as f64;
            }
        }
        if !depicted.is_empty() {
            let k = depicted.len() as f64;
            vector.iter_mut().for_each(|v| *v /= k);
        }
        if config.noise_level > 0.0 {
            for v in vector.iter_mut() {
                *v += config.noise_level * rng.normal();
            }
        }
        let feature_id = format!("img-{idx:05}");
        features.insert(&feature_id, vector.into_iter().map(|v| v as f32).collect())?;

        for (field, built) in [
            (Field::Caption, &caption),
            (Field::Section, &section),
            (Field::Description, &description),
        ] {
            if !built.spans.is_empty() {
                annotations.add_record(AnnotationRecord {
                    sample_id: id.clone(),
                    field,
                    spans: built.spans.clone(),
                })?;
            }
        }
        corpus.samples.push(ContextualSample {
            id,
            page_title: String::new(),
            caption: caption.text,
            section: section.text,
            description: description.text,
            image_feature_id: Some(feature_id),
            source: Source::Synthetic,
        });
    }
    Ok(SynthOutput { corpus, annotations, features, inventory })
}

/// Analytic expectations for a config, for comparison with measured corpus
/// statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_entities: usize,
    pub expected_easy_fraction: f64,
    pub expected_caption_ne_word_fraction: f64,
    pub expected_caption_words: f64,
}

/// Words contributed by the joined entity list ("A and B" = 3 words).
fn joined_words(k: usize) -> f64 {
    match k {
        0 => 0.0,
        1 => 1.0,
        k => k as f64 + 1.0, // "and" plus comma-attached names
    }
}

pub fn describe(config: &SynthConfig) -> Result<SynthSpec> {
    config.validate(usize::MAX)?;
    let c = config.entities_per_caption;
    let slot = joined_words(c);
    let template_words =
        |t: &str| t.split_whitespace().filter(|w| *w != "{}").count() as f64;
    let pool_mean = |pool: &[String], extra: f64| -> (f64, f64) {
        // (mean words, mean NE fraction) over the pool
        let mut words_sum = 0.0;
        let mut frac_sum = 0.0;
        for t in pool {
            let words = template_words(t) + slot + extra;
            words_sum += words;
            frac_sum += if words > 0.0 { c as f64 / words } else { 0.0 };
        }
        (words_sum / pool.len() as f64, frac_sum / pool.len() as f64)
    };
    let (hard_words, hard_frac) = pool_mean(&config.caption_templates, 0.0);
    // easy captions: description minus its final word, plus "with" + entities
    let (easy_words, easy_frac) = pool_mean(&config.description_templates, 0.0);
    let e = config.easy_fraction;
    Ok(SynthSpec {
        n_samples: config.n_samples,
        n_entities: 3 * config.n_entities_per_label,
        expected_easy_fraction: e,
        expected_caption_ne_word_fraction: e * easy_frac + (1.0 - e) * hard_frac,
        expected_caption_words: e * easy_words + (1.0 - e) * hard_words,
    })
}
