//! Byte-level BPE tokenizer with whole-word boundary tracking.
//!
//! The base alphabet is the 256 byte values, so any UTF-8 input tokenizes
//! without an unknown token. Ids are laid out as:
//!
//! ```text
//! 0..=255    byte tokens
//! 256..=260  PAD, BOS, EOS, UNK, MASK
//! 261..=360  SENT_0 .. SENT_99
//! 361..      learned merges, in rank order
//! ```
//!
//! Words are the unit of whole-word masking. Text splits into word segments
//! at the end of every non-whitespace run except the last, so inner
//! whitespace attaches to the word that follows it ("New York" segments as
//! "New" + " York") and trailing whitespace joins the final word. Merges
//! never cross segment boundaries.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const N_BYTE_TOKENS: u32 = 256;
pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const UNK: u32 = 259;
pub const MASK: u32 = 260;
pub const SENT_BASE: u32 = 261;
pub const N_SENTINELS: u32 = 100;
/// First id available to learned merges.
pub const FIRST_LEARNED: u32 = SENT_BASE + N_SENTINELS;
pub const N_SPECIALS: u32 = FIRST_LEARNED - N_BYTE_TOKENS;

pub fn sentinel_id(l: u32) -> Result<u32> {
    if l < N_SENTINELS {
        Ok(SENT_BASE + l)
    } else {
        Err(Error::SentinelBudget { needed: l as usize + 1, available: N_SENTINELS as usize })
    }
}

pub fn is_special(id: u32) -> bool {
    (N_BYTE_TOKENS..FIRST_LEARNED).contains(&id)
}

/// Literal marker rendered by `decode` for a special token.
pub fn special_marker(id: u32) -> Option<String> {
    match id {
        PAD => Some("[PAD]".into()),
        BOS => Some("[BOS]".into()),
        EOS => Some("[EOS]".into()),
        UNK => Some("[UNK]".into()),
        MASK => Some("[MASK]".into()),
        id if (SENT_BASE..FIRST_LEARNED).contains(&id) => {
            Some(format!("[SENT_{}]", id - SENT_BASE))
        }
        _ => None,
    }
}

/// Byte-level BPE vocabulary: 256 byte tokens, the reserved specials, and an
/// ordered merge list. Immutable once trained.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    /// Byte string of each learned token, indexed by `id - FIRST_LEARNED`.
    learned_bytes: Vec<Vec<u8>>,
    /// (left, right) -> (rank, merged id)
    merge_lookup: HashMap<(u32, u32), (u32, u32)>,
    /// Byte string -> lowest id rendering it.
    token_to_id: HashMap<Vec<u8>, u32>,
}

impl BpeVocab {
    /// Build a vocabulary from an explicit merge list. Pair members must be
    /// previously defined non-special ids.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut learned_bytes: Vec<Vec<u8>> = Vec::with_capacity(merges.len());
        let mut merge_lookup = HashMap::new();
        let mut token_to_id: HashMap<Vec<u8>, u32> = HashMap::new();
        for b in 0..N_BYTE_TOKENS {
            token_to_id.insert(vec![b as u8], b);
        }
        let bytes_of = |learned: &[Vec<u8>], id: u32| -> Result<Vec<u8>> {
            if id < N_BYTE_TOKENS {
                Ok(vec![id as u8])
            } else if id >= FIRST_LEARNED && ((id - FIRST_LEARNED) as usize) < learned.len() {
                Ok(learned[(id - FIRST_LEARNED) as usize].clone())
            } else {
                Err(Error::Format(format!("merge references undefined token id {id}")))
            }
        };
        for (rank, &(left, right)) in merges.iter().enumerate() {
            let mut bytes = bytes_of(&learned_bytes, left)?;
            bytes.extend(bytes_of(&learned_bytes, right)?);
            let new_id = FIRST_LEARNED + rank as u32;
            token_to_id.entry(bytes.clone()).or_insert(new_id);
            learned_bytes.push(bytes);
            if merge_lookup.insert((left, right), (rank as u32, new_id)).is_some() {
                return Err(Error::Format(format!("duplicate merge pair ({left}, {right})")));
            }
        }
        Ok(BpeVocab { merges, learned_bytes, merge_lookup, token_to_id })
    }

    /// Total number of ids (bytes + specials + learned merges).
    pub fn size(&self) -> usize {
        FIRST_LEARNED as usize + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte string of a non-special token id.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if id < N_BYTE_TOKENS {
            Some(std::slice::from_ref(&BYTE_TABLE[id as usize]))
        } else if id >= FIRST_LEARNED {
            self.learned_bytes.get((id - FIRST_LEARNED) as usize).map(|v| v.as_slice())
        } else {
            None
        }
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    /// Ids eligible as random replacements in MLM corruption: every
    /// non-special id.
    pub fn non_special_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..N_BYTE_TOKENS).chain(FIRST_LEARNED..self.size() as u32)
    }
}

static BYTE_TABLE: [u8; 256] = {
    let mut t = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = i as u8;
        i += 1;
    }
    t
};

/// Token ids plus the byte span each token covers in the source text and the
/// word segment it belongs to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Byte offsets (start, end) into the source text; empty for specials.
    pub spans: Vec<(usize, usize)>,
    /// Word segment index per token; non-decreasing.
    pub word_ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Byte ranges of the word segments of `text` (see module docs for the rule).
pub fn word_segments(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (pos, ch) in text.char_indices() {
        if !ch.is_whitespace() {
            match runs.last_mut() {
                Some(last) if last.1 == pos => last.1 = pos + ch.len_utf8(),
                _ => runs.push((pos, pos + ch.len_utf8())),
            }
        }
    }
    if runs.is_empty() {
        return if bytes.is_empty() { Vec::new() } else { vec![(0, bytes.len())] };
    }
    let mut segments = Vec::with_capacity(runs.len());
    let mut start = 0;
    for w in 0..runs.len() - 1 {
        segments.push((start, runs[w].1));
        start = runs[w].1;
    }
    segments.push((start, bytes.len()));
    segments
}

/// Train a vocabulary by greedy pair merging: repeatedly merge the most
/// frequent adjacent pair (ties broken by the lexicographically smaller
/// (left bytes, right bytes)) until `target_vocab_size` is reached or no
/// pair occurs at least twice.
pub fn train_bpe<'a, I>(texts: I, target_vocab_size: usize) -> Result<BpeVocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if target_vocab_size < FIRST_LEARNED as usize {
        return Err(Error::InvalidArgument(format!(
            "target_vocab_size must be at least {} (bytes + specials)",
            FIRST_LEARNED
        )));
    }
    // Unique word segments with counts; merges never cross segments.
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for (s, e) in word_segments(text) {
            *word_counts.entry(text[s..e].to_string()).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::InvalidArgument("cannot train BPE on an empty corpus".into()));
    }
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.bytes().map(|b| b as u32).collect(), c))
        .collect();
    // Deterministic iteration order regardless of hash state.
    words.sort_unstable_by(|a, b| a.0.cmp(&b.0));

    let mut vocab = BpeVocab::from_merges(Vec::new())?;
    let n_merges = target_vocab_size - FIRST_LEARNED as usize;
    for _ in 0..n_merges {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (word, count) in &words {
            for pair in word.windows(2) {
                *pair_counts.entry((pair[0], pair[1])).or_insert(0) += count;
            }
        }
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &pair_counts {
            let better = match &best {
                None => true,
                Some((best_pair, best_count)) => {
                    count > *best_count
                        || (count == *best_count
                            && pair_key(&vocab, pair) < pair_key(&vocab, *best_pair))
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = FIRST_LEARNED + vocab.merges.len() as u32;
        for (word, _) in &mut words {
            merge_in_place(word, pair, new_id);
        }
        let mut merges = std::mem::take(&mut vocab.merges);
        merges.push(pair);
        vocab = BpeVocab::from_merges(merges)?;
    }
    Ok(vocab)
}

fn pair_key(vocab: &BpeVocab, pair: (u32, u32)) -> (Vec<u8>, Vec<u8>) {
    (
        vocab.token_bytes(pair.0).unwrap_or_default().to_vec(),
        vocab.token_bytes(pair.1).unwrap_or_default().to_vec(),
    )
}

fn merge_in_place(word: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut read = 0;
    let mut write = 0;
    while read < word.len() {
        if read + 1 < word.len() && word[read] == pair.0 && word[read + 1] == pair.1 {
            word[write] = new_id;
            read += 2;
        } else {
            word[write] = word[read];
            read += 1;
        }
        write += 1;
    }
    word.truncate(write);
}

/// Tokenize text: per word segment, start from byte tokens and apply merges
/// in rank order until none applies.
pub fn encode(vocab: &BpeVocab, text: &str) -> TokenSeq {
    let mut seq = TokenSeq::default();
    for (word_idx, (seg_start, seg_end)) in word_segments(text).into_iter().enumerate() {
        let seg = &text.as_bytes()[seg_start..seg_end];
        let mut ids: Vec<u32> = seg.iter().map(|&b| b as u32).collect();
        let mut spans: Vec<(usize, usize)> =
            (0..seg.len()).map(|i| (seg_start + i, seg_start + i + 1)).collect();
        loop {
            // Lowest-rank applicable merge.
            let mut best: Option<(u32, u32, (u32, u32))> = None; // (rank, new_id, pair)
            for pair in ids.windows(2) {
                if let Some(&(rank, new_id)) = vocab.merge_lookup.get(&(pair[0], pair[1])) {
                    if best.map_or(true, |(r, _, _)| rank < r) {
                        best = Some((rank, new_id, (pair[0], pair[1])));
                    }
                }
            }
            let Some((_, new_id, pair)) = best else { break };
            let mut read = 0;
            let mut write = 0;
            while read < ids.len() {
                if read + 1 < ids.len() && ids[read] == pair.0 && ids[read + 1] == pair.1 {
                    ids[write] = new_id;
                    spans[write] = (spans[read].0, spans[read + 1].1);
                    read += 2;
                } else {
                    ids[write] = ids[read];
                    spans[write] = spans[read];
                    read += 1;
                }
                write += 1;
            }
            ids.truncate(write);
            spans.truncate(write);
        }
        seq.ids.extend_from_slice(&ids);
        seq.spans.extend_from_slice(&spans);
        seq.word_ids.extend(std::iter::repeat(word_idx as u32).take(ids.len()));
    }
    seq
}

/// Inverse of [`encode`] for non-special ids; special ids render as their
/// literal `[NAME]` markers unless `skip_specials` is set. Unknown ids are
/// an argument error.
pub fn decode(vocab: &BpeVocab, ids: &[u32], skip_specials: bool) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in ids {
        if let Some(marker) = special_marker(id) {
            if !skip_specials {
                bytes.extend_from_slice(marker.as_bytes());
            }
        } else if let Some(tok) = vocab.token_bytes(id) {
            bytes.extend_from_slice(tok);
        } else {
            return Err(Error::InvalidArgument(format!("unknown token id {id}")));
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Contiguous token-index ranges, one per word segment, covering the whole
/// sequence in order.
pub fn word_groups(seq: &TokenSeq) -> Vec<(usize, usize)> {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for (idx, &w) in seq.word_ids.iter().enumerate() {
        match groups.last_mut() {
            Some(last) if seq.word_ids[last.0] == w => last.1 = idx + 1,
            _ => groups.push((idx, idx + 1)),
        }
    }
    groups
}

// --- vocab file --------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    /// Merge pairs as token ids; rank = list position, merged id = 361 + rank.
    merges: Vec<(u32, u32)>,
    specials: std::collections::BTreeMap<String, u32>,
}

fn specials_map() -> std::collections::BTreeMap<String, u32> {
    let mut m = std::collections::BTreeMap::new();
    m.insert("PAD".into(), PAD);
    m.insert("BOS".into(), BOS);
    m.insert("EOS".into(), EOS);
    m.insert("UNK".into(), UNK);
    m.insert("MASK".into(), MASK);
    for l in 0..N_SENTINELS {
        m.insert(format!("SENT_{l}"), SENT_BASE + l);
    }
    m
}

pub fn save_vocab(vocab: &BpeVocab, path: &Path) -> Result<()> {
    let file = VocabFile { version: 1, merges: vocab.merges.clone(), specials: specials_map() };
    let w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(w, &file).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<BpeVocab> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let file: VocabFile = serde_json::from_reader(r).map_err(|e| Error::Format(e.to_string()))?;
    if file.version != 1 {
        return Err(Error::Format(format!("unsupported vocab version {}", file.version)));
    }
    if file.specials != specials_map() {
        return Err(Error::Format("vocab specials do not match the reserved layout".into()));
    }
    BpeVocab::from_merges(file.merges)
}
