//! Literal-formula metric oracles.
//!
//! Tokenization follows the documented rule (lowercase, split on whitespace,
//! trim non-alphanumeric edges) but is written from scratch here, as are the
//! n-gram counters, LCS, and TF-IDF vectors. N-grams are `Vec<String>` keys
//! in `BTreeMap`s; nothing is shared with the crates under test.

use std::collections::{BTreeMap, BTreeSet};

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut chars: Vec<char> = raw.chars().collect();
        while let Some(&c) = chars.first() {
            if c.is_alphanumeric() {
                break;
            }
            chars.remove(0);
        }
        while let Some(&c) = chars.last() {
            if c.is_alphanumeric() {
                break;
            }
            chars.pop();
        }
        if !chars.is_empty() {
            out.push(chars.into_iter().collect::<String>().to_lowercase());
        }
    }
    out
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, u64> {
    let mut map = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return map;
    }
    for i in 0..=(tokens.len() - n) {
        *map.entry(tokens[i..i + n].to_vec()).or_insert(0) += 1;
    }
    map
}

/// Corpus BLEU-4 with optional add-1 smoothing on n >= 2, from raw strings.
pub fn bleu4(pairs: &[(String, String)], smooth: bool) -> f64 {
    let mut cand_len = 0.0;
    let mut ref_len = 0.0;
    let mut matched = [0.0f64; 4];
    let mut total = [0.0f64; 4];
    for (cand, reference) in pairs {
        let c = tokenize(cand);
        let r = tokenize(reference);
        cand_len += c.len() as f64;
        ref_len += r.len() as f64;
        for n in 1..=4 {
            let cg = ngrams(&c, n);
            let rg = ngrams(&r, n);
            for (gram, count) in cg {
                total[n - 1] += count as f64;
                let clip = rg.get(&gram).copied().unwrap_or(0) as f64;
                matched[n - 1] += (count as f64).min(clip);
            }
        }
    }
    let mut product = 1.0f64;
    for n in 0..4 {
        let (m, t) = if smooth && n >= 1 {
            (matched[n] + 1.0, total[n] + 1.0)
        } else {
            (matched[n], total[n])
        };
        if m <= 0.0 || t <= 0.0 {
            return 0.0;
        }
        product *= (m / t).powf(0.25);
    }
    let bp = if cand_len < ref_len && cand_len > 0.0 {
        (1.0 - ref_len / cand_len).exp()
    } else {
        1.0
    };
    product * bp
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

/// Mean ROUGE-L F-measure (beta = 1.2) over string pairs.
pub fn rouge_l(pairs: &[(String, String)]) -> f64 {
    let mut sum = 0.0;
    for (cand, reference) in pairs {
        let c = tokenize(cand);
        let r = tokenize(reference);
        let l = lcs(&c, &r) as f64;
        if l == 0.0 || c.is_empty() || r.is_empty() {
            continue;
        }
        let p = l / c.len() as f64;
        let rec = l / r.len() as f64;
        let b2 = 1.2f64 * 1.2;
        sum += (1.0 + b2) * rec * p / (rec + b2 * p);
    }
    sum / pairs.len() as f64
}

/// Mean CIDEr-D over string pairs: TF-IDF cosine per n with candidate counts
/// clipped to reference counts, Gaussian length penalty (sigma 6), averaged
/// over n = 1..4, times 10. IDF comes from the reference side of `pairs`.
pub fn cider_d(pairs: &[(String, String)]) -> f64 {
    let n_docs = pairs.len() as f64;
    let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    for (_, reference) in pairs {
        let r = tokenize(reference);
        let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
        for n in 1..=4 {
            for (gram, _) in ngrams(&r, n) {
                seen.insert(gram);
            }
        }
        for gram in seen {
            *df.entry(gram).or_insert(0.0) += 1.0;
        }
    }
    let idf = |gram: &Vec<String>| -> f64 {
        let d = df.get(gram).copied().unwrap_or(1.0).max(1.0);
        n_docs.ln() - d.ln()
    };

    let mut total = 0.0;
    for (cand, reference) in pairs {
        let c = tokenize(cand);
        let r = tokenize(reference);
        let delta = c.len() as f64 - r.len() as f64;
        let penalty = (-(delta * delta) / 72.0).exp();
        let mut pair_sum = 0.0;
        for n in 1..=4 {
            let cg = ngrams(&c, n);
            let rg = ngrams(&r, n);
            let mut dot = 0.0;
            let mut c_norm = 0.0;
            let mut r_norm = 0.0;
            for (gram, &tc) in &cg {
                let w = idf(gram);
                let clipped = (tc as f64).min(rg.get(gram).copied().unwrap_or(0) as f64);
                dot += (clipped * w) * (rg.get(gram).copied().unwrap_or(0) as f64 * w);
                c_norm += (tc as f64 * w) * (tc as f64 * w);
            }
            for (gram, &tr) in &rg {
                let w = idf(gram);
                r_norm += (tr as f64 * w) * (tr as f64 * w);
            }
            if c_norm > 0.0 && r_norm > 0.0 {
                pair_sum += penalty * dot / (c_norm.sqrt() * r_norm.sqrt());
            }
        }
        total += 10.0 * pair_sum / 4.0;
    }
    total / n_docs
}

/// Deterministic xorshift generator for building fixtures without pulling in
/// the crates under test.
pub struct XorShift(u64);

impl XorShift {
    pub fn new(seed: u64) -> Self {
        XorShift(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// A fixture of (candidate, reference) caption pairs with shared vocabulary,
/// varied lengths, and some exact copies.
pub fn caption_fixture(n_pairs: usize, seed: u64) -> Vec<(String, String)> {
    let words = [
        "harbor", "tower", "bridge", "festival", "winter", "museum", "market", "valley",
        "portrait", "archive", "council", "garden", "lantern", "procession", "quay", "terrace",
        "old", "grand", "quiet", "northern", "stone", "painted", "restored", "crowded",
        "the", "a", "near", "at", "during", "beside", "of", "in",
    ];
    let mut rng = XorShift::new(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let ref_len = 4 + rng.below(8);
        let reference: Vec<&str> = (0..ref_len).map(|_| words[rng.below(words.len())]).collect();
        let candidate: Vec<&str> = if i % 5 == 0 {
            reference.clone()
        } else {
            // perturb: drop, substitute, or extend
            let mut c: Vec<&str> = reference.clone();
            for _ in 0..(1 + rng.below(3)) {
                match rng.below(3) {
                    0 if c.len() > 2 => {
                        let at = rng.below(c.len());
                        c.remove(at);
                    }
                    1 => {
                        let at = rng.below(c.len());
                        c[at] = words[rng.below(words.len())];
                    }
                    _ => c.push(words[rng.below(words.len())]),
                }
            }
            c
        };
        pairs.push((candidate.join(" "), reference.join(" ")));
    }
    pairs
}
