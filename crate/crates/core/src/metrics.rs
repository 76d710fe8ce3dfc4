//! Caption metrics: BLEU-4, ROUGE-L and CIDEr-D, plus the self-critical
//! advantage built on CIDEr-D.
//!
//! All functions are generic over the token type so they work both on
//! vocabulary ids (training rewards) and on strings (evaluation reports).

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{BuildHasherDefault, Hash};

use serde::{Deserialize, Serialize};

pub const MAX_ORDER: usize = 4;
/// Replaces a zero n-gram precision in sentence-level BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

/// Hash map with fixed hashing keys, so iteration order (and with it the
/// order of floating-point sums) repeats from run to run.
pub type FixedMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;

/// N-gram multisets of orders 1 through 4.
#[derive(Clone, Debug)]
pub struct NGramStats<T> {
    orders: Vec<FixedMap<Vec<T>, usize>>,
}

impl<T: Hash + Eq + Clone> NGramStats<T> {
    pub fn new(tokens: &[T]) -> Self {
        let orders = (1..=MAX_ORDER)
            .map(|n| {
                let mut m = FixedMap::default();
                if tokens.len() >= n {
                    for w in tokens.windows(n) {
                        *m.entry(w.to_vec()).or_insert(0) += 1;
                    }
                }
                m
            })
            .collect();
        NGramStats { orders }
    }

    /// Counts of order `n` (1-based).
    pub fn order(&self, n: usize) -> &FixedMap<Vec<T>, usize> {
        &self.orders[n - 1]
    }

    pub fn total(&self, n: usize) -> usize {
        self.order(n).values().sum()
    }
}

/// Clipped n-gram matches and candidate n-gram total for order `n`.
pub fn modified_precision<T: Hash + Eq + Clone>(candidate: &[T], refs: &[Vec<T>], n: usize) -> (usize, usize) {
    let cand = NGramStats::new(candidate);
    let ref_stats: Vec<_> = refs.iter().map(|r| NGramStats::new(r)).collect();
    clipped(&cand, &ref_stats, n)
}

fn clipped<T: Hash + Eq + Clone>(cand: &NGramStats<T>, refs: &[NGramStats<T>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    for (g, c) in cand.order(n) {
        let max_ref = refs
            .iter()
            .map(|r| r.order(n).get(g).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matched += (*c).min(max_ref);
    }
    (matched, cand.total(n))
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len<T>(c: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Sentence-level BLEU-4 with zero precisions replaced by [`BLEU_EPSILON`].
pub fn bleu4<T: Hash + Eq + Clone>(candidate: &[T], refs: &[Vec<T>]) -> f64 {
    if candidate.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let cand = NGramStats::new(candidate);
    let ref_stats: Vec<_> = refs.iter().map(|r| NGramStats::new(r)).collect();
    let log_sum: f64 = (1..=MAX_ORDER)
        .map(|n| {
            let (m, t) = clipped(&cand, &ref_stats, n);
            let p = if m == 0 || t == 0 {
                BLEU_EPSILON
            } else {
                m as f64 / t as f64
            };
            p.ln()
        })
        .sum();
    let bp = brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), refs));
    bp * (log_sum / MAX_ORDER as f64).exp()
}

/// Unsmoothed corpus BLEU-4 over `(candidate, refs)` pairs.
pub fn corpus_bleu4<T: Hash + Eq + Clone>(pairs: &[(Vec<T>, Vec<Vec<T>>)]) -> f64 {
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, refs) in pairs {
        let cand = NGramStats::new(c);
        let ref_stats: Vec<_> = refs.iter().map(|r| NGramStats::new(r)).collect();
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped(&cand, &ref_stats, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c_len += c.len();
        r_len += closest_ref_len(c.len(), refs);
    }
    if matched.contains(&0) {
        return 0.0;
    }
    let log_sum: f64 = matched
        .iter()
        .zip(&total)
        .map(|(m, t)| (*m as f64 / *t as f64).ln())
        .sum();
    brevity_penalty(c_len, r_len) * (log_sum / MAX_ORDER as f64).exp()
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with `β = 1.2`, maximized over references.
pub fn rouge_l<T: Eq>(candidate: &[T], refs: &[Vec<T>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Document frequencies of n-grams over a reference corpus, one document
/// per image (the union of that image's references).
#[derive(Clone, Debug)]
pub struct IdfCorpus<T> {
    df: FixedMap<Vec<T>, usize>,
    documents: usize,
}

impl<T: Hash + Eq + Clone> IdfCorpus<T> {
    pub fn build(images: &[Vec<Vec<T>>]) -> Self {
        let mut df = FixedMap::default();
        for refs in images {
            let mut seen = HashSet::new();
            for r in refs {
                let s = NGramStats::new(r);
                for n in 1..=MAX_ORDER {
                    seen.extend(s.order(n).keys().cloned());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        IdfCorpus {
            df,
            documents: images.len().max(1),
        }
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn df(&self, gram: &[T]) -> usize {
        self.df.get(gram).copied().unwrap_or(0)
    }

    /// `ln M − ln max(1, df)`. A single-document corpus carries no IDF
    /// information, so every n-gram gets unit weight there.
    pub fn weight(&self, gram: &[T]) -> f64 {
        if self.documents == 1 {
            return 1.0;
        }
        (self.documents as f64).ln() - (self.df(gram).max(1) as f64).ln()
    }

    fn vectorize(&self, s: &NGramStats<T>) -> Vec<(FixedMap<Vec<T>, f64>, f64)> {
        (1..=MAX_ORDER)
            .map(|n| {
                let v: FixedMap<Vec<T>, f64> = s
                    .order(n)
                    .iter()
                    .map(|(g, c)| (g.clone(), *c as f64 * self.weight(g)))
                    .collect();
                let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
                (v, norm)
            })
            .collect()
    }
}

/// CIDEr-D: clipped TF-IDF cosine per order, Gaussian length penalty,
/// averaged over orders 1–4 and over references, scaled by 10.
pub fn cider_d<T: Hash + Eq + Clone>(candidate: &[T], refs: &[Vec<T>], idf: &IdfCorpus<T>) -> f64 {
    if candidate.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let hyp = idf.vectorize(&NGramStats::new(candidate));
    let mut total = 0.0;
    for r in refs {
        let rv = idf.vectorize(&NGramStats::new(r));
        let delta = candidate.len() as f64 - r.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut per_order = 0.0;
        for ((hv, hn), (rvec, rn)) in hyp.iter().zip(&rv) {
            let mut val: f64 = hv
                .iter()
                .map(|(g, h)| {
                    let r = rvec.get(g).copied().unwrap_or(0.0);
                    h.min(r) * r
                })
                .sum();
            if *hn != 0.0 && *rn != 0.0 {
                val /= hn * rn;
            }
            per_order += val * penalty;
        }
        total += per_order / MAX_ORDER as f64;
    }
    CIDER_SCALE * total / refs.len() as f64
}

/// Sample reward, greedy baseline and their difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub r_sample: f64,
    pub r_greedy: f64,
    pub advantage: f64,
}

impl RewardRecord {
    pub fn new(r_sample: f64, r_greedy: f64) -> Self {
        RewardRecord {
            r_sample,
            r_greedy,
            advantage: r_sample - r_greedy,
        }
    }
}

/// Self-critical advantage: CIDEr-D of the sample minus CIDEr-D of the
/// greedy decode of the same image.
pub fn advantage<T: Hash + Eq + Clone>(
    sampled: &[T],
    greedy: &[T],
    refs: &[Vec<T>],
    idf: &IdfCorpus<T>,
) -> RewardRecord {
    RewardRecord::new(cider_d(sampled, refs, idf), cider_d(greedy, refs, idf))
}
