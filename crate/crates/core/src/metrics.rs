//! Caption metrics over tokenised sentences.
//!
//! BLEU, ROUGE-L and CIDEr-D follow the coco-caption conventions. METEOR is a
//! simplified variant (exact then suffix-stripped matches, no synonyms) and
//! is reported as `meteor-simple`.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub type Sentence = Vec<String>;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    out
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.values().sum())
}

/// Reference length closest to `len`, shorter on ties.
fn closest_ref_len<S>(len: usize, references: &[Vec<S>]) -> usize {
    references.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(len), r)).unwrap_or(0)
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

fn bleu_from_counts(matched: &[usize], totals: &[usize], ref_totals_present: &[bool], c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for k in 0..matched.len() {
        if totals[k] == 0 && !ref_totals_present[k] {
            // Neither side is long enough for this order.
            continue;
        }
        if matched[k] == 0 {
            return 0.0;
        }
        log_sum += (matched[k] as f64 / totals[k] as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    brevity_penalty(c, r) * (log_sum / orders as f64).exp()
}

/// Sentence BLEU with uniform weights over orders `1..=n`. Orders that
/// neither the candidate nor any reference is long enough to contain are
/// left out of the geometric mean.
pub fn bleu_n<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || n == 0 {
        return 0.0;
    }
    let mut matched = Vec::with_capacity(n);
    let mut totals = Vec::with_capacity(n);
    let mut present = Vec::with_capacity(n);
    for k in 1..=n {
        let (m, t) = clipped(candidate, references, k);
        matched.push(m);
        totals.push(t);
        present.push(references.iter().any(|r| r.len() >= k));
    }
    bleu_from_counts(&matched, &totals, &present, candidate.len(), closest_ref_len(candidate.len(), references))
}

/// Corpus BLEU: counts and lengths are pooled before combining.
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>], n: usize) -> f64 {
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    let mut present = vec![false; n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            continue;
        }
        for k in 1..=n {
            let (m, t) = clipped(cand, refs, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
            present[k - 1] |= refs.iter().any(|x| x.len() >= k);
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    bleu_from_counts(&matched, &totals, &present, c, r)
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with recall weight `beta = 1.2`, using the best precision
/// and best recall over references.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references.iter().filter(|x| !x.is_empty()) {
        let l = lcs_len(candidate, reference) as f64;
        p = p.max(l / candidate.len() as f64);
        r = r.max(l / reference.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Per-instance and corpus CIDEr-D. Document frequencies come from the
/// references of the scored corpus itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    pub per_instance: Vec<f64>,
    pub corpus: f64,
}

struct CiderVec<'a> {
    weights: Vec<HashMap<Vec<&'a str>, f64>>,
    norms: Vec<f64>,
    length: usize,
}

fn cider_vec<'a, S: AsRef<str>>(tokens: &'a [S], df: &HashMap<Vec<&'a str>, usize>, log_n: f64) -> CiderVec<'a> {
    let mut weights = Vec::with_capacity(CIDER_N);
    let mut norms = Vec::with_capacity(CIDER_N);
    let mut length = 0;
    for n in 1..=CIDER_N {
        let mut w = HashMap::new();
        let mut norm = 0.0;
        for (g, tf) in ngrams(tokens, n) {
            let d = (df.get(&g).copied().unwrap_or(0).max(1) as f64).ln();
            let v = tf as f64 * (log_n - d);
            norm += v * v;
            if n == 2 {
                length += tf;
            }
            w.insert(g, v);
        }
        weights.push(w);
        norms.push(norm.sqrt());
    }
    CiderVec { weights, norms, length }
}

fn cider_sim(hyp: &CiderVec, reference: &CiderVec) -> f64 {
    let delta = hyp.length as f64 - reference.length as f64;
    let gauss = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_N {
        let mut val = 0.0;
        for (g, &h) in &hyp.weights[n] {
            if let Some(&r) = reference.weights[n].get(g) {
                val += h.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        total += val * gauss;
    }
    total / CIDER_N as f64
}

pub fn cider_d<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> CiderScores {
    let mut df: HashMap<Vec<&str>, usize> = HashMap::new();
    for refs in references {
        let mut seen = HashSet::new();
        for r in refs {
            for n in 1..=CIDER_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (references.len().max(1) as f64).ln();
    let per_instance: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            if refs.is_empty() {
                return 0.0;
            }
            let h = cider_vec(cand, &df, log_n);
            let sum: f64 = refs.iter().map(|r| cider_sim(&h, &cider_vec(r, &df, log_n))).sum();
            sum / refs.len() as f64 * 10.0
        })
        .collect();
    let corpus = if per_instance.is_empty() { 0.0 } else { per_instance.iter().sum::<f64>() / per_instance.len() as f64 };
    CiderScores { per_instance, corpus }
}

/// Crude suffix stripping used for the second matching stage.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "edly", "ed", "es", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

/// Best alignment score tuple: (exact matches, total matches, -chunks).
type AlignScore = (usize, usize, isize);

/// Exact and stem matches plus chunk count of the best alignment: most exact
/// matches, then most matches, then fewest chunks.
fn align<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> (usize, usize) {
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refs: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    if refs.len() > 64 {
        return greedy_align(&cand, &refs);
    }
    let cand_stems: Vec<&str> = cand.iter().map(|w| stem(w)).collect();
    let ref_stems: Vec<&str> = refs.iter().map(|w| stem(w)).collect();
    let mut memo: HashMap<(usize, u64, usize), AlignScore> = HashMap::new();

    // `prev` is 1 + the reference index matched by candidate i-1, or 0.
    fn best(
        i: usize,
        used: u64,
        prev: usize,
        ctx: (&[&str], &[&str], &[&str], &[&str]),
        memo: &mut HashMap<(usize, u64, usize), AlignScore>,
    ) -> AlignScore {
        let (cand, refs, cs, rs) = ctx;
        if i == cand.len() {
            return (0, 0, 0);
        }
        if let Some(&v) = memo.get(&(i, used, prev)) {
            return v;
        }
        let mut top = best(i + 1, used, 0, ctx, memo);
        for j in 0..refs.len() {
            if used & (1 << j) != 0 || cs[i] != rs[j] {
                continue;
            }
            let exact = usize::from(cand[i] == refs[j]);
            let new_chunk = isize::from(j == 0 || prev != j);
            let (e, m, c) = best(i + 1, used | (1 << j), j + 1, ctx, memo);
            let cand_score = (e + exact, m + 1, c - new_chunk);
            if cand_score > top {
                top = cand_score;
            }
        }
        memo.insert((i, used, prev), top);
        top
    }

    let (_, m, neg_chunks) = best(0, 0, 0, (&cand, &refs, &cand_stems, &ref_stems), &mut memo);
    (m, (-neg_chunks) as usize)
}

fn greedy_align(cand: &[&str], refs: &[&str]) -> (usize, usize) {
    let mut used = vec![false; refs.len()];
    let mut pairs = vec![None; cand.len()];
    for stage in 0..2 {
        for (i, w) in cand.iter().enumerate() {
            if pairs[i].is_some() {
                continue;
            }
            let hit = refs.iter().enumerate().position(|(j, r)| {
                !used[j] && if stage == 0 { r == w } else { stem(r) == stem(w) }
            });
            if let Some(j) = hit {
                used[j] = true;
                pairs[i] = Some(j);
            }
        }
    }
    let mut m = 0;
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for (i, p) in pairs.iter().enumerate() {
        if let Some(j) = *p {
            m += 1;
            if prev != Some((i.wrapping_sub(1), j.wrapping_sub(1))) {
                chunks += 1;
            }
            prev = Some((i, j));
        }
    }
    (m, chunks)
}

/// Single-reference simplified METEOR.
pub fn meteor_single<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = align(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let mf = m as f64;
    let p = mf / candidate.len() as f64;
    let r = mf / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / mf).powi(3);
    fmean * (1.0 - penalty)
}

/// Maximum over references.
pub fn meteor_simple<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    references.iter().map(|r| meteor_single(candidate, r)).fold(0.0, f64::max)
}

/// Area under the ROC curve via the rank statistic (ties count one half).
/// Returns 0.5 when either class is missing.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Every metric for a corpus of candidates with reference lists.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub count: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    #[serde(rename = "meteor-simple")]
    pub meteor_simple: f64,
    /// Fraction of candidates equal to one of their references.
    pub exact_match: f64,
}

pub fn score_corpus<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> MetricSet {
    let count = candidates.len();
    if count == 0 {
        return MetricSet::default();
    }
    let mean = |f: &dyn Fn(usize) -> f64| (0..count).map(f).sum::<f64>() / count as f64;
    let exact = |i: usize| {
        let c: Vec<&str> = candidates[i].iter().map(AsRef::as_ref).collect();
        f64::from(u8::from(references[i].iter().any(|r| r.iter().map(AsRef::as_ref).eq(c.iter().copied()))))
    };
    MetricSet {
        count,
        bleu1: corpus_bleu(candidates, references, 1),
        bleu2: corpus_bleu(candidates, references, 2),
        bleu3: corpus_bleu(candidates, references, 3),
        bleu4: corpus_bleu(candidates, references, 4),
        rouge_l: mean(&|i| rouge_l(&candidates[i], &references[i])),
        cider_d: cider_d(candidates, references).corpus,
        meteor_simple: mean(&|i| meteor_simple(&candidates[i], &references[i])),
        exact_match: mean(&exact),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(x: &str) -> Sentence {
        x.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_examples() {
        for n in 1..=4 {
            assert_eq!(bleu_n(&s("a man is cooking"), &[s("a man is cooking")], n), 1.0);
            assert_eq!(bleu_n(&s("yes"), &[s("yes")], n), 1.0);
        }
        assert!((bleu_n(&s("the the the"), &[s("the cat")], 1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu_n(&s("x y"), &[s("a b")], 1), 0.0);
        assert_eq!(bleu_n::<String>(&[], &[s("a")], 1), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&s("a b c"), &[s("a b c")]), 1.0);
        let got = rouge_l(&s("a b c d"), &[s("a c d")]);
        assert!((got - 2.44 * 0.75 / (1.0 + 1.44 * 0.75)).abs() < 1e-12, "{got}");
        assert_eq!(rouge_l(&s("x"), &[s("y")]), 0.0);
    }

    #[test]
    fn meteor_examples() {
        let id = meteor_single(&s("a man is cooking food"), &s("a man is cooking food"));
        assert!((id - (1.0 - 0.5 / 125.0)).abs() < 1e-12);
        let perm = meteor_single(&s("food cooking is man a"), &s("a man is cooking food"));
        assert!(perm < id);
        assert_eq!(meteor_single(&s("x"), &s("y")), 0.0);
        // Stem stage: "cooks" ~ "cooked".
        assert!(meteor_single(&s("he cooks"), &s("he cooked")) > 0.9);
    }

    #[test]
    fn cider_zero_without_overlap() {
        let c = cider_d(&[s("x y z"), s("a b")], &[vec![s("p q r")], vec![s("a b")]]);
        assert_eq!(c.per_instance[0], 0.0);
        assert!(c.per_instance[1] > 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[true, true, false]), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]), 0.0);
    }

    fn sentence() -> impl Strategy<Value = Sentence> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "cook", "cooks"]), 1..8)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_order_free(c in sentence(), r1 in sentence(), r2 in sentence()) {
            let fwd = vec![r1.clone(), r2.clone()];
            let rev = vec![r2, r1];
            for n in 1..=4 {
                let b = bleu_n(&c, &fwd, n);
                prop_assert!((0.0..=1.0).contains(&b));
                prop_assert_eq!(b, bleu_n(&c, &rev, n));
            }
            let r = rouge_l(&c, &fwd);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r, rouge_l(&c, &rev));
            let m = meteor_simple(&c, &fwd);
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert_eq!(m, meteor_simple(&c, &rev));
            prop_assert!((rouge_l(&c, std::slice::from_ref(&c)) - 1.0).abs() < 1e-12);
        }
    }
}
