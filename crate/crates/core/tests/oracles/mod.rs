//! Brute-force reference implementations of the caption metrics, written
//! without sharing any code with the library versions.

#![allow(dead_code)]

use bacap::metrics::{EvalCorpus, EvalItem};
use bacap::numerics::Rng;

fn windows(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(haystack: &[Vec<String>], needle: &[String]) -> usize {
    haystack.iter().filter(|g| g.as_slice() == needle).count()
}

fn distinct(grams: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in grams {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu4(items: &[EvalItem]) -> f64 {
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let mut c = 0;
    let mut r = 0;
    for it in items {
        c += it.candidate.len();
        let mut best = it.references[0].len();
        for rf in &it.references {
            let d = rf.len().abs_diff(it.candidate.len());
            let bd = best.abs_diff(it.candidate.len());
            if d < bd || (d == bd && rf.len() < best) {
                best = rf.len();
            }
        }
        r += best;
        for n in 1..=4 {
            let cand = windows(&it.candidate, n);
            total[n - 1] += cand.len();
            for g in distinct(&cand) {
                let mut max_ref = 0;
                for rf in &it.references {
                    max_ref = max_ref.max(count(&windows(rf, n), &g));
                }
                clipped[n - 1] += count(&cand, &g).min(max_ref);
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0 || clipped[n] == 0 {
            return 0.0;
        }
        log_sum += (clipped[n] as f64 / total[n] as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

fn is_subsequence(sub: &[String], of: &[String]) -> bool {
    let mut k = 0;
    for t in of {
        if k < sub.len() && *t == sub[k] {
            k += 1;
        }
    }
    k == sub.len()
}

/// LCS by trying every subsequence of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1u32 << a.len()) {
        let sub: Vec<String> = (0..a.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| a[i].clone())
            .collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(items: &[EvalItem]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut sum = 0.0;
    for it in items {
        let mut best = 0.0f64;
        for rf in &it.references {
            let l = lcs(&it.candidate, rf) as f64;
            if l > 0.0 {
                let rec = l / rf.len() as f64;
                let prec = l / it.candidate.len() as f64;
                best = best.max((1.0 + beta2) * rec * prec / (rec + beta2 * prec));
            }
        }
        sum += best;
    }
    sum / items.len() as f64
}

/// Per-video plain CIDEr from explicit dense tf-idf tables.
pub fn cider(items: &[EvalItem]) -> Vec<f64> {
    let m = items.len() as f64;
    let mut scores = vec![0.0; items.len()];
    for n in 1..=4 {
        let mut table: Vec<Vec<String>> = Vec::new();
        for it in items {
            for s in std::iter::once(&it.candidate).chain(&it.references) {
                for g in windows(s, n) {
                    if !table.contains(&g) {
                        table.push(g);
                    }
                }
            }
        }
        let idf: Vec<f64> = table
            .iter()
            .map(|g| {
                let df = items
                    .iter()
                    .filter(|it| it.references.iter().any(|rf| count(&windows(rf, n), g) > 0))
                    .count();
                (m / df.max(1) as f64).ln()
            })
            .collect();
        let vector = |s: &[String]| -> Vec<f64> {
            let grams = windows(s, n);
            table.iter().zip(&idf).map(|(g, w)| count(&grams, g) as f64 * w).collect()
        };
        for (k, it) in items.iter().enumerate() {
            let cv = vector(&it.candidate);
            let mut acc = 0.0;
            for rf in &it.references {
                let rv = vector(rf);
                let dot: f64 = cv.iter().zip(&rv).map(|(a, b)| a * b).sum();
                let nc = cv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nr = rv.iter().map(|a| a * a).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    acc += dot / (nc * nr);
                }
            }
            scores[k] += acc / it.references.len() as f64 / 4.0;
        }
    }
    scores
}

const WORDS: [&str; 6] = ["a", "man", "walks", "then", "runs", "dog"];

fn sentence(rng: &mut Rng, min_len: usize) -> Vec<String> {
    let len = rng.range_inclusive(min_len, 12);
    (0..len)
        .map(|_| WORDS[rng.range_inclusive(0, WORDS.len() - 1)].to_string())
        .collect()
}

/// A random corpus of 2..=6 videos, sentences of at most 12 tokens over a
/// six-word alphabet, and 1..=3 references per video.
pub fn random_corpus(rng: &mut Rng) -> EvalCorpus {
    let videos = rng.range_inclusive(2, 6);
    let items = (0..videos)
        .map(|v| EvalItem {
            id: format!("vid{v}"),
            candidate: sentence(rng, 1),
            references: (0..rng.range_inclusive(1, 3)).map(|_| sentence(rng, 1)).collect(),
        })
        .collect();
    EvalCorpus::from_items(items).expect("unique ids")
}
