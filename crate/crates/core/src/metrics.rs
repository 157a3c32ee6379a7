//! Corpus-level caption metrics: BLEU-4, ROUGE-L and CIDEr.
//!
//! Conventions follow the COCO caption evaluation toolkit: BLEU uses the
//! closest reference length for the brevity penalty (ties go to the shorter
//! reference) and no smoothing; ROUGE-L uses β = 1.2 and the best reference;
//! CIDEr is the plain tf-idf cosine without length penalty or clipping.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// One candidate and its references per video, ordered by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCorpus {
    items: Vec<EvalItem>,
}

impl EvalCorpus {
    /// Pairs every candidate with the references of the same id. References
    /// for ids without a candidate are ignored.
    pub fn new(
        candidates: BTreeMap<String, Vec<String>>,
        mut references: BTreeMap<String, Vec<Vec<String>>>,
    ) -> Result<Self> {
        let mut items = Vec::with_capacity(candidates.len());
        for (id, candidate) in candidates {
            let refs = references
                .remove(&id)
                .ok_or_else(|| Error::invalid(format!("no references for video {id:?}")))?;
            if refs.is_empty() {
                return Err(Error::invalid(format!("video {id:?} has an empty reference set")));
            }
            items.push(EvalItem {
                id,
                candidate,
                references: refs,
            });
        }
        Ok(EvalCorpus { items })
    }

    pub fn from_items(items: Vec<EvalItem>) -> Result<Self> {
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        for it in items {
            if cands.insert(it.id.clone(), it.candidate).is_some() {
                return Err(Error::invalid(format!("duplicate video id {:?}", it.id)));
            }
            refs.insert(it.id, it.references);
        }
        Self::new(cands, refs)
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn require_items(corpus: &EvalCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuScore {
    pub score: f64,
    /// Corpus-level modified precisions for n = 1..4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

/// Corpus BLEU with n = 1..4 and uniform weights.
pub fn bleu4(corpus: &EvalCorpus) -> Result<BleuScore> {
    require_items(corpus)?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for item in corpus.items() {
        let len = item.candidate.len();
        c += len;
        r += item
            .references
            .iter()
            .map(|x| x.len())
            .min_by_key(|&rl| (rl.abs_diff(len), rl))
            .unwrap_or(0);
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(&item.candidate, n);
            let mut max_ref: Counts = BTreeMap::new();
            for reference in &item.references {
                for (g, k) in ngram_counts(reference, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand {
                matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += len.saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        candidate_len: c,
        reference_len: r,
    })
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// Recall-weighted LCS F-measure of one candidate/reference pair.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let r = l as f64 / reference.len() as f64;
    let p = l as f64 / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RougeScore {
    pub score: f64,
    pub per_video: Vec<f64>,
    /// Ids whose candidate was empty and scored 0.
    pub empty_candidates: Vec<String>,
}

pub fn rouge_l(corpus: &EvalCorpus) -> Result<RougeScore> {
    require_items(corpus)?;
    let mut empty_candidates = Vec::new();
    let per_video: Vec<f64> = corpus
        .items()
        .iter()
        .map(|item| {
            if item.candidate.is_empty() {
                empty_candidates.push(item.id.clone());
                return 0.0;
            }
            item.references
                .iter()
                .map(|r| rouge_l_pair(&item.candidate, r))
                .fold(0.0, f64::max)
        })
        .collect();
    let score = per_video.iter().sum::<f64>() / per_video.len() as f64;
    Ok(RougeScore {
        score,
        per_video,
        empty_candidates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CiderScore {
    pub score: f64,
    pub per_video: Vec<f64>,
}

/// Plain CIDEr. Document frequencies come from the reference sets of the
/// corpus videos; an n-gram seen in no reference set gets frequency 1.
pub fn cider(corpus: &EvalCorpus) -> Result<CiderScore> {
    require_items(corpus)?;
    if corpus.len() < 2 {
        return Err(Error::invalid("CIDEr needs at least two videos"));
    }
    let n_docs = corpus.len() as f64;
    let mut per_video = vec![0.0; corpus.len()];
    for n in 1..=MAX_ORDER {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for item in corpus.items() {
            let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
            for r in &item.references {
                for g in ngram_counts(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let weigh = |counts: Counts<'_>| -> Vec<(Vec<String>, f64)> {
            counts
                .into_iter()
                .map(|(g, k)| (g.to_vec(), k as f64 * idf(g)))
                .collect()
        };
        for (i, item) in corpus.items().iter().enumerate() {
            let cand: BTreeMap<Vec<String>, f64> = weigh(ngram_counts(&item.candidate, n)).into_iter().collect();
            let cand_norm = cand.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut sum = 0.0;
            for r in &item.references {
                let refv = weigh(ngram_counts(r, n));
                let ref_norm = refv.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
                if cand_norm > 0.0 && ref_norm > 0.0 {
                    let dotp: f64 = refv
                        .iter()
                        .map(|(g, v)| v * cand.get(g).copied().unwrap_or(0.0))
                        .sum();
                    sum += dotp / (cand_norm * ref_norm);
                }
            }
            per_video[i] += sum / item.references.len() as f64 / MAX_ORDER as f64;
        }
    }
    let score = per_video.iter().sum::<f64>() / per_video.len() as f64;
    Ok(CiderScore { score, per_video })
}

/// Boundary-recovery counts accumulated over videos.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BoundaryMatch {
    pub matched: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl BoundaryMatch {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.matched as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.truth == 0 {
            0.0
        } else {
            self.matched as f64 / self.truth as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, other: BoundaryMatch) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }
}

/// Largest one-to-one matching between predicted and true boundary
/// positions that are at most `tol` apart. Both lists must be sorted.
pub fn match_boundaries(predicted: &[usize], truth: &[usize], tol: usize) -> BoundaryMatch {
    let (mut i, mut j, mut matched) = (0, 0, 0);
    while i < predicted.len() && j < truth.len() {
        let (p, t) = (predicted[i], truth[j]);
        if p.abs_diff(t) <= tol {
            matched += 1;
            i += 1;
            j += 1;
        } else if p < t {
            i += 1;
        } else {
            j += 1;
        }
    }
    BoundaryMatch {
        matched,
        predicted: predicted.len(),
        truth: truth.len(),
    }
}
