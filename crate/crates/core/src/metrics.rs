//! Corpus-level BLEU and SARI.
//!
//! Both metrics work on already tokenized text. [`EvalInstance::from_text`]
//! applies the standard normalisation: lowercase, then split on whitespace.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Highest n-gram order used by both metrics.
pub const MAX_ORDER: usize = 4;

pub type NgramCounts<'a> = HashMap<&'a [String], usize>;

/// Contiguous n-grams of `tokens` with their multiplicities.
///
/// # Panics
/// If `n == 0`.
pub fn ngram_profile(tokens: &[String], n: usize) -> NgramCounts<'_> {
    assert!(n >= 1, "n-gram order must be positive");
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub source: Vec<String>,
    pub output: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalInstance {
    pub fn new(
        source: Vec<String>,
        output: Vec<String>,
        references: Vec<Vec<String>>,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Usage(
                "evaluation instance needs at least one reference".into(),
            ));
        }
        Ok(EvalInstance {
            source,
            output,
            references,
        })
    }

    pub fn from_text<S: AsRef<str>>(source: &str, output: &str, references: &[S]) -> Result<Self> {
        Self::new(
            normalize(source),
            normalize(output),
            references.iter().map(|r| normalize(r.as_ref())).collect(),
        )
    }
}

/// Lowercase and whitespace-split.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn check_nonempty(instances: &[EvalInstance]) -> Result<()> {
    if instances.is_empty() {
        return Err(Error::Usage("no evaluation instances".into()));
    }
    if let Some(i) = instances.iter().position(|x| x.references.is_empty()) {
        return Err(Error::Usage(format!("instance {i} has no references")));
    }
    Ok(())
}

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    /// Clipped n-gram matches, index 0 holds unigrams.
    pub matches: [usize; MAX_ORDER],
    /// Candidate n-gram counts.
    pub totals: [usize; MAX_ORDER],
    pub candidate_len: usize,
    /// Sum over instances of the reference length closest to the output.
    pub reference_len: usize,
}

impl BleuStats {
    pub fn collect(instances: &[EvalInstance]) -> Self {
        let mut s = BleuStats::default();
        for inst in instances {
            let out = &inst.output;
            for n in 1..=MAX_ORDER {
                let cand = ngram_profile(out, n);
                let mut max_ref: HashMap<&[String], usize> = HashMap::new();
                for r in &inst.references {
                    for (g, c) in ngram_profile(r, n) {
                        let e = max_ref.entry(g).or_insert(0);
                        *e = (*e).max(c);
                    }
                }
                s.matches[n - 1] += cand
                    .iter()
                    .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                    .sum::<usize>();
                s.totals[n - 1] += out.len().saturating_sub(n - 1);
            }
            s.candidate_len += out.len();
            s.reference_len += closest_ref_len(out.len(), &inst.references);
        }
        s
    }

    /// Modified precision for order `n` (1-based); 0 when there are no
    /// candidate n-grams.
    pub fn precision(&self, n: usize) -> f64 {
        let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
        if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.candidate_len == 0 {
            0.0
        } else if self.candidate_len > self.reference_len {
            1.0
        } else {
            (1.0 - self.reference_len as f64 / self.candidate_len as f64).exp()
        }
    }

    /// BLEU on the 0..100 scale. With `smooth`, orders above one use
    /// add-one counts so a single missing order does not zero the score.
    pub fn score(&self, smooth: bool) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 1..=MAX_ORDER {
            let (mut m, mut t) = (self.matches[n - 1] as f64, self.totals[n - 1] as f64);
            if smooth && n > 1 {
                m += 1.0;
                t += 1.0;
            }
            if m == 0.0 || t == 0.0 {
                return 0.0;
            }
            log_sum += (m / t).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Closest reference length; ties go to the shorter reference.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU, unsmoothed.
pub fn bleu_corpus(instances: &[EvalInstance]) -> Result<f64> {
    bleu_corpus_with(instances, false)
}

pub fn bleu_corpus_with(instances: &[EvalInstance], smooth: bool) -> Result<f64> {
    check_nonempty(instances)?;
    Ok(BleuStats::collect(instances).score(smooth))
}

/// SARI components on the 0..1 scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SariScore {
    pub keep: f64,
    pub delete: f64,
    pub add: f64,
}

impl SariScore {
    /// Mean of the three components, scaled to 0..100.
    pub fn sari(&self) -> f64 {
        100.0 * (self.keep + self.delete + self.add) / 3.0
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One n-gram order of SARI for one instance.
///
/// Source and output counts are multiplied by the number of references so
/// they are comparable with reference counts, which are summed over the
/// reference set. Keep is an F1 of per-gram ratios, delete is precision
/// only, add is a set-level F1. A component with an empty denominator set
/// scores 0.
pub fn sari_ngram(
    source: &[String],
    output: &[String],
    references: &[Vec<String>],
    n: usize,
) -> SariScore {
    let k = references.len();
    let src: HashMap<_, _> = ngram_profile(source, n)
        .into_iter()
        .map(|(g, c)| (g, c * k))
        .collect();
    let out: HashMap<_, _> = ngram_profile(output, n)
        .into_iter()
        .map(|(g, c)| (g, c * k))
        .collect();
    let mut refs: NgramCounts = HashMap::new();
    for r in references {
        for (g, c) in ngram_profile(r, n) {
            *refs.entry(g).or_insert(0) += c;
        }
    }
    let get = |m: &NgramCounts, g: &[String]| m.get(g).copied().unwrap_or(0);

    // keep: grams in both source and output
    let (mut kp, mut kr, mut kept) = (0.0, 0.0, 0usize);
    for (g, &s) in &src {
        let o = get(&out, g);
        let r = get(&refs, g);
        let keep = s.min(o);
        if keep > 0 {
            kept += 1;
            let good = keep.min(r);
            kp += ratio(good, keep);
            kr += ratio(good, s.min(r));
        }
    }
    let keep_all = src.keys().filter(|g| get(&refs, g) > 0).count();
    let keep = f1(ratio(1, kept) * kp, ratio(1, keep_all) * kr);

    // delete: grams the output dropped from the source
    let (mut dp, mut deleted) = (0.0, 0usize);
    for (g, &s) in &src {
        let del = s.saturating_sub(get(&out, g));
        if del > 0 {
            deleted += 1;
            dp += ratio(del.saturating_sub(get(&refs, g)), del);
        }
    }
    let delete = ratio(1, deleted) * dp;

    // add: output grams absent from the source, as sets
    let added: HashSet<_> = out.keys().filter(|g| !src.contains_key(*g)).collect();
    let add_all: HashSet<_> = refs.keys().filter(|g| !src.contains_key(*g)).collect();
    let good = added.iter().filter(|g| refs.contains_key(**g)).count();
    let add = f1(ratio(good, added.len()), ratio(good, add_all.len()));

    SariScore { keep, delete, add }
}

/// Sentence SARI: components averaged over n = 1..4.
pub fn sari_sentence(inst: &EvalInstance) -> SariScore {
    let mut total = SariScore::default();
    for n in 1..=MAX_ORDER {
        let s = sari_ngram(&inst.source, &inst.output, &inst.references, n);
        total.keep += s.keep;
        total.delete += s.delete;
        total.add += s.add;
    }
    let k = MAX_ORDER as f64;
    SariScore {
        keep: total.keep / k,
        delete: total.delete / k,
        add: total.add / k,
    }
}

/// Mean over instances of sentence-level SARI components.
pub fn sari_corpus(instances: &[EvalInstance]) -> Result<SariScore> {
    check_nonempty(instances)?;
    let mut total = SariScore::default();
    for inst in instances {
        let s = sari_sentence(inst);
        total.keep += s.keep;
        total.delete += s.delete;
        total.add += s.add;
    }
    let k = instances.len() as f64;
    Ok(SariScore {
        keep: total.keep / k,
        delete: total.delete / k,
        add: total.add / k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: f64,
    pub sari: f64,
    pub components: SariScore,
    pub instances: usize,
}

pub fn evaluate(instances: &[EvalInstance]) -> Result<MetricReport> {
    let components = sari_corpus(instances)?;
    Ok(MetricReport {
        bleu: bleu_corpus(instances)?,
        sari: components.sari(),
        components,
        instances: instances.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        normalize(s)
    }

    #[test]
    fn profile_examples() {
        let ab = toks("a b");
        let p = ngram_profile(&ab, 2);
        assert_eq!(p.len(), 1);
        assert_eq!(p[&ab[..]], 2 - 1);
        let aaa = toks("a a a");
        assert_eq!(ngram_profile(&aaa, 1)[&aaa[..1]], 3);
        assert!(ngram_profile(&ab, 3).is_empty());
    }

    #[test]
    fn bleu_perfect_and_clipped() {
        let inst =
            EvalInstance::from_text("x", "The cat sat on the mat", &["the cat sat on the mat"])
                .unwrap();
        assert!((bleu_corpus(&[inst]).unwrap() - 100.0).abs() < 1e-9);

        let inst = EvalInstance::from_text(
            "",
            "the the the the the the the",
            &["the cat is on the mat", "there is a cat on the mat"],
        )
        .unwrap();
        let stats = BleuStats::collect(std::slice::from_ref(&inst));
        assert!((stats.precision(1) - 2.0 / 7.0).abs() < 1e-12);
        // no bigram matches, so unsmoothed BLEU is 0
        assert_eq!(bleu_corpus(&[inst]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity_uses_closest_shorter_on_tie() {
        // candidate 4, references 3 and 5: tie, shorter (3) wins, BP = 1
        let inst = EvalInstance::from_text("", "a b c d", &["a b c", "a b c d e"]).unwrap();
        let s = BleuStats::collect(&[inst]);
        assert_eq!(s.reference_len, 3);
        assert_eq!(s.brevity_penalty(), 1.0);
        let short = EvalInstance::from_text("", "a b c d", &["a b c d e f g h"]).unwrap();
        let s = BleuStats::collect(&[short]);
        assert!((s.brevity_penalty() - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(bleu_corpus(&[]), Err(Error::Usage(_))));
        assert!(matches!(sari_corpus(&[]), Err(Error::Usage(_))));
        assert!(EvalInstance::new(vec![], vec![], vec![]).is_err());
        let empty_out = EvalInstance::from_text("a b", "", &["a"]).unwrap();
        assert_eq!(bleu_corpus(std::slice::from_ref(&empty_out)).unwrap(), 0.0);
        let s = sari_corpus(&[empty_out]).unwrap();
        assert!((0.0..=100.0).contains(&s.sari()));
    }

    #[test]
    fn sari_identity_keeps_everything() {
        let inst = EvalInstance::from_text("a b c d", "a b c d", &["a b c d"]).unwrap();
        let s = sari_sentence(&inst);
        assert!((s.keep - 1.0).abs() < 1e-12);
        assert_eq!(s.delete, 0.0);
        assert_eq!(s.add, 0.0);
    }

    #[test]
    fn sari_copy_when_reference_deletes() {
        let inst = EvalInstance::from_text("a b c d", "a b c d", &["a b d"]).unwrap();
        let s = sari_sentence(&inst);
        // nothing deleted, so the delete component is 0
        assert_eq!(s.delete, 0.0);
        assert!(s.keep > 0.0 && s.keep < 1.0);
    }

    #[test]
    fn sari_one_add_one_delete_unigrams() {
        // source "a b c d", output "a b c e", reference "a b c e"
        let src = toks("a b c d");
        let out = toks("a b c e");
        let refs = vec![toks("a b c e")];
        let s = sari_ngram(&src, &out, &refs, 1);
        // kept {a,b,c}, all correct; reference keeps the same three
        assert!((s.keep - 1.0).abs() < 1e-12);
        // deleted {d}, reference also drops it
        assert!((s.delete - 1.0).abs() < 1e-12);
        // added {e}, reference adds exactly {e}
        assert!((s.add - 1.0).abs() < 1e-12);
        // bigrams: kept {ab, bc}, deleted {cd}, added {ce}: all agree
        let s2 = sari_ngram(&src, &out, &refs, 2);
        assert_eq!((s2.keep, s2.delete, s2.add), (1.0, 1.0, 1.0));
    }

    #[test]
    fn duplicate_references_leave_scores_unchanged() {
        let one = EvalInstance::from_text("a b c d e", "a c d f", &["a c e f"]).unwrap();
        let two = EvalInstance::from_text("a b c d e", "a c d f", &["a c e f", "a c e f"]).unwrap();
        let (r1, r2) = (evaluate(&[one]).unwrap(), evaluate(&[two]).unwrap());
        assert!((r1.bleu - r2.bleu).abs() < 1e-12);
        assert!((r1.sari - r2.sari).abs() < 1e-12);
    }

    #[test]
    fn smoothing_rescues_missing_orders() {
        let inst = EvalInstance::from_text("", "a b x c", &["a b y c"]).unwrap();
        assert_eq!(bleu_corpus(std::slice::from_ref(&inst)).unwrap(), 0.0);
        assert!(bleu_corpus_with(&[inst], true).unwrap() > 0.0);
    }
}
