//! Parallel corpus ingestion, vocabularies, pretrained vectors and batching.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Default training-time sentence length filter.
pub const DEFAULT_MAX_TRAIN_LEN: usize = 100;

/// Splits pre-tokenised text on ASCII whitespace.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_ascii_whitespace().map(str::to_string).collect()
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads tokenized reference files, each parallel to a source file of
/// `expected` lines, and regroups them per instance.
pub fn load_references<P: AsRef<Path>>(
    paths: &[P],
    expected: usize,
) -> Result<Vec<Vec<Vec<String>>>> {
    if paths.is_empty() {
        return Err(Error::Usage(
            "at least one reference file is required".into(),
        ));
    }
    let mut refs = vec![Vec::with_capacity(paths.len()); expected];
    for path in paths {
        let path = path.as_ref();
        let lines = read_lines(path)?;
        if lines.len() != expected {
            return Err(Error::Alignment(format!(
                "{} has {} lines, expected {expected}",
                path.display(),
                lines.len()
            )));
        }
        for (slot, line) in refs.iter_mut().zip(&lines) {
            slot.push(tokenize(line));
        }
    }
    Ok(refs)
}

/// Token/id bijection with ids 0..4 reserved for PAD, UNK, BOS, EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `cap - 4` most frequent tokens; equal counts are ordered
    /// lexicographically. The cap includes the reserved entries.
    pub fn build<'a, I>(sentences: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if cap <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary cap {cap} must exceed {}",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sent in sentences {
            for tok in sent {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Id of `token`, or `UNK` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(read_lines(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub pairs: usize,
    pub src_tokens: usize,
    pub tgt_tokens: usize,
    pub src_types: usize,
    pub tgt_types: usize,
    pub src_avg_len: f64,
    pub tgt_avg_len: f64,
}

/// Published training-set statistics used as an ingestion sanity reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceStats {
    pub name: &'static str,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub src_avg_len: f64,
    pub tgt_avg_len: f64,
}

pub const REFERENCE_STATS: [ReferenceStats; 3] = [
    ReferenceStats {
        name: "newsela",
        src_vocab: 41_066,
        tgt_vocab: 30_193,
        src_avg_len: 25.94,
        tgt_avg_len: 15.89,
    },
    ReferenceStats {
        name: "wikismall",
        src_vocab: 113_368,
        tgt_vocab: 93_835,
        src_avg_len: 24.26,
        tgt_avg_len: 20.33,
    },
    ReferenceStats {
        name: "wikilarge",
        src_vocab: 201_841,
        tgt_vocab: 168_962,
        src_avg_len: 25.17,
        tgt_avg_len: 18.51,
    },
];

pub fn reference_stats(name: &str) -> Option<&'static ReferenceStats> {
    REFERENCE_STATS.iter().find(|r| r.name == name)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    /// Pairs discarded at load time because one side was empty.
    pub dropped_empty: usize,
}

impl ParallelCorpus {
    pub fn from_pairs(pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus {
            pairs,
            dropped_empty: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.source.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.target.as_slice())
    }

    /// Drops pairs with either side longer than `max_len`; returns how many.
    pub fn filter_length(&mut self, max_len: usize) -> usize {
        let before = self.pairs.len();
        self.pairs
            .retain(|p| p.source.len() <= max_len && p.target.len() <= max_len);
        let removed = before - self.pairs.len();
        if removed > 0 {
            log::info!("length filter ({max_len} tokens) removed {removed} pairs");
        }
        removed
    }

    pub fn stats(&self) -> CorpusStats {
        let mut src_types = std::collections::HashSet::new();
        let mut tgt_types = std::collections::HashSet::new();
        let mut stats = CorpusStats {
            pairs: self.pairs.len(),
            ..Default::default()
        };
        for p in &self.pairs {
            stats.src_tokens += p.source.len();
            stats.tgt_tokens += p.target.len();
            src_types.extend(p.source.iter().map(String::as_str));
            tgt_types.extend(p.target.iter().map(String::as_str));
        }
        stats.src_types = src_types.len();
        stats.tgt_types = tgt_types.len();
        if stats.pairs > 0 {
            stats.src_avg_len = stats.src_tokens as f64 / stats.pairs as f64;
            stats.tgt_avg_len = stats.tgt_tokens as f64 / stats.pairs as f64;
        }
        stats
    }
}

/// Reads two line-aligned files of pre-tokenised sentences.
pub fn load_parallel(src: &Path, tgt: &Path) -> Result<ParallelCorpus> {
    let src_lines = read_lines(src)?;
    let tgt_lines = read_lines(tgt)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Alignment(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            src_lines.len(),
            tgt.display(),
            tgt_lines.len()
        )));
    }
    let mut corpus = ParallelCorpus::default();
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let pair = SentencePair {
            source: tokenize(s),
            target: tokenize(t),
        };
        if pair.source.is_empty() || pair.target.is_empty() {
            corpus.dropped_empty += 1;
        } else {
            corpus.pairs.push(pair);
        }
    }
    if corpus.dropped_empty > 0 {
        log::warn!(
            "dropped {} pairs with an empty side from {}",
            corpus.dropped_empty,
            src.display()
        );
    }
    Ok(corpus)
}

/// Overwrites rows of `table` (`[V x dim]`) with vectors found in a
/// `token v1 .. v_dim` text file. Returns the fraction of non-reserved
/// vocabulary entries that were found.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    table: &mut Tensor,
) -> Result<f64> {
    let dim = table.cols();
    if table.rows() != vocab.len() {
        return Err(Error::dim(
            "load_pretrained_embeddings",
            format!("table has {} rows for {} tokens", table.rows(), vocab.len()),
        ));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hits = 0usize;
    let mut seen = vec![false; vocab.len()];
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_ascii_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        let location = format!("{}:{}", path.display(), n + 1);
        if values.len() != dim {
            return Err(Error::Format {
                location,
                detail: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let Some(&id) = vocab.index.get(token) else {
            continue;
        };
        if id < RESERVED.len() {
            continue;
        }
        let mut row = Vec::with_capacity(dim);
        for v in values {
            let x: f64 = v.parse().map_err(|_| Error::Format {
                location: location.clone(),
                detail: format!("bad number {v:?}"),
            })?;
            row.push(x);
        }
        table.data[id * dim..(id + 1) * dim].copy_from_slice(&row);
        if !seen[id] {
            seen[id] = true;
            hits += 1;
        }
    }
    let candidates = vocab.len() - RESERVED.len();
    Ok(if candidates == 0 {
        0.0
    } else {
        hits as f64 / candidates as f64
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BatchOrder {
    #[default]
    Shuffle,
    /// Sort by source length, cut into batches, shuffle the batch order.
    Bucketed,
}

/// Padded id matrices for one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Corpus indices of the rows.
    pub indices: Vec<usize>,
    pub source: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<bool>>,
    /// `BOS y1 .. yT EOS`, padded.
    pub target: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Row `i` without padding: source ids and target content ids (no
    /// BOS/EOS).
    pub fn example(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let src = self.source[i]
            .iter()
            .zip(&self.source_mask[i])
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        let tgt: Vec<usize> = self.target[i]
            .iter()
            .zip(&self.target_mask[i])
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        (src, tgt[1..tgt.len() - 1].to_vec())
    }

    /// Real (non-pad) target positions the loss is taken over, i.e. the
    /// target tokens plus EOS for every row.
    pub fn predicted_tokens(&self) -> usize {
        self.target_mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count() - 1)
            .sum()
    }
}

fn pad(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows
        .iter()
        .map(|r| (0..width).map(|i| i < r.len()).collect())
        .collect();
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (padded, masks)
}

/// Splits the corpus into padded minibatches. Without an rng the corpus
/// order is kept.
pub fn batches<R: Rng + ?Sized>(
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    batch_size: usize,
    order: BatchOrder,
    rng: Option<&mut R>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut groups: Vec<Vec<usize>> = match (order, rng) {
        (BatchOrder::Shuffle, Some(rng)) => {
            idx.shuffle(rng);
            idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
        (BatchOrder::Bucketed, Some(rng)) => {
            idx.shuffle(rng);
            idx.sort_by_key(|&i| corpus.pairs[i].source.len());
            let mut g: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
            g.shuffle(rng);
            g
        }
        (_, None) => idx.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    };
    Ok(groups
        .drain(..)
        .map(|indices| {
            let src = indices
                .iter()
                .map(|&i| src_vocab.encode(&corpus.pairs[i].source))
                .collect();
            let tgt = indices
                .iter()
                .map(|&i| {
                    let mut ids = Vec::with_capacity(corpus.pairs[i].target.len() + 2);
                    ids.push(BOS);
                    ids.extend(tgt_vocab.encode(&corpus.pairs[i].target));
                    ids.push(EOS);
                    ids
                })
                .collect();
            let (source, source_mask) = pad(src);
            let (target, target_mask) = pad(tgt);
            Batch {
                indices,
                source,
                source_mask,
                target,
                target_mask,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn sents(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        p
    }

    fn toy_corpus(n: usize) -> ParallelCorpus {
        ParallelCorpus::from_pairs(
            (0..n)
                .map(|i| SentencePair {
                    source: tokenize(
                        &"a b c d e f"
                            .split(' ')
                            .take(1 + i % 6)
                            .collect::<Vec<_>>()
                            .join(" "),
                    ),
                    target: tokenize(
                        &"a b c"
                            .split(' ')
                            .take(1 + i % 3)
                            .collect::<Vec<_>>()
                            .join(" "),
                    ),
                })
                .collect(),
        )
    }

    #[test]
    fn vocab_keeps_all_under_cap() {
        let s = sents(&["a a b"]);
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 5).unwrap();
        assert!(v.contains("a") && !v.contains("b"));
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 6).unwrap();
        assert!(v.contains("a") && v.contains("b"));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn vocab_cap_counts_reserved_and_breaks_ties_lexicographically() {
        let s = sents(&["a a b c"]);
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 5).unwrap();
        assert_eq!(v.tokens()[4], "a");
        assert_eq!(v.len(), 5);
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 6).unwrap();
        assert_eq!(&v.tokens()[4..], &["a".to_string(), "b".to_string()]);
        assert!(matches!(
            Vocabulary::build(s.iter().map(Vec::as_slice), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vocab_encode_decode() {
        let s = sents(&["x y z"]);
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 10).unwrap();
        assert_eq!(v.id("unseen"), UNK);
        let ids = v.encode(&["x", "q", "z"]);
        assert_eq!(v.decode(&ids), vec!["x", "<unk>", "z"]);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = sents(&["b a c a"]);
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 10).unwrap();
        let p = dir.path().join("v.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn load_parallel_counts_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s", "a b\nc d e\nf\n");
        let t = write(dir.path(), "t", "a\nc\nf g\n");
        let c = load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 3);
        let stats = c.stats();
        assert_eq!(stats.src_tokens, 6);
        assert!((stats.src_avg_len - 2.0).abs() < 1e-12);
        let bad = write(dir.path(), "bad", "x\n");
        assert!(matches!(load_parallel(&s, &bad), Err(Error::Alignment(_))));
        assert!(matches!(
            load_parallel(&dir.path().join("missing"), &t),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_parallel_drops_empty_sides() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s", "a b\n\nc\n");
        let t = write(dir.path(), "t", "a\nb\n   \n");
        let c = load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.dropped_empty, 2);
    }

    #[test]
    fn reference_statistics_table() {
        let n = reference_stats("newsela").unwrap();
        assert_eq!((n.src_avg_len, n.tgt_avg_len), (25.94, 15.89));
        assert_eq!(reference_stats("wikilarge").unwrap().src_vocab, 201_841);
    }

    #[test]
    fn pretrained_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let s = sents(&["cat dog"]);
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 10).unwrap();
        let mut table = Tensor::zeros(&[v.len(), 3]);
        let empty = write(dir.path(), "e", "");
        assert_eq!(
            load_pretrained_embeddings(&empty, &v, &mut table).unwrap(),
            0.0
        );
        assert!(table.data.iter().all(|&x| x == 0.0));

        let one = write(dir.path(), "one", "zebra 1 1 1\ncat 0.5 0.25 -1\n");
        let rate = load_pretrained_embeddings(&one, &v, &mut table).unwrap();
        assert_eq!(rate, 0.5);
        let cat = v.id("cat");
        assert_eq!(table.row(cat), &[0.5, 0.25, -1.0]);
        let changed = (0..v.len())
            .filter(|&r| table.row(r).iter().any(|&x| x != 0.0))
            .count();
        assert_eq!(changed, 1);

        let lines: String =
            (1..=6).map(|i| format!("w{i} 1 2 3\n")).collect::<String>() + "dog 1 2\n";
        let bad = write(dir.path(), "bad", &lines);
        match load_pretrained_embeddings(&bad, &v, &mut table) {
            Err(Error::Format { location, .. }) => assert!(location.ends_with(":7"), "{location}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batches_pad_and_mask() {
        let corpus = toy_corpus(10);
        let src = Vocabulary::build(corpus.sources(), 20).unwrap();
        let tgt = Vocabulary::build(corpus.targets(), 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batches(&corpus, &src, &tgt, 32, BatchOrder::Shuffle, Some(&mut rng)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 10);
        let stats = corpus.stats();
        let src_mask: usize = b[0].source_mask.iter().flatten().filter(|&&m| m).count();
        let tgt_mask: usize = b[0].target_mask.iter().flatten().filter(|&&m| m).count();
        assert_eq!(src_mask, stats.src_tokens);
        assert_eq!(tgt_mask, stats.tgt_tokens + 2 * 10);
        assert_eq!(b[0].predicted_tokens(), stats.tgt_tokens + 10);
        for i in 0..b[0].len() {
            let (s, t) = b[0].example(i);
            let pair = &corpus.pairs[b[0].indices[i]];
            assert_eq!(src.decode(&s), pair.source);
            assert_eq!(tgt.decode(&t), pair.target);
            assert_eq!(b[0].target[i][0], BOS);
        }
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let corpus = toy_corpus(70);
        let v = Vocabulary::build(corpus.sources(), 20).unwrap();
        for order in [BatchOrder::Shuffle, BatchOrder::Bucketed] {
            let run = |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                batches(&corpus, &v, &v, 8, order, Some(&mut rng)).unwrap()
            };
            assert_eq!(run(5), run(5));
            assert_ne!(run(5), run(6));
            let all: usize = run(5).iter().map(Batch::len).sum();
            assert_eq!(all, 70);
        }
        assert!(batches::<ChaCha8Rng>(&corpus, &v, &v, 0, BatchOrder::Shuffle, None).is_err());
    }

    #[test]
    fn length_filter() {
        let mut c = toy_corpus(12);
        assert_eq!(c.filter_length(3), 6);
        assert!(c.pairs.iter().all(|p| p.source.len() <= 3));
    }

    #[test]
    fn references_group_per_instance() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, c) = (
            dir.path().join("a"),
            dir.path().join("b"),
            dir.path().join("c"),
        );
        fs::write(
            &a, "x y
z
",
        )
        .unwrap();
        fs::write(
            &b, "x
z z
",
        )
        .unwrap();
        fs::write(
            &c,
            "only one
",
        )
        .unwrap();
        let refs = load_references(&[&a, &b], 2).unwrap();
        assert_eq!(refs[0], vec![tokenize("x y"), tokenize("x")]);
        assert_eq!(refs[1], vec![tokenize("z"), tokenize("z z")]);
        assert!(matches!(
            load_references(&[&a, &c], 2),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            load_references::<&Path>(&[], 2),
            Err(Error::Usage(_))
        ));
    }
}
