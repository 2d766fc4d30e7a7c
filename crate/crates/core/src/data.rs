//! Byte-level corpora, perplexity, and per-channel activation statistics.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{RunOptions, ToyTransformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// A token sequence with byte ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub split: Split,
    pub tokens: Vec<usize>,
}

impl Corpus {
    pub fn from_bytes(name: &str, split: Split, bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Data(format!("corpus {name} is empty")));
        }
        Ok(Self { name: name.to_string(), split, tokens: bytes.iter().map(|&b| usize::from(b)).collect() })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Leading fraction of the corpus (at least two tokens).
    pub fn prefix_fraction(&self, fraction: f64) -> Corpus {
        let n = ((self.tokens.len() as f64 * fraction).round() as usize).clamp(2.min(self.len()), self.len());
        Corpus { name: self.name.clone(), split: self.split, tokens: self.tokens[..n].to_vec() }
    }

    /// Non-overlapping windows of `len + 1` tokens (input plus shifted target),
    /// consecutive windows sharing one boundary token.
    pub fn windows(&self, len: usize) -> Vec<&[usize]> {
        let mut out = Vec::new();
        let mut s = 0;
        while s + 1 < self.tokens.len() {
            let end = (s + len + 1).min(self.tokens.len());
            out.push(&self.tokens[s..end]);
            s += len;
        }
        out
    }
}

/// Reads a file as raw bytes; every byte is one token.
pub fn load_corpus(path: &Path, name: &str, split: Split) -> Result<Corpus> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Corpus::from_bytes(name, split, &bytes)
}

/// Train/valid/test splits of one corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

impl CorpusSplits {
    pub fn name(&self) -> &str {
        &self.train.name
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SyntheticSizes {
    fn default() -> Self {
        Self { train: 100_000, valid: 8_000, test: 16_384 }
    }
}

/// Order-2 Markov chain over a byte alphabet.
struct MarkovSource {
    alphabet: Vec<u8>,
    /// For each context `(a, b)` (indices into `alphabet`), cumulative weights over successors.
    table: Vec<Vec<(usize, f64)>>,
}

impl MarkovSource {
    fn random(alphabet: &[u8], successors: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = alphabet.len();
        let mut table = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            let mut picks: Vec<usize> = Vec::with_capacity(successors);
            while picks.len() < successors {
                let c = rng.random_range(0..n);
                if !picks.contains(&c) {
                    picks.push(c);
                }
            }
            // skewed weights: exponential draws squared
            let weights: Vec<f64> = picks.iter().map(|_| -rng.random::<f64>().max(1e-12).ln()).map(|w| w * w).collect();
            let z: f64 = weights.iter().sum();
            let mut acc = 0.0;
            table.push(
                picks
                    .into_iter()
                    .zip(weights)
                    .map(|(c, w)| {
                        acc += w / z;
                        (c, acc)
                    })
                    .collect(),
            );
        }
        Self { alphabet: alphabet.to_vec(), table }
    }

    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let n = self.alphabet.len();
        let (mut a, mut b) = (rng.random_range(0..n), rng.random_range(0..n));
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = rng.random();
            let row = &self.table[a * n + b];
            let c = row.iter().find(|(_, cum)| u < *cum).map_or(row[row.len() - 1].0, |(c, _)| *c);
            out.push(self.alphabet[c]);
            a = b;
            b = c;
        }
        out
    }
}

/// Total-variation distance between the unigram distributions of two corpora.
pub fn unigram_tv_distance(a: &[usize], b: &[usize]) -> f64 {
    let hist = |t: &[usize]| {
        let mut h = [0.0f64; 256];
        for &x in t {
            h[x] += 1.0;
        }
        let n = t.len() as f64;
        h.map(|c| c / n)
    };
    let (ha, hb) = (hist(a), hist(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Two corpora from distinct order-2 Markov chains over partially overlapping
/// alphabets. Regenerates (with a derived seed) until the unigram
/// total-variation distance exceeds 0.2.
pub fn make_synthetic_corpora(seed: u64, sizes: SyntheticSizes) -> (CorpusSplits, CorpusSplits) {
    let alpha_a: Vec<u8> = (b'a'..=b'p').chain(*b" .").collect();
    let alpha_b: Vec<u8> = (b'i'..=b'x').chain(*b" ,").collect();
    let mut attempt = 0u64;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let src_a = MarkovSource::random(&alpha_a, 4, &mut rng);
        let src_b = MarkovSource::random(&alpha_b, 4, &mut rng);
        let mut make = |name: &str, src: &MarkovSource| {
            let mut split = |s: Split, n: usize| {
                Corpus::from_bytes(name, s, &src.sample(n, &mut rng)).expect("nonempty")
            };
            CorpusSplits {
                train: split(Split::Train, sizes.train),
                valid: split(Split::Valid, sizes.valid),
                test: split(Split::Test, sizes.test),
            }
        };
        let a = make("A", &src_a);
        let b = make("B", &src_b);
        if unigram_tv_distance(&a.train.tokens, &b.train.tokens) > 0.2 {
            return (a, b);
        }
        attempt += 1;
    }
}

/// Sum of per-block negative log-likelihoods and token count.
fn block_nll(model: &ToyTransformer, window: &[usize], opts: RunOptions<'_>) -> Result<(f64, usize)> {
    let (input, target) = (&window[..window.len() - 1], &window[1..]);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &[input], opts)?;
    let loss = g.softmax_cross_entropy(out.logits, target)?;
    Ok((g.value(loss).data()[0] * target.len() as f64, target.len()))
}

/// `exp(mean next-token NLL)` over non-overlapping blocks of `eval_block`
/// predictions, one block per forward.
pub fn perplexity(model: &ToyTransformer, corpus: &Corpus, eval_block: usize, opts: RunOptions<'_>) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::Data(format!("corpus {} needs at least two tokens", corpus.name)));
    }
    let eval_block = eval_block.min(model.config.t_max);
    let mut parts = corpus
        .windows(eval_block)
        .into_iter()
        .map(|w| block_nll(model, w, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(perplexity_from_parts(&mut parts))
}

/// Combines per-block `(nll_sum, count)` pairs independently of their order.
pub fn perplexity_from_parts(parts: &mut [(f64, usize)]) -> f64 {
    parts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nll: f64 = parts.iter().map(|p| p.0).sum();
    let n: usize = parts.iter().map(|p| p.1).sum();
    (nll / n as f64).exp()
}

/// Per-channel min/max of one activation site.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub site: String,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub total_min: f64,
    pub total_max: f64,
}

impl ChannelStats {
    fn new(site: &str, d: usize) -> Self {
        Self {
            site: site.to_string(),
            min: vec![f64::INFINITY; d],
            max: vec![f64::NEG_INFINITY; d],
            total_min: f64::INFINITY,
            total_max: f64::NEG_INFINITY,
        }
    }

    fn absorb(&mut self, rows: &crate::tensor::Tensor) {
        let d = self.min.len();
        for r in 0..rows.rows() {
            for (c, &v) in rows.row(r).iter().enumerate().take(d) {
                self.min[c] = self.min[c].min(v);
                self.max[c] = self.max[c].max(v);
            }
        }
        self.total_min = self.min.iter().copied().fold(f64::INFINITY, f64::min);
        self.total_max = self.max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }

    /// `(total max − total min) / median per-channel range`.
    pub fn range_ratio(&self) -> f64 {
        let mut ranges: Vec<f64> = self.min.iter().zip(&self.max).map(|(lo, hi)| hi - lo).collect();
        ranges.sort_by(f64::total_cmp);
        let n = ranges.len();
        let median = if n % 2 == 1 { ranges[n / 2] } else { 0.5 * (ranges[n / 2 - 1] + ranges[n / 2]) };
        (self.total_max - self.total_min) / median
    }

    /// Max per-channel range over median per-channel range.
    pub fn channel_range_spread(&self) -> f64 {
        let mut ranges: Vec<f64> = self.min.iter().zip(&self.max).map(|(lo, hi)| hi - lo).collect();
        ranges.sort_by(f64::total_cmp);
        let n = ranges.len();
        let median = if n % 2 == 1 { ranges[n / 2] } else { 0.5 * (ranges[n / 2 - 1] + ranges[n / 2]) };
        ranges[n - 1] / median
    }

    /// CSV with columns `channel,min,max`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["channel", "min", "max"])?;
        for (c, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            wr.write_record([c.to_string(), fmt_f64(*lo), fmt_f64(*hi)])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(site: &str, r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut stats = Self::new(site, 0);
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Data("short CSV row".into()))?
                    .parse()
                    .map_err(|e| Error::Data(format!("bad number: {e}")))
            };
            stats.min.push(parse(1)?);
            stats.max.push(parse(2)?);
        }
        stats.total_min = stats.min.iter().copied().fold(f64::INFINITY, f64::min);
        stats.total_max = stats.max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(stats)
    }
}

/// Formats with 17 significant digits, which round-trips every `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Exact per-channel min/max of the pre-quantization activation at `site`
/// over the given sequences, one sequence per forward.
pub fn channel_stats_for_sequences(
    model: &ToyTransformer,
    sequences: &[&[usize]],
    site: &str,
    opts: RunOptions<'_>,
) -> Result<ChannelStats> {
    let mut stats: Option<ChannelStats> = None;
    for seq in sequences {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &[seq], opts)?;
        let nodes = out
            .captures
            .get(site)
            .ok_or_else(|| Error::Index(format!("no activation site named {site}")))?;
        for &n in nodes {
            let v = g.value(n);
            stats.get_or_insert_with(|| ChannelStats::new(site, v.cols())).absorb(v);
        }
    }
    stats.ok_or_else(|| Error::Data("no sequences for channel statistics".into()))
}

/// Channel statistics over the non-overlapping input windows of a corpus.
pub fn channel_stats(
    model: &ToyTransformer,
    corpus: &Corpus,
    site: &str,
    opts: RunOptions<'_>,
) -> Result<ChannelStats> {
    let windows = corpus.windows(model.config.t_max);
    let inputs: Vec<&[usize]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
    channel_stats_for_sequences(model, &inputs, site, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_tokens() {
        let c = Corpus::from_bytes("t", Split::Train, b"ab").unwrap();
        assert_eq!(c.tokens, vec![97, 98]);
        assert!(Corpus::from_bytes("t", Split::Train, b"").is_err());
    }

    #[test]
    fn windows_cover_every_prediction_once() {
        let c = Corpus::from_bytes("t", Split::Test, b"abcdefg").unwrap();
        let w = c.windows(3);
        assert_eq!(w.len(), 2);
        let predicted: usize = w.iter().map(|w| w.len() - 1).sum();
        assert_eq!(predicted, 6);
    }

    #[test]
    fn synthetic_is_seeded_and_distinct() {
        let sizes = SyntheticSizes { train: 5_000, valid: 500, test: 500 };
        let (a1, b1) = make_synthetic_corpora(7, sizes);
        let (a2, b2) = make_synthetic_corpora(7, sizes);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert!(unigram_tv_distance(&a1.train.tokens, &b1.train.tokens) > 0.2);
        let (a3, _) = make_synthetic_corpora(8, sizes);
        assert_ne!(a1.train.tokens, a3.train.tokens);
    }

    #[test]
    fn csv_round_trip() {
        let stats = ChannelStats {
            site: "s".into(),
            min: vec![-0.1, 1.0 / 3.0, -1e-300],
            max: vec![0.2, 2.0f64.sqrt(), 7.5e12],
            total_min: -0.1,
            total_max: 7.5e12,
        };
        let mut buf = Vec::new();
        stats.write_csv(&mut buf).unwrap();
        let back = ChannelStats::read_csv("s", buf.as_slice()).unwrap();
        assert_eq!(back, stats);
    }

    #[test]
    fn order_free_perplexity() {
        let mut a = vec![(1.5, 3), (0.25, 2), (9.0, 4)];
        let mut b = vec![(9.0, 4), (1.5, 3), (0.25, 2)];
        assert_eq!(perplexity_from_parts(&mut a).to_bits(), perplexity_from_parts(&mut b).to_bits());
    }
}
