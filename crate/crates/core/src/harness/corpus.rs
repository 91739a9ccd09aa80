//! Corpus generation and on-disk formats.
//!
//! A split `name` lives in `name.tsv` (one `id<TAB>tokens<TAB>durations` line
//! per utterance) plus `frames/<id>.f64`, a text header `rows cols` followed
//! by little-endian f64 values in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::domain::{DomainSpec, SyntheticUtterance};
use crate::error::{bail, Error, Result};
use crate::model::Vocabulary;
use crate::numcore::Matrix;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<SyntheticUtterance>,
    pub dev: Vec<SyntheticUtterance>,
    pub test: Vec<SyntheticUtterance>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[SyntheticUtterance]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a keeps streams stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Generator for utterance `index` of `split`; depends only on its arguments.
pub fn utterance_rng(domain: &str, seed: u64, split: &str, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(domain));
    rng.set_stream(name_hash(split).wrapping_add(index as u64));
    rng
}

pub fn utterance_id(domain: &str, split: &str, index: usize) -> String {
    format!("{domain}-{split}-{index:05}")
}

/// Regenerates a single utterance.
pub fn gen_utterance(spec: &DomainSpec, seed: u64, split: &str, index: usize) -> Result<SyntheticUtterance> {
    spec.sample(utterance_id(&spec.name, split, index), &mut utterance_rng(&spec.name, seed, split, index))
}

/// Generates `n` utterances of one split.
pub fn gen_split(spec: &DomainSpec, split: &str, n: usize, seed: u64) -> Result<Vec<SyntheticUtterance>> {
    spec.validate()?;
    (0..n).map(|i| gen_utterance(spec, seed, split, i)).collect()
}

/// Token sequences only; identical to the tokens of [`gen_split`] with the
/// same arguments.
pub fn gen_text(spec: &DomainSpec, split: &str, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    (0..n).map(|i| spec.sample_tokens(&mut utterance_rng(&spec.name, seed, split, i))).collect()
}

/// Generates train/dev/test splits; utterance ids carry the split name, so
/// splits never share an id.
pub fn gen_corpus(spec: &DomainSpec, sizes: CorpusSizes, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    if sizes.train == 0 || sizes.dev == 0 || sizes.test == 0 {
        bail!(Config, "every split needs at least one utterance");
    }
    Ok(Corpus {
        train: gen_split(spec, "train", sizes.train, seed)?,
        dev: gen_split(spec, "dev", sizes.dev, seed)?,
        test: gen_split(spec, "test", sizes.test, seed)?,
    })
}

/// Token sequences of a split, for text-only use.
pub fn texts(utts: &[SyntheticUtterance]) -> Vec<Vec<usize>> {
    utts.iter().map(|u| u.tokens.clone()).collect()
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = format!("{} {}\n", m.rows(), m.cols()).into_bytes();
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing shape header", path.display())))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|e| Error::Format(e.to_string()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Format(format!("{}: bad shape header {header:?}", path.display()))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else { bail!(Format, "{}: bad shape header {header:?}", path.display()) };
    let payload = &bytes[newline + 1..];
    if payload.len() != rows * cols * 8 {
        bail!(Format, "{}: expected {} payload bytes, found {}", path.display(), rows * cols * 8, payload.len());
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Matrix::from_vec(rows, cols, data)
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_split(dir: &Path, split: &str, utts: &[SyntheticUtterance], vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut manifest = Vec::new();
    for u in utts {
        if u.id.contains(['\t', '\n', '/']) {
            bail!(Invalid, "utterance id {:?} cannot be stored", u.id);
        }
        writeln!(manifest, "{}\t{}\t{}", u.id, vocab.format(&u.tokens), join(&u.durations))?;
        write_matrix(&dir.join("frames").join(format!("{}.f64", u.id)), &u.frames)?;
    }
    fs::write(dir.join(format!("{split}.tsv")), manifest)?;
    Ok(())
}

pub fn read_split(dir: &Path, split: &str, vocab: &Vocabulary) -> Result<Vec<SyntheticUtterance>> {
    let path = dir.join(format!("{split}.tsv"));
    let file = fs::File::open(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, tokens, durations] = fields[..] else {
            bail!(Format, "{}:{}: expected 3 tab-separated fields", path.display(), n + 1)
        };
        let tokens = vocab.parse_line(tokens)?;
        let durations: Vec<usize> = durations
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Format(format!("{}:{}: bad duration {s:?}", path.display(), n + 1))))
            .collect::<Result<_>>()?;
        let frames = read_matrix(&dir.join("frames").join(format!("{id}.f64")))?;
        if durations.len() != tokens.len() || durations.iter().sum::<usize>() != frames.rows() {
            bail!(Format, "{}:{}: durations disagree with tokens or frames", path.display(), n + 1);
        }
        out.push(SyntheticUtterance { id: id.to_string(), tokens, durations, frames });
    }
    Ok(out)
}

pub fn write_corpus(dir: &Path, corpus: &Corpus, vocab: &Vocabulary) -> Result<()> {
    for (name, utts) in corpus.splits() {
        write_split(dir, name, utts, vocab)?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path, vocab: &Vocabulary) -> Result<Corpus> {
    Ok(Corpus {
        train: read_split(dir, "train", vocab)?,
        dev: read_split(dir, "dev", vocab)?,
        test: read_split(dir, "test", vocab)?,
    })
}

/// Writes one utterance per line as token symbols.
pub fn write_text(path: &Path, text: &[Vec<usize>], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for s in text {
        out.push_str(&vocab.format(s));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads whitespace-separated token symbols or ids, one utterance per line.
/// Blank lines are skipped.
pub fn read_text(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| vocab.parse_line(l)).collect()
}
