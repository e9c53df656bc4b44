//! Dataset file formats.
//!
//! - JSONL datasets ("mexp-ds-1"): one `{"a":..,"b":..,"c":..,"d":..}` object
//!   per line, with a JSON sidecar `<path>.meta.json` recording the sampler
//!   spec and count.
//! - Pre-tokenized datasets ("mexp-tok-1"): a JSON header line followed by
//!   fixed-width rows of little-endian 16-bit token ids, pad-aligned.

use crate::codec::{self, TokenSeq, Vocabulary};
use crate::numtheory::modpow;
use crate::sampler::{generate_dataset, DatasetMeta, GenerationStats, ModExpInstance, SamplerSpec};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub fn meta_path(dataset: &Path) -> PathBuf {
    let mut os = dataset.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

/// Generate a dataset to `path` (JSONL) plus its metadata sidecar.
pub fn write_dataset(path: &Path, spec: &SamplerSpec, count: u64) -> Result<GenerationStats> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink = BufWriter::new(file);
    let stats = generate_dataset(spec, count, &mut sink)?;
    sink.flush().map_err(|e| Error::io(path, e))?;
    let meta = DatasetMeta {
        format: crate::sampler::DATASET_FORMAT_VERSION.into(),
        spec: spec.clone(),
        count,
        stats: stats.clone(),
    };
    let mp = meta_path(path);
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format { what: "dataset metadata", detail: e.to_string() })?;
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    Ok(stats)
}

/// Parse one JSONL dataset line.
pub fn parse_dataset_line(line: &str) -> Result<ModExpInstance> {
    serde_json::from_str(line).map_err(|e| Error::Format {
        what: "dataset line",
        detail: e.to_string(),
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<ModExpInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_dataset_line(&line).map_err(|e| Error::Format {
            what: "dataset line",
            detail: format!("{}:{}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(out)
}

/// Check the defining invariants on every instance: d = a^b mod c and
/// 0 <= d < c; optionally also the uniform-outcomes constraint c > d
/// (implied by d < c, kept as an explicit flag for clarity at call sites).
pub fn validate_instances(data: &[ModExpInstance]) -> Result<()> {
    for (i, inst) in data.iter().enumerate() {
        if inst.c == 0 {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("row {i}: modulus 0"),
            });
        }
        if inst.d >= inst.c {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("row {i}: d = {} out of range for c = {}", inst.d, inst.c),
            });
        }
        let want = modpow(inst.a, inst.b, inst.c)?;
        if inst.d != want {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("row {i}: d = {} but a^b mod c = {want}", inst.d),
            });
        }
    }
    Ok(())
}

pub const TOKENIZED_FORMAT_VERSION: &str = "mexp-tok-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedHeader {
    pub format: String,
    pub base: u64,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub rows: u64,
}

/// A tokenized dataset held in memory: fixed-width, pad-aligned id rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedDataset {
    pub header: TokenizedHeader,
    /// rows * max_src_len source ids, row-major.
    pub src: Vec<u16>,
    /// rows * max_tgt_len target ids, row-major.
    pub tgt: Vec<u16>,
}

/// Tokenize instances into fixed-width padded rows.
pub fn tokenize_dataset(
    data: &[ModExpInstance],
    vocab: &Vocabulary,
    max_src_len: usize,
    max_tgt_len: usize,
) -> Result<TokenizedDataset> {
    if vocab.size() > u16::MAX as usize + 1 {
        return Err(Error::Config("vocabulary too large for 16-bit token ids".into()));
    }
    let pad = vocab.pad_id() as u16;
    let mut src = Vec::with_capacity(data.len() * max_src_len);
    let mut tgt = Vec::with_capacity(data.len() * max_tgt_len);
    let push_row = |row: &TokenSeq, width: usize, out: &mut Vec<u16>| -> Result<()> {
        if row.ids.len() > width {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds row width {width}",
                row.ids.len()
            )));
        }
        out.extend(row.ids.iter().map(|&id| id as u16));
        out.extend(std::iter::repeat_n(pad, width - row.ids.len()));
        Ok(())
    };
    for inst in data {
        let (s, t) = codec::encode_instance(inst, vocab);
        push_row(&s, max_src_len, &mut src)?;
        push_row(&t, max_tgt_len, &mut tgt)?;
    }
    Ok(TokenizedDataset {
        header: TokenizedHeader {
            format: TOKENIZED_FORMAT_VERSION.into(),
            base: vocab.base(),
            max_src_len,
            max_tgt_len,
            rows: data.len() as u64,
        },
        src,
        tgt,
    })
}

pub fn write_tokenized(path: &Path, ds: &TokenizedDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(&ds.header)
        .map_err(|e| Error::Format { what: "tokenized header", detail: e.to_string() })?;
    let io_err = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    for row in [&ds.src, &ds.tgt] {
        for &id in row.iter() {
            w.write_all(&id.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Parse a tokenized dataset from raw bytes. Rejects version mismatches,
/// truncated payloads, and inconsistent sizes.
pub fn parse_tokenized(bytes: &[u8]) -> Result<TokenizedDataset> {
    let bad = |detail: String| Error::Format { what: "tokenized dataset", detail };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: TokenizedHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
    if header.format != TOKENIZED_FORMAT_VERSION {
        return Err(bad(format!("unsupported format '{}'", header.format)));
    }
    if header.base < 2 || header.max_src_len == 0 || header.max_tgt_len == 0 {
        return Err(bad("invalid header dimensions".into()));
    }
    let rows = header.rows as usize;
    let n_src = rows
        .checked_mul(header.max_src_len)
        .ok_or_else(|| bad("size overflow".into()))?;
    let n_tgt = rows
        .checked_mul(header.max_tgt_len)
        .ok_or_else(|| bad("size overflow".into()))?;
    let payload = &bytes[nl + 1..];
    let want = n_src
        .checked_add(n_tgt)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| bad("size overflow".into()))?;
    if payload.len() != want {
        return Err(bad(format!("payload is {} bytes, expected {want}", payload.len())));
    }
    let read_ids = |chunk: &[u8]| -> Vec<u16> {
        chunk
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect()
    };
    let max_id = (header.base + 3) as u16;
    let src = read_ids(&payload[..n_src * 2]);
    let tgt = read_ids(&payload[n_src * 2..]);
    if src.iter().chain(tgt.iter()).any(|&id| id > max_id) {
        return Err(bad("token id out of vocabulary range".into()));
    }
    Ok(TokenizedDataset { header, src, tgt })
}

pub fn read_tokenized(path: &Path) -> Result<TokenizedDataset> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_tokenized(&bytes)
}
