//! Small shared helpers: deterministic seed derivation, atomic file writes,
//! and exact-roundtrip float formatting for text artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Derive an independent RNG seed from a base seed and a stream tag.
///
/// SplitMix64 finalizer over the combined words. Stable across platforms, so
/// per-fold / per-resample / per-stay substreams are reproducible no matter
/// how work is scheduled.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a seed from a base seed and several stream tags.
pub fn derive_seed_n(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(base, |s, &t| derive_seed(s, t))
}

/// Write `bytes` to `path` atomically: a temp file in the same directory is
/// written, flushed, then renamed over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Stream a large artifact to `path` atomically through a buffered writer.
pub fn atomic_write_stream(
    path: &Path,
    body: impl FnOnce(&mut dyn Write) -> Result<()>,
) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut writer = std::io::BufWriter::new(&mut tmp);
        body(&mut writer)?;
        writer.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Hex SHA-256 of a string list, newline-joined (fold-assignment digests).
pub fn sha256_ids(ids: &[String]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.as_bytes());
        hasher.update(b"\n");
    }
    format!("{:x}", hasher.finalize())
}

/// Format an `f64` so that parsing the text reproduces the value bit-exactly.
/// Rust's shortest-roundtrip `Display` guarantees this for finite values.
pub fn fmt_f64(v: f64) -> String {
    debug_assert!(v.is_finite(), "non-finite value in text artifact");
    format!("{v}")
}

/// Escape tab, newline, carriage return and backslash for TSV fields.
pub fn escape_tsv(s: &str) -> String {
    if !s.contains(['\t', '\n', '\r', '\\']) {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len() + 4);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            other => out.push(other),
        }
    }
    out
}

/// Inverse of [`escape_tsv`].
pub fn unescape_tsv(s: &str) -> String {
    if !s.contains('\\') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Nearest-rank empirical quantile of an already sorted slice.
///
/// For quantile `q` in (0, 1] over `n` values this is the value at 1-based
/// rank `ceil(q * n)`. The tiny subtraction keeps exact products like
/// `0.025 * 10000` from ceiling one rank too high after float rounding.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let n = sorted.len();
    let rank = (q * n as f64 - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}
