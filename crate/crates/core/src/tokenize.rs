//! Percentile tokenization of heterogeneous event values.
//!
//! Every event value is classified as continuous (strict float grammar) or
//! discrete (anything else, verbatim). Continuous values are quantized into
//! per-label percentile bins fit on training data only; each event then
//! becomes a text token — `"<label>_<bin>"` for continuous readings,
//! `"<label> <value>"` for discrete ones — and tokens are mapped to indices
//! in one shared vocabulary. No unit normalization, outlier removal or other
//! domain knowledge is applied anywhere in this module: unusual readings
//! simply land in edge bins or become their own discrete tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::BucketedStay;
use crate::util::{escape_tsv, fmt_f64, unescape_tsv};

/// Reserved token text for a missing reading (empty value). Always index 0.
pub const MISSING_TOKEN: &str = "<missing>";
/// Reserved token text for anything unseen at fit time. Always index 1.
pub const UNKNOWN_TOKEN: &str = "<unk>";
/// Number of reserved vocabulary slots.
pub const RESERVED_TOKENS: u32 = 2;

/// A classified event value.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueClass<'a> {
    Continuous(f64),
    Discrete(&'a str),
}

/// Classify a raw value. Continuous iff the text matches a strict float
/// grammar: optional sign, digits with at most one decimal point, optional
/// exponent. No whitespace, thousands separators, or NaN/Inf words — readings
/// like `"7.4.1"` stay discrete, which keeps consistent recording faults
/// visible to the model as their own tokens. Total and pure.
pub fn classify_value(raw: &str) -> ValueClass<'_> {
    if is_strict_float(raw) {
        if let Ok(x) = raw.parse::<f64>() {
            // grammar admits literals that overflow to infinity; those are
            // unusable as numbers and stay discrete
            if x.is_finite() {
                return ValueClass::Continuous(x);
            }
        }
    }
    ValueClass::Discrete(raw)
}

fn is_strict_float(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let mut mantissa_digits = 0;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
        mantissa_digits += 1;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
            mantissa_digits += 1;
        }
    }
    if mantissa_digits == 0 {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let mut exp_digits = 0;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
            exp_digits += 1;
        }
        if exp_digits == 0 {
            return false;
        }
    }
    i == b.len()
}

/// Percentile cut points for one continuous label.
///
/// `boundaries` holds the `k/P` empirical quantiles for `k = 1..P-1` under
/// the nearest-rank rule (value at 1-based rank `ceil(k*n/P)` of the sorted
/// training values). A value equal to a boundary goes to the higher bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub label: String,
    pub boundaries: Vec<f64>,
    pub bins: usize,
}

impl BinSpec {
    /// Bin index in `0..bins` for a value: the count of boundaries `<= v`.
    pub fn bin_index(&self, v: f64) -> usize {
        // boundaries are sorted; partition_point gives the count <= v
        self.boundaries.partition_point(|b| *b <= v)
    }
}

/// Fit percentile bins for one label on its training values.
pub fn fit_bins(label: &str, values: &[f64], p: usize) -> Result<BinSpec> {
    if p < 2 {
        return Err(Error::config(format!(
            "bin count must be at least 2, got {p}"
        )));
    }
    if values.is_empty() {
        return Err(Error::data(format!("no training values for label '{label}'")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let boundaries = (1..p)
        .map(|k| {
            // 1-based nearest rank ceil(k*n/p), in integer arithmetic
            let rank = (k * n).div_ceil(p).max(1);
            sorted[rank - 1]
        })
        .collect();
    Ok(BinSpec {
        label: label.to_string(),
        boundaries,
        bins: p,
    })
}

/// All fitted bins plus the global bin count.
#[derive(Debug, Clone, PartialEq)]
pub struct BinTable {
    pub bins: usize,
    pub by_label: HashMap<String, BinSpec>,
}

impl BinTable {
    pub fn get(&self, label: &str) -> Option<&BinSpec> {
        self.by_label.get(label)
    }
}

/// Collect continuous values per label from training stays and fit bins for
/// each label. Consumes only what the iterator yields, so handing this the
/// training split is what enforces the leakage guarantee. Labels fit
/// independently, in parallel.
pub fn fit_bin_table<'a>(
    train_stays: impl IntoIterator<Item = &'a BucketedStay>,
    p: usize,
) -> Result<BinTable> {
    if p < 2 {
        return Err(Error::config(format!(
            "bin count must be at least 2, got {p}"
        )));
    }
    let mut values: HashMap<String, Vec<f64>> = HashMap::new();
    for stay in train_stays {
        collect_continuous(stay, &mut values);
    }
    let mut labels: Vec<(String, Vec<f64>)> = values.into_iter().collect();
    labels.sort_by(|a, b| a.0.cmp(&b.0));
    let specs: Result<Vec<BinSpec>> = labels
        .par_iter()
        .map(|(label, vals)| fit_bins(label, vals, p))
        .collect();
    let by_label = specs?
        .into_iter()
        .map(|spec| (spec.label.clone(), spec))
        .collect();
    Ok(BinTable { bins: p, by_label })
}

/// Accumulate one stay's continuous values into a per-label collection
/// (streaming counterpart of [`fit_bin_table`]).
pub fn collect_continuous(stay: &BucketedStay, into: &mut HashMap<String, Vec<f64>>) {
    for bucket in &stay.hours {
        for event in bucket {
            if event.value.is_empty() {
                continue;
            }
            if let ValueClass::Continuous(x) = classify_value(&event.value) {
                into.entry(event.label.to_string()).or_default().push(x);
            }
        }
    }
}

/// Fit bins from an already collected per-label value map.
pub fn fit_bin_table_from_values(values: HashMap<String, Vec<f64>>, p: usize) -> Result<BinTable> {
    let mut labels: Vec<(String, Vec<f64>)> = values.into_iter().collect();
    labels.sort_by(|a, b| a.0.cmp(&b.0));
    let specs: Result<Vec<BinSpec>> = labels
        .par_iter()
        .map(|(label, vals)| fit_bins(label, vals, p))
        .collect();
    let by_label = specs?
        .into_iter()
        .map(|spec| (spec.label.clone(), spec))
        .collect();
    Ok(BinTable { bins: p, by_label })
}

/// Turn one event into its token text.
///
/// Empty values become the reserved missing token. Continuous values with no
/// fitted bins (a label never seen in training) collapse to the reserved
/// unknown token at encode time.
pub fn tokenize_event(label: &str, value: &str, bins: &BinTable) -> String {
    if value.is_empty() {
        return MISSING_TOKEN.to_string();
    }
    match classify_value(value) {
        ValueClass::Continuous(x) => match bins.get(label) {
            Some(spec) => format!("{label}_{}", spec.bin_index(x)),
            None => UNKNOWN_TOKEN.to_string(),
        },
        ValueClass::Discrete(text) => format!("{label} {text}"),
    }
}

/// The shared token vocabulary. Index 0 is the missing token, index 1 the
/// unknown token; all other tokens get indices in first-occurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index_of: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const MISSING: u32 = 0;
    pub const UNKNOWN: u32 = 1;

    pub fn new() -> Self {
        let tokens = vec![MISSING_TOKEN.to_string(), UNKNOWN_TOKEN.to_string()];
        let index_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index_of }
    }

    /// Insert a token if new, returning its index either way.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&ix) = self.index_of.get(token) {
            return ix;
        }
        let ix = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index_of.insert(token.to_string(), ix);
        ix
    }

    /// Index for a token; unseen tokens map to [`Vocab::UNKNOWN`].
    pub fn encode(&self, token: &str) -> u32 {
        self.index_of.get(token).copied().unwrap_or(Self::UNKNOWN)
    }

    pub fn decode(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Build the vocabulary from a training token stream, preserving
/// first-occurrence order.
pub fn build_vocab(tokens: impl IntoIterator<Item = String>) -> Vocab {
    let mut vocab = Vocab::new();
    for token in tokens {
        vocab.insert(&token);
    }
    vocab
}

/// Tokenize every event of the training stays in order and build the vocab.
pub fn build_vocab_from_stays<'a>(
    train_stays: impl IntoIterator<Item = &'a BucketedStay>,
    bins: &BinTable,
) -> Vocab {
    let mut vocab = Vocab::new();
    for stay in train_stays {
        insert_stay_tokens(stay, bins, &mut vocab);
    }
    vocab
}

/// Streaming counterpart of [`build_vocab_from_stays`].
pub fn insert_stay_tokens(stay: &BucketedStay, bins: &BinTable, vocab: &mut Vocab) {
    for bucket in &stay.hours {
        for event in bucket {
            vocab.insert(&tokenize_event(&event.label, &event.value, bins));
        }
    }
}

/// A stay encoded as hour-bucketed token indices with its outcome.
///
/// `died` is the training target: `true` maps to target 1.0 (mortality).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedStay {
    pub stay_id: String,
    pub died: bool,
    pub horizon: u32,
    pub observed_hours: u32,
    pub hours: Vec<Vec<u32>>,
}

/// Encode one bucketed stay. Tokens outside the vocabulary map to the
/// unknown index; per-hour event order is preserved.
pub fn encode_stay(stay: &BucketedStay, vocab: &Vocab, bins: &BinTable) -> TokenizedStay {
    let hours = stay
        .hours
        .iter()
        .map(|bucket| {
            bucket
                .iter()
                .map(|event| vocab.encode(&tokenize_event(&event.label, &event.value, bins)))
                .collect()
        })
        .collect();
    TokenizedStay {
        stay_id: stay.stay_id.clone(),
        died: stay.died,
        horizon: stay.horizon,
        observed_hours: stay.observed_hours,
        hours,
    }
}

/// Percentile band text for a bin, e.g. bin 18 of 20 -> `"90-95%"`.
pub fn percentile_band(bin_index: usize, bins: usize) -> String {
    let lo = 100.0 * bin_index as f64 / bins as f64;
    let hi = 100.0 * (bin_index + 1) as f64 / bins as f64;
    format!("{}-{}%", fmt_pct(lo), fmt_pct(hi))
}

fn fmt_pct(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        format!("{x:.1}")
    }
}

const BINS_HEADER_PREFIX: &str = "#bins\tv1";
const VOCAB_HEADER_PREFIX: &str = "#vocab\tv1";

/// Render the bin table as versioned TSV: a header naming the bin count and
/// quantile rule, then one record per label (sorted) with its boundaries.
pub fn render_bins_tsv(table: &BinTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{BINS_HEADER_PREFIX}\tP={}\trule=nearest-rank\tties=higher-bin",
        table.bins
    );
    let mut labels: Vec<&BinSpec> = table.by_label.values().collect();
    labels.sort_by(|a, b| a.label.cmp(&b.label));
    for spec in labels {
        let _ = write!(out, "{}", escape_tsv(&spec.label));
        for b in &spec.boundaries {
            let _ = write!(out, "\t{}", fmt_f64(*b));
        }
        let _ = writeln!(out);
    }
    out
}

pub fn parse_bins_tsv(text: &str) -> Result<BinTable> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data("empty bins file"))?;
    if !header.starts_with(BINS_HEADER_PREFIX) {
        return Err(Error::data("bins file has an unrecognized header"));
    }
    let p: usize = header
        .split('\t')
        .find_map(|f| f.strip_prefix("P="))
        .ok_or_else(|| Error::data("bins header is missing P="))?
        .parse()
        .map_err(|_| Error::data("bins header has unparseable P="))?;
    let mut by_label = HashMap::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let label = unescape_tsv(fields.next().unwrap_or(""));
        let boundaries: std::result::Result<Vec<f64>, _> =
            fields.map(str::parse::<f64>).collect();
        let boundaries = boundaries
            .map_err(|_| Error::data(format!("bins file line {}: bad boundary", i + 2)))?;
        if boundaries.len() + 1 != p {
            return Err(Error::data(format!(
                "bins file line {}: expected {} boundaries, got {}",
                i + 2,
                p - 1,
                boundaries.len()
            )));
        }
        by_label.insert(
            label.clone(),
            BinSpec {
                label,
                boundaries,
                bins: p,
            },
        );
    }
    Ok(BinTable { bins: p, by_label })
}

/// Render the vocabulary as versioned TSV in index order.
pub fn render_vocab_tsv(vocab: &Vocab) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{VOCAB_HEADER_PREFIX}\tsize={}", vocab.len());
    for (i, token) in vocab.tokens().iter().enumerate() {
        let _ = writeln!(out, "{i}\t{}", escape_tsv(token));
    }
    out
}

pub fn parse_vocab_tsv(text: &str) -> Result<Vocab> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data("empty vocab file"))?;
    if !header.starts_with(VOCAB_HEADER_PREFIX) {
        return Err(Error::data("vocab file has an unrecognized header"));
    }
    let mut vocab = Vocab::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (index, token) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("vocab file line {}: missing tab", i + 2)))?;
        let index: u32 = index
            .parse()
            .map_err(|_| Error::data(format!("vocab file line {}: bad index", i + 2)))?;
        let token = unescape_tsv(token);
        let assigned = vocab.insert(&token);
        if assigned != index {
            return Err(Error::data(format!(
                "vocab file line {}: token '{token}' expected index {assigned}, file says {index}",
                i + 2
            )));
        }
    }
    Ok(vocab)
}

pub fn write_bins_file(path: &Path, table: &BinTable) -> Result<()> {
    crate::util::atomic_write(path, render_bins_tsv(table).as_bytes())
}

pub fn read_bins_file(path: &Path) -> Result<BinTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bins_tsv(&text)
}

pub fn write_vocab_file(path: &Path, vocab: &Vocab) -> Result<()> {
    crate::util::atomic_write(path, render_vocab_tsv(vocab).as_bytes())
}

pub fn read_vocab_file(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vocab_tsv(&text)
}

/// Serialize tokenized stays as JSON Lines in input order.
pub fn write_tokenized_jsonl<W: std::io::Write>(
    mut writer: W,
    stays: &[TokenizedStay],
) -> Result<()> {
    for stay in stays {
        serde_json::to_writer(&mut writer, stay)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<tokenized stream>", e))?;
    }
    Ok(())
}

pub fn read_tokenized_jsonl(path: &Path) -> Result<Vec<TokenizedStay>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut stays = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        stays.push(serde_json::from_str(&line)?);
    }
    Ok(stays)
}
