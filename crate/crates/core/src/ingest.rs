//! Raw event-table ingestion.
//!
//! Reads delimited event tables and a stays table, associates every event
//! with an ICU stay, applies the cohort exclusions (age < 18, undocumented
//! mortality), buckets events into hourly windows relative to ICU admission,
//! and caps each stay at a maximum event count by keeping the chronologically
//! last events. Every rejected row and dropped event is counted by reason so
//! that input mass is conserved exactly: `events_parsed` always equals
//! `events_bucketed` plus the sum of the drop counters.
//!
//! Column names are configuration, not code: any table that can name a stay
//! id, an event label, a value and a timestamp can be ingested by adjusting
//! the [`ColumnMap`].

use std::collections::HashMap;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds per hourly bucket.
pub const SECONDS_PER_HOUR: i64 = 3600;

/// Default cap on events per stay; when exceeded, the chronologically last
/// `EVENT_CAP` events are kept.
pub const EVENT_CAP: usize = 10_000;

/// Column names for the event table. Defaults follow the MIMIC-III
/// CHARTEVENTS-style export convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMap {
    pub stay_id: String,
    pub label: String,
    pub value: String,
    pub time: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            stay_id: "ICUSTAY_ID".to_string(),
            label: "LABEL".to_string(),
            value: "VALUE".to_string(),
            time: "CHARTTIME".to_string(),
        }
    }
}

/// Column names for the stays table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StayColumnMap {
    pub stay_id: String,
    pub patient_id: String,
    pub intime: String,
    pub age: String,
    pub mortality: String,
}

impl Default for StayColumnMap {
    fn default() -> Self {
        StayColumnMap {
            stay_id: "ICUSTAY_ID".to_string(),
            patient_id: "SUBJECT_ID".to_string(),
            intime: "INTIME".to_string(),
            age: "AGE".to_string(),
            mortality: "MORTALITY".to_string(),
        }
    }
}

/// One timestamped `(stay, label, value)` record parsed from an event table.
/// The raw value text is preserved byte-exactly; only surrounding whitespace
/// is trimmed during parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub stay_id: String,
    pub label: String,
    pub value: String,
    /// Epoch seconds.
    pub time: i64,
}

/// Documented in-hospital outcome of a stay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mortality {
    Survived,
    Died,
    Undocumented,
}

/// One ICU admission episode from the stays table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayRecord {
    pub stay_id: String,
    pub patient_id: String,
    /// ICU admission time, epoch seconds.
    pub intime: i64,
    pub age_years: f64,
    pub mortality: Mortality,
}

/// One event inside an hourly bucket. The label is interned: stays share one
/// allocation per distinct event name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketEvent {
    pub label: Arc<str>,
    pub value: String,
}

/// A stay with its events grouped into hourly buckets relative to admission.
///
/// `hours[h]` holds the events with `floor((time - intime) / 3600) == h`, in
/// time order (ties keep input order). `observed_hours` is the index of the
/// last non-empty bucket plus one; hours past it carry no data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketedStay {
    pub stay_id: String,
    pub died: bool,
    pub horizon: u32,
    pub observed_hours: u32,
    pub hours: Vec<Vec<BucketEvent>>,
}

impl BucketedStay {
    pub fn total_events(&self) -> usize {
        self.hours.iter().map(Vec::len).sum()
    }
}

/// Per-reason counters for everything read, kept, rejected or dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestDiagnostics {
    pub rows_read: u64,
    pub rows_rejected_bad_timestamp: u64,
    pub rows_rejected_missing_stay_id: u64,
    pub rows_rejected_missing_label: u64,
    pub rows_rejected_short_row: u64,
    pub events_parsed: u64,
    pub dropped_unknown_stay: u64,
    pub dropped_excluded_stay: u64,
    pub dropped_before_admission: u64,
    pub dropped_beyond_horizon: u64,
    pub dropped_by_cap: u64,
    pub events_bucketed: u64,
    pub stays_read: u64,
    pub stays_excluded_underage: u64,
    pub stays_excluded_undocumented_mortality: u64,
    pub stays_retained: u64,
    pub distinct_labels_parsed: u64,
    pub distinct_labels_bucketed: u64,
}

impl IngestDiagnostics {
    /// Sum of all per-reason event drop counters.
    pub fn events_dropped(&self) -> u64 {
        self.dropped_unknown_stay
            + self.dropped_excluded_stay
            + self.dropped_before_admission
            + self.dropped_beyond_horizon
            + self.dropped_by_cap
    }

    /// Event conservation: parsed events are either bucketed or dropped for
    /// a counted reason.
    pub fn is_conserved(&self) -> bool {
        self.events_parsed == self.events_bucketed + self.events_dropped()
    }

    /// Render as a `key = value` text report, one counter per line.
    pub fn render_report(&self) -> String {
        let mut out = String::new();
        let pairs: &[(&str, u64)] = &[
            ("rows_read", self.rows_read),
            ("rows_rejected_bad_timestamp", self.rows_rejected_bad_timestamp),
            ("rows_rejected_missing_stay_id", self.rows_rejected_missing_stay_id),
            ("rows_rejected_missing_label", self.rows_rejected_missing_label),
            ("rows_rejected_short_row", self.rows_rejected_short_row),
            ("events_parsed", self.events_parsed),
            ("dropped_unknown_stay", self.dropped_unknown_stay),
            ("dropped_excluded_stay", self.dropped_excluded_stay),
            ("dropped_before_admission", self.dropped_before_admission),
            ("dropped_beyond_horizon", self.dropped_beyond_horizon),
            ("dropped_by_cap", self.dropped_by_cap),
            ("events_bucketed", self.events_bucketed),
            ("events_dropped_total", self.events_dropped()),
            ("stays_read", self.stays_read),
            ("stays_excluded_underage", self.stays_excluded_underage),
            (
                "stays_excluded_undocumented_mortality",
                self.stays_excluded_undocumented_mortality,
            ),
            ("stays_retained", self.stays_retained),
            ("distinct_labels_parsed", self.distinct_labels_parsed),
            ("distinct_labels_bucketed", self.distinct_labels_bucketed),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Why one input row was rejected before becoming a [`RawEvent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowReject {
    BadTimestamp,
    MissingStayId,
    MissingLabel,
    ShortRow,
}

/// Event-table column indices resolved against a header row.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedColumns {
    stay_id: usize,
    label: usize,
    value: usize,
    time: usize,
}

impl ResolvedColumns {
    pub fn resolve(headers: &csv::StringRecord, map: &ColumnMap) -> Result<Self> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::data(format!("event table is missing column '{name}'")))
        };
        Ok(ResolvedColumns {
            stay_id: find(&map.stay_id)?,
            label: find(&map.label)?,
            value: find(&map.value)?,
            time: find(&map.time)?,
        })
    }
}

/// Parse one timestamp in `YYYY-MM-DD HH:MM:SS` form (a `T` separator is also
/// accepted) to epoch seconds.
pub fn parse_timestamp(text: &str) -> Option<i64> {
    let t = text.trim();
    NaiveDateTime::parse_from_str(t, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(t, "%Y-%m-%dT%H:%M:%S"))
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

/// Render epoch seconds back to the `YYYY-MM-DD HH:MM:SS` form used in
/// generated tables.
pub fn format_timestamp(epoch: i64) -> String {
    chrono::DateTime::from_timestamp(epoch, 0)
        .expect("timestamp out of range")
        .naive_utc()
        .format("%Y-%m-%d %H:%M:%S")
        .to_string()
}

/// Parse one delimited row into a [`RawEvent`]. Fields are trimmed; the value
/// is otherwise preserved byte-exactly and may be empty (a missing reading).
pub fn parse_event_row(
    record: &csv::StringRecord,
    cols: &ResolvedColumns,
) -> std::result::Result<RawEvent, RowReject> {
    let needed = cols.stay_id.max(cols.label).max(cols.value).max(cols.time);
    if record.len() <= needed {
        return Err(RowReject::ShortRow);
    }
    let stay_id = record[cols.stay_id].trim();
    if stay_id.is_empty() {
        return Err(RowReject::MissingStayId);
    }
    let label = record[cols.label].trim();
    if label.is_empty() {
        return Err(RowReject::MissingLabel);
    }
    let time = parse_timestamp(&record[cols.time]).ok_or(RowReject::BadTimestamp)?;
    Ok(RawEvent {
        stay_id: stay_id.to_string(),
        label: label.to_string(),
        value: record[cols.value].trim().to_string(),
        time,
    })
}

fn parse_mortality(text: &str) -> Option<Mortality> {
    match text.trim() {
        "" | "undocumented" | "UNDOCUMENTED" => Some(Mortality::Undocumented),
        "1" | "died" | "DIED" => Some(Mortality::Died),
        "0" | "survived" | "SURVIVED" => Some(Mortality::Survived),
        _ => None,
    }
}

/// Read the stays table. Rows with an unparseable intime, age or mortality
/// field are data errors: the stays table is small and curated, unlike the
/// event stream.
pub fn read_stays_csv(path: &Path, map: &StayColumnMap, delimiter: u8) -> Result<Vec<StayRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open stays table {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::data(format!("stays table is missing column '{name}'")))
    };
    let (c_stay, c_patient, c_intime, c_age, c_mort) = (
        find(&map.stay_id)?,
        find(&map.patient_id)?,
        find(&map.intime)?,
        find(&map.age)?,
        find(&map.mortality)?,
    );

    let mut stays = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let ctx = |what: &str| format!("stays table row {}: {what}", line + 2);
        let stay_id = record
            .get(c_stay)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::data(ctx("missing stay id")))?
            .to_string();
        let intime = parse_timestamp(record.get(c_intime).unwrap_or(""))
            .ok_or_else(|| Error::data(ctx("unparseable intime")))?;
        let age_years: f64 = record
            .get(c_age)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::data(ctx("unparseable age")))?;
        let mortality = parse_mortality(record.get(c_mort).unwrap_or(""))
            .ok_or_else(|| Error::data(ctx("unrecognized mortality value")))?;
        stays.push(StayRecord {
            stay_id,
            patient_id: record.get(c_patient).unwrap_or("").trim().to_string(),
            intime,
            age_years,
            mortality,
        });
    }
    Ok(stays)
}

/// Outcome of the cohort exclusion pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExclusionCounts {
    pub underage: u64,
    pub undocumented_mortality: u64,
}

/// Apply the cohort exclusions: stays aged under 18 at admission and stays
/// with undocumented mortality are removed; everything else passes through
/// unmodified.
pub fn apply_exclusions(stays: Vec<StayRecord>) -> (Vec<StayRecord>, ExclusionCounts) {
    let mut counts = ExclusionCounts::default();
    let kept = stays
        .into_iter()
        .filter(|s| {
            if s.age_years < 18.0 {
                counts.underage += 1;
                false
            } else if s.mortality == Mortality::Undocumented {
                counts.undocumented_mortality += 1;
                false
            } else {
                true
            }
        })
        .collect();
    (kept, counts)
}

/// Hour bucket index for an event time relative to admission, or the drop
/// reason if the event falls outside `[intime, intime + horizon)`.
fn bucket_index(time: i64, intime: i64, horizon: u32) -> std::result::Result<u32, DropReason> {
    if time < intime {
        return Err(DropReason::BeforeAdmission);
    }
    let hour = (time - intime) / SECONDS_PER_HOUR;
    if hour >= i64::from(horizon) {
        return Err(DropReason::BeyondHorizon);
    }
    Ok(hour as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DropReason {
    BeforeAdmission,
    BeyondHorizon,
}

struct StayAccumulator {
    index: usize,
    intime: i64,
    // (time, arrival sequence, bucket, label, value); sorted before bucketing
    events: Vec<(i64, u32, Arc<str>, String)>,
}

/// Incremental linker: feed parsed events, then finish into bucketed stays.
///
/// Output stays follow the stays-table order regardless of event order, and
/// events within a bucket are time-sorted with input order breaking ties, so
/// the result is deterministic for a fixed input.
pub struct Linker {
    horizon: u32,
    cap: usize,
    stays: Vec<StayRecord>,
    by_id: HashMap<String, usize>,
    excluded_ids: HashSet<String>,
    accs: Vec<StayAccumulator>,
    label_pool: HashMap<Arc<str>, Arc<str>>,
    labels_parsed: HashSet<Arc<str>>,
    pub diagnostics: IngestDiagnostics,
}

impl Linker {
    /// `stays` must already have exclusions applied; `excluded_ids` is used
    /// only to attribute drops of events for excluded stays.
    pub fn new(
        stays: Vec<StayRecord>,
        excluded_ids: HashSet<String>,
        horizon: u32,
        cap: usize,
    ) -> Self {
        let by_id = stays
            .iter()
            .enumerate()
            .map(|(i, s)| (s.stay_id.clone(), i))
            .collect();
        let accs = stays
            .iter()
            .enumerate()
            .map(|(index, s)| StayAccumulator {
                index,
                intime: s.intime,
                events: Vec::new(),
            })
            .collect();
        Linker {
            horizon,
            cap,
            stays,
            by_id,
            excluded_ids,
            accs,
            label_pool: HashMap::new(),
            labels_parsed: HashSet::new(),
            diagnostics: IngestDiagnostics::default(),
        }
    }

    fn intern(&mut self, label: &str) -> Arc<str> {
        if let Some(a) = self.label_pool.get(label) {
            return a.clone();
        }
        let arc: Arc<str> = Arc::from(label);
        self.label_pool.insert(arc.clone(), arc.clone());
        arc
    }

    /// Link one parsed event to its stay, or count the drop reason.
    pub fn push(&mut self, event: RawEvent) {
        self.diagnostics.events_parsed += 1;
        let label = self.intern(&event.label);
        self.labels_parsed.insert(label.clone());
        let Some(&idx) = self.by_id.get(&event.stay_id) else {
            if self.excluded_ids.contains(&event.stay_id) {
                self.diagnostics.dropped_excluded_stay += 1;
            } else {
                self.diagnostics.dropped_unknown_stay += 1;
            }
            return;
        };
        let acc = &mut self.accs[idx];
        match bucket_index(event.time, acc.intime, self.horizon) {
            Ok(_) => acc.events.push((event.time, acc.events.len() as u32, label, event.value)),
            Err(DropReason::BeforeAdmission) => self.diagnostics.dropped_before_admission += 1,
            Err(DropReason::BeyondHorizon) => self.diagnostics.dropped_beyond_horizon += 1,
        }
    }

    /// Sort, bucket and cap every stay.
    pub fn finish(mut self) -> (Vec<BucketedStay>, IngestDiagnostics) {
        let mut labels_bucketed: HashSet<Arc<str>> = HashSet::new();
        let mut out = Vec::with_capacity(self.accs.len());
        for mut acc in self.accs.drain(..) {
            acc.events.sort_by_key(|(time, seq, _, _)| (*time, *seq));
            let total = acc.events.len();
            let skip = total.saturating_sub(self.cap);
            self.diagnostics.dropped_by_cap += skip as u64;

            let stay = &self.stays[acc.index];
            let mut hours: Vec<Vec<BucketEvent>> = vec![Vec::new(); self.horizon as usize];
            for (time, _, label, value) in acc.events.into_iter().skip(skip) {
                let hour = bucket_index(time, acc.intime, self.horizon)
                    .expect("pre-checked event fell outside horizon");
                labels_bucketed.insert(label.clone());
                hours[hour as usize].push(BucketEvent { label, value });
                self.diagnostics.events_bucketed += 1;
            }
            let observed_hours = hours
                .iter()
                .rposition(|h| !h.is_empty())
                .map_or(0, |p| p as u32 + 1);
            out.push(BucketedStay {
                stay_id: stay.stay_id.clone(),
                died: stay.mortality == Mortality::Died,
                horizon: self.horizon,
                observed_hours,
                hours,
            });
        }
        self.diagnostics.distinct_labels_parsed = self.labels_parsed.len() as u64;
        self.diagnostics.distinct_labels_bucketed = labels_bucketed.len() as u64;
        (out, self.diagnostics)
    }
}

/// Link a pre-parsed event collection to stays and bucket hourly. The
/// streaming path used by the CLI feeds a [`Linker`] directly; this wrapper
/// serves in-memory callers.
pub fn link_and_bucket(
    events: impl IntoIterator<Item = RawEvent>,
    stays: Vec<StayRecord>,
    excluded_ids: HashSet<String>,
    horizon: u32,
    cap: usize,
) -> (Vec<BucketedStay>, IngestDiagnostics) {
    let mut linker = Linker::new(stays, excluded_ids, horizon, cap);
    for event in events {
        linker.push(event);
    }
    linker.finish()
}

/// Keep only the chronologically last `cap` events of a stay. Buckets are
/// already time-ordered, so this walks hours from the front and removes the
/// earliest overflow. Returns the number of events dropped.
pub fn cap_events(stay: &mut BucketedStay, cap: usize) -> u64 {
    let total = stay.total_events();
    if total <= cap {
        return 0;
    }
    let mut to_drop = total - cap;
    let dropped = to_drop as u64;
    for bucket in stay.hours.iter_mut() {
        if to_drop == 0 {
            break;
        }
        let take = to_drop.min(bucket.len());
        bucket.drain(..take);
        to_drop -= take;
    }
    stay.observed_hours = stay
        .hours
        .iter()
        .rposition(|h| !h.is_empty())
        .map_or(0, |p| p as u32 + 1);
    dropped
}

/// Stream one events CSV file into the linker, updating row diagnostics.
pub fn stream_events_csv(
    path: &Path,
    map: &ColumnMap,
    delimiter: u8,
    linker: &mut Linker,
) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open event table {}: {e}", path.display())))?;
    let cols = ResolvedColumns::resolve(reader.headers()?, map)?;
    for record in reader.records() {
        let record = record?;
        linker.diagnostics.rows_read += 1;
        match parse_event_row(&record, &cols) {
            Ok(event) => linker.push(event),
            Err(RowReject::BadTimestamp) => linker.diagnostics.rows_rejected_bad_timestamp += 1,
            Err(RowReject::MissingStayId) => linker.diagnostics.rows_rejected_missing_stay_id += 1,
            Err(RowReject::MissingLabel) => linker.diagnostics.rows_rejected_missing_label += 1,
            Err(RowReject::ShortRow) => linker.diagnostics.rows_rejected_short_row += 1,
        }
    }
    Ok(())
}

/// Full ingest pass: stays table, exclusions, event streaming, bucketing.
pub fn ingest(
    event_paths: &[std::path::PathBuf],
    stays_path: &Path,
    event_map: &ColumnMap,
    stay_map: &StayColumnMap,
    delimiter: u8,
    horizon: u32,
    cap: usize,
) -> Result<(Vec<BucketedStay>, IngestDiagnostics)> {
    let all_stays = read_stays_csv(stays_path, stay_map, delimiter)?;
    let stays_read = all_stays.len() as u64;
    let all_ids: HashSet<String> = all_stays.iter().map(|s| s.stay_id.clone()).collect();
    let (kept, excl) = apply_exclusions(all_stays);
    let kept_ids: HashSet<String> = kept.iter().map(|s| s.stay_id.clone()).collect();
    let excluded_ids = &all_ids - &kept_ids;

    let mut linker = Linker::new(kept, excluded_ids, horizon, cap);
    linker.diagnostics.stays_read = stays_read;
    linker.diagnostics.stays_excluded_underage = excl.underage;
    linker.diagnostics.stays_excluded_undocumented_mortality = excl.undocumented_mortality;
    for path in event_paths {
        stream_events_csv(path, event_map, delimiter, &mut linker)?;
    }
    let stays_retained = linker.stays.len() as u64;
    linker.diagnostics.stays_retained = stays_retained;
    let (bucketed, diagnostics) = linker.finish();
    debug_assert!(diagnostics.is_conserved());
    Ok((bucketed, diagnostics))
}

/// Serialize bucketed stays as JSON Lines, one stay per line, in input order.
pub fn write_bucketed_jsonl<W: std::io::Write>(
    mut writer: W,
    stays: &[BucketedStay],
) -> Result<()> {
    for stay in stays {
        serde_json::to_writer(&mut writer, stay)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<bucketed stream>", e))?;
    }
    Ok(())
}

/// Stream bucketed stays back from JSON Lines.
pub fn read_bucketed_jsonl(path: &Path) -> Result<impl Iterator<Item = Result<BucketedStay>>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let path = path.to_path_buf();
    Ok(reader.lines().map(move |line| {
        let line = line.map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&line)?)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(fields: &[&str]) -> csv::StringRecord {
        csv::StringRecord::from(fields.to_vec())
    }

    fn default_cols() -> ResolvedColumns {
        ResolvedColumns {
            stay_id: 0,
            label: 1,
            value: 2,
            time: 3,
        }
    }

    fn stay(id: &str, intime: i64, age: f64, mortality: Mortality) -> StayRecord {
        StayRecord {
            stay_id: id.to_string(),
            patient_id: format!("p-{id}"),
            intime,
            age_years: age,
            mortality,
        }
    }

    fn event(id: &str, label: &str, value: &str, time: i64) -> RawEvent {
        RawEvent {
            stay_id: id.to_string(),
            label: label.to_string(),
            value: value.to_string(),
            time,
        }
    }

    #[test]
    fn parse_event_row_basic() {
        let cols = default_cols();
        let ev = parse_event_row(
            &record(&["s1", "Heart Rate", "84", "2100-01-01 04:00:00"]),
            &cols,
        )
        .unwrap();
        assert_eq!(ev.stay_id, "s1");
        assert_eq!(ev.label, "Heart Rate");
        assert_eq!(ev.value, "84");
        assert_eq!(ev.time, parse_timestamp("2100-01-01 04:00:00").unwrap());
    }

    #[test]
    fn parse_event_row_keeps_empty_value() {
        let ev = parse_event_row(
            &record(&["s1", "PH", "", "2100-01-01 04:00:00"]),
            &default_cols(),
        )
        .unwrap();
        assert_eq!(ev.value, "");
    }

    #[test]
    fn parse_event_row_rejects_bad_timestamp() {
        let err = parse_event_row(&record(&["s1", "Foo", "1.0", "not-a-time"]), &default_cols())
            .unwrap_err();
        assert_eq!(err, RowReject::BadTimestamp);
    }

    #[test]
    fn parse_event_row_rejects_missing_stay() {
        let err = parse_event_row(
            &record(&["", "Foo", "1.0", "2100-01-01 04:00:00"]),
            &default_cols(),
        )
        .unwrap_err();
        assert_eq!(err, RowReject::MissingStayId);
    }

    #[test]
    fn timestamp_roundtrip() {
        let t = parse_timestamp("2100-01-01 04:00:00").unwrap();
        assert_eq!(format_timestamp(t), "2100-01-01 04:00:00");
    }

    #[test]
    fn exclusions_filter_underage_and_undocumented() {
        let stays = vec![
            stay("a", 0, 17.9, Mortality::Survived),
            stay("b", 0, 65.8, Mortality::Died),
            stay("c", 0, 40.0, Mortality::Undocumented),
            stay("d", 0, 18.0, Mortality::Survived),
        ];
        let originals = stays.clone();
        let (kept, counts) = apply_exclusions(stays);
        assert_eq!(counts.underage, 1);
        assert_eq!(counts.undocumented_mortality, 1);
        let ids: Vec<&str> = kept.iter().map(|s| s.stay_id.as_str()).collect();
        assert_eq!(ids, ["b", "d"]);
        // retained records are untouched
        assert_eq!(kept[0], originals[1]);
        assert_eq!(kept[1], originals[3]);
    }

    #[test]
    fn bucketing_boundaries() {
        let intime = parse_timestamp("2100-01-01 00:00:00").unwrap();
        let stays = vec![stay("s1", intime, 50.0, Mortality::Survived)];
        let events = vec![
            event("s1", "A", "1", intime + 30 * 60),           // bucket 0
            event("s1", "B", "2", intime),                      // exactly at intime
            event("s1", "C", "3", intime + 47 * 3600 + 59 * 60), // bucket 47
            event("s1", "D", "4", intime + 49 * 3600),          // beyond horizon
            event("s1", "E", "5", intime - 1),                  // before admission
            event("s2", "F", "6", intime),                      // unknown stay
        ];
        let (bucketed, diag) =
            link_and_bucket(events, stays, HashSet::new(), 48, EVENT_CAP);
        let s = &bucketed[0];
        assert_eq!(s.hours[0].len(), 2);
        assert_eq!(s.hours[47].len(), 1);
        assert_eq!(s.observed_hours, 48);
        assert_eq!(diag.dropped_beyond_horizon, 1);
        assert_eq!(diag.dropped_before_admission, 1);
        assert_eq!(diag.dropped_unknown_stay, 1);
        assert!(diag.is_conserved());
    }

    #[test]
    fn events_sorted_by_time_with_stable_ties() {
        let stays = vec![stay("s1", 0, 50.0, Mortality::Survived)];
        let events = vec![
            event("s1", "late", "1", 300),
            event("s1", "tie-a", "2", 100),
            event("s1", "tie-b", "3", 100),
            event("s1", "early", "4", 50),
        ];
        let (bucketed, _) = link_and_bucket(events, stays, HashSet::new(), 1, EVENT_CAP);
        let labels: Vec<&str> = bucketed[0].hours[0].iter().map(|e| &*e.label).collect();
        assert_eq!(labels, ["early", "tie-a", "tie-b", "late"]);
    }

    #[test]
    fn cap_keeps_chronologically_last() {
        let stays = vec![stay("s1", 0, 50.0, Mortality::Survived)];
        let events: Vec<RawEvent> = (0..10)
            .map(|i| event("s1", "L", &i.to_string(), i * 60))
            .collect();
        let (mut bucketed, _) = link_and_bucket(events, stays, HashSet::new(), 1, EVENT_CAP);
        let dropped = cap_events(&mut bucketed[0], 4);
        assert_eq!(dropped, 6);
        let values: Vec<&str> = bucketed[0].hours[0].iter().map(|e| e.value.as_str()).collect();
        assert_eq!(values, ["6", "7", "8", "9"]);
    }

    #[test]
    fn cap_is_idempotent_and_noop_below_cap() {
        let stays = vec![stay("s1", 0, 50.0, Mortality::Survived)];
        let events: Vec<RawEvent> = (0..1268)
            .map(|i| event("s1", "L", "v", i))
            .collect();
        let (mut bucketed, _) = link_and_bucket(events, stays, HashSet::new(), 1, EVENT_CAP);
        let before = bucketed[0].clone();
        assert_eq!(cap_events(&mut bucketed[0], EVENT_CAP), 0);
        assert_eq!(bucketed[0], before);

        let mut capped = before.clone();
        cap_events(&mut capped, 100);
        let mut twice = capped.clone();
        cap_events(&mut twice, 100);
        assert_eq!(capped, twice);
    }

    #[test]
    fn cap_applied_during_linking() {
        let stays = vec![stay("s1", 0, 50.0, Mortality::Survived)];
        let events: Vec<RawEvent> = (0..10_001)
            .map(|i| event("s1", "L", &i.to_string(), i))
            .collect();
        let (bucketed, diag) = link_and_bucket(events, stays, HashSet::new(), 4, 10_000);
        assert_eq!(bucketed[0].total_events(), 10_000);
        assert_eq!(diag.dropped_by_cap, 1);
        assert_eq!(bucketed[0].hours[0][0].value, "1");
        assert!(diag.is_conserved());
    }

    #[test]
    fn bucketed_jsonl_roundtrip() {
        let stays = vec![stay("s1", 0, 50.0, Mortality::Died)];
        let events = vec![event("s1", "Heart Rate", "84", 10)];
        let (bucketed, _) = link_and_bucket(events, stays, HashSet::new(), 2, EVENT_CAP);
        let mut buf = Vec::new();
        write_bucketed_jsonl(&mut buf, &bucketed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bucketed.jsonl");
        std::fs::write(&path, &buf).unwrap();
        let back: Vec<BucketedStay> = read_bucketed_jsonl(&path)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(back, bucketed);
    }

    #[test]
    fn hour_index_matches_division_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let intime: i64 = rng.gen_range(0..4_000_000_000);
            let offset: i64 = rng.gen_range(-100_000..400_000);
            let time = intime + offset;
            let horizon = rng.gen_range(1..96u32);
            // independent oracle: floor of elapsed seconds over 3600
            let elapsed = time - intime;
            let oracle = if elapsed < 0 {
                None
            } else {
                let h = (elapsed as f64 / 3600.0).floor() as i64;
                (h < i64::from(horizon)).then_some(h as u32)
            };
            assert_eq!(bucket_index(time, intime, horizon).ok(), oracle);
        }
    }
}
