//! The measurement stack: ROC/AUROC with tie handling, bootstrap confidence
//! intervals, per-hour dynamic AUROC, calibration curves, and the per-hour
//! ranked-event case reports.
//!
//! AUROC is computed as the Mann-Whitney statistic — the probability that a
//! randomly chosen positive (death) outscores a randomly chosen negative,
//! ties counted half — which equals the trapezoidal area under the ROC
//! staircase exactly. Bootstrap resampling is per stay with independently
//! seeded substreams, so intervals are reproducible no matter how the
//! resamples are scheduled.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::BucketedStay;
use crate::model::{forward, rank_hour, Mode, ModelParams};
use crate::tokenize::{classify_value, percentile_band, BinTable, ValueClass, Vocab};
use crate::util::{derive_seed, nearest_rank};

fn validate_binary_input(scores: &[f64], died: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != died.len() {
        return Err(Error::config("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::data("scores must be finite"));
    }
    let positives = died.iter().filter(|&&d| d).count();
    let negatives = died.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes; got {positives} positives / {negatives} negatives"
        )));
    }
    Ok((positives, negatives))
}

/// AUROC by midrank summation: P(score_pos > score_neg) + 0.5 P(tie),
/// positives are deaths.
pub fn auroc(scores: &[f64], died: &[bool]) -> Result<f64> {
    let (positives, negatives) = validate_binary_input(scores, died)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank for the tie group [i, j)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &ix in &order[i..j] {
            if died[ix] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// An ROC curve with its trapezoidal area.
#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    /// (false positive rate, true positive rate), monotone from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

/// ROC staircase over descending score thresholds; tied scores advance as a
/// single diagonal segment, so the trapezoidal area equals [`auroc`].
pub fn roc_points(scores: &[f64], died: &[bool]) -> Result<RocResult> {
    let (positives, negatives) = validate_binary_input(scores, died)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut d_tp, mut d_fp) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if died[order[j]] {
                d_tp += 1;
            } else {
                d_fp += 1;
            }
            j += 1;
        }
        let prev_tpr = tp as f64 / positives as f64;
        tp += d_tp;
        fp += d_fp;
        let tpr = tp as f64 / positives as f64;
        let fpr = fp as f64 / negatives as f64;
        area += (d_fp as f64 / negatives as f64) * (tpr + prev_tpr) / 2.0;
        points.push((fpr, tpr));
        i = j;
    }
    Ok(RocResult { points, auroc: area })
}

/// Percentile bootstrap interval for AUROC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples that were redrawn because they contained one class only.
    pub degenerate_redraws: u64,
}

const MAX_REDRAWS_PER_RESAMPLE: usize = 10_000;

fn resample_indices<R: rand::Rng>(rng: &mut R, n: usize, died: &[bool]) -> Result<(Vec<usize>, u64)> {
    let mut redraws = 0u64;
    for _ in 0..MAX_REDRAWS_PER_RESAMPLE {
        let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let pos = indices.iter().filter(|&&i| died[i]).count();
        if pos > 0 && pos < n {
            return Ok((indices, redraws));
        }
        redraws += 1;
    }
    Err(Error::numeric(
        "bootstrap could not draw a two-class resample; the cohort is nearly single-class",
    ))
}

/// Percentile bootstrap CI over `b` stay-level resamples. Each resample uses
/// a seed derived from (seed, resample index); degenerate single-class
/// resamples are redrawn and counted.
pub fn bootstrap_ci(
    scores: &[f64],
    died: &[bool],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    validate_binary_input(scores, died)?;
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::config(format!("confidence level {level} not in (0, 1)")));
    }
    if b < 2 {
        return Err(Error::config("bootstrap needs at least 2 resamples"));
    }
    let n = scores.len();
    let results: Result<Vec<(f64, u64)>> = (0..b)
        .into_par_iter()
        .map(|ix| {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, ix as u64));
            let (indices, redraws) = resample_indices(&mut rng, n, died)?;
            let s: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
            let d: Vec<bool> = indices.iter().map(|&i| died[i]).collect();
            Ok((auroc(&s, &d)?, redraws))
        })
        .collect();
    let results = results?;
    let degenerate_redraws = results.iter().map(|(_, r)| r).sum();
    let mut stats: Vec<f64> = results.into_iter().map(|(a, _)| a).collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        lo: nearest_rank(&stats, alpha),
        hi: nearest_rank(&stats, 1.0 - alpha),
        degenerate_redraws,
    })
}

/// How hour-t metrics treat stays whose observation ended before hour t.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CensoringMode {
    /// Stays keep contributing their last observed probability (default).
    CarryForward,
    /// Stays contribute only while observed.
    ObservedOnly,
}

/// One stay's hourly probabilities and outcome, the unit of dynamic metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct StayScores {
    pub died: bool,
    pub probs: Vec<f64>,
}

impl StayScores {
    fn score_at(&self, hour: usize, mode: CensoringMode) -> Option<f64> {
        match mode {
            CensoringMode::ObservedOnly => self.probs.get(hour).copied(),
            CensoringMode::CarryForward => {
                if self.probs.is_empty() {
                    None
                } else {
                    Some(self.probs[hour.min(self.probs.len() - 1)])
                }
            }
        }
    }
}

/// Per-hour AUROC, `None` when the hour's sample had a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct HourAuroc {
    pub hour: u32,
    pub n: usize,
    pub auroc: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicAuroc {
    pub hours: Vec<HourAuroc>,
    pub single_class_hours: u64,
    pub bootstrap_redraws: u64,
}

/// Dynamic AUROC over one fold's trajectories.
pub fn dynamic_auroc(
    stays: &[StayScores],
    horizon: u32,
    mode: CensoringMode,
    bootstrap: Option<(usize, f64, u64)>,
) -> Result<DynamicAuroc> {
    dynamic_auroc_pooled(std::slice::from_ref(&stays.to_vec()), horizon, mode, bootstrap)
}

/// Dynamic AUROC pooled across folds that share one test set.
///
/// `folds[f][i]` must refer to the same underlying stay for every fold `f`.
/// The hour-t point estimate is the mean over folds of that fold's hour-t
/// AUROC; intervals bootstrap the shared stay set, recomputing the pooled
/// mean per resample.
pub fn dynamic_auroc_pooled(
    folds: &[Vec<StayScores>],
    horizon: u32,
    mode: CensoringMode,
    bootstrap: Option<(usize, f64, u64)>,
) -> Result<DynamicAuroc> {
    let first = folds
        .first()
        .ok_or_else(|| Error::config("dynamic AUROC needs at least one fold"))?;
    if folds.iter().any(|f| f.len() != first.len()) {
        return Err(Error::config("folds must score the same stay set"));
    }
    for fold in folds {
        for (a, b) in fold.iter().zip(first.iter()) {
            if a.died != b.died {
                return Err(Error::config("fold stay ordering is inconsistent"));
            }
        }
    }

    let mut hours = Vec::with_capacity(horizon as usize);
    let mut single_class_hours = 0u64;
    let mut bootstrap_redraws = 0u64;
    for hour in 0..horizon {
        // stays included this hour (same set for every fold)
        let included: Vec<usize> = (0..first.len())
            .filter(|&i| first[i].score_at(hour as usize, mode).is_some())
            .collect();
        let died: Vec<bool> = included.iter().map(|&i| first[i].died).collect();
        let n = included.len();
        let positives = died.iter().filter(|&&d| d).count();
        if n == 0 || positives == 0 || positives == n {
            single_class_hours += 1;
            hours.push(HourAuroc {
                hour,
                n,
                auroc: None,
                ci: None,
            });
            continue;
        }
        let per_fold_scores: Vec<Vec<f64>> = folds
            .iter()
            .map(|fold| {
                included
                    .iter()
                    .map(|&i| fold[i].score_at(hour as usize, mode).expect("included"))
                    .collect()
            })
            .collect();
        let mut point = 0.0;
        for scores in &per_fold_scores {
            point += auroc(scores, &died)?;
        }
        point /= folds.len() as f64;

        let ci = match bootstrap {
            None => None,
            Some((b, level, seed)) => {
                let hour_seed = derive_seed(seed, u64::from(hour));
                let (ci, redraws) =
                    pooled_bootstrap(&per_fold_scores, &died, b, level, hour_seed)?;
                bootstrap_redraws += redraws;
                Some(ci)
            }
        };
        hours.push(HourAuroc {
            hour,
            n,
            auroc: Some(point),
            ci,
        });
    }
    Ok(DynamicAuroc {
        hours,
        single_class_hours,
        bootstrap_redraws,
    })
}

/// Mean-over-folds AUROC with a shared-resample percentile bootstrap.
pub fn pooled_bootstrap(
    per_fold_scores: &[Vec<f64>],
    died: &[bool],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<((f64, f64), u64)> {
    let n = died.len();
    let results: Result<Vec<(f64, u64)>> = (0..b)
        .into_par_iter()
        .map(|ix| {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, ix as u64));
            let (indices, redraws) = resample_indices(&mut rng, n, died)?;
            let d: Vec<bool> = indices.iter().map(|&i| died[i]).collect();
            let mut mean = 0.0;
            for scores in per_fold_scores {
                let s: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
                mean += auroc(&s, &d)?;
            }
            Ok((mean / per_fold_scores.len() as f64, redraws))
        })
        .collect();
    let results = results?;
    let redraws = results.iter().map(|(_, r)| r).sum();
    let mut stats: Vec<f64> = results.into_iter().map(|(a, _)| a).collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((
        (nearest_rank(&stats, alpha), nearest_rank(&stats, 1.0 - alpha)),
        redraws,
    ))
}

/// Pooled final AUROC across folds: mean of per-fold AUROCs with a
/// shared-resample bootstrap interval.
pub fn pooled_final_auroc(
    per_fold_scores: &[Vec<f64>],
    died: &[bool],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, (f64, f64), u64)> {
    if per_fold_scores.is_empty() {
        return Err(Error::config("need at least one fold"));
    }
    let mut point = 0.0;
    for scores in per_fold_scores {
        point += auroc(scores, died)?;
    }
    point /= per_fold_scores.len() as f64;
    let (ci, redraws) = pooled_bootstrap(per_fold_scores, died, b, level, seed)?;
    Ok((point, ci, redraws))
}

/// One calibration-curve point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPoint {
    pub mean_predicted: f64,
    pub observed_rate: f64,
    pub count: usize,
}

/// Equal-width reliability curve over [0, 1]; empty bins are omitted.
pub fn calibration_curve(
    probabilities: &[f64],
    died: &[bool],
    n_bins: usize,
) -> Result<Vec<CalibrationPoint>> {
    if n_bins < 2 {
        return Err(Error::config(format!(
            "calibration needs at least 2 bins, got {n_bins}"
        )));
    }
    if probabilities.len() != died.len() {
        return Err(Error::config("probabilities and labels differ in length"));
    }
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::data("probabilities must lie in [0, 1]"));
    }
    let mut sums = vec![0.0f64; n_bins];
    let mut events = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&p, &d) in probabilities.iter().zip(died) {
        let bin = ((p * n_bins as f64) as usize).min(n_bins - 1);
        sums[bin] += p;
        counts[bin] += 1;
        if d {
            events[bin] += 1;
        }
    }
    Ok((0..n_bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| CalibrationPoint {
            mean_predicted: sums[b] / counts[b] as f64,
            observed_rate: events[b] as f64 / counts[b] as f64,
            count: counts[b],
        })
        .collect())
}

/// One ranked event row of a case report.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedEvent {
    pub rank: usize,
    pub out_of: usize,
    pub label: String,
    pub value: String,
    /// Percentile band for continuous values with fitted bins.
    pub band: Option<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseHour {
    pub hour: u32,
    pub probability: f64,
    pub events: Vec<RankedEvent>,
}

/// Hour-by-hour probabilities and importance-ranked events for one stay.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub stay_id: String,
    pub died: bool,
    pub hours: Vec<CaseHour>,
}

/// Build the case report for a stay: per observed hour, the model's
/// probability plus every non-missing event ranked by aggregation weight,
/// with percentile bands recovered from the bin boundaries.
pub fn report_case(
    stay: &BucketedStay,
    params: &ModelParams,
    vocab: &Vocab,
    bins: &BinTable,
) -> CaseReport {
    let encoded = crate::tokenize::encode_stay(stay, vocab, bins);
    let trajectory = forward(&encoded, params, Mode::Eval, 0);
    let mut hours = Vec::with_capacity(trajectory.probs.len());
    for (t, &probability) in trajectory.probs.iter().enumerate() {
        let bucket = &stay.hours[t];
        let ids = &encoded.hours[t];
        let ranked = rank_hour(ids, params);
        let out_of = ranked.len();

        // match ranked token ids back to concrete events, in bucket order
        let mut used = vec![false; bucket.len()];
        let mut events = Vec::with_capacity(out_of);
        for (rank0, (token_id, weight)) in ranked.into_iter().enumerate() {
            let slot = (0..bucket.len())
                .find(|&i| !used[i] && ids[i] == token_id)
                .expect("ranked token comes from this hour");
            used[slot] = true;
            let event = &bucket[slot];
            let band = match classify_value(&event.value) {
                ValueClass::Continuous(x) if !event.value.is_empty() => bins
                    .get(&event.label)
                    .map(|spec| percentile_band(spec.bin_index(x), spec.bins)),
                _ => None,
            };
            events.push(RankedEvent {
                rank: rank0 + 1,
                out_of,
                label: event.label.to_string(),
                value: event.value.clone(),
                band,
                weight,
            });
        }
        hours.push(CaseHour {
            hour: t as u32,
            probability,
            events,
        });
    }
    CaseReport {
        stay_id: stay.stay_id.clone(),
        died: stay.died,
        hours,
    }
}

/// Render a case report as the familiar hour / rank / event / value table.
/// `top_k` limits rows per hour; `None` prints everything.
pub fn render_case_report(report: &CaseReport, top_k: Option<usize>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "stay {}", report.stay_id);
    let _ = writeln!(out, "{:<6}{:<10}{:<12}{:<34}{}", "Hour", "p(death)", "Rank", "Event name", "Value (percentile)");
    for hour in &report.hours {
        let limit = top_k.unwrap_or(hour.events.len());
        if hour.events.is_empty() {
            let _ = writeln!(out, "{:<6}{:<10.4}{:<12}{:<34}", hour.hour, hour.probability, "-", "(no events)");
            continue;
        }
        for (i, event) in hour.events.iter().take(limit).enumerate() {
            let head = if i == 0 {
                format!("{:<6}{:<10.4}", hour.hour, hour.probability)
            } else {
                format!("{:<6}{:<10}", "", "")
            };
            let value = match &event.band {
                Some(band) => format!("{} ({band})", event.value),
                None => event.value.clone(),
            };
            let _ = writeln!(
                out,
                "{head}{:<12}{:<34}{value}",
                format!("{}/{}", event.rank, event.out_of),
                event.label
            );
        }
    }
    out
}

/// Everything the evaluate stage measures, ready for rendering.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub censoring: CensoringMode,
    pub bootstrap_samples: usize,
    pub confidence_level: f64,
    pub pooled_final: (f64, (f64, f64)),
    pub per_fold_final: Vec<(usize, f64, (f64, f64))>,
    pub dynamic: DynamicAuroc,
    pub roc: RocResult,
    /// Named reliability curves (model and severity-score baselines).
    pub calibrations: Vec<(String, Vec<CalibrationPoint>)>,
    /// Named severity-score AUROCs with intervals.
    pub baseline_aurocs: Vec<(String, f64, (f64, f64))>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#eval-report v1");
        let _ = writeln!(
            out,
            "censoring = {}",
            match self.censoring {
                CensoringMode::CarryForward => "carry-forward",
                CensoringMode::ObservedOnly => "observed-only",
            }
        );
        let _ = writeln!(out, "bootstrap_samples = {}", self.bootstrap_samples);
        let _ = writeln!(out, "confidence_level = {}", self.confidence_level);
        let (point, (lo, hi)) = self.pooled_final;
        let _ = writeln!(
            out,
            "final_auroc_pooled = {point:.4} (ci {lo:.4}-{hi:.4})"
        );
        for (fold, auroc, (lo, hi)) in &self.per_fold_final {
            let _ = writeln!(out, "final_auroc_fold_{fold} = {auroc:.4} (ci {lo:.4}-{hi:.4})");
        }
        for (name, auroc, (lo, hi)) in &self.baseline_aurocs {
            let _ = writeln!(out, "baseline_auroc_{name} = {auroc:.4} (ci {lo:.4}-{hi:.4})");
        }
        let _ = writeln!(out, "single_class_hours = {}", self.dynamic.single_class_hours);
        let _ = writeln!(out, "");
        let _ = writeln!(out, "hour\tn\tauroc\tci_lo\tci_hi");
        for h in &self.dynamic.hours {
            match (h.auroc, h.ci) {
                (Some(a), Some((lo, hi))) => {
                    let _ = writeln!(out, "{}\t{}\t{a:.4}\t{lo:.4}\t{hi:.4}", h.hour, h.n);
                }
                (Some(a), None) => {
                    let _ = writeln!(out, "{}\t{}\t{a:.4}\t-\t-", h.hour, h.n);
                }
                _ => {
                    let _ = writeln!(out, "{}\t{}\t-\t-\t-", h.hour, h.n);
                }
            }
        }
        for (name, points) in &self.calibrations {
            let _ = writeln!(out, "");
            let _ = writeln!(out, "calibration {name}: mean_predicted\tobserved_rate\tcount");
            for p in points {
                let _ = writeln!(
                    out,
                    "{:.4}\t{:.4}\t{}",
                    p.mean_predicted, p.observed_rate, p.count
                );
            }
        }
        out
    }
}

/// Plot-ready TSV of ROC points.
pub fn render_roc_tsv(roc: &RocResult) -> String {
    let mut out = String::from("fpr\ttpr\n");
    for (fpr, tpr) in &roc.points {
        let _ = writeln!(out, "{fpr:.6}\t{tpr:.6}");
    }
    out
}

/// Plot-ready TSV of the dynamic AUROC curve.
pub fn render_dynamic_tsv(dynamic: &DynamicAuroc) -> String {
    let mut out = String::from("hour\tn\tauroc\tci_lo\tci_hi\n");
    for h in &dynamic.hours {
        let auroc = h.auroc.map_or("-".to_string(), |a| format!("{a:.6}"));
        let (lo, hi) = h
            .ci
            .map_or(("-".to_string(), "-".to_string()), |(lo, hi)| {
                (format!("{lo:.6}"), format!("{hi:.6}"))
            });
        let _ = writeln!(out, "{}\t{}\t{auroc}\t{lo}\t{hi}", h.hour, h.n);
    }
    out
}

/// Plot-ready TSV of one calibration curve.
pub fn render_calibration_tsv(points: &[CalibrationPoint]) -> String {
    let mut out = String::from("mean_predicted\tobserved_rate\tcount\n");
    for p in points {
        let _ = writeln!(out, "{:.6}\t{:.6}\t{}", p.mean_predicted, p.observed_rate, p.count);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) pairwise enumeration oracle for AUROC.
    fn auroc_pairwise_oracle(scores: &[f64], died: &[bool]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &di) in died.iter().enumerate() {
            if !di {
                continue;
            }
            for (j, &dj) in died.iter().enumerate() {
                if dj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_trivial_cases() {
        let died = vec![true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &died).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &died).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &died).unwrap(), 0.0);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle_with_ties() {
        let scores = vec![0.3, 0.5, 0.5, 0.2, 0.9, 0.5];
        let died = vec![false, true, false, false, true, true];
        let fast = auroc(&scores, &died).unwrap();
        let slow = auroc_pairwise_oracle(&scores, &died);
        assert!((fast - slow).abs() < 1e-15, "{fast} vs {slow}");
    }

    #[test]
    fn auroc_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..300 {
            let n = rng.gen_range(2..50);
            let mut scores = Vec::with_capacity(n);
            let mut died = Vec::with_capacity(n);
            for _ in 0..n {
                // coarse grid forces plenty of ties
                scores.push(f64::from(rng.gen_range(0..8)) / 7.0);
                died.push(rng.gen_bool(0.4));
            }
            if died.iter().all(|&d| d) || died.iter().all(|&d| !d) {
                continue;
            }
            let fast = auroc(&scores, &died).unwrap();
            let slow = auroc_pairwise_oracle(&scores, &died);
            assert!((fast - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(4..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let died: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if died.iter().all(|&d| d) || died.iter().all(|&d| !d) {
                continue;
            }
            let base = auroc(&scores, &died).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 11.0).collect();
            assert_eq!(auroc(&exp, &died).unwrap(), base);
            assert_eq!(auroc(&affine, &died).unwrap(), base);
        }
    }

    #[test]
    fn roc_trapezoid_equals_mann_whitney() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let n = rng.gen_range(2..60);
            let mut scores = Vec::with_capacity(n);
            let mut died = Vec::with_capacity(n);
            for _ in 0..n {
                scores.push(f64::from(rng.gen_range(0..10)) / 9.0);
                died.push(rng.gen_bool(0.3));
            }
            if died.iter().all(|&d| d) || died.iter().all(|&d| !d) {
                continue;
            }
            let roc = roc_points(&scores, &died).unwrap();
            let mw = auroc(&scores, &died).unwrap();
            assert!((roc.auroc - mw).abs() < 1e-12, "{} vs {mw}", roc.auroc);
            // endpoints and monotonicity
            assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
            assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
            for w in roc.points.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_collapses_when_separated() {
        let scores = vec![0.9, 0.8, 0.85, 0.1, 0.2, 0.15];
        let died = vec![true, true, true, false, false, false];
        let a = bootstrap_ci(&scores, &died, 500, 0.95, 42).unwrap();
        let b = bootstrap_ci(&scores, &died, 500, 0.95, 42).unwrap();
        assert_eq!(a, b);
        // every two-class resample of perfectly separated scores has AUROC 1
        assert_eq!((a.lo, a.hi), (1.0, 1.0));
        assert!(a.degenerate_redraws > 0 || a.lo == 1.0);
    }

    #[test]
    fn bootstrap_widens_with_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..80).map(|_| rng.gen_range(0.0..1.0)).collect();
        let died: Vec<bool> = (0..80).map(|i| i % 4 == 0).collect();
        let narrow = bootstrap_ci(&scores, &died, 400, 0.90, 9).unwrap();
        let wide = bootstrap_ci(&scores, &died, 400, 0.99, 9).unwrap();
        assert!(wide.lo <= narrow.lo);
        assert!(wide.hi >= narrow.hi);
    }

    fn stay(died: bool, probs: &[f64]) -> StayScores {
        StayScores {
            died,
            probs: probs.to_vec(),
        }
    }

    #[test]
    fn dynamic_constant_trajectories_are_flat() {
        let stays = vec![
            stay(true, &[0.8, 0.8, 0.8]),
            stay(false, &[0.2, 0.2, 0.2]),
            stay(true, &[0.6, 0.6, 0.6]),
            stay(false, &[0.4, 0.4, 0.4]),
        ];
        let d = dynamic_auroc(&stays, 3, CensoringMode::ObservedOnly, None).unwrap();
        let values: Vec<f64> = d.hours.iter().map(|h| h.auroc.unwrap()).collect();
        assert_eq!(values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn dynamic_censoring_modes_differ_for_short_stays() {
        let stays = vec![
            stay(true, &[0.15]),         // observed one hour only
            stay(false, &[0.1, 0.2]),
            stay(true, &[0.7, 0.8]),
            stay(false, &[0.3, 0.1]),
        ];
        let observed = dynamic_auroc(&stays, 2, CensoringMode::ObservedOnly, None).unwrap();
        let carried = dynamic_auroc(&stays, 2, CensoringMode::CarryForward, None).unwrap();
        assert_eq!(observed.hours[1].n, 3);
        assert_eq!(carried.hours[1].n, 4);
        assert_ne!(observed.hours[1].auroc, carried.hours[1].auroc);
    }

    #[test]
    fn dynamic_single_class_hour_is_omitted() {
        let stays = vec![stay(true, &[0.9, 0.8]), stay(false, &[0.1])];
        let d = dynamic_auroc(&stays, 2, CensoringMode::ObservedOnly, None).unwrap();
        assert!(d.hours[0].auroc.is_some());
        assert!(d.hours[1].auroc.is_none());
        assert_eq!(d.single_class_hours, 1);
    }

    #[test]
    fn dynamic_hour_metric_ignores_future_mutations() {
        let base = vec![
            stay(true, &[0.6, 0.7, 0.9]),
            stay(false, &[0.5, 0.3, 0.2]),
            stay(true, &[0.4, 0.8, 0.7]),
            stay(false, &[0.45, 0.2, 0.3]),
        ];
        let mut mutated = base.clone();
        for s in &mut mutated {
            s.probs[2] = 1.0 - s.probs[2];
        }
        for mode in [CensoringMode::CarryForward, CensoringMode::ObservedOnly] {
            let a = dynamic_auroc(&base, 3, mode, None).unwrap();
            let b = dynamic_auroc(&mutated, 3, mode, None).unwrap();
            for t in 0..2 {
                assert_eq!(a.hours[t].auroc, b.hours[t].auroc, "hour {t}");
            }
        }
    }

    #[test]
    fn pooled_auroc_averages_folds() {
        let died = vec![true, false, true, false];
        let fold_a = vec![0.9, 0.1, 0.8, 0.2]; // auroc 1.0
        let fold_b = vec![0.1, 0.9, 0.2, 0.8]; // auroc 0.0
        let (point, _, _) = pooled_final_auroc(&[fold_a, fold_b], &died, 50, 0.95, 1).unwrap();
        assert_eq!(point, 0.5);
    }

    #[test]
    fn calibration_curve_basics() {
        assert!(calibration_curve(&[0.5], &[true], 1).is_err());

        // all probabilities 0.5 with a 13.2% base rate: one point
        let n = 1000;
        let probs = vec![0.5; n];
        let died: Vec<bool> = (0..n).map(|i| i % 1000 < 132).collect();
        let points = calibration_curve(&probs, &died, 10).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points[0].mean_predicted, 0.5);
        assert!((points[0].observed_rate - 0.132).abs() < 1e-12);

        // labels all negative: observed rate zero in every occupied bin
        let probs = vec![0.1, 0.4, 0.8];
        let died = vec![false, false, false];
        for p in calibration_curve(&probs, &died, 5).unwrap() {
            assert_eq!(p.observed_rate, 0.0);
        }
    }

    #[test]
    fn calibrated_probabilities_sit_near_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mut probs = Vec::with_capacity(n);
        let mut died = Vec::with_capacity(n);
        for _ in 0..n {
            let p: f64 = rng.gen_range(0.0..1.0);
            probs.push(p);
            died.push(rng.gen::<f64>() < p);
        }
        for point in calibration_curve(&probs, &died, 10).unwrap() {
            // binomial noise at ~2,000 per bin is about 0.011 at worst
            assert!(
                (point.observed_rate - point.mean_predicted).abs() < 0.04,
                "{point:?}"
            );
        }
    }
}
