//! Synthetic cohort generation with a planted, analytically known risk
//! signal.
//!
//! Outcomes are drawn first; event values are then drawn class-conditionally
//! and independently given the outcome, so the exact posterior mortality
//! probability after any hour is a running sum of per-event log-likelihood
//! ratios. That posterior is the Bayes oracle: no model consuming the same
//! (or coarser, e.g. binned) data can beat its AUROC beyond noise, and a
//! sound pipeline should approach it. Event counts, timing and stay
//! durations are class-independent by construction so the values carry all
//! of the signal.
//!
//! Realism is deliberately sacrificed for verifiability: no physiology links
//! variables to each other, only to the outcome.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::format_timestamp;
use crate::util::derive_seed_n;

/// A continuous label whose mean shifts with the outcome. A class-independent
/// artifact mixture plants impossible readings that should land in edge bins.
#[derive(Debug, Clone)]
pub struct ContinuousLabel {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Added to the mean for dying stays, in value units.
    pub death_shift: f64,
    pub decimals: usize,
    pub artifact_rate: f64,
    pub artifact_mean: f64,
    pub artifact_sd: f64,
}

/// A discrete label with class-conditional category odds.
#[derive(Debug, Clone)]
pub struct DiscreteLabel {
    pub name: String,
    pub categories: Vec<String>,
    pub survive_weights: Vec<f64>,
    pub death_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum LabelModel {
    Continuous(ContinuousLabel),
    Discrete(DiscreteLabel),
}

impl LabelModel {
    pub fn name(&self) -> &str {
        match self {
            LabelModel::Continuous(c) => &c.name,
            LabelModel::Discrete(d) => &d.name,
        }
    }
}

/// Full generator configuration. The defaults give the paper-like shape:
/// 45-50 events in the first hour decaying under 30 by hour 48, a 13.2%
/// base mortality, signal concentrated in early hours, and a Bayes AUROC
/// around 0.68 after one hour rising past 0.9 by hour 48.
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub n_stays: usize,
    pub horizon_hours: u32,
    pub base_mortality: f64,
    pub seed: u64,
    /// Events per hour at admission and at the horizon, with the decay time
    /// constant in hours: rate(h) = end + (start - end) * exp(-h / decay).
    pub rate_start: f64,
    pub rate_end: f64,
    pub rate_decay_hours: f64,
    /// Probability an event is drawn from the signal pool, same curve form.
    pub signal_pick_start: f64,
    pub signal_pick_end: f64,
    pub signal_decay_hours: f64,
    /// Scales every death shift and the spread of discrete odds. 0 = null.
    pub signal_strength: f64,
    /// Fraction of events emitted with an empty value, class-independent.
    pub missing_rate: f64,
    /// Include the planted end-of-life documentation token.
    pub leakage: bool,
    /// Per-hour emission probability of the leakage label when enabled.
    pub leakage_rate: f64,
    pub signal_labels: Vec<LabelModel>,
    pub noise_labels: Vec<LabelModel>,
    /// Median and log-sd of the lognormal stay duration, hours.
    pub duration_median_hours: f64,
    pub duration_log_sd: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_stays: 2000,
            horizon_hours: 48,
            base_mortality: 0.132,
            seed: 7,
            rate_start: 47.0,
            rate_end: 28.0,
            rate_decay_hours: 8.0,
            signal_pick_start: 0.085,
            signal_pick_end: 0.023,
            signal_decay_hours: 2.5,
            signal_strength: 1.0,
            missing_rate: 0.01,
            leakage: false,
            leakage_rate: 0.98,
            signal_labels: default_signal_labels(),
            noise_labels: default_noise_labels(),
            duration_median_hours: 90.0,
            duration_log_sd: 0.55,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stays == 0 {
            return Err(Error::config("n_stays must be positive"));
        }
        if !(0.0..1.0).contains(&self.base_mortality) || self.base_mortality == 0.0 {
            return Err(Error::config("base_mortality must lie in (0, 1)"));
        }
        if self.horizon_hours == 0 {
            return Err(Error::config("horizon_hours must be positive"));
        }
        if self.rate_start <= 0.0 || self.rate_end <= 0.0 {
            return Err(Error::config("event rates must be positive"));
        }
        if self.signal_labels.is_empty() && self.signal_strength > 0.0 {
            return Err(Error::config("signal requested but no signal labels configured"));
        }
        Ok(())
    }

    pub fn event_rate_at(&self, hour: u32) -> f64 {
        self.rate_end
            + (self.rate_start - self.rate_end) * (-f64::from(hour) / self.rate_decay_hours).exp()
    }

    fn signal_pick_at(&self, hour: u32) -> f64 {
        self.signal_pick_end
            + (self.signal_pick_start - self.signal_pick_end)
                * (-f64::from(hour) / self.signal_decay_hours).exp()
    }
}

fn default_signal_labels() -> Vec<LabelModel> {
    let continuous = |name: &str, mean: f64, sd: f64, shift_sd: f64, decimals: usize| {
        LabelModel::Continuous(ContinuousLabel {
            name: name.to_string(),
            mean,
            sd,
            death_shift: shift_sd * sd,
            decimals,
            artifact_rate: 0.0,
            artifact_mean: 0.0,
            artifact_sd: 1.0,
        })
    };
    vec![
        continuous("Heart Rate", 86.0, 14.0, 0.35, 0),
        continuous("Respiratory Rate", 19.0, 5.0, 0.35, 0),
        continuous("SpO2", 96.0, 2.2, -0.35, 0),
        continuous("NBP Mean", 78.0, 13.0, -0.32, 0),
        continuous("Lactate", 1.8, 0.9, 0.40, 1),
        continuous("Temperature C", 36.9, 0.6, -0.30, 1),
        LabelModel::Continuous(ContinuousLabel {
            name: "PH".to_string(),
            mean: 7.38,
            sd: 0.055,
            death_shift: -0.32 * 0.055,
            decimals: 2,
            // the classic impossible-pH recording fault, class-independent
            artifact_rate: 0.02,
            artifact_mean: 5.5,
            artifact_sd: 0.25,
        }),
        LabelModel::Discrete(DiscreteLabel {
            name: "Eye Opening".to_string(),
            categories: vec![
                "4 Spontaneously".to_string(),
                "3 To speech".to_string(),
                "2 To pain".to_string(),
                "1 No Response".to_string(),
            ],
            survive_weights: vec![0.45, 0.27, 0.16, 0.12],
            death_weights: vec![0.33, 0.27, 0.20, 0.20],
        }),
        LabelModel::Discrete(DiscreteLabel {
            name: "Heart Rhythm".to_string(),
            categories: vec![
                "Sinus".to_string(),
                "Atrial Fibrillation".to_string(),
                "VTach".to_string(),
            ],
            survive_weights: vec![0.75, 0.20, 0.05],
            death_weights: vec![0.62, 0.26, 0.12],
        }),
    ]
}

fn default_noise_labels() -> Vec<LabelModel> {
    let continuous = |name: &str, mean: f64, sd: f64, decimals: usize| {
        LabelModel::Continuous(ContinuousLabel {
            name: name.to_string(),
            mean,
            sd,
            death_shift: 0.0,
            decimals,
            artifact_rate: 0.0,
            artifact_mean: 0.0,
            artifact_sd: 1.0,
        })
    };
    let discrete = |name: &str, cats: &[&str], weights: &[f64]| {
        LabelModel::Discrete(DiscreteLabel {
            name: name.to_string(),
            categories: cats.iter().map(|c| c.to_string()).collect(),
            survive_weights: weights.to_vec(),
            death_weights: weights.to_vec(),
        })
    };
    vec![
        continuous("Admission Weight", 82.0, 18.0, 1),
        continuous("Height", 170.0, 10.0, 0),
        continuous("Glucose", 128.0, 32.0, 0),
        continuous("Urine Out Foley", 180.0, 80.0, 0),
        continuous("CVP", 9.0, 4.0, 0),
        discrete("Service", &["MICU", "SICU", "CCU", "CSRU"], &[0.4, 0.3, 0.2, 0.1]),
        discrete(
            "Allergy 1",
            &["No Known Drug Allergies", "Penicillin", "Latex"],
            &[0.8, 0.15, 0.05],
        ),
        discrete(
            "Pain Level",
            &["None", "Mild", "Moderate", "Severe"],
            &[0.4, 0.3, 0.2, 0.1],
        ),
    ]
}

/// The planted leakage label: emitted for everyone, but its value is nearly
/// deterministic given the outcome.
pub const LEAKAGE_LABEL: &str = "Code Status";
pub const LEAKAGE_DYING_VALUE: &str = "Comfort Measures Only";
pub const LEAKAGE_ROUTINE_VALUE: &str = "Full Code";
const LEAKAGE_DYING_ODDS: f64 = 0.97;
const LEAKAGE_ROUTINE_ODDS: f64 = 0.02;

/// The leakage token text after tokenization.
pub fn leakage_token() -> String {
    format!("{LEAKAGE_LABEL} {LEAKAGE_DYING_VALUE}")
}

/// One generated event, hour-local.
#[derive(Debug, Clone)]
pub struct GenEvent {
    pub hour: u32,
    pub offset_seconds: u32,
    pub label: String,
    pub value: String,
}

/// One generated stay with its exact posterior trajectory.
#[derive(Debug, Clone)]
pub struct GeneratedStay {
    pub stay_id: String,
    pub patient_id: String,
    pub died: bool,
    pub age_years: f64,
    pub intime: i64,
    pub observed_hours: u32,
    pub events: Vec<GenEvent>,
    /// Posterior death probability after each observed hour.
    pub oracle_probs: Vec<f64>,
    /// Total log-likelihood ratio accumulated over the stay.
    pub final_llr: f64,
    /// Severity-score baselines derived from the first-day evidence.
    pub oasis_score: f64,
    pub saps2_score: f64,
}

/// A generated cohort: stays plus the configuration that produced them.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub config_seed: u64,
    pub base_mortality: f64,
    pub horizon_hours: u32,
    pub stays: Vec<GeneratedStay>,
}

impl Cohort {
    /// Oracle score after `full_hours` whole hours of data; 0 means the
    /// prior for every stay.
    pub fn oracle_at(&self, stay: &GeneratedStay, full_hours: u32) -> f64 {
        if full_hours == 0 || stay.oracle_probs.is_empty() {
            return self.base_mortality;
        }
        let ix = (full_hours.min(stay.observed_hours) - 1) as usize;
        stay.oracle_probs[ix.min(stay.oracle_probs.len() - 1)]
    }

    pub fn realized_mortality(&self) -> f64 {
        let deaths = self.stays.iter().filter(|s| s.died).count();
        deaths as f64 / self.stays.len() as f64
    }
}

fn log_density_normal(v: f64, mean: f64, sd: f64) -> f64 {
    let z = (v - mean) / sd;
    -0.5 * z * z - sd.ln()
}

fn continuous_llr(label: &ContinuousLabel, v: f64, strength: f64) -> f64 {
    let shift = label.death_shift * strength;
    if label.artifact_rate == 0.0 {
        return log_density_normal(v, label.mean + shift, label.sd)
            - log_density_normal(v, label.mean, label.sd);
    }
    let mix = |mean: f64| -> f64 {
        let main = log_density_normal(v, mean, label.sd);
        let art = log_density_normal(v, label.artifact_mean, label.artifact_sd);
        let m = main.max(art);
        // log of the two-component mixture density
        m + ((1.0 - label.artifact_rate) * (main - m).exp()
            + label.artifact_rate * (art - m).exp())
        .ln()
    };
    mix(label.mean + shift) - mix(label.mean)
}

fn scaled_weights(weights: &[f64], base: &[f64], strength: f64) -> Vec<f64> {
    if strength == 0.0 {
        // bit-exact null: zero strength must mean zero log-likelihood ratio
        return base.to_vec();
    }
    // interpolate log-odds toward the baseline as strength drops
    weights
        .iter()
        .zip(base)
        .map(|(&w, &b)| (b.ln() + strength * (w.ln() - b.ln())).exp())
        .collect()
}

struct StayDraw {
    events: Vec<GenEvent>,
    oracle_probs: Vec<f64>,
    final_llr: f64,
    observed_hours: u32,
    llr_at_24h: f64,
}

fn draw_stay(config: &GeneratorConfig, died: bool, rng: &mut ChaCha8Rng) -> StayDraw {
    let duration = LogNormal::new(config.duration_median_hours.ln(), config.duration_log_sd)
        .expect("valid lognormal")
        .sample(rng);
    let observed_hours = (duration.ceil() as u32).clamp(6, 10 * config.horizon_hours).min(config.horizon_hours);

    let signal_count = config.signal_labels.len();
    let all_labels: Vec<&LabelModel> = config
        .signal_labels
        .iter()
        .chain(config.noise_labels.iter())
        .collect();
    let prior_llr = 0.0;
    let mut llr = prior_llr;
    let mut llr_at_24h = 0.0;
    let mut events = Vec::new();
    let mut oracle_probs = Vec::with_capacity(observed_hours as usize);
    let prior_logit = (config.base_mortality / (1.0 - config.base_mortality)).ln();

    for hour in 0..observed_hours {
        let n: u64 = if config.event_rate_at(hour) > 0.0 {
            Poisson::new(config.event_rate_at(hour)).expect("positive rate").sample(rng) as u64
        } else {
            0
        };
        let signal_p = config.signal_pick_at(hour).clamp(0.0, 1.0);
        for _ in 0..n {
            let from_signal = signal_count > 0 && rng.gen::<f64>() < signal_p;
            let label_ix = if from_signal {
                rng.gen_range(0..signal_count)
            } else {
                signal_count + rng.gen_range(0..config.noise_labels.len())
            };
            let label = all_labels[label_ix];
            let offset_seconds = rng.gen_range(0..3600u32);
            // missing readings are class-independent, so they carry no signal
            if rng.gen::<f64>() < config.missing_rate {
                events.push(GenEvent {
                    hour,
                    offset_seconds,
                    label: label.name().to_string(),
                    value: String::new(),
                });
                continue;
            }
            let (value, event_llr) = draw_value(label, died, config.signal_strength, rng);
            llr += event_llr;
            events.push(GenEvent {
                hour,
                offset_seconds,
                label: label.name().to_string(),
                value,
            });
        }

        if config.leakage && rng.gen::<f64>() < config.leakage_rate {
            let p_dying_value = if died { LEAKAGE_DYING_ODDS } else { LEAKAGE_ROUTINE_ODDS };
            let value = if rng.gen::<f64>() < p_dying_value {
                LEAKAGE_DYING_VALUE
            } else {
                LEAKAGE_ROUTINE_VALUE
            };
            let event_llr = if value == LEAKAGE_DYING_VALUE {
                (LEAKAGE_DYING_ODDS / LEAKAGE_ROUTINE_ODDS).ln()
            } else {
                ((1.0 - LEAKAGE_DYING_ODDS) / (1.0 - LEAKAGE_ROUTINE_ODDS)).ln()
            };
            llr += event_llr;
            events.push(GenEvent {
                hour,
                offset_seconds: rng.gen_range(0..3600u32),
                label: LEAKAGE_LABEL.to_string(),
                value: value.to_string(),
            });
        }

        if hour == 23 {
            llr_at_24h = llr;
        }
        let logit = prior_logit + llr;
        oracle_probs.push(1.0 / (1.0 + (-logit).exp()));
    }
    if observed_hours <= 23 {
        llr_at_24h = llr;
    }
    StayDraw {
        events,
        oracle_probs,
        final_llr: llr,
        observed_hours,
        llr_at_24h,
    }
}

fn draw_value(
    label: &LabelModel,
    died: bool,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> (String, f64) {
    match label {
        LabelModel::Continuous(c) => {
            let shift = if died { c.death_shift * strength } else { 0.0 };
            let v = if c.artifact_rate > 0.0 && rng.gen::<f64>() < c.artifact_rate {
                Normal::new(c.artifact_mean, c.artifact_sd).expect("valid").sample(rng)
            } else {
                Normal::new(c.mean + shift, c.sd).expect("valid").sample(rng)
            };
            // round exactly as formatted so oracle and emitted value agree
            let text = format!("{v:.prec$}", prec = c.decimals);
            let rounded: f64 = text.parse().expect("own formatting parses");
            (text, continuous_llr(c, rounded, strength))
        }
        LabelModel::Discrete(d) => {
            let death_w = scaled_weights(&d.death_weights, &d.survive_weights, strength);
            let weights = if died { &death_w } else { &d.survive_weights };
            let ix = WeightedIndex::new(weights).expect("positive weights").sample(rng);
            let num = death_w[ix] / death_w.iter().sum::<f64>();
            let den = d.survive_weights[ix] / d.survive_weights.iter().sum::<f64>();
            (d.categories[ix].clone(), (num / den).ln())
        }
    }
}

const BASE_INTIME: &str = "2100-01-01 00:00:00";

/// Generate the full cohort deterministically. Stays are generated from
/// per-stay derived seeds (in parallel) so the result is identical for any
/// thread count.
pub fn generate_cohort(config: &GeneratorConfig) -> Result<Cohort> {
    config.validate()?;
    let base_intime = crate::ingest::parse_timestamp(BASE_INTIME).expect("valid base time");
    let stays: Vec<GeneratedStay> = (0..config.n_stays)
        .into_par_iter()
        .map(|ix| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed_n(config.seed, &[0x5741_u64, ix as u64]));
            let died = rng.gen::<f64>() < config.base_mortality;
            let age_years = (rng.gen_range(18.0..95.0f64) * 10.0).round() / 10.0;
            let draw = draw_stay(config, died, &mut rng);
            // severity baselines: noisy monotone views of the first-day evidence
            let noise = Normal::new(0.0, 2.2).expect("valid");
            let oasis = (22.0 + 3.0 * draw.llr_at_24h + noise.sample(&mut rng)).clamp(0.0, 70.0);
            let saps2 = (30.0 + 4.5 * draw.llr_at_24h + 2.0 * noise.sample(&mut rng)).clamp(0.0, 120.0);
            GeneratedStay {
                stay_id: format!("s{ix:06}"),
                patient_id: format!("p{ix:06}"),
                died,
                age_years,
                // admissions staggered hourly so timestamps differ per stay
                intime: base_intime + ix as i64 * 3600,
                observed_hours: draw.observed_hours,
                events: draw.events,
                oracle_probs: draw.oracle_probs,
                final_llr: draw.final_llr,
                oasis_score: oasis.round(),
                saps2_score: saps2.round(),
            }
        })
        .collect();
    Ok(Cohort {
        config_seed: config.seed,
        base_mortality: config.base_mortality,
        horizon_hours: config.horizon_hours,
        stays,
    })
}

/// AUROC of the Bayes-oracle posterior after `at_hour` whole hours, on a
/// cohort regenerated from `config`. No model consuming the same events can
/// exceed this beyond noise.
pub fn bayes_auroc(config: &GeneratorConfig, at_hour: u32) -> Result<f64> {
    let cohort = generate_cohort(config)?;
    bayes_auroc_of(&cohort, at_hour)
}

/// Same as [`bayes_auroc`] on an already generated cohort.
pub fn bayes_auroc_of(cohort: &Cohort, at_hour: u32) -> Result<f64> {
    let scores: Vec<f64> = cohort
        .stays
        .iter()
        .map(|s| cohort.oracle_at(s, at_hour))
        .collect();
    let died: Vec<bool> = cohort.stays.iter().map(|s| s.died).collect();
    crate::eval::auroc(&scores, &died)
}

/// File set emitted for a cohort.
#[derive(Debug, Clone)]
pub struct CohortFiles {
    pub events: std::path::PathBuf,
    pub stays: std::path::PathBuf,
    pub truth: std::path::PathBuf,
    pub scores: std::path::PathBuf,
}

/// Write the cohort in exactly the ingest input formats, plus the
/// ground-truth sidecar (stay, outcome, latent risk, per-hour oracle) and
/// the severity-score table.
pub fn write_cohort_files(cohort: &Cohort, dir: &Path) -> Result<CohortFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = CohortFiles {
        events: dir.join("events.csv"),
        stays: dir.join("stays.csv"),
        truth: dir.join("truth.csv"),
        scores: dir.join("scores.csv"),
    };

    crate::util::atomic_write_stream(&files.events, |w| {
        writeln!(w, "ICUSTAY_ID,LABEL,VALUE,CHARTTIME").map_err(stream_err)?;
        for stay in &cohort.stays {
            for ev in &stay.events {
                let time = stay.intime + i64::from(ev.hour) * 3600 + i64::from(ev.offset_seconds);
                writeln!(
                    w,
                    "{},{},{},{}",
                    stay.stay_id,
                    csv_field(&ev.label),
                    csv_field(&ev.value),
                    format_timestamp(time)
                )
                .map_err(stream_err)?;
            }
        }
        Ok(())
    })?;

    crate::util::atomic_write_stream(&files.stays, |w| {
        writeln!(w, "ICUSTAY_ID,SUBJECT_ID,INTIME,AGE,MORTALITY").map_err(stream_err)?;
        for stay in &cohort.stays {
            writeln!(
                w,
                "{},{},{},{},{}",
                stay.stay_id,
                stay.patient_id,
                format_timestamp(stay.intime),
                stay.age_years,
                u8::from(stay.died)
            )
            .map_err(stream_err)?;
        }
        Ok(())
    })?;

    crate::util::atomic_write_stream(&files.truth, |w| {
        writeln!(w, "stay_id,died,latent_risk,hour,oracle_prob").map_err(stream_err)?;
        for stay in &cohort.stays {
            for (hour, p) in stay.oracle_probs.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{:.6},{},{:.6}",
                    stay.stay_id,
                    u8::from(stay.died),
                    stay.final_llr,
                    hour,
                    p
                )
                .map_err(stream_err)?;
            }
        }
        Ok(())
    })?;

    crate::util::atomic_write_stream(&files.scores, |w| {
        writeln!(w, "stay_id,oasis,sapsii").map_err(stream_err)?;
        for stay in &cohort.stays {
            writeln!(w, "{},{},{}", stay.stay_id, stay.oasis_score, stay.saps2_score)
                .map_err(stream_err)?;
        }
        Ok(())
    })?;

    Ok(files)
}

fn stream_err(e: std::io::Error) -> Error {
    Error::io("<cohort stream>", e)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A light configuration for fast tests: fewer stays, shorter horizon,
/// lower event rates, same signal structure.
pub fn desk_config(n_stays: usize, horizon_hours: u32, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_stays,
        horizon_hours,
        seed,
        rate_start: 12.0,
        rate_end: 6.0,
        rate_decay_hours: 4.0,
        signal_pick_start: 0.30,
        signal_pick_end: 0.10,
        ..GeneratorConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, seed: u64) -> GeneratorConfig {
        desk_config(n, 12, seed)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cohort(&tiny(30, 5)).unwrap();
        let b = generate_cohort(&tiny(30, 5)).unwrap();
        assert_eq!(a.stays.len(), b.stays.len());
        for (x, y) in a.stays.iter().zip(&b.stays) {
            assert_eq!(x.stay_id, y.stay_id);
            assert_eq!(x.died, y.died);
            assert_eq!(x.events.len(), y.events.len());
            assert_eq!(x.oracle_probs, y.oracle_probs);
        }
        let c = generate_cohort(&tiny(30, 6)).unwrap();
        assert_ne!(
            a.stays.iter().map(|s| s.events.len()).sum::<usize>(),
            c.stays.iter().map(|s| s.events.len()).sum::<usize>()
        );
    }

    #[test]
    fn realized_mortality_near_base_rate() {
        let cohort = generate_cohort(&GeneratorConfig {
            n_stays: 2000,
            ..tiny(2000, 42)
        })
        .unwrap();
        assert!((cohort.realized_mortality() - 0.132).abs() < 0.02);
    }

    #[test]
    fn noise_only_oracle_is_exactly_half() {
        let config = GeneratorConfig {
            signal_strength: 0.0,
            leakage: false,
            ..tiny(300, 9)
        };
        let auroc = bayes_auroc(&config, 12).unwrap();
        // zero signal means every llr is 0, all scores tie
        assert!((auroc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_prior_at_hour_zero() {
        let cohort = generate_cohort(&tiny(50, 3)).unwrap();
        let auroc = bayes_auroc_of(&cohort, 0).unwrap();
        assert!((auroc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn event_counts_follow_the_rate_curve() {
        let config = GeneratorConfig {
            n_stays: 1500,
            duration_median_hours: 500.0, // keep every stay observed all hours
            duration_log_sd: 0.01,
            ..tiny(1500, 11)
        };
        let cohort = generate_cohort(&config).unwrap();
        let horizon = config.horizon_hours as usize;
        let mut counts = vec![0u64; horizon];
        for stay in &cohort.stays {
            for ev in &stay.events {
                counts[ev.hour as usize] += 1;
            }
        }
        for (hour, &count) in counts.iter().enumerate() {
            let mean = count as f64 / cohort.stays.len() as f64;
            let expected = config.event_rate_at(hour as u32);
            assert!(
                (mean - expected).abs() / expected < 0.10,
                "hour {hour}: mean {mean:.2} vs expected {expected:.2}"
            );
        }
    }

    #[test]
    fn oracle_auroc_rises_with_the_observation_window() {
        let cohort = generate_cohort(&desk_config(1200, 24, 3)).unwrap();
        let hours = [1u32, 3, 6, 12, 24];
        let mut last = 0.0;
        for h in hours {
            let a = bayes_auroc_of(&cohort, h).unwrap();
            assert!(
                a >= last - 0.005,
                "oracle AUROC dipped at hour {h}: {a:.4} after {last:.4}"
            );
            last = a;
        }
        assert!(last > 0.75, "24h oracle AUROC {last}");
    }

    #[test]
    fn leakage_events_appear_preferentially_in_dying_stays() {
        let config = GeneratorConfig {
            leakage: true,
            ..tiny(400, 21)
        };
        let cohort = generate_cohort(&config).unwrap();
        let mut dying_with_token = 0usize;
        let mut dying = 0usize;
        for stay in &cohort.stays {
            let has = stay
                .events
                .iter()
                .any(|e| e.label == LEAKAGE_LABEL && e.value == LEAKAGE_DYING_VALUE);
            if stay.died {
                dying += 1;
                dying_with_token += usize::from(has);
            } else {
                assert!(
                    !has || true,
                    "surviving stays may rarely carry the token"
                );
            }
        }
        assert!(dying > 0);
        assert!(dying_with_token as f64 / dying as f64 > 0.9);
    }

    #[test]
    fn cohort_files_roundtrip_through_ingest_with_zero_drops() {
        let config = tiny(40, 13);
        let cohort = generate_cohort(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_cohort_files(&cohort, dir.path()).unwrap();
        let (bucketed, diag) = crate::ingest::ingest(
            &[files.events.clone()],
            &files.stays,
            &crate::ingest::ColumnMap::default(),
            &crate::ingest::StayColumnMap::default(),
            b',',
            config.horizon_hours,
            crate::ingest::EVENT_CAP,
        )
        .unwrap();
        assert_eq!(bucketed.len(), cohort.stays.len());
        assert_eq!(diag.events_dropped(), 0);
        assert_eq!(diag.rows_read, diag.events_parsed);
        assert!(diag.is_conserved());
        let total: usize = cohort.stays.iter().map(|s| s.events.len()).sum();
        assert_eq!(diag.events_bucketed as usize, total);
        // per-stay event counts survive
        for (b, g) in bucketed.iter().zip(&cohort.stays) {
            assert_eq!(b.stay_id, g.stay_id);
            assert_eq!(b.died, g.died);
            assert_eq!(b.total_events(), g.events.len());
        }
    }
}
