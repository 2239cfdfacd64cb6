//! Stage driver wiring the pipeline together over a single artifact
//! directory. Each stage reads the previous stage's files and writes its own
//! atomically, so every stage is independently rerunnable and two runs with
//! the same seeds produce byte-identical artifacts.
//!
//! Layout under the artifact directory:
//!
//! ```text
//! events.csv stays.csv truth.csv scores.csv   # synth outputs
//! bucketed.jsonl diagnostics.txt              # ingest
//! bins.tsv vocab.tsv encoded.jsonl            # tokenizer
//! run-manifest.txt                            # train
//! fold-<k>/checkpoint.txt .meta run-record.txt test-probs.tsv
//! eval-report.txt roc.tsv dynamic-auroc.tsv
//! calibration-<name>.txt calibration-<name>.tsv
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{
    auroc, bootstrap_ci, calibration_curve, dynamic_auroc_pooled, pooled_final_auroc, roc_points,
    CensoringMode, EvalReport, StayScores,
};
use crate::ingest::{self, BucketedStay, ColumnMap, StayColumnMap};
use crate::model::{self, ModelConfig, ModelParams};
use crate::optim::{fit_logistic, fit_saps_curve, severity_to_probability};
use crate::synth::{generate_cohort, write_cohort_files, GeneratorConfig};
use crate::tokenize::{
    self, encode_stay, fit_bin_table_from_values, BinTable, TokenizedStay, Vocab,
};
use crate::train::{
    grid_search, run_protocol, split_data, EpochProgress, LeakageMonitor, SplitConfig,
    SplitPlan, TrainOptions,
};
use crate::util::{atomic_write, atomic_write_stream, fmt_f64, sha256_file, sha256_ids};

/// Well-known artifact names within one run directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactPaths { root: root.into() }
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("events.csv")
    }
    pub fn stays(&self) -> PathBuf {
        self.root.join("stays.csv")
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }
    pub fn bucketed(&self) -> PathBuf {
        self.root.join("bucketed.jsonl")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.txt")
    }
    pub fn bins(&self) -> PathBuf {
        self.root.join("bins.tsv")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.tsv")
    }
    pub fn encoded(&self) -> PathBuf {
        self.root.join("encoded.jsonl")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("run-manifest.txt")
    }
    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.root.join(format!("fold-{fold}"))
    }
    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("checkpoint.txt")
    }
    pub fn checkpoint_meta(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("checkpoint.meta")
    }
    pub fn run_record(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("run-record.txt")
    }
    pub fn test_probs(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("test-probs.tsv")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval-report.txt")
    }
    pub fn roc_tsv(&self) -> PathBuf {
        self.root.join("roc.tsv")
    }
    pub fn dynamic_tsv(&self) -> PathBuf {
        self.root.join("dynamic-auroc.tsv")
    }
    pub fn calibration_record(&self, name: &str) -> PathBuf {
        self.root.join(format!("calibration-{name}.txt"))
    }
    pub fn calibration_tsv(&self, name: &str) -> PathBuf {
        self.root.join(format!("calibration-{name}.tsv"))
    }
}

/// Model shape before the vocabulary size is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub hidden_units: usize,
    pub embedding_dropout: f64,
}

impl ModelSpec {
    pub fn with_data(self, vocab_size: usize, horizon_hours: u32) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_units: self.hidden_units,
            embedding_dropout: self.embedding_dropout,
            horizon_hours,
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            embed_dim: 32,
            hidden_units: 64,
            embedding_dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub bins: usize,
    pub horizon: u32,
    pub event_cap: usize,
    pub split: SplitConfig,
    pub grid: Vec<ModelSpec>,
    pub train: TrainOptions,
    pub bootstrap_samples: usize,
    pub confidence_level: f64,
    pub censoring: CensoringMode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            bins: 20,
            horizon: 48,
            event_cap: ingest::EVENT_CAP,
            split: SplitConfig::default(),
            grid: vec![ModelSpec::default()],
            train: TrainOptions::default(),
            bootstrap_samples: 10_000,
            confidence_level: 0.95,
            censoring: CensoringMode::CarryForward,
        }
    }
}

/// Validate a run configuration before any stage executes, reporting every
/// violated field by name.
pub fn validate_options(options: &PipelineOptions) -> std::result::Result<(), Vec<String>> {
    let mut errors = Vec::new();
    if options.bins < 2 {
        errors.push(format!("bins: must be at least 2, got {}", options.bins));
    }
    if options.horizon == 0 {
        errors.push("horizon: must be positive".to_string());
    }
    if options.event_cap == 0 {
        errors.push("event_cap: must be positive".to_string());
    }
    if options.grid.is_empty() {
        errors.push("grid: must contain at least one model spec".to_string());
    }
    for (i, spec) in options.grid.iter().enumerate() {
        if spec.embed_dim == 0 || spec.hidden_units == 0 {
            errors.push(format!("grid[{i}]: embed_dim and hidden_units must be positive"));
        }
        if !(0.0..1.0).contains(&spec.embedding_dropout) {
            errors.push(format!("grid[{i}].embedding_dropout: must lie in [0, 1)"));
        }
    }
    if !(0.0..1.0).contains(&options.split.test_fraction) || options.split.test_fraction <= 0.0 {
        errors.push("split.test_fraction: must lie in (0, 1)".to_string());
    }
    if options.split.folds == 0 {
        errors.push("split.folds: must be positive".to_string());
    }
    if options.split.validation_size == 0 {
        errors.push("split.validation_size: must be positive".to_string());
    }
    if options.bootstrap_samples < 2 {
        errors.push("bootstrap_samples: must be at least 2".to_string());
    }
    if !(0.0..1.0).contains(&options.confidence_level) || options.confidence_level <= 0.0 {
        errors.push("confidence_level: must lie in (0, 1)".to_string());
    }
    if options.train.batch_size == 0 {
        errors.push("train.batch_size: must be positive".to_string());
    }
    if options.train.max_epochs == 0 {
        errors.push("train.max_epochs: must be positive".to_string());
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

/// Generate a synthetic cohort into the artifact directory.
pub fn stage_synth(config: &GeneratorConfig, paths: &ArtifactPaths) -> Result<()> {
    let cohort = generate_cohort(config)?;
    write_cohort_files(&cohort, &paths.root)?;
    Ok(())
}

/// Ingest event/stay tables into hourly buckets plus the diagnostics report.
pub fn stage_ingest(
    event_paths: &[PathBuf],
    stays_path: &Path,
    event_map: &ColumnMap,
    stay_map: &StayColumnMap,
    delimiter: u8,
    paths: &ArtifactPaths,
    options: &PipelineOptions,
) -> Result<ingest::IngestDiagnostics> {
    for p in event_paths.iter().chain([&stays_path.to_path_buf()]) {
        if !p.exists() {
            return Err(Error::MissingInput(p.clone()));
        }
    }
    let (bucketed, diagnostics) = ingest::ingest(
        event_paths,
        stays_path,
        event_map,
        stay_map,
        delimiter,
        options.horizon,
        options.event_cap,
    )?;
    atomic_write_stream(&paths.bucketed(), |w| {
        ingest::write_bucketed_jsonl(w, &bucketed)
    })?;
    atomic_write(&paths.diagnostics(), diagnostics.render_report().as_bytes())?;
    Ok(diagnostics)
}

/// (stay_id, died) pairs in file order, used to recompute the split plan.
pub fn load_stay_labels(bucketed: &Path) -> Result<Vec<(String, bool)>> {
    let mut labels = Vec::new();
    for stay in ingest::read_bucketed_jsonl(bucketed)? {
        let stay = stay?;
        labels.push((stay.stay_id, stay.died));
    }
    Ok(labels)
}

/// Recompute the deterministic split plan from the bucketed artifact.
pub fn plan_from_artifacts(bucketed: &Path, split: &SplitConfig) -> Result<SplitPlan> {
    split_data(&load_stay_labels(bucketed)?, split)
}

/// Fit percentile bins on the training split only. Returns the number of
/// test-set reads observed during the fit, which must be zero.
pub fn stage_fit_bins(paths: &ArtifactPaths, options: &PipelineOptions) -> Result<u64> {
    let plan = plan_from_artifacts(&paths.bucketed(), &options.split)?;
    let monitor = LeakageMonitor::new(&plan);
    let test: HashSet<String> = plan.test_ids.iter().cloned().collect();
    let mut values: HashMap<String, Vec<f64>> = HashMap::new();
    for stay in ingest::read_bucketed_jsonl(&paths.bucketed())? {
        let stay = stay?;
        if test.contains(&stay.stay_id) {
            continue;
        }
        monitor.record_fit_read(&stay.stay_id);
        tokenize::collect_continuous(&stay, &mut values);
    }
    let table = fit_bin_table_from_values(values, options.bins)?;
    tokenize::write_bins_file(&paths.bins(), &table)?;
    Ok(monitor.test_reads())
}

/// Build the shared vocabulary from the training split's token stream.
pub fn stage_build_vocab(paths: &ArtifactPaths, options: &PipelineOptions) -> Result<u64> {
    let plan = plan_from_artifacts(&paths.bucketed(), &options.split)?;
    let monitor = LeakageMonitor::new(&plan);
    let test: HashSet<String> = plan.test_ids.iter().cloned().collect();
    let bins = tokenize::read_bins_file(&paths.bins())?;
    let mut vocab = Vocab::new();
    for stay in ingest::read_bucketed_jsonl(&paths.bucketed())? {
        let stay = stay?;
        if test.contains(&stay.stay_id) {
            continue;
        }
        monitor.record_fit_read(&stay.stay_id);
        tokenize::insert_stay_tokens(&stay, &bins, &mut vocab);
    }
    tokenize::write_vocab_file(&paths.vocab(), &vocab)?;
    Ok(monitor.test_reads())
}

/// Encode every stay against the fitted bins and vocabulary.
pub fn stage_encode(paths: &ArtifactPaths) -> Result<()> {
    let bins = tokenize::read_bins_file(&paths.bins())?;
    let vocab = tokenize::read_vocab_file(&paths.vocab())?;
    let stays = ingest::read_bucketed_jsonl(&paths.bucketed())?;
    atomic_write_stream(&paths.encoded(), move |w| {
        for stay in stays {
            let stay = stay?;
            let encoded = encode_stay(&stay, &vocab, &bins);
            serde_json::to_writer(&mut *w, &encoded)?;
            w.write_all(b"\n").map_err(|e| Error::io("<encoded stream>", e))?;
        }
        Ok(())
    })
}

fn write_test_probs(path: &Path, test_ids: &[String], trajectories: &[StayScores]) -> Result<()> {
    atomic_write_stream(path, |w| {
        writeln!(w, "stay_id\tdied\thour\tprob").map_err(|e| Error::io(path, e))?;
        for (id, stay) in test_ids.iter().zip(trajectories) {
            for (hour, p) in stay.probs.iter().enumerate() {
                writeln!(w, "{id}\t{}\t{hour}\t{}", u8::from(stay.died), fmt_f64(*p))
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(())
    })
}

/// Parse one fold's hourly-probability table back into stay order.
pub fn read_test_probs(path: &Path) -> Result<(Vec<String>, Vec<StayScores>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut stays: Vec<StayScores> = Vec::new();
    let mut last_id: Option<String> = None;
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::data(format!("{}:{}: expected 4 fields", path.display(), ln + 1)));
        }
        let bad = |what: &str| Error::data(format!("{}:{}: bad {what}", path.display(), ln + 1));
        let id = fields[0];
        let died = fields[1] == "1";
        let hour: usize = fields[2].parse().map_err(|_| bad("hour"))?;
        let prob: f64 = fields[3].parse().map_err(|_| bad("prob"))?;
        if last_id.as_deref() != Some(id) {
            ids.push(id.to_string());
            stays.push(StayScores { died, probs: Vec::new() });
            last_id = Some(id.to_string());
        }
        let stay = stays.last_mut().expect("pushed above");
        if stay.probs.len() != hour {
            return Err(bad("hour ordering"));
        }
        stay.probs.push(prob);
    }
    Ok((ids, stays))
}

/// Training outcome summary returned by [`stage_train`].
pub struct TrainStageOutcome {
    pub chosen: ModelConfig,
    pub fold_summaries: Vec<(usize, usize, f64)>,
    pub aborted: Vec<(usize, String)>,
}

/// Train the protocol: optional grid search on fold 0, then every fold with
/// the chosen config; writes checkpoints, run records, per-fold test
/// probability tables and the run manifest.
pub fn stage_train(
    paths: &ArtifactPaths,
    options: &PipelineOptions,
    progress: &mut dyn FnMut(EpochProgress),
) -> Result<TrainStageOutcome> {
    let stays = tokenize::read_tokenized_jsonl(&paths.encoded())?;
    let labels: Vec<(String, bool)> = stays.iter().map(|s| (s.stay_id.clone(), s.died)).collect();
    let plan = split_data(&labels, &options.split)?;
    let vocab = tokenize::read_vocab_file(&paths.vocab())?;
    let vocab_size = vocab.len();

    let by_id: HashMap<&str, &TokenizedStay> =
        stays.iter().map(|s| (s.stay_id.as_str(), s)).collect();
    let resolve = |ids: &[String]| -> Vec<&TokenizedStay> {
        ids.iter().map(|id| by_id[id.as_str()]).collect()
    };

    // grid search on fold 0 when more than one spec is in play
    let grid: Vec<ModelConfig> = options
        .grid
        .iter()
        .map(|spec| spec.with_data(vocab_size, options.horizon))
        .collect();
    let chosen = if grid.len() == 1 {
        grid[0]
    } else {
        let train = resolve(&plan.folds[0].train_ids);
        let validation = resolve(&plan.folds[0].validation_ids);
        let (best, _, _) = grid_search(0, &train, &validation, &grid, &options.train, progress)?;
        best
    };

    let outcome = run_protocol(&stays, &plan, chosen, &options.train, progress)?;

    let vocab_hash = sha256_file(&paths.vocab())?;
    let mut fold_summaries = Vec::new();
    let mut aborted = Vec::new();
    for (fold, (fold_outcome, trajectories)) in outcome
        .folds
        .iter()
        .zip(&outcome.test_trajectories)
        .enumerate()
    {
        std::fs::create_dir_all(paths.fold_dir(fold))
            .map_err(|e| Error::io(paths.fold_dir(fold), e))?;
        model::save_checkpoint(&paths.checkpoint(fold), &fold_outcome.params)?;
        atomic_write(
            &paths.checkpoint_meta(fold),
            model::render_checkpoint_meta(
                &vocab_hash,
                options.train.seed,
                &[("fold", fold.to_string())],
            )
            .as_bytes(),
        )?;
        atomic_write(
            &paths.run_record(fold),
            crate::train::render_run_record(&fold_outcome.record).as_bytes(),
        )?;
        write_test_probs(&paths.test_probs(fold), &plan.test_ids, trajectories)?;
        fold_summaries.push((
            fold,
            fold_outcome.record.best_epoch,
            fold_outcome.record.best_val_auroc,
        ));
        if let Some(reason) = &fold_outcome.aborted {
            aborted.push((fold, reason.clone()));
        }
    }

    atomic_write(
        &paths.manifest(),
        render_manifest(options, &plan, &grid, &chosen).as_bytes(),
    )?;
    Ok(TrainStageOutcome {
        chosen,
        fold_summaries,
        aborted,
    })
}

fn render_manifest(
    options: &PipelineOptions,
    plan: &SplitPlan,
    grid: &[ModelConfig],
    chosen: &ModelConfig,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#run-manifest v1");
    let _ = writeln!(out, "seed = {}", options.train.seed);
    let _ = writeln!(out, "split_seed = {}", options.split.seed);
    let _ = writeln!(out, "test_fraction = {}", options.split.test_fraction);
    let _ = writeln!(out, "folds = {}", options.split.folds);
    let _ = writeln!(out, "validation_size = {}", options.split.validation_size);
    let _ = writeln!(out, "bins = {}", options.bins);
    let _ = writeln!(out, "horizon = {}", options.horizon);
    let _ = writeln!(out, "event_cap = {}", options.event_cap);
    let _ = writeln!(out, "batch_size = {}", options.train.batch_size);
    let _ = writeln!(out, "patience = {}", options.train.patience);
    let _ = writeln!(out, "max_epochs = {}", options.train.max_epochs);
    let _ = writeln!(out, "learning_rate = {}", options.train.adam.learning_rate);
    for (i, cfg) in grid.iter().enumerate() {
        let _ = writeln!(
            out,
            "grid[{i}] = embed {} hidden {} dropout {}",
            cfg.embed_dim, cfg.hidden_units, cfg.embedding_dropout
        );
    }
    let _ = writeln!(
        out,
        "chosen = embed {} hidden {} dropout {}",
        chosen.embed_dim, chosen.hidden_units, chosen.embedding_dropout
    );
    let _ = writeln!(
        out,
        "test: n = {}, ids_sha256 = {}",
        plan.test_ids.len(),
        sha256_ids(&plan.test_ids)
    );
    for (k, fold) in plan.folds.iter().enumerate() {
        let _ = writeln!(
            out,
            "fold {k}: train n = {}, ids_sha256 = {}; validation n = {}, ids_sha256 = {}",
            fold.train_ids.len(),
            sha256_ids(&fold.train_ids),
            fold.validation_ids.len(),
            sha256_ids(&fold.validation_ids)
        );
    }
    out
}

/// Severity scores loaded from the scores table.
pub struct SeverityScores {
    pub by_stay: HashMap<String, (f64, f64)>,
}

pub fn read_severity_scores(path: &Path) -> Result<SeverityScores> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot open scores table {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::data(format!("scores table is missing column '{name}'")))
    };
    let (c_id, c_oasis, c_saps) = (find("stay_id")?, find("oasis")?, find("sapsii")?);
    let mut by_stay = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(c_id).unwrap_or("").trim().to_string();
        let oasis: f64 = record
            .get(c_oasis)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::data("bad oasis score"))?;
        let saps: f64 = record
            .get(c_saps)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::data("bad sapsii score"))?;
        by_stay.insert(id, (oasis, saps));
    }
    Ok(SeverityScores { by_stay })
}

/// Evaluate the trained folds: pooled and per-fold AUROC with bootstrap
/// intervals, the dynamic per-hour curve, ROC points, the model calibration
/// curve, and (when a scores table is given) severity-score baselines fit on
/// training stays only.
pub fn stage_evaluate(
    paths: &ArtifactPaths,
    options: &PipelineOptions,
    scores_path: Option<&Path>,
) -> Result<EvalReport> {
    let labels = load_stay_labels(&paths.bucketed())?;
    let plan = split_data(&labels, &options.split)?;

    let mut per_fold: Vec<Vec<StayScores>> = Vec::with_capacity(options.split.folds);
    for fold in 0..options.split.folds {
        let path = paths.test_probs(fold);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let (ids, stays) = read_test_probs(&path)?;
        if ids != plan.test_ids {
            return Err(Error::data(format!(
                "fold {fold} test table does not match the plan's test set"
            )));
        }
        per_fold.push(stays);
    }
    let died: Vec<bool> = per_fold[0].iter().map(|s| s.died).collect();

    // stays with no observed hours cannot be scored at the final horizon
    let scorable: Vec<usize> = (0..died.len())
        .filter(|&i| !per_fold[0][i].probs.is_empty())
        .collect();
    let final_died: Vec<bool> = scorable.iter().map(|&i| died[i]).collect();
    let per_fold_final: Vec<Vec<f64>> = per_fold
        .iter()
        .map(|stays| {
            scorable
                .iter()
                .map(|&i| *stays[i].probs.last().expect("scorable"))
                .collect()
        })
        .collect();

    let b = options.bootstrap_samples;
    let level = options.confidence_level;
    let seed = options.train.seed;
    let (pooled_point, pooled_ci, _) =
        pooled_final_auroc(&per_fold_final, &final_died, b, level, crate::util::derive_seed(seed, 0xe7a1))?;

    let mut per_fold_report = Vec::new();
    for (fold, scores) in per_fold_final.iter().enumerate() {
        let point = auroc(scores, &final_died)?;
        let ci = bootstrap_ci(scores, &final_died, b, level, crate::util::derive_seed(seed, 0xf0 + fold as u64))?;
        per_fold_report.push((fold, point, (ci.lo, ci.hi)));
    }

    let dynamic = dynamic_auroc_pooled(
        &per_fold,
        options.horizon,
        options.censoring,
        Some((b, level, crate::util::derive_seed(seed, 0xd1a))),
    )?;

    // pooled ROC and model calibration use the across-fold mean probability
    let mean_final: Vec<f64> = (0..final_died.len())
        .map(|i| {
            per_fold_final.iter().map(|f| f[i]).sum::<f64>() / per_fold_final.len() as f64
        })
        .collect();
    let roc = roc_points(&mean_final, &final_died)?;
    let mut calibrations = vec![(
        "model".to_string(),
        calibration_curve(&mean_final, &final_died, 10)?,
    )];

    let mut baseline_aurocs = Vec::new();
    if let Some(scores_path) = scores_path {
        let severity = read_severity_scores(scores_path)?;
        let monitor = LeakageMonitor::new(&plan);
        let test_set: HashSet<&str> = plan.test_ids.iter().map(String::as_str).collect();

        let mut fit_oasis = Vec::new();
        let mut fit_saps = Vec::new();
        let mut fit_outcomes = Vec::new();
        for (id, died) in &labels {
            if test_set.contains(id.as_str()) {
                continue;
            }
            if let Some(&(oasis, saps)) = severity.by_stay.get(id) {
                monitor.record_fit_read(id);
                fit_oasis.push(oasis);
                fit_saps.push(saps);
                fit_outcomes.push(u8::from(*died));
            }
        }
        if monitor.test_reads() > 0 {
            return Err(Error::data("calibration fit consumed test-set stays"));
        }
        let oasis_model = fit_logistic(&fit_oasis, &fit_outcomes)?;
        let saps_model = fit_saps_curve(&fit_saps, &fit_outcomes)?;

        for (name, model, pick) in [
            ("oasis", &oasis_model, 0usize),
            ("sapsii", &saps_model, 1usize),
        ] {
            let mut probs = Vec::new();
            let mut outcome = Vec::new();
            let mut raw = Vec::new();
            for (ix, id) in plan.test_ids.iter().enumerate() {
                if let Some(&(oasis, saps)) = severity.by_stay.get(id) {
                    let score = if pick == 0 { oasis } else { saps };
                    probs.push(severity_to_probability(score, model)?);
                    raw.push(score);
                    outcome.push(died[ix]);
                }
            }
            let point = auroc(&raw, &outcome)?;
            let ci = bootstrap_ci(&raw, &outcome, b, level, crate::util::derive_seed(seed, 0xba5e + pick as u64))?;
            baseline_aurocs.push((name.to_string(), point, (ci.lo, ci.hi)));
            calibrations.push((name.to_string(), calibration_curve(&probs, &outcome, 10)?));
            atomic_write(
                &paths.calibration_record(name),
                crate::optim::render_calibration(model).as_bytes(),
            )?;
        }
    }

    let report = EvalReport {
        censoring: options.censoring,
        bootstrap_samples: b,
        confidence_level: level,
        pooled_final: (pooled_point, pooled_ci),
        per_fold_final: per_fold_report,
        dynamic,
        roc,
        calibrations,
        baseline_aurocs,
    };

    atomic_write(&paths.eval_report(), report.render().as_bytes())?;
    atomic_write(&paths.roc_tsv(), crate::eval::render_roc_tsv(&report.roc).as_bytes())?;
    atomic_write(
        &paths.dynamic_tsv(),
        crate::eval::render_dynamic_tsv(&report.dynamic).as_bytes(),
    )?;
    for (name, points) in &report.calibrations {
        atomic_write(
            &paths.calibration_tsv(name),
            crate::eval::render_calibration_tsv(points).as_bytes(),
        )?;
    }
    Ok(report)
}

/// Load the trained artifacts needed by the inspection commands.
pub struct InspectionContext {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub bins: BinTable,
}

pub fn load_inspection_context(paths: &ArtifactPaths, fold: usize) -> Result<InspectionContext> {
    let checkpoint = paths.checkpoint(fold);
    if !checkpoint.exists() {
        return Err(Error::MissingInput(checkpoint));
    }
    Ok(InspectionContext {
        params: model::load_checkpoint(&checkpoint)?,
        vocab: tokenize::read_vocab_file(&paths.vocab())?,
        bins: tokenize::read_bins_file(&paths.bins())?,
    })
}

/// Find one stay in the bucketed artifact.
pub fn find_bucketed_stay(paths: &ArtifactPaths, stay_id: &str) -> Result<BucketedStay> {
    for stay in ingest::read_bucketed_jsonl(&paths.bucketed())? {
        let stay = stay?;
        if stay.stay_id == stay_id {
            return Ok(stay);
        }
    }
    Err(Error::data(format!("stay '{stay_id}' not found in {}", paths.bucketed().display())))
}

/// Hourly mortality probabilities for one stay up to `upto_hour` (eval mode).
pub fn predict_stay(
    paths: &ArtifactPaths,
    fold: usize,
    stay_id: &str,
    upto_hour: Option<u32>,
) -> Result<Vec<f64>> {
    let ctx = load_inspection_context(paths, fold)?;
    let stay = find_bucketed_stay(paths, stay_id)?;
    let encoded = encode_stay(&stay, &ctx.vocab, &ctx.bins);
    let traj = model::forward(&encoded, &ctx.params, model::Mode::Eval, 0);
    let mut probs = traj.probs;
    if let Some(h) = upto_hour {
        probs.truncate(h as usize);
    }
    Ok(probs)
}

/// The full case report for one stay.
pub fn case_report(
    paths: &ArtifactPaths,
    fold: usize,
    stay_id: &str,
) -> Result<crate::eval::CaseReport> {
    let ctx = load_inspection_context(paths, fold)?;
    let stay = find_bucketed_stay(paths, stay_id)?;
    Ok(crate::eval::report_case(&stay, &ctx.params, &ctx.vocab, &ctx.bins))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn options_validation_reports_field_names() {
        let mut options = PipelineOptions::default();
        assert!(validate_options(&options).is_ok());

        options.bins = 1;
        options.horizon = 0;
        options.grid.clear();
        let errors = validate_options(&options).unwrap_err();
        let joined = errors.join("; ");
        assert!(joined.contains("bins"), "{joined}");
        assert!(joined.contains("horizon"), "{joined}");
        assert!(joined.contains("grid"), "{joined}");
    }

    #[test]
    fn test_probs_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probs.tsv");
        let ids = vec!["a".to_string(), "b".to_string()];
        let stays = vec![
            StayScores { died: true, probs: vec![0.5, 0.625] },
            StayScores { died: false, probs: vec![0.25] },
        ];
        write_test_probs(&path, &ids, &stays).unwrap();
        let (back_ids, back) = read_test_probs(&path).unwrap();
        assert_eq!(back_ids, ids);
        assert_eq!(back, stays);
    }
}
