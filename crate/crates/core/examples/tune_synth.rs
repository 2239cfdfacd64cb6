//! Scratch harness for calibrating the generator and training defaults.

use ehrseq_core::eval::CensoringMode;
use ehrseq_core::ingest;
use ehrseq_core::optim::AdamConfig;
use ehrseq_core::pipeline::{self, ArtifactPaths, ModelSpec, PipelineOptions};
use ehrseq_core::synth::{bayes_auroc_of, generate_cohort, write_cohort_files, GeneratorConfig};
use ehrseq_core::train::{SplitConfig, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let max_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let dropout: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let patience: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(10);

    let config = GeneratorConfig::default();
    let cohort = generate_cohort(&config).unwrap();
    println!("mortality {:.4}", cohort.realized_mortality());
    let events: usize = cohort.stays.iter().map(|s| s.events.len()).sum();
    println!("events total {events}, per stay {:.0}", events as f64 / cohort.stays.len() as f64);
    for h in [1u32, 6, 12, 24, 48] {
        println!("bayes({h:>2}) = {:.4}", bayes_auroc_of(&cohort, h).unwrap());
    }

    let dir = tempfile::tempdir().unwrap();
    write_cohort_files(&cohort, dir.path()).unwrap();
    let paths = ArtifactPaths::new(dir.path());
    let options = PipelineOptions {
        bins: 20,
        horizon: 48,
        event_cap: 10_000,
        split: SplitConfig {
            test_fraction: 0.25,
            folds: 2,
            validation_size: 200,
            seed: 1104,
        },
        grid: vec![ModelSpec {
            embed_dim: 32,
            hidden_units: 64,
            embedding_dropout: dropout,
        }],
        train: TrainOptions {
            adam: AdamConfig {
                learning_rate: lr,
                ..AdamConfig::default()
            },
            batch_size: batch,
            patience,
            max_epochs,
            seed: 1104,
        },
        bootstrap_samples: 200,
        confidence_level: 0.95,
        censoring: CensoringMode::CarryForward,
    };
    let t0 = std::time::Instant::now();
    pipeline::stage_ingest(
        &[paths.events()],
        &paths.stays(),
        &ingest::ColumnMap::default(),
        &ingest::StayColumnMap::default(),
        b',',
        &paths,
        &options,
    )
    .unwrap();
    println!("ingest done {:.1}s", t0.elapsed().as_secs_f64());
    pipeline::stage_fit_bins(&paths, &options).unwrap();
    pipeline::stage_build_vocab(&paths, &options).unwrap();
    pipeline::stage_encode(&paths).unwrap();
    println!("encode done {:.1}s", t0.elapsed().as_secs_f64());
    let mut progress = |p: ehrseq_core::train::EpochProgress| {
        println!(
            "fold {} epoch {:>3} loss {:.4} val_auroc {:.4} (best {:.4})",
            p.fold, p.epoch, p.train_loss, p.val_auroc, p.best_val_auroc
        );
    };
    pipeline::stage_train(&paths, &options, &mut progress).unwrap();
    println!("train done {:.1}s", t0.elapsed().as_secs_f64());
    let report = pipeline::stage_evaluate(&paths, &options, Some(&paths.scores())).unwrap();
    let (point, (lo, hi)) = report.pooled_final;
    println!("trained 48h AUROC {point:.4} (ci {lo:.4}-{hi:.4})");
    println!(
        "dynamic 1h {:?} 12h {:?} 48h {:?}",
        report.dynamic.hours[0].auroc,
        report.dynamic.hours[11].auroc,
        report.dynamic.hours[47].auroc
    );
    let bayes48 = bayes_auroc_of(&cohort, 48).unwrap();
    println!(
        "bayes 48h {:.4}; ratio {:.3}; elapsed {:.0}s",
        bayes48,
        point / bayes48,
        t0.elapsed().as_secs_f64()
    );
}
