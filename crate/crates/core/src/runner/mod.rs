//! Experiment orchestration: the episodic training loop with the joint
//! losses, balanced evaluation, multi-technique comparison, and file
//! emission.
//!
//! Reproducibility contract: everything is derived from the config. Four
//! independent PRNG streams are salted off the run seed — initialization,
//! training-task sampling, evaluation-task sampling, and discriminator
//! negative selection — so techniques that consume extra randomness leave
//! the shared streams untouched and stay comparable under one seed.

pub mod config;
pub mod model;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_embeddings, split_labels, Dataset, LabelSplit, SplitSide,
};
use crate::episodes::{
    sample_balanced_eval, sample_known_task, sample_unknown_task, EpisodeSpec, EpisodeTask,
};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, EpisodeResult, MetricsReport};
use crate::numeric::Prng;
use crate::openset::{frdisc_residual, frdisc_score, gc_decision, score_mls, score_mss, Technique};

pub use config::{apply_pairs, parse_config_file, DatasetSource, ExperimentConfig};
pub use model::{batch_loss_and_grads, ModelState, SelectionMode};

const INIT_STREAM: u64 = 0x1157_0000_0000_0001;
const TRAIN_STREAM: u64 = 0x1157_0000_0000_0002;
const EVAL_STREAM: u64 = 0x1157_0000_0000_0003;
const DISC_STREAM: u64 = 0x1157_0000_0000_0004;

/// Everything one run produced. The config snapshot alone reproduces it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Joint training loss per iteration.
    pub losses: Vec<f64>,
    pub report: MetricsReport,
    pub wall_secs: f64,
}

/// Materialize the configured dataset source.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic { .. } => generate_synthetic(&cfg.synthetic_config().unwrap()),
        DatasetSource::File(path) => load_embeddings(Path::new(path)),
    }
}

/// Split the dataset's labels with the configured fraction and seed.
pub fn build_split(cfg: &ExperimentConfig, ds: &Dataset) -> Result<LabelSplit> {
    split_labels(ds, cfg.split_fraction, &mut Prng::new(cfg.split_seed()))
}

/// Episodic training. Batches alternate known and unknown tasks 1:1; each
/// batch takes one Adam step on the technique's joint loss. Stops after
/// min(train_iterations, iteration_cap) iterations.
pub fn train(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    split: &LabelSplit,
) -> Result<(ModelState, Vec<f64>)> {
    let mut init_rng = Prng::new(cfg.seed ^ INIT_STREAM);
    let mut train_rng = Prng::new(cfg.seed ^ TRAIN_STREAM);
    let mut disc_rng = Prng::new(cfg.seed ^ DISC_STREAM);

    let mut model = ModelState::init(cfg, ds.dim(), &mut init_rng);
    let spec = EpisodeSpec {
        k_way: cfg.k_way,
        n_shot: cfg.n_shot,
        split_side: SplitSide::Train,
    };

    let iterations = cfg.effective_iterations();
    let mut losses = Vec::with_capacity(iterations as usize);
    let mut batch: Vec<EpisodeTask> = Vec::with_capacity(cfg.batch_size);
    for iter in 0..iterations {
        batch.clear();
        for b in 0..cfg.batch_size {
            if b % 2 == 0 {
                batch.push(sample_known_task(ds, split, &spec, &mut train_rng)?);
            } else {
                batch.push(sample_unknown_task(ds, split, &spec, &mut train_rng)?);
            }
        }
        let (stats, grads, _) = model::batch_loss_and_grads(
            &model,
            ds,
            &batch,
            cfg.technique,
            &cfg.weights,
            SelectionMode::Draw(&mut disc_rng),
        )?;
        if !stats.loss.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }
        model.apply_grads(&grads)?;
        losses.push(stats.loss);
    }
    Ok((model, losses))
}

/// Run one episode through the technique's decision flow.
pub fn infer_task(
    model: &ModelState,
    ds: &Dataset,
    task: &EpisodeTask,
    technique: Technique,
    tau: f64,
    episode_id: u64,
) -> Result<EpisodeResult> {
    let tf = model::forward_task(model, ds, task, technique.requires_garbage())?;
    let (score, accept, predicted) = match technique {
        Technique::SoftmaxMls => {
            let score = score_mls(&tf.logits, technique)?;
            (score, score.normalized > tau, tf.predicted)
        }
        Technique::SoftmaxMss | Technique::Eos => {
            let score = score_mss(&tf.probs, technique)?;
            (score, score.normalized > tau, tf.predicted)
        }
        Technique::GarbageClass => {
            let d = gc_decision(&tf.probs)?;
            (d.score, d.accept, d.predicted)
        }
        Technique::FrDisc => {
            let disc = model
                .disc
                .as_ref()
                .expect("fr-disc inference without discriminator");
            let residual = frdisc_residual(&tf.query_feat, &tf.protos, &tf.probs)?;
            let score = frdisc_score(disc, &residual)?;
            (score, score.normalized > tau, tf.predicted)
        }
    };
    Ok(EpisodeResult {
        episode_id,
        known: task.is_known(),
        true_class: task.query_target,
        predicted_class: predicted,
        score,
        accept,
    })
}

/// Balanced evaluation on the test split: eval_pairs known plus eval_pairs
/// unknown tasks, full metric report.
pub fn evaluate(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    split: &LabelSplit,
    model: &ModelState,
) -> Result<(MetricsReport, Vec<EpisodeResult>)> {
    assert!(
        split.is_disjoint(),
        "train/test label split is not disjoint"
    );
    let mut eval_rng = Prng::new(cfg.seed ^ EVAL_STREAM);
    let spec = EpisodeSpec {
        k_way: cfg.k_way,
        n_shot: cfg.n_shot,
        split_side: SplitSide::Test,
    };
    let tasks = sample_balanced_eval(ds, split, &spec, cfg.eval_pairs, &mut eval_rng)?;
    let mut results = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        results.push(infer_task(model, ds, task, cfg.technique, cfg.tau, i as u64)?);
    }
    let report = compute_report(&results, cfg.tau, cfg.technique)?;
    Ok((report, results))
}

/// Full pipeline: dataset, split, training, evaluation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunRecord, Vec<EpisodeResult>)> {
    cfg.validate()?;
    let started = Instant::now();
    let ds = build_dataset(cfg)?;
    cfg.validate_against_dataset(&ds)?;
    let split = build_split(cfg, &ds)?;
    let (model, losses) = train(cfg, &ds, &split)?;
    let (report, results) = evaluate(cfg, &ds, &split, &model)?;
    Ok((
        RunRecord {
            config: cfg.clone(),
            seed: cfg.seed,
            losses,
            report,
            wall_secs: started.elapsed().as_secs_f64(),
        },
        results,
    ))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write the per-run artifacts: report.json, scores.csv, losses.csv.
pub fn write_run_outputs(
    record: &mut RunRecord,
    results: &[EpisodeResult],
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let scores_path = out_dir.join("scores.csv");
    crate::metrics::write_scores_csv(results, &scores_path)?;
    record.report.scores_path = Some(scores_path.display().to_string());

    let losses_path = out_dir.join("losses.csv");
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&losses_path).map_err(|e| io_err(&losses_path, e))?,
    );
    writeln!(w, "iteration,loss").map_err(|e| io_err(&losses_path, e))?;
    for (i, loss) in record.losses.iter().enumerate() {
        writeln!(w, "{i},{loss:.9e}").map_err(|e| io_err(&losses_path, e))?;
    }
    w.flush().map_err(|e| io_err(&losses_path, e))?;

    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&record.report)?;
    std::fs::write(&report_path, json).map_err(|e| io_err(&report_path, e))?;
    Ok(())
}

/// One row of a technique comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub technique: String,
    pub fs_acc: f64,
    pub os_acc: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub oscr: f64,
    /// Per-metric delta against the first (baseline) row.
    pub deltas: [f64; 5],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

/// Run several configs that differ only in technique and tabulate the five
/// metrics with deltas against the first row.
pub fn compare(configs: &[ExperimentConfig]) -> Result<(Comparison, Vec<RunRecord>)> {
    if configs.is_empty() {
        return Err(Error::Config("compare needs at least one config".into()));
    }
    let base = &configs[0];
    for (i, c) in configs.iter().enumerate().skip(1) {
        let mut normalized = c.clone();
        normalized.technique = base.technique;
        normalized.weights = base.weights;
        normalized.out_dir = base.out_dir.clone();
        normalized.disc_backprop_phi = base.disc_backprop_phi;
        if normalized != *base {
            return Err(Error::Config(format!(
                "compare config {i} differs from the baseline in more than the technique (dataset, split, seed, and protocol must match)"
            )));
        }
        if c.technique == base.technique {
            return Err(Error::Config(format!(
                "compare config {i} repeats technique {}",
                c.technique
            )));
        }
    }

    let mut rows = Vec::with_capacity(configs.len());
    let mut records = Vec::with_capacity(configs.len());
    for cfg in configs {
        let (record, _) = run_experiment(cfg)?;
        records.push(record);
    }
    let baseline = [
        records[0].report.fs_acc,
        records[0].report.os_acc,
        records[0].report.auroc,
        records[0].report.aupr,
        records[0].report.oscr,
    ];
    for record in &records {
        let r = &record.report;
        let values = [r.fs_acc, r.os_acc, r.auroc, r.aupr, r.oscr];
        let mut deltas = [0.0; 5];
        for (d, (v, b)) in deltas.iter_mut().zip(values.iter().zip(&baseline)) {
            *d = v - b;
        }
        rows.push(ComparisonRow {
            technique: r.technique.clone(),
            fs_acc: r.fs_acc,
            os_acc: r.os_acc,
            auroc: r.auroc,
            aupr: r.aupr,
            oscr: r.oscr,
            deltas,
        });
    }
    Ok((Comparison { rows }, records))
}

/// Column order follows the benchmark tables: FS ACC, OS ACC, AUROC, AUPR,
/// OSCR.
pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut out = String::from(
        "technique,fs_acc,os_acc,auroc,aupr,oscr,delta_fs_acc,delta_os_acc,delta_auroc,delta_aupr,delta_oscr\n",
    );
    for r in &cmp.rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:+.6},{:+.6},{:+.6},{:+.6},{:+.6}\n",
            r.technique,
            r.fs_acc,
            r.os_acc,
            r.auroc,
            r.aupr,
            r.oscr,
            r.deltas[0],
            r.deltas[1],
            r.deltas[2],
            r.deltas[3],
            r.deltas[4],
        ));
    }
    out
}

/// Human-readable aligned table with deltas against the baseline row.
pub fn comparison_text(cmp: &Comparison) -> String {
    let mut out = format!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "technique", "FS ACC", "OS ACC", "AUROC", "AUPR", "OSCR"
    );
    for (i, r) in cmp.rows.iter().enumerate() {
        out.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.technique, r.fs_acc, r.os_acc, r.auroc, r.aupr, r.oscr
        ));
        if i > 0 {
            out.push_str(&format!(
                "{:<12} {:>+8.4} {:>+8.4} {:>+8.4} {:>+8.4} {:>+8.4}\n",
                "  vs base",
                r.deltas[0],
                r.deltas[1],
                r.deltas[2],
                r.deltas[3],
                r.deltas[4]
            ));
        }
    }
    out
}

/// Closed-set vs open-set correlation data: (fs_acc, auroc) points and
/// their Pearson coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub points: Vec<(f64, f64)>,
    /// NaN when any coordinate has zero variance.
    pub pearson: f64,
    pub note: Option<String>,
}

pub fn correlation_report(reports: &[MetricsReport]) -> Result<CorrelationReport> {
    if reports.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: reports.len(),
        });
    }
    let points: Vec<(f64, f64)> = reports.iter().map(|r| (r.fs_acc, r.auroc)).collect();
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let pearson = pearson(&xs, &ys);
    let note = pearson
        .is_nan()
        .then(|| "zero variance in at least one metric; correlation undefined".to_string());
    Ok(CorrelationReport {
        points,
        pearson,
        note,
    })
}

/// Pearson correlation via the covariance formula; NaN on zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return f64::NAN;
    }
    cov / (vx * vy).sqrt()
}
