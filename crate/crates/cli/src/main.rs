//! `fsos` — benchmark CLI for few-shot open-set recognition experiments.
//!
//! Subcommands: `gen` (write a synthetic embedding file), `train`, `eval`,
//! `compare` (multi-technique table), `correlate` (closed-set vs open-set
//! scatter data). Exit codes: 0 success, 1 configuration error, 2 runtime
//! or numeric error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fsos_core::data::{generate_synthetic, save_embeddings};
use fsos_core::error::Error;
use fsos_core::metrics::MetricsReport;
use fsos_core::runner::{
    self, apply_pairs, parse_config_file, write_run_outputs, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "fsos",
    version,
    about = "Few-shot open-set recognition benchmark over embedding vectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment subcommand; they override config-file
/// values, which override the built-in defaults.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat key/value config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Open-set technique: softmax-mls, softmax-mss, eos, gc, fr-disc.
    #[arg(long)]
    technique: Option<String>,

    /// Logit head: cosine or neg-distance.
    #[arg(long)]
    head: Option<String>,

    #[arg(long = "k-way")]
    k_way: Option<usize>,

    #[arg(long = "n-shot")]
    n_shot: Option<usize>,

    /// Number of training iterations (batches).
    #[arg(long)]
    iterations: Option<u64>,

    /// Hard cap on training iterations.
    #[arg(long = "iteration-cap")]
    iteration_cap: Option<u64>,

    /// Acceptance threshold on the normalized score.
    #[arg(long)]
    tau: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (output file for `gen`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding CSV file.
    Gen {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train a model and write losses.csv.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train then evaluate: writes report.json, scores.csv, losses.csv.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run several techniques on one setup and tabulate the metrics.
    Compare {
        #[command(flatten)]
        overrides: Overrides,

        /// Comma-separated technique list; the first is the baseline row.
        #[arg(long, default_value = "softmax-mls,eos,gc,fr-disc")]
        techniques: String,
    },
    /// Correlate closed-set accuracy with AUROC across run reports.
    Correlate {
        /// report.json files from previous runs (at least 3).
        reports: Vec<PathBuf>,

        /// Output directory for correlation.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_config(overrides: &Overrides) -> fsos_core::Result<ExperimentConfig> {
    let base = match &overrides.config {
        Some(path) => parse_config_file(path)?,
        None => ExperimentConfig::default(),
    };
    let mut pairs = BTreeMap::new();
    if let Some(v) = &overrides.technique {
        pairs.insert("technique".to_string(), v.clone());
    }
    if let Some(v) = &overrides.head {
        pairs.insert("head_kind".to_string(), v.clone());
    }
    if let Some(v) = overrides.k_way {
        pairs.insert("k_way".to_string(), v.to_string());
    }
    if let Some(v) = overrides.n_shot {
        pairs.insert("n_shot".to_string(), v.to_string());
    }
    if let Some(v) = overrides.iterations {
        pairs.insert("train_iterations".to_string(), v.to_string());
    }
    if let Some(v) = overrides.iteration_cap {
        pairs.insert("iteration_cap".to_string(), v.to_string());
    }
    if let Some(v) = overrides.tau {
        pairs.insert("tau".to_string(), v.to_string());
    }
    if let Some(v) = overrides.seed {
        pairs.insert("seed".to_string(), v.to_string());
    }
    if let Some(v) = &overrides.out {
        pairs.insert("out_dir".to_string(), v.display().to_string());
    }
    let cfg = apply_pairs(base, &pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| "fsos-out".into()))
}

fn cmd_gen(overrides: &Overrides) -> fsos_core::Result<()> {
    let cfg = build_config(overrides)?;
    let Some(synthetic) = cfg.synthetic_config() else {
        return Err(Error::Config(
            "gen requires a synthetic dataset source (dataset = synthetic)".into(),
        ));
    };
    let path = cfg
        .out_dir
        .as_deref()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("embeddings.csv"));
    let ds = generate_synthetic(&synthetic)?;
    save_embeddings(&ds, &path)?;
    println!(
        "wrote {} items ({} classes, d_in={}) to {}",
        ds.len(),
        ds.label_set().len(),
        ds.dim(),
        path.display()
    );
    Ok(())
}

fn cmd_train(overrides: &Overrides) -> fsos_core::Result<()> {
    let cfg = build_config(overrides)?;
    let ds = runner::build_dataset(&cfg)?;
    cfg.validate_against_dataset(&ds)?;
    let split = runner::build_split(&cfg, &ds)?;
    let (model, losses) = runner::train(&cfg, &ds, &split)?;
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let losses_path = dir.join("losses.csv");
    let mut body = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        body.push_str(&format!("{i},{l:.9e}\n"));
    }
    std::fs::write(&losses_path, body).map_err(|e| Error::Io {
        path: losses_path.display().to_string(),
        source: e,
    })?;
    println!(
        "trained {} for {} iterations (final loss {}); losses written to {}",
        cfg.technique,
        model.iteration,
        losses.last().map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into()),
        losses_path.display()
    );
    Ok(())
}

fn cmd_eval(overrides: &Overrides) -> fsos_core::Result<()> {
    let cfg = build_config(overrides)?;
    let (mut record, results) = runner::run_experiment(&cfg)?;
    let dir = out_dir(&cfg);
    write_run_outputs(&mut record, &results, &dir)?;
    let r = &record.report;
    println!(
        "{}: fs_acc={:.4} os_acc={:.4} auroc={:.4} aupr={:.4} oscr={:.4} ({} known / {} unknown pairs)",
        r.technique, r.fs_acc, r.os_acc, r.auroc, r.aupr, r.oscr, r.n_known, r.n_unknown
    );
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_compare(overrides: &Overrides, techniques: &str) -> fsos_core::Result<()> {
    let base = build_config(overrides)?;
    let mut configs = Vec::new();
    for name in techniques.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let technique = name.parse()?;
        let cfg = ExperimentConfig {
            technique,
            ..base.clone()
        };
        cfg.validate()?;
        configs.push(cfg);
    }
    let (cmp, mut records) = runner::compare(&configs)?;

    let dir = out_dir(&base);
    for record in &mut records {
        let sub = dir.join(record.report.technique.clone());
        // recompute the per-run episode dump is not retained by compare;
        // per-technique directories carry report.json and losses.csv
        std::fs::create_dir_all(&sub).map_err(|e| Error::Io {
            path: sub.display().to_string(),
            source: e,
        })?;
        let report_path = sub.join("report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(&record.report)?).map_err(
            |e| Error::Io {
                path: report_path.display().to_string(),
                source: e,
            },
        )?;
        let losses_path = sub.join("losses.csv");
        let mut body = String::from("iteration,loss\n");
        for (i, l) in record.losses.iter().enumerate() {
            body.push_str(&format!("{i},{l:.9e}\n"));
        }
        std::fs::write(&losses_path, body).map_err(|e| Error::Io {
            path: losses_path.display().to_string(),
            source: e,
        })?;
    }
    let csv_path = dir.join("comparison.csv");
    std::fs::write(&csv_path, runner::comparison_csv(&cmp)).map_err(|e| Error::Io {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    print!("{}", runner::comparison_text(&cmp));
    println!("comparison written to {}", csv_path.display());
    Ok(())
}

fn cmd_correlate(reports: &[PathBuf], out: Option<&Path>) -> fsos_core::Result<()> {
    let mut parsed: Vec<MetricsReport> = Vec::with_capacity(reports.len());
    for path in reports {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        parsed.push(serde_json::from_str(&text)?);
    }
    let corr = runner::correlation_report(&parsed)?;
    let mut body = String::from("fs_acc,auroc\n");
    for (fs, auroc) in &corr.points {
        body.push_str(&format!("{fs:.6},{auroc:.6}\n"));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let path = dir.join("correlation.csv");
        std::fs::write(&path, &body).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        println!("points written to {}", path.display());
    } else {
        print!("{body}");
    }
    match corr.note {
        Some(note) => println!("pearson = NaN ({note})"),
        None => println!("pearson = {:.6}", corr.pearson),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { overrides } => cmd_gen(overrides),
        Command::Train { overrides } => cmd_train(overrides),
        Command::Eval { overrides } => cmd_eval(overrides),
        Command::Compare {
            overrides,
            techniques,
        } => cmd_compare(overrides, techniques),
        Command::Correlate { reports, out } => cmd_correlate(reports, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
