use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use clreg::diagnostics::{
    hessian_gap_contrast, pooled_inputs, probe_fisher_convergence, probe_gradient_interference,
    probe_importance_accumulation, probe_mas_batch_robustness, probe_si_batch_inflation, resample_labels, ProbeReport,
};
use clreg::metrics::{parse_floats, AccuracyMatrix};
use clreg::runner::{emit_reports, run_sequence, shuffle_grid, sweep_lambda, ReportWriter, RunConfig};
use clreg::stream::{export_csv, generate_stream};
use clreg::tensor::ClassifierModel;
use clreg::{Error, Result};

#[derive(Parser)]
#[command(name = "clreg", version, about = "Regularisation-based continual learning testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one strategy over the subject stream.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep lambda for EWC, SI and MAS over every configured seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every strategy on shuffled subject orders.
    Shuffle {
        #[arg(long)]
        config: PathBuf,
        /// Number of orders; order 0 is the generated one. Defaults to the
        /// config's `shuffles`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one diagnostic probe.
    Probe {
        kind: ProbeKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary metrics of a saved accuracy matrix.
    Metrics {
        #[arg(long)]
        matrix: PathBuf,
        /// Comma-separated random-init accuracies; the file's `init` row
        /// otherwise.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Write the generated subjects as CSV files.
    Stream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    Fisher,
    SiBatch,
    MasBatch,
    Interference,
    Omega,
}

fn out_dir(out: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    out.or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn report_line(report: &ProbeReport) {
    match &report.stat {
        Some(s) => println!(
            "probe {}: {:?} statistic={:.6} p={:.6} n={}{}",
            report.name,
            s.kind,
            s.statistic,
            s.p_value,
            s.n,
            if s.degenerate { " (degenerate)" } else { "" }
        ),
        None => println!("probe {}: {} rows", report.name, report.rows.len()),
    }
}

fn probe(kind: ProbeKind, config: &RunConfig, out: &Path) -> Result<()> {
    let mut w = ReportWriter::new(out)?;
    let seed = config.seeds[0];
    let reports = match kind {
        ProbeKind::Fisher => {
            let model = ClassifierModel::new(config.model_shape()?, seed)?;
            let data = resample_labels(&model, &pooled_inputs(config)?, seed)?;
            let p = &config.probe;
            let mut reports = vec![probe_fisher_convergence(
                &model,
                &data,
                &p.fisher_sizes,
                p.fisher_draws,
                seed,
            )?];
            if model.params().len() <= 2000 {
                let n = data.len().min(500);
                let subset = data.subset(&(0..n).collect::<Vec<_>>());
                reports.push(hessian_gap_contrast(&model, &subset, 0.4, seed)?);
            }
            reports
        }
        ProbeKind::SiBatch => vec![probe_si_batch_inflation(
            config,
            &config.probe.batch_sizes,
            &config.seeds,
        )?],
        ProbeKind::MasBatch => vec![probe_mas_batch_robustness(
            config,
            &config.probe.batch_sizes,
            &config.seeds,
        )?],
        ProbeKind::Interference => {
            let art = run_sequence(config)?;
            vec![probe_gradient_interference(&art, &config.probe.topk_fracs)?]
        }
        ProbeKind::Omega => vec![probe_importance_accumulation(&run_sequence(config)?)?],
    };
    for r in &reports {
        r.write(&mut w)?;
        report_line(r);
    }
    Ok(())
}

fn metrics(matrix: &Path, baseline: Option<&str>) -> Result<()> {
    let text = fs::read_to_string(matrix).map_err(|e| Error::Io {
        path: matrix.to_path_buf(),
        source: e,
    })?;
    let mut m = AccuracyMatrix::from_csv(&text)?;
    if let Some(b) = baseline {
        let fields: Vec<&str> = b.split(',').map(str::trim).collect();
        m.set_baseline(parse_floats(&fields)?)?;
    }
    let value = serde_json::json!({
        "tasks": m.tasks(),
        "mean_acc": m.mean_acc()?,
        "final_acc": m.final_acc()?,
        "bwt": m.bwt().ok(),
        "fwt": m.fwt().ok(),
    });
    print_json(&value)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(out, &cfg)?;
            let art = run_sequence(&cfg)?;
            emit_reports(&art, &dir)?;
            print_json(&art.summary())?;
        }
        Command::Sweep { config, lambdas, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(out, &cfg)?;
            let table = sweep_lambda(&cfg, &lambdas)?;
            let mut w = ReportWriter::new(&dir)?;
            w.write("sweep.csv", &table.to_csv())?;
            w.write_json("sweep.json", &table)?;
            print!("{}", table.to_csv());
        }
        Command::Shuffle { config, n, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(out, &cfg)?;
            let table = shuffle_grid(&cfg, n.unwrap_or(cfg.shuffles))?;
            let mut w = ReportWriter::new(&dir)?;
            w.write("shuffle.csv", &table.to_csv())?;
            w.write_json("shuffle.json", &table)?;
            for s in &table.summary {
                println!(
                    "{}: unseen F1 {:.4} +- {:.4} (lambda {})",
                    s.strategy, s.unseen_f1.mean, s.unseen_f1.std, s.lambda
                );
            }
        }
        Command::Probe { kind, config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(out, &cfg)?;
            probe(kind, &cfg, &dir)?;
        }
        Command::Metrics { matrix, baseline } => metrics(&matrix, baseline.as_deref())?,
        Command::Stream { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(out, &cfg)?;
            let stream = generate_stream(&cfg.stream)?;
            export_csv(&stream.stream, &dir.join("stream"))?;
            export_csv(&stream.holdout, &dir.join("holdout"))?;
            info!(
                "wrote {} training and {} held-out subjects",
                stream.stream.len(),
                stream.holdout.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Parse(_) | Error::Json(_) => 2,
                Error::Numerical(_) => 3,
                _ => 1,
            })
        }
    }
}
