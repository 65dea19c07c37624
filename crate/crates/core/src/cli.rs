//! The `fit`, `simulate` and `diagnose` commands.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;

use crate::diagnostics::{goodness_of_fit, plot_points, PlotPoint};
use crate::em::{fit, FitOptions, FitResult, Scenario};
use crate::error::{Error, Result};
use crate::io::{read_long_csv, write_long_csv_file, FitReport};
use crate::simulation::{
    generate_dataset, run_replicates, summarize, McSummary, ReplicateResult, SimConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "skewcross",
    version,
    about = "Skew-normal mixed models for crossover trials"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Normal,
    ErrorSn,
    EffectSn,
    All,
}

impl ScenarioArg {
    fn scenarios(self) -> Vec<Scenario> {
        match self {
            Self::Normal => vec![Scenario::NormalBaseline],
            Self::ErrorSn => vec![Scenario::ErrorSn],
            Self::EffectSn => vec![Scenario::EffectSn],
            Self::All => Scenario::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimScenarioArg {
    ErrorSn,
    EffectSn,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one or all models to a long-format CSV dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 5e-3)]
        tol: f64,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        /// Recorded in the output; fitting itself is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Monte Carlo study under one of the simulation settings.
    Simulate {
        #[arg(long, value_enum, default_value = "error-sn")]
        scenario: SimScenarioArg,
        /// Subjects per sequence.
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 5e-3)]
        tol: f64,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Also write every simulated dataset as `data_<replicate>.csv`.
        #[arg(long)]
        save_data: bool,
    },
    /// Mahalanobis distances, KS test and plot data for a saved fit.
    Diagnose {
        /// Fit JSON written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidParameter(
            "--workers must be at least 1".into(),
        )),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidParameter(e.to_string())),
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "--tol must be positive, got {tol}"
        )))
    }
}

pub fn write_plot_csv(points: &[PlotPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    for p in points {
        w.serialize(p).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn fit_table(results: &[FitResult]) -> String {
    let mut s = format!(
        "{:<10} {:>9} {:>5} {:>14} {:>14} {:>14} {:>10}\n",
        "model", "converged", "iter", "loglik", "AIC", "BIC", "lambda"
    );
    for r in results {
        let lambda = if r.lambda_free() {
            format!("{:.4}", r.theta.lambda)
        } else {
            "-".into()
        };
        s += &format!(
            "{:<10} {:>9} {:>5} {:>14.4} {:>14.4} {:>14.4} {:>10}\n",
            r.theta.scenario.name(),
            r.converged,
            r.iterations,
            r.loglik,
            r.aic,
            r.bic,
            lambda
        );
    }
    s
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_fit(
    data: &Path,
    scenario: ScenarioArg,
    tol: f64,
    max_iter: usize,
    seed: u64,
    out_dir: &Path,
    workers: Option<usize>,
    out: &mut dyn Write,
) -> Result<i32> {
    check_tol(tol)?;
    let loaded = read_long_csv(data)?;
    for (seq, subj) in &loaded.dropped {
        warn!("sequence {seq} subject {subj} excluded: incomplete responses");
    }
    let dataset = &loaded.dataset;
    let options = FitOptions {
        tol,
        max_iter,
        ..FitOptions::default()
    };
    let scenarios = scenario.scenarios();
    let fits: Vec<Result<FitResult>> = with_workers(workers, || {
        scenarios
            .par_iter()
            .map(|&s| fit(dataset, s, &options))
            .collect()
    })?;
    let fits: Vec<FitResult> = fits.into_iter().collect::<Result<_>>()?;

    fs::create_dir_all(out_dir)?;
    for f in &fits {
        let name = f.theta.scenario.name();
        let report = FitReport::new(f, dataset, seed);
        fs::write(out_dir.join(format!("fit_{name}.json")), report.to_json()?)?;
        let gof = goodness_of_fit(&f.theta, dataset)?;
        let points = plot_points(&f.theta, dataset, &gof)?;
        write_plot_csv(&points, &out_dir.join(format!("plots_{name}.csv")))?;
        info!("{name}: wrote fit_{name}.json and plots_{name}.csv");
    }
    write!(out, "{}", fit_table(&fits))?;
    if fits.len() > 1 {
        let best = fits
            .iter()
            .min_by(|a, b| a.aic.total_cmp(&b.aic))
            .expect("at least one fit");
        writeln!(out, "best by AIC: {}", best.theta.scenario.name())?;
    }
    Ok(if fits.iter().any(|f| f.converged) {
        EXIT_OK
    } else {
        EXIT_NO_CONVERGENCE
    })
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn write_summary_csv(summary: &McSummary, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "parameter,model,true,estimate,se,abs_bias,sd,n_used")?;
    let lambda_row = summary.row("sn", "lambda").map(|r| r.true_value);
    for model in ["sn", "normal"] {
        for r in summary.rows.iter().filter(|r| r.model == model) {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.parameter,
                r.model,
                r.true_value,
                fmt_opt(r.mean_estimate),
                fmt_opt(r.mean_se),
                fmt_opt(r.mean_abs_bias),
                fmt_opt(r.sd_estimate),
                r.n_used
            )?;
        }
        if model == "normal" {
            if let Some(t) = lambda_row {
                // λ is not a parameter of the normal model
                writeln!(f, "lambda,normal,{t},,,,,0")?;
            }
        }
    }
    Ok(())
}

pub fn write_replicates_csv(
    results: &[ReplicateResult],
    names: &[String],
    path: &Path,
) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(
        f,
        "replicate,model,converged,iterations,loglik,aic,bic,parameter,estimate,se"
    )?;
    for r in results {
        for (model, s) in [("sn", &r.skew), ("normal", &r.normal)] {
            for (k, est) in s.estimates.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.index,
                    model,
                    s.converged,
                    s.iterations,
                    s.loglik,
                    s.aic,
                    s.bic,
                    names[k],
                    est,
                    fmt_opt(s.se.get(k).copied().unwrap_or(f64::NAN))
                )?;
            }
            if let Some(e) = &s.error {
                writeln!(f, "{},{},false,0,,,,error,,", r.index, model)?;
                warn!("replicate {} {model}: {e}", r.index);
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_simulate(
    scenario: SimScenarioArg,
    n: usize,
    reps: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
    workers: Option<usize>,
    out_dir: &Path,
    save_data: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    check_tol(tol)?;
    if n == 0 {
        return Err(Error::InvalidParameter("--n must be at least 1".into()));
    }
    let scenario = match scenario {
        SimScenarioArg::ErrorSn => Scenario::ErrorSn,
        SimScenarioArg::EffectSn => Scenario::EffectSn,
    };
    let mut config = SimConfig::standard(scenario, n, reps, seed);
    config.fit_options.tol = tol;
    config.fit_options.max_iter = max_iter;
    config.validate()?;
    let results = with_workers(workers, || run_replicates(&config))??;
    let summary = summarize(&config, &results);

    fs::create_dir_all(out_dir)?;
    write_summary_csv(&summary, &out_dir.join("summary.csv"))?;
    let names: Vec<String> = summary
        .rows
        .iter()
        .filter(|r| r.model == "sn")
        .map(|r| r.parameter.clone())
        .collect();
    write_replicates_csv(&results, &names, &out_dir.join("replicates.csv"))?;
    if save_data {
        for r in 0..reps {
            let data = generate_dataset(&config, r as u64)?;
            write_long_csv_file(&data, &out_dir.join(format!("data_{r}.csv")))?;
        }
    }
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    writeln!(
        out,
        "{} n={} reps={} seed={}: skew model converged in {}/{}, normal in {}/{}; AIC selects the skew model in {:.1}%",
        scenario.name(),
        n,
        reps,
        seed,
        summary.replicates_converged,
        reps,
        summary.normal_converged,
        reps,
        100.0 * summary.sn_selected_rate
    )?;
    writeln!(
        out,
        "{:<12} {:<7} {:>8} {:>10} {:>8} {:>8}",
        "parameter", "model", "true", "estimate", "se", "|bias|"
    )?;
    for r in &summary.rows {
        writeln!(
            out,
            "{:<12} {:<7} {:>8.3} {:>10.4} {:>8.4} {:>8.4}",
            r.parameter, r.model, r.true_value, r.mean_estimate, r.mean_se, r.mean_abs_bias
        )?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_diagnose(
    fit_path: &Path,
    data: &Path,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<i32> {
    let report = FitReport::read(fit_path)?;
    let loaded = read_long_csv(data)?;
    report.check_compatible(&loaded.dataset)?;
    let theta = report.theta();
    let gof = goodness_of_fit(&theta, &loaded.dataset)?;

    fs::create_dir_all(out_dir)?;
    let mut f = File::create(out_dir.join("distances.csv"))?;
    writeln!(f, "index,sequence,subject,distance")?;
    for (i, (d, (seq, subj))) in gof.distances.iter().zip(&loaded.ids).enumerate() {
        writeln!(f, "{},{seq},{subj},{d}", i + 1)?;
    }
    let points = plot_points(&theta, &loaded.dataset, &gof)?;
    write_plot_csv(&points, &out_dir.join("plots.csv"))?;
    let ks = serde_json::json!({
        "scenario": report.scenario,
        "n": gof.distances.len(),
        "df": gof.df,
        "ks_statistic": gof.ks_statistic,
        "ks_pvalue": gof.ks_pvalue,
    });
    fs::write(
        out_dir.join("gof.json"),
        serde_json::to_string_pretty(&ks)? + "\n",
    )?;
    writeln!(
        out,
        "{}: n={} df={} KS D={:.4} p={:.4}",
        report.scenario.name(),
        gof.distances.len(),
        gof.df,
        gof.ks_statistic,
        gof.ks_pvalue
    )?;
    Ok(EXIT_OK)
}

/// Runs a parsed command, mapping errors to [`EXIT_INPUT`].
pub fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Fit {
            data,
            scenario,
            tol,
            max_iter,
            seed,
            out_dir,
            workers,
        } => cmd_fit(&data, scenario, tol, max_iter, seed, &out_dir, workers, out),
        Command::Simulate {
            scenario,
            n,
            reps,
            seed,
            tol,
            max_iter,
            workers,
            out_dir,
            save_data,
        } => cmd_simulate(
            scenario, n, reps, seed, tol, max_iter, workers, &out_dir, save_data, out,
        ),
        Command::Diagnose {
            fit, data, out_dir, ..
        } => cmd_diagnose(&fit, &data, &out_dir, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}
