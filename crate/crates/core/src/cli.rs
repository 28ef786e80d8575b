//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::backend::MockScript;
use crate::par::Exec;
use crate::pipeline::{Method, OccupationSet, Pipeline, PipelineError, RunConfig, RunStore};
use crate::report::{self, FigureKind};
use crate::templates::PromptTemplates;

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_LOCKED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "bame", version, about = "Audit and mitigate representation bias in LLM-generated stories")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that holds run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Seed for the mock backend.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Stories requested per batch.
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Log debug output.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate batches for every selected occupation and method.
    Run {
        /// Comma-separated subset of vanilla, baseline, bame.
        #[arg(long)]
        methods: Option<String>,
        /// One occupation name, or a comma-separated list.
        #[arg(long)]
        occupations: Option<String>,
        /// Run directory name (default: derived from the configuration).
        #[arg(long)]
        run_id: Option<String>,
        /// Process occupations one at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Compute the report for a run directory.
    Analyze { run_dir: PathBuf },
    /// Import a labelled dataset CSV as a run, then analyze it.
    Ingest {
        dataset: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Write long-format CSV for a figure (ethnicity, tvd, dpr or all).
    PlotData {
        run_dir: PathBuf,
        #[arg(long, default_value = "all")]
        figure: String,
    },
    /// Print the default prompt templates, or write them to a directory.
    Templates {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Write a run's stories and labels in the dataset CSV format.
    Export {
        run_dir: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_methods(s: &str) -> anyhow::Result<Vec<Method>> {
    let methods: Vec<Method> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.parse::<Method>().map_err(anyhow::Error::msg))
        .collect::<anyhow::Result<_>>()?;
    if methods.is_empty() {
        bail!("--methods selected nothing");
    }
    Ok(methods)
}

/// The configured occupations named by the filter, in filter order.
fn restrict(configured: &OccupationSet, wanted: &OccupationSet) -> anyhow::Result<OccupationSet> {
    let mut picked = Vec::new();
    let mut unknown = Vec::new();
    for w in wanted.names() {
        match configured.names().iter().find(|c| c.eq_ignore_ascii_case(w)) {
            Some(c) => picked.push(c.clone()),
            None => unknown.push(w.as_str()),
        }
    }
    if !unknown.is_empty() {
        bail!("--occupations names occupations not in the configuration: {}", unknown.join(", "));
    }
    OccupationSet::new(picked).map_err(anyhow::Error::msg)
}

fn load_config(global: &Global) -> anyhow::Result<RunConfig> {
    let path = global.config.as_deref().context("--config is required for this command")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = global.seed {
        cfg.backend.mock.get_or_insert_with(MockScript::default).seed = seed;
    }
    if let Some(b) = global.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn analyze(run_dir: &Path) -> anyhow::Result<()> {
    let rep = report::analyze_run(run_dir, Exec::default())?;
    for g in &rep.groups {
        println!(
            "{} {:<8} records={:<3} failed={} female={:.1}% tvd_mean={}",
            g.model,
            g.method,
            g.record_ids.len(),
            g.failed_record_ids.len(),
            g.female_pct,
            g.ethnicity_tvd_mean.map_or("-".into(), |t| format!("{t:.3}")),
        );
    }
    for d in &rep.deltas {
        match (&d.wilcoxon, &d.reason) {
            (Some(w), _) => println!("{} delta: W={} p={:.6}", d.model, w.statistic, w.p_value),
            (None, Some(r)) => println!("{} delta: {r}", d.model),
            _ => {}
        }
    }
    println!("report written to {}", run_dir.join(report::REPORT_DIR).display());
    Ok(())
}

fn run(global: &Global, command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Run {
            methods,
            occupations,
            run_id,
            sequential,
        } => {
            let mut cfg = load_config(global)?;
            if let Some(m) = methods {
                cfg.methods = parse_methods(&m)?;
            }
            if let Some(o) = occupations {
                let wanted = OccupationSet::parse_filter(&o).map_err(anyhow::Error::msg)?;
                cfg.occupations = restrict(&cfg.occupations, &wanted)?;
            }
            let run_id = run_id.unwrap_or_else(|| cfg.derived_run_id());
            let dir = global.out.join(&run_id);
            let store = match RunStore::create(&dir) {
                Ok(s) => s,
                Err(PipelineError::Locked(p)) => {
                    eprintln!("error: run directory {} is locked by another writer", p.display());
                    return Ok(EXIT_LOCKED);
                }
                Err(e) => return Err(e.into()),
            };
            let pipeline = Pipeline::new(cfg, run_id.clone())?.with_store(store)?;
            let exec = if sequential { Exec::Sequential } else { Exec::Parallel };
            let records = pipeline.run_all(exec)?;
            let failed = records.iter().filter(|r| !r.is_ok()).count();
            for r in &records {
                let status = if r.is_ok() { "ok" } else { "FAILED" };
                let n = r.tally.as_ref().map_or(0, |t| t.total());
                println!("{status:<6} {} ({n} characters)", r.record_id);
            }
            println!("{} records, {failed} failed, in {}", records.len(), dir.display());
            Ok(if failed > 0 { EXIT_PARTIAL } else { EXIT_OK })
        }
        Command::Analyze { run_dir } => {
            analyze(&run_dir)?;
            Ok(EXIT_OK)
        }
        Command::Ingest { dataset, run_id } => {
            let dir = match report::ingest_dataset(&dataset, &global.out, run_id.as_deref()) {
                Err(report::IngestError::Pipeline(PipelineError::Locked(p))) => {
                    eprintln!("error: run directory {} is locked by another writer", p.display());
                    return Ok(EXIT_LOCKED);
                }
                other => other?,
            };
            println!("ingested into {}", dir.display());
            analyze(&dir)?;
            Ok(EXIT_OK)
        }
        Command::PlotData { run_dir, figure } => {
            let kinds = if figure.eq_ignore_ascii_case("all") {
                FigureKind::ALL.to_vec()
            } else {
                vec![figure.parse::<FigureKind>()?]
            };
            let rep = match report::load_report(&run_dir) {
                Ok(r) => r,
                Err(_) => report::analyze_run(&run_dir, Exec::default())?,
            };
            for k in kinds {
                println!("{}", report::emit_plot_data(&rep, k, &run_dir)?.display());
            }
            Ok(EXIT_OK)
        }
        Command::Templates { dir } => {
            let t = match &global.config {
                Some(_) => match load_config(global)?.templates_dir {
                    Some(d) => PromptTemplates::load_dir(&d)?,
                    None => PromptTemplates::default(),
                },
                None => PromptTemplates::default(),
            };
            match dir {
                Some(d) => {
                    t.write_dir(&d).with_context(|| format!("writing {}", d.display()))?;
                    println!("templates written to {}", d.display());
                }
                None => {
                    let mut out = std::io::stdout().lock();
                    for tpl in t.all() {
                        writeln!(out, "== {} ==\n{}\n", tpl.name, tpl.text)?;
                    }
                }
            }
            Ok(EXIT_OK)
        }
        Command::Export { run_dir, output } => {
            let n = match &output {
                Some(p) => {
                    let mut buf = Vec::new();
                    let n = report::export_dataset(&run_dir, &mut buf)?;
                    crate::store::write_atomic(p, &buf).with_context(|| format!("writing {}", p.display()))?;
                    n
                }
                None => report::export_dataset(&run_dir, std::io::stdout().lock())?,
            };
            eprintln!("exported {n} rows");
            Ok(EXIT_OK)
        }
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    let level = if cli.global.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli.global, cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn methods_filter() {
        assert_eq!(parse_methods("vanilla,bame").unwrap(), vec![Method::Vanilla, Method::Bame]);
        assert!(parse_methods("vanilla,nope").is_err());
        assert!(parse_methods(",").is_err());
    }
}
