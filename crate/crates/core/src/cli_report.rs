//! Command-line runner: plan files in, run directories with a manifest,
//! config echo and metrics CSV out.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editors::Algorithm;
use crate::error::{EditError, Result};
use crate::harness::{
    gen_facts, lambda_sweep, layer_sweep, with_threads, Experiment, ExperimentPlan,
    MetricsReport, SyntheticFact,
};
use crate::svg::{emit_plot_svg, GroupBy, Metric};
use crate::toy_model::{ToyModel, ToyModelConfig};

pub const CSV_HEADER: &str =
    "run_id,algorithm,layer,batch_size,batch_index,edits_so_far,es,ps,ns,s,preservation,memorization,delta_fro,seed";

pub const THREADS_ENV: &str = "PM_EDIT_THREADS";

const LAMBDA_TAG: &str = "-lambda";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| EditError::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => PathBuf::from(tmp_name),
    };
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub algorithm: Algorithm,
    pub layer: usize,
    pub batch_size: usize,
    pub batch_index: usize,
    pub edits_so_far: usize,
    pub es: f64,
    pub ps: f64,
    pub ns: f64,
    pub s: f64,
    pub preservation: f64,
    pub memorization: f64,
    pub delta_fro: f64,
    pub seed: u64,
}

impl ReportRow {
    pub fn new(run_id: &str, plan: &ExperimentPlan, report: &MetricsReport) -> Self {
        Self {
            run_id: run_id.to_string(),
            algorithm: plan.algorithm,
            layer: plan.layer,
            batch_size: plan.batch_size,
            batch_index: report.batch_index,
            edits_so_far: report.edits_so_far,
            es: report.es,
            ps: report.ps,
            ns: report.ns,
            s: report.s,
            preservation: report.objective.preservation,
            memorization: report.objective.memorization,
            delta_fro: report.delta_fro,
            seed: plan.seed,
        }
    }

    /// λ encoded in a lambda-sweep run id (`<hash>-lambda<λ>`).
    pub fn lambda(&self) -> Option<f64> {
        self.run_id
            .rsplit_once(LAMBDA_TAG)
            .and_then(|(_, l)| l.parse().ok())
    }

    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.9e},{:.9e},{:.9e},{}",
            self.run_id,
            self.algorithm,
            self.layer,
            self.batch_size,
            self.batch_index,
            self.edits_so_far,
            self.es,
            self.ps,
            self.ns,
            self.s,
            self.preservation,
            self.memorization,
            self.delta_fro,
            self.seed
        )
    }
}

pub fn format_metrics_csv(rows: &[ReportRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(EditError::InvalidConfig("no reports to write".into()));
    }
    write_atomic(path, format_metrics_csv(rows).as_bytes())
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(EditError::SchemaMismatch(format!("unexpected header {h:?}"))),
        None => return Err(EditError::SchemaMismatch("empty CSV".into())),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(EditError::SchemaMismatch(format!(
                    "row {} has {} fields",
                    i + 1,
                    f.len()
                )));
            }
            let bad = |col: &str| EditError::SchemaMismatch(format!("row {}: bad {col}", i + 1));
            let int = |s: &str, col: &str| s.parse::<usize>().map_err(|_| bad(col));
            let real = |s: &str, col: &str| s.parse::<f64>().map_err(|_| bad(col));
            Ok(ReportRow {
                run_id: f[0].to_string(),
                algorithm: f[1].parse()?,
                layer: int(f[2], "layer")?,
                batch_size: int(f[3], "batch_size")?,
                batch_index: int(f[4], "batch_index")?,
                edits_so_far: int(f[5], "edits_so_far")?,
                es: real(f[6], "es")?,
                ps: real(f[7], "ps")?,
                ns: real(f[8], "ns")?,
                s: real(f[9], "s")?,
                preservation: real(f[10], "preservation")?,
                memorization: real(f[11], "memorization")?,
                delta_fro: real(f[12], "delta_fro")?,
                seed: f[13].parse().map_err(|_| bad("seed"))?,
            })
        })
        .collect()
}

/// Short content hash of a plan; stable across invocations.
pub fn plan_hash(plan: &ExperimentPlan) -> Result<String> {
    let json = serde_json::to_string(plan)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(hex::encode(&digest[..6]))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub plan: ExperimentPlan,
    pub tool_version: String,
    pub started: String,
    pub finished: Option<String>,
    pub output_paths: Vec<String>,
}

const MANIFEST_FILE: &str = "manifest.json";
const PLAN_FILE: &str = "plan.json";
const METRICS_FILE: &str = "metrics.csv";

/// A run directory. The manifest is written on start and rewritten on finish;
/// timestamps appear only in the manifest.
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
    hash: String,
}

impl RunDir {
    pub fn start(dir: &Path, command: &str, plan: &ExperimentPlan) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let hash = plan_hash(plan)?;
        let now = Utc::now();
        let manifest = RunManifest {
            run_id: format!("{}-{hash}", now.format("%Y%m%dT%H%M%S%.6fZ")),
            command: command.to_string(),
            plan: plan.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started: now.to_rfc3339_opts(SecondsFormat::Micros, true),
            finished: None,
            output_paths: vec![MANIFEST_FILE.into(), PLAN_FILE.into()],
        };
        write_atomic(
            &dir.join(PLAN_FILE),
            format!("{}\n", serde_json::to_string_pretty(plan)?).as_bytes(),
        )?;
        let run = Self {
            dir: dir.to_path_buf(),
            manifest,
            hash,
        };
        run.write_manifest()?;
        Ok(run)
    }

    /// Deterministic id used in CSV rows.
    pub fn row_id(&self) -> &str {
        &self.hash
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn write_manifest(&self) -> Result<()> {
        let text = format!("{}\n", serde_json::to_string_pretty(&self.manifest)?);
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn finish(mut self, rows: &[ReportRow]) -> Result<RunManifest> {
        write_metrics_csv(rows, &self.dir.join(METRICS_FILE))?;
        self.manifest.output_paths.push(METRICS_FILE.into());
        self.manifest.finished = Some(Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true));
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_plan(path: &Path) -> Result<ExperimentPlan> {
    let plan: ExperimentPlan = read_json(path)?;
    plan.validate()?;
    Ok(plan)
}

pub fn load_facts(path: &Path) -> Result<Vec<SyntheticFact>> {
    read_json(path)
}

/// Runs the plan's strategy and returns the CSV rows.
pub fn run_edit(
    plan: &ExperimentPlan,
    row_id: &str,
    model: Option<ToyModel>,
    facts: Option<Vec<SyntheticFact>>,
) -> Result<Vec<ReportRow>> {
    let base = match model {
        Some(m) => m,
        None => ToyModel::init(plan.model_config.clone())?,
    };
    let experiment = match facts {
        Some(f) => Experiment::with_model_and_facts(plan.clone(), base, f)?,
        None => Experiment::with_model(plan.clone(), base)?,
    };
    let reports = experiment.run()?;
    Ok(reports.iter().map(|r| ReportRow::new(row_id, plan, r)).collect())
}

pub fn run_layer_sweep(plan: &ExperimentPlan, row_id: &str, layers: &[usize]) -> Result<Vec<ReportRow>> {
    let sweep = layer_sweep(plan, layers)?;
    Ok(sweep
        .iter()
        .map(|(&layer, report)| {
            let mut p = plan.clone();
            p.layer = layer;
            p.batch_size = 1;
            ReportRow::new(row_id, &p, report)
        })
        .collect())
}

pub fn run_lambda_sweep(plan: &ExperimentPlan, row_id: &str, lambdas: &[f64]) -> Result<Vec<ReportRow>> {
    let sweep = lambda_sweep(plan, lambdas)?;
    let mut p = plan.clone();
    p.batch_size = p.total_edits;
    Ok(sweep
        .iter()
        .map(|(lambda, report)| ReportRow::new(&format!("{row_id}{LAMBDA_TAG}{lambda}"), &p, report))
        .collect())
}

/// λ grids mirroring the published sweeps.
pub fn default_lambdas(algorithm: Algorithm) -> Vec<f64> {
    match algorithm {
        Algorithm::Emmet => vec![0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
        _ => vec![1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 5e4, 1e5, 5e5, 1e6],
    }
}

#[derive(Parser, Debug)]
#[command(name = "pm-edit", version, about = "Closed-form model editing experiments on toy residual models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Initialise a model from a model-config JSON and save it.
    GenModel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the plan's fact set against a saved model.
    GenFacts {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one editing experiment.
    Edit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use a saved model instead of initialising from the plan.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Use a saved fact set instead of generating one.
        #[arg(long)]
        facts: Option<PathBuf>,
    },
    /// Singular editing at each layer.
    LayerSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated layers; all layers when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Batched editing at each λ.
    LambdaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated λ values; a per-algorithm default grid when omitted.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Plot one metric from a metrics CSV.
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long, value_enum)]
        group_by: GroupBy,
        #[arg(long)]
        out: PathBuf,
    },
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| EditError::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a count"))),
        _ => Ok(None),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenModel { config, out } => {
            let cfg: ToyModelConfig = read_json(&config)?;
            ToyModel::init(cfg)?.save_json(&out)
        }
        Command::GenFacts { model, config, out } => {
            let model = ToyModel::load_json(&model)?;
            let plan = load_plan(&config)?;
            let facts = gen_facts(&model, plan.layer, &plan.facts, plan.seed)?;
            write_atomic(&out, serde_json::to_string(&facts)?.as_bytes())
        }
        Command::Edit {
            config,
            out,
            model,
            facts,
        } => {
            let plan = load_plan(&config)?;
            let model = model.map(|p| ToyModel::load_json(&p)).transpose()?;
            let facts = facts.map(|p| load_facts(&p)).transpose()?;
            let run = RunDir::start(&out, "edit", &plan)?;
            let rows = run_edit(&plan, run.row_id(), model, facts)?;
            log_summary(&rows);
            run.finish(&rows)?;
            Ok(())
        }
        Command::LayerSweep {
            config,
            out,
            layers,
        } => {
            let plan = load_plan(&config)?;
            let layers = if layers.is_empty() {
                (0..plan.model_config.num_layers).collect()
            } else {
                layers
            };
            let run = RunDir::start(&out, "layer-sweep", &plan)?;
            let rows = run_layer_sweep(&plan, run.row_id(), &layers)?;
            log_summary(&rows);
            run.finish(&rows)?;
            Ok(())
        }
        Command::LambdaSweep {
            config,
            out,
            lambdas,
        } => {
            let plan = load_plan(&config)?;
            let lambdas = if lambdas.is_empty() {
                default_lambdas(plan.algorithm)
            } else {
                lambdas
            };
            let run = RunDir::start(&out, "lambda-sweep", &plan)?;
            let rows = run_lambda_sweep(&plan, run.row_id(), &lambdas)?;
            log_summary(&rows);
            run.finish(&rows)?;
            Ok(())
        }
        Command::Report {
            csv,
            metric,
            group_by,
            out,
        } => emit_plot_svg(&csv, metric, group_by, &out),
    }
}

fn log_summary(rows: &[ReportRow]) {
    if let Some(last) = rows.last() {
        log::info!(
            "{} rows; last: es={:.4} ps={:.4} ns={:.4} s={:.2}",
            rows.len(),
            last.es,
            last.ps,
            last.ns,
            last.s
        );
    }
}

/// Entry point shared by the binary and the tests. Exit codes: 0 success,
/// 1 usage or input error, 2 numerical failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(err) => {
            eprintln!("error: {err}");
            return 1;
        }
    };
    match with_threads(threads, || execute(cli.command)) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row(i: usize) -> ReportRow {
        ReportRow {
            run_id: "0123456789ab".into(),
            algorithm: Algorithm::Emmet,
            layer: 2,
            batch_size: 8,
            batch_index: i,
            edits_so_far: 8 * i,
            es: 0.875,
            ps: 2.0 / 3.0,
            ns: 0.1234567,
            s: 94.15294,
            preservation: 1.0 / 3.0,
            memorization: 1.234e-12,
            delta_fro: 7.5,
            seed: 99,
        }
    }

    #[test]
    fn single_row_is_two_lines() {
        let text = format_metrics_csv(&[sample_row(1)]);
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n') && !text.contains('\r'));
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn csv_round_trips_at_printed_precision() {
        let rows: Vec<ReportRow> = (1..=4).map(sample_row).collect();
        let text = format_metrics_csv(&rows);
        let parsed = parse_metrics_csv(&text).unwrap();
        assert_eq!(format_metrics_csv(&parsed), text);
        assert_eq!(parsed[3].edits_so_far, 32);
    }

    #[test]
    fn csv_rejects_bad_header_and_rows() {
        assert!(matches!(
            parse_metrics_csv("run,algorithm\n"),
            Err(EditError::SchemaMismatch(_))
        ));
        let text = format!("{CSV_HEADER}\nx,memit,1\n");
        assert!(matches!(parse_metrics_csv(&text), Err(EditError::SchemaMismatch(_))));
        assert!(write_metrics_csv(&[], Path::new("/nonexistent/x.csv")).is_err());
    }

    #[test]
    fn lambda_ids_parse() {
        let mut r = sample_row(1);
        assert_eq!(r.lambda(), None);
        r.run_id = format!("abc{LAMBDA_TAG}{}", 1e-5);
        assert_eq!(r.lambda(), Some(1e-5));
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(cli_main(["pm-edit", "frobnicate"]), 1);
        assert_eq!(cli_main(["pm-edit"]), 1);
        assert_eq!(cli_main(["pm-edit", "--help"]), 0);
    }
}
