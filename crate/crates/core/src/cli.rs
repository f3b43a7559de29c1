//! Command-line front end.
//!
//! Every command reads an optional JSON config (`--config`), applies flag
//! overrides, and writes its outputs under `--out`. Failures print a single
//! `error_code:message` line on stderr and exit nonzero.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::clusterer::{self, ClusterModel, KMeansParams};
use crate::error::{Error, Result};
use crate::io::{self, format_f64, write_atomic, FeatureSet};
use crate::matrix::Matrix;
use crate::refinery::{self, AblationTable, Criterion, RefineryConfig, RefineryReport, REPORT_SCHEMA};
use crate::selector;
use crate::synthgen;
use crate::uncertainty;

pub const THREADS_ENV: &str = "P2LR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "p2lr", version, about = "Uncertainty-guided progressive pseudo-label refinery")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file (`"version": 1`, flat keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub criterion: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long = "T", global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub p0: Option<f64>,
    #[arg(long, global = true)]
    pub h: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub corrupt: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic target domain as P2LRFS1/P2LRLB1 files.
    Generate {
        /// Also write a CSV copy of the features with labels.
        #[arg(long)]
        csv: bool,
    },
    /// Run the refinery and write the report, step table and selection dump.
    Run,
    /// Run every (criterion, seed) cell and write a comparison table.
    Ablate {
        /// Comma-separated criteria.
        #[arg(long, default_value = "kl_ideal,l2_centroid,consistency,reweight,none")]
        criteria: String,
        /// Comma-separated seeds; overrides --n-seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value_t = 3)]
        n_seeds: u64,
    },
    /// Cluster a feature file and dump per-sample uncertainty scores.
    Score {
        /// P2LRFS1 file, or CSV when the extension is `.csv`.
        #[arg(long)]
        features: PathBuf,
        /// P2LRLB1 pseudo labels; clusters with k-means when absent.
        #[arg(long)]
        pseudo_labels: Option<PathBuf>,
    },
    /// Summarize a finished report.
    Eval {
        #[arg(long)]
        report: PathBuf,
    },
    /// Export plotting series from a report (and optionally an ablation table).
    Export {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Comma-separated h values for the schedule family.
        #[arg(long, default_value = "0.5,1.5,3")]
        h_values: String,
    },
}

/// Serializes with every float printed to 17 significant digits.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    struct Float17;
    impl serde_json::ser::Formatter for Float17 {
        fn write_f64<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
            writer.write_all(format_f64(value).as_bytes())
        }
    }
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Float17);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Input(format!("serialization failed: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Well-formed JSON that does not fit the config schema is a config error
/// naming the offending key.
fn config_from_value(value: serde_json::Value) -> Result<RefineryConfig> {
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let key = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
            .unwrap_or("config");
        Error::config(key, msg.clone())
    })
}

/// Loads the config file (or defaults) and applies flag overrides.
pub fn resolve_config(o: &Overrides) -> Result<RefineryConfig> {
    let mut cfg = match &o.config {
        Some(path) => config_from_value(read_json(path)?)?,
        None => RefineryConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.criterion {
        cfg.criterion = v.parse()?;
    }
    if let Some(v) = &o.out {
        cfg.out_dir = Some(v.display().to_string());
    }
    if let Some(v) = o.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = o.k {
        cfg.k = Some(v);
    }
    if let Some(v) = o.p0 {
        cfg.p0 = v;
    }
    if let Some(v) = o.h {
        cfg.h = v;
    }
    if let Some(v) = o.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = o.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = o.corrupt {
        cfg.corrupt_fraction = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RefineryConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| ".".into()));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

#[derive(Debug, Serialize)]
struct GeneratorSidecar<'a> {
    seed: u64,
    c_true: usize,
    d: usize,
    n_per_id: usize,
    n: usize,
    noise_sigma: f64,
    shift_scale: f64,
    min_separation: f64,
    features: &'a str,
    labels: &'a str,
}

pub fn cmd_generate(cfg: &RefineryConfig, csv: bool) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let domain = refinery::generate_domain(cfg)?;
    let features = dir.join("features.p2lrfs");
    let labels = dir.join("labels.p2lrlb");
    io::write_features(&features, &domain.raw_features)?;
    io::write_labels(&labels, &domain.hidden_labels)?;
    let sidecar = GeneratorSidecar {
        seed: cfg.seed,
        c_true: cfg.c_true,
        d: cfg.d,
        n_per_id: cfg.n_per_id,
        n: cfg.n(),
        noise_sigma: cfg.noise_sigma,
        shift_scale: cfg.shift_scale,
        min_separation: cfg.min_separation,
        features: "features.p2lrfs",
        labels: "labels.p2lrlb",
    };
    let meta = dir.join("generator.json");
    write_atomic(&meta, &to_json_bytes(&sidecar)?)?;
    let mut written = vec![features, labels, meta];
    if csv {
        let path = dir.join("features.csv");
        io::write_features_csv(
            &path,
            &FeatureSet {
                features: domain.raw_features,
                labels: Some(domain.hidden_labels),
            },
        )?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_steps_csv(path: &Path, report: &RefineryReport) -> Result<()> {
    let header = [
        "t",
        "p_t",
        "beta",
        "n_selected",
        "mean_u_all",
        "mean_u_selected",
        "mean_u_rejected",
        "purity",
        "n_wrong",
        "detection_precision",
        "detection_recall",
        "detection_auroc",
        "wstep_loss_before",
        "wstep_loss_after",
        "inertia",
        "map",
        "rank1",
        "rank5",
        "rank10",
    ];
    let rows = report.steps.iter().map(|s| {
        vec![
            s.t.to_string(),
            format_f64(s.p_t),
            opt(s.beta),
            s.n_selected.to_string(),
            format_f64(s.mean_u_all),
            format_f64(s.mean_u_selected),
            opt(s.mean_u_rejected),
            format_f64(s.purity),
            s.n_wrong.to_string(),
            format_f64(s.detection_precision),
            opt(s.detection_recall),
            opt(s.detection_auroc),
            format_f64(s.wstep_loss_before),
            format_f64(s.wstep_loss_after),
            format_f64(s.inertia),
            format_f64(s.map),
            format_f64(s.rank1),
            format_f64(s.rank5),
            format_f64(s.rank10),
        ]
    });
    write_csv(path, &header, rows)
}

pub fn cmd_run(cfg: &RefineryConfig) -> Result<PathBuf> {
    let dir = out_dir(cfg)?;
    let report_path = dir.join("report.json");
    let run = match refinery::run_refinery_detailed(cfg) {
        Ok(run) => run,
        Err(failure) => {
            // flush whatever completed before failing
            write_atomic(&report_path, &to_json_bytes(&failure.partial)?)?;
            return Err(failure.error);
        }
    };
    write_atomic(&report_path, &to_json_bytes(&run.report)?)?;
    write_steps_csv(&dir.join("steps.csv"), &run.report)?;
    write_csv(
        &dir.join("selection.csv"),
        &["step", "sample_index", "u", "selected", "beta", "p_t"],
        run.selections.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.sample_index.to_string(),
                format_f64(r.u),
                u8::from(r.selected).to_string(),
                opt(r.beta),
                format_f64(r.p_t),
            ]
        }),
    )?;
    write_csv(
        &dir.join("timings.csv"),
        &["t", "seconds"],
        run.step_seconds
            .iter()
            .enumerate()
            .map(|(t, s)| vec![t.to_string(), format!("{s:.6}")]),
    )?;
    if !run.checkpoints.is_empty() {
        let ck_dir = dir.join("checkpoints");
        fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        for (t, ck) in &run.checkpoints {
            write_atomic(&ck_dir.join(format!("step_{t:04}.json")), &to_json_bytes(ck)?)?;
        }
    }
    Ok(report_path)
}

fn parse_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse::<T>()
                .map_err(|_| Error::config(key, format!("cannot parse `{x}`")))
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RefineryConfig, criteria: &[Criterion], seeds: &[u64]) -> Result<AblationTable> {
    let dir = out_dir(cfg)?;
    let mut base = cfg.clone();
    base.out_dir = None;
    let table = refinery::run_ablation(&base, criteria, seeds)?;
    write_atomic(&dir.join("ablation.json"), &to_json_bytes(&table)?)?;
    let stat = |m: Option<refinery::MeanStd>| match m {
        Some(m) => vec![format_f64(m.mean), format_f64(m.std)],
        None => vec![String::new(), String::new()],
    };
    write_csv(
        &dir.join("ablation.csv"),
        &[
            "criterion",
            "runs",
            "failed",
            "purity_mean",
            "purity_std",
            "map_mean",
            "map_std",
            "rank1_mean",
            "rank1_std",
            "auroc_mean",
            "auroc_std",
        ],
        table.rows.iter().map(|r| {
            let mut row = vec![r.criterion.as_str().to_string(), r.runs.to_string(), r.failed.to_string()];
            row.extend(stat(r.final_purity));
            row.extend(stat(r.final_map));
            row.extend(stat(r.final_rank1));
            row.extend(stat(r.detection_auroc));
            row
        }),
    )?;
    Ok(table)
}

fn load_features(path: &Path) -> Result<Matrix> {
    if path.extension().is_some_and(|e| e == "csv") {
        Ok(io::read_features_csv(path)?.features)
    } else {
        io::read_features(path)
    }
}

/// Scores the pseudo labels of a feature file with the configured criterion
/// (`kl_ideal` or `l2_centroid`).
pub fn cmd_score(cfg: &RefineryConfig, features: &Path, pseudo_labels: Option<&Path>) -> Result<PathBuf> {
    let dir = out_dir(cfg)?;
    let x = load_features(features)?;
    let cluster = match pseudo_labels {
        Some(p) => {
            let labels = io::read_labels(p)?;
            if labels.len() != x.rows() {
                return Err(Error::Input(format!(
                    "{} pseudo labels for {} samples",
                    labels.len(),
                    x.rows()
                )));
            }
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut centroids = Matrix::zeros(k, x.cols());
            let mut counts = vec![0usize; k];
            for (i, &l) in labels.iter().enumerate() {
                counts[l] += 1;
                for (c, v) in centroids.row_mut(l).iter_mut().zip(x.row(i)) {
                    *c += v;
                }
            }
            for (j, &cnt) in counts.iter().enumerate() {
                if cnt == 0 {
                    return Err(Error::Input(format!("pseudo label {j} has no members")));
                }
                centroids.row_mut(j).iter_mut().for_each(|c| *c /= cnt as f64);
            }
            let inertia = clusterer::inertia(&x, &centroids, &labels);
            ClusterModel {
                centroids,
                assignments: labels,
                inertia,
                iterations: 0,
            }
        }
        None => clusterer::kmeans(
            &x,
            KMeansParams {
                k: cfg.k(),
                max_iters: cfg.kmeans_max_iters,
                tol: cfg.kmeans_tol,
                seed: cfg.seed,
            },
        )?,
    };
    let (labels, mask) = if cfg.corrupt_fraction > 0.0 {
        let (l, m) = synthgen::corrupt_labels(&cluster.assignments, cfg.corrupt_fraction, cluster.k(), cfg.seed)?;
        (l, Some(m))
    } else {
        (cluster.assignments.clone(), None)
    };
    let labeled = ClusterModel {
        assignments: labels.clone(),
        ..cluster
    };
    let records = match cfg.criterion {
        Criterion::KlIdeal => uncertainty::score_all(&x, &labeled, cfg.alpha, cfg.epsilon)?,
        Criterion::L2Centroid => uncertainty::l2_uncertainty(&x, &labeled)?,
        other => {
            return Err(Error::config(
                "criterion",
                format!("`{}` cannot score a standalone feature file", other.as_str()),
            ))
        }
    };
    let mut header = vec!["sample_index", "criterion", "score", "pseudo_label"];
    if mask.is_some() {
        header.push("is_corrupted");
    }
    let path = dir.join("scores.csv");
    write_csv(
        &path,
        &header,
        records.iter().map(|r| {
            let mut row = vec![
                r.sample_index.to_string(),
                r.criterion.as_str().to_string(),
                format_f64(r.score),
                labels[r.sample_index].to_string(),
            ];
            if let Some(m) = &mask {
                row.push(u8::from(m[r.sample_index]).to_string());
            }
            row
        }),
    )?;
    Ok(path)
}

pub fn load_report(path: &Path) -> Result<RefineryReport> {
    let value: serde_json::Value = read_json(path)?;
    let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
    if schema != REPORT_SCHEMA {
        return Err(Error::Schema {
            found: schema.to_string(),
            expected: REPORT_SCHEMA.to_string(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub criterion: Criterion,
    pub seed: u64,
    pub steps: usize,
    pub initial_purity: f64,
    pub final_purity: f64,
    pub initial_map: f64,
    pub final_map: f64,
    pub final_rank1: f64,
    pub mean_detection_auroc: Option<f64>,
    pub first_mean_u_selected: f64,
    pub last_mean_u_selected: f64,
}

pub fn cmd_eval(report_path: &Path) -> Result<EvalSummary> {
    let report = load_report(report_path)?;
    let summary = report
        .summary
        .as_ref()
        .ok_or_else(|| Error::Input("report is partial (no summary)".into()))?;
    let (first, last) = match (report.steps.first(), report.steps.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Input("report has no steps".into())),
    };
    Ok(EvalSummary {
        criterion: report.config.criterion,
        seed: report.config.seed,
        steps: report.steps.len(),
        initial_purity: summary.initial_purity,
        final_purity: summary.final_purity,
        initial_map: summary.initial_map,
        final_map: summary.final_map,
        final_rank1: summary.final_rank1,
        mean_detection_auroc: summary.mean_detection_auroc,
        first_mean_u_selected: first.mean_u_selected,
        last_mean_u_selected: last.mean_u_selected,
    })
}

pub fn cmd_export(
    cfg: &RefineryConfig,
    report_path: &Path,
    ablation: Option<&Path>,
    format: &str,
    h_values: &[f64],
) -> Result<Vec<PathBuf>> {
    if format != "csv" {
        return Err(Error::config("format", format!("unsupported export format `{format}`")));
    }
    let report = load_report(report_path)?;
    let dir = out_dir(cfg)?;
    let mut written = Vec::new();

    let path = dir.join("uncertainty_vs_step.csv");
    write_csv(
        &path,
        &["t", "mean_u_all", "mean_u_selected", "mean_u_rejected"],
        report.steps.iter().map(|s| {
            vec![
                s.t.to_string(),
                format_f64(s.mean_u_all),
                format_f64(s.mean_u_selected),
                opt(s.mean_u_rejected),
            ]
        }),
    )?;
    written.push(path);

    let path = dir.join("p_t.csv");
    write_csv(
        &path,
        &["t", "p_t", "n_selected"],
        report
            .steps
            .iter()
            .map(|s| vec![s.t.to_string(), format_f64(s.p_t), s.n_selected.to_string()]),
    )?;
    written.push(path);

    let horizon = report.config.horizon;
    let p0 = report.config.p0;
    let names: Vec<String> = h_values.iter().map(|h| format!("h_{h}")).collect();
    let mut header = vec!["t"];
    header.extend(names.iter().map(String::as_str));
    let rows = (0..=horizon)
        .map(|t| {
            let mut row = vec![t.to_string()];
            for &h in h_values {
                row.push(format_f64(selector::schedule_p(t, horizon, p0, h)?));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join("schedule_family.csv");
    write_csv(&path, &header, rows)?;
    written.push(path);

    if let Some(ab) = ablation {
        let table: AblationTable = read_json(ab)?;
        let path = dir.join("criteria_bars.csv");
        write_csv(
            &path,
            &["criterion", "final_purity", "final_map", "final_rank1", "detection_auroc"],
            table.rows.iter().map(|r| {
                vec![
                    r.criterion.as_str().to_string(),
                    opt(r.final_purity.map(|m| m.mean)),
                    opt(r.final_map.map(|m| m.mean)),
                    opt(r.final_rank1.map(|m| m.mean)),
                    opt(r.detection_auroc.map(|m| m.mean)),
                ]
            }),
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Process exit code for an error code; 0 is reserved for success.
pub fn exit_code(code: &str) -> i32 {
    match code {
        "usage" => 2,
        "config" => 3,
        "input" => 4,
        "io" => 5,
        "parse" => 6,
        "schema_version" => 7,
        "singular_normalization" => 8,
        "infinite_divergence" => 9,
        "contract" => 10,
        "oracle_size" => 11,
        "split" => 12,
        _ => 1,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got `{raw}`")))?;
    // a pool that is already built keeps its size; results do not depend on it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = resolve_config(&cli.overrides)?;
    let mut stdout = std::io::stdout().lock();
    let mut say = |line: String| {
        let _ = writeln!(stdout, "{line}");
    };
    match cli.command {
        Command::Generate { csv } => {
            for p in cmd_generate(&cfg, csv)? {
                say(p.display().to_string());
            }
        }
        Command::Run => {
            let path = cmd_run(&cfg)?;
            say(path.display().to_string());
        }
        Command::Ablate {
            criteria,
            seeds,
            n_seeds,
        } => {
            let criteria: Vec<Criterion> = parse_list(&criteria, "criteria")?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => parse_list(&s, "seeds")?,
                None => (0..n_seeds).collect(),
            };
            let table = cmd_ablate(&cfg, &criteria, &seeds)?;
            say(format!(
                "{:<20} {:>5} {:>17} {:>17} {:>17}",
                "criterion", "runs", "purity", "mAP", "rank1"
            ));
            let cell = |m: Option<refinery::MeanStd>| match m {
                Some(m) => format!("{:.4} ± {:.4}", m.mean, m.std),
                None => "n/a".to_string(),
            };
            for r in &table.rows {
                say(format!(
                    "{:<20} {:>5} {:>17} {:>17} {:>17}",
                    r.criterion.as_str(),
                    r.runs - r.failed,
                    cell(r.final_purity),
                    cell(r.final_map),
                    cell(r.final_rank1)
                ));
            }
        }
        Command::Score {
            features,
            pseudo_labels,
        } => {
            let path = cmd_score(&cfg, &features, pseudo_labels.as_deref())?;
            say(path.display().to_string());
        }
        Command::Eval { report } => {
            let summary = cmd_eval(&report)?;
            let bytes = to_json_bytes(&summary)?;
            if cfg.out_dir.is_some() {
                write_atomic(&out_dir(&cfg)?.join("eval.json"), &bytes)?;
            }
            say(String::from_utf8_lossy(&bytes).trim_end().to_string());
        }
        Command::Export {
            report,
            ablation,
            format,
            h_values,
        } => {
            let hs: Vec<f64> = parse_list(&h_values, "h_values")?;
            for p in cmd_export(&cfg, &report, ablation.as_deref(), &format, &hs)? {
                say(p.display().to_string());
            }
        }
    }
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("usage:{}", first.trim_start_matches("error: "));
            return exit_code("usage");
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}:{}", e.code(), msg);
            exit_code(e.code())
        }
    }
}
