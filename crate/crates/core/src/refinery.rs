//! The alternating refinery loop.
//!
//! Each step embeds the target domain with the teacher, clusters it, scores
//! every pseudo label, selects the scheduled fraction of least uncertain
//! samples, refines the student on them and folds the student into the
//! teacher by EMA. Step records carry ground-truth metrics so runs can be
//! compared without touching the training path.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clusterer::{self, ClusterModel, KMeansParams};
use crate::embedder::{self, Checkpoint, EmbeddingModel, TeacherState, WStepProblem};
use crate::error::{Error, Result};
use crate::evalkit::{self, RetrievalResult};
use crate::matrix::Matrix;
use crate::selector;
use crate::synthgen::{self, TargetDomain};
use crate::uncertainty::{self, UncertaintyRecord};

pub const REPORT_SCHEMA: &str = "p2lr-report-1";
pub const CONFIG_VERSION: u32 = 1;

/// Horizon used by the original full-scale runs.
pub const FULL_SCALE_T: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    KlIdeal,
    L2Centroid,
    Consistency,
    InternalClassifier,
    Reweight,
    None,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::KlIdeal,
        Criterion::L2Centroid,
        Criterion::Consistency,
        Criterion::InternalClassifier,
        Criterion::Reweight,
        Criterion::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::KlIdeal => "kl_ideal",
            Criterion::L2Centroid => "l2_centroid",
            Criterion::Consistency => "consistency",
            Criterion::InternalClassifier => "internal_classifier",
            Criterion::Reweight => "reweight",
            Criterion::None => "none",
        }
    }

    /// Whether a hard scheduled subset is selected each step.
    fn uses_schedule(self) -> bool {
        !matches!(self, Criterion::Reweight | Criterion::None)
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config("criterion", format!("unknown criterion `{s}`")))
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineryConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub seed: u64,

    pub c_true: usize,
    pub d: usize,
    pub n_per_id: usize,
    pub noise_sigma: f64,
    pub shift_scale: f64,
    pub min_separation: f64,
    pub corrupt_fraction: f64,

    /// Cluster count; `None` means `c_true`.
    pub k: Option<usize>,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub recluster_every: usize,
    pub warm_start: bool,

    pub alpha: f64,
    pub epsilon: f64,
    pub p0: f64,
    pub h: f64,
    #[serde(rename = "T")]
    pub horizon: usize,

    pub lr: f64,
    pub n_grad_steps: usize,
    pub momentum: f64,
    pub criterion: Criterion,
    /// Temperature of the soft weights; `None` uses the mean uncertainty.
    pub reweight_temperature: Option<f64>,

    pub query_fraction: f64,
    pub detection_top_fraction: f64,

    /// 0 disables checkpoints.
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for RefineryConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            c_true: 20,
            d: 16,
            n_per_id: 30,
            noise_sigma: 0.1,
            shift_scale: 0.2,
            min_separation: 0.5,
            corrupt_fraction: 0.0,
            k: None,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-10,
            recluster_every: 1,
            warm_start: false,
            alpha: 20.0,
            epsilon: 0.99,
            p0: 0.3,
            h: 1.5,
            horizon: 30,
            lr: 0.05,
            n_grad_steps: 25,
            momentum: 0.9,
            criterion: Criterion::KlIdeal,
            reweight_temperature: None,
            query_fraction: 0.2,
            detection_top_fraction: 0.2,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl RefineryConfig {
    pub fn k(&self) -> usize {
        self.k.unwrap_or(self.c_true)
    }

    pub fn n(&self) -> usize {
        self.c_true * self.n_per_id
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.version != CONFIG_VERSION {
            return fail("version", "only version 1 is supported");
        }
        if self.c_true < 2 {
            return fail("c_true", "must be at least 2");
        }
        if self.d < 2 {
            return fail("d", "must be at least 2");
        }
        if self.n_per_id < 2 {
            return fail("n_per_id", "need at least 2 samples per identity for retrieval");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma", "must be finite and >= 0");
        }
        if !(self.shift_scale >= 0.0 && self.shift_scale.is_finite()) {
            return fail("shift_scale", "must be finite and >= 0");
        }
        if !(0.0..2.0).contains(&self.min_separation) {
            return fail("min_separation", "must lie in [0, 2)");
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return fail("corrupt_fraction", "must lie in [0, 1]");
        }
        let k = self.k();
        if k < 2 || k > self.n() {
            return fail("k", "must lie in [2, N]");
        }
        if self.kmeans_max_iters == 0 {
            return fail("kmeans_max_iters", "must be at least 1");
        }
        if !(self.kmeans_tol >= 0.0) {
            return fail("kmeans_tol", "must be >= 0");
        }
        if self.recluster_every == 0 {
            return fail("recluster_every", "must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha", "must be finite and > 0");
        }
        uncertainty::check_epsilon(k, self.epsilon)?;
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return fail("p0", "must lie in (0, 1)");
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return fail("h", "must be finite and > 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be finite and > 0");
        }
        if self.n_grad_steps == 0 {
            return fail("n_grad_steps", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if let Some(t) = self.reweight_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return fail("reweight_temperature", "must be finite and > 0");
            }
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return fail("query_fraction", "must lie in (0, 1)");
        }
        if !(self.detection_top_fraction > 0.0 && self.detection_top_fraction <= 1.0) {
            return fail("detection_top_fraction", "must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub p_t: f64,
    /// Selection threshold; absent when no hard selection is made.
    pub beta: Option<f64>,
    pub n_selected: usize,
    pub mean_u_all: f64,
    pub mean_u_selected: f64,
    pub mean_u_rejected: Option<f64>,
    pub purity: f64,
    pub n_wrong: usize,
    pub detection_precision: f64,
    pub detection_recall: Option<f64>,
    pub detection_auroc: Option<f64>,
    pub wstep_loss_before: f64,
    pub wstep_loss_after: f64,
    pub inertia: f64,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub initial_purity: f64,
    pub initial_map: f64,
    pub final_purity: f64,
    pub final_map: f64,
    pub final_rank1: f64,
    pub final_rank5: f64,
    pub final_rank10: f64,
    /// Detection AUROC averaged over steps where it is defined.
    pub mean_detection_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineryReport {
    pub schema: String,
    pub config: RefineryConfig,
    pub steps: Vec<StepRecord>,
    /// Absent in partial reports from aborted runs.
    pub summary: Option<Summary>,
}

/// One row of the selection dump.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub step: usize,
    pub sample_index: usize,
    pub u: f64,
    pub selected: bool,
    pub beta: Option<f64>,
    pub p_t: f64,
}

/// Report plus side outputs that are not part of the deterministic report.
#[derive(Debug, Clone)]
pub struct RefineryRun {
    pub report: RefineryReport,
    pub selections: Vec<SelectionRow>,
    pub checkpoints: Vec<(usize, Checkpoint)>,
    /// Wall-clock seconds per step.
    pub step_seconds: Vec<f64>,
}

#[derive(Debug)]
pub struct RefineryFailure {
    pub error: Error,
    pub partial: RefineryReport,
}

impl std::fmt::Display for RefineryFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

/// SplitMix64 finalizer; decorrelates sub-seeds derived from one run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_KMEANS: u64 = 3;
const STREAM_CORRUPT: u64 = 4;
const STREAM_SPLIT: u64 = 5;

/// Builds the synthetic target domain described by `config`.
pub fn generate_domain(config: &RefineryConfig) -> Result<TargetDomain> {
    let protos = synthgen::generate_prototypes(
        config.c_true,
        config.d,
        config.min_separation,
        derive_seed(config.seed, STREAM_PROTOTYPES, 0),
    )?;
    synthgen::sample_target(
        &protos,
        config.n_per_id,
        config.noise_sigma,
        config.shift_scale,
        derive_seed(config.seed, STREAM_TARGET, 0),
    )
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

struct Stage {
    step: usize,
}

impl Stage {
    fn wrap<T>(&self, name: &'static str, r: Result<T>) -> Result<T> {
        r.map_err(|e| e.at_stage(self.step, name))
    }
}

/// Clusters embeddings per the config, optionally warm-started.
fn cluster_step(config: &RefineryConfig, emb: &Matrix, t: usize, warm: Option<&Matrix>) -> Result<ClusterModel> {
    let params = KMeansParams {
        k: config.k(),
        max_iters: config.kmeans_max_iters,
        tol: config.kmeans_tol,
        seed: derive_seed(config.seed, STREAM_KMEANS, t as u64),
    };
    match warm {
        Some(init) => clusterer::kmeans_warm(emb, init, params),
        None => clusterer::kmeans(emb, params),
    }
}

/// Centroid means of `emb` under fixed assignments; empty clusters keep
/// their previous centroid.
fn recompute_centroids(emb: &Matrix, previous: &ClusterModel) -> ClusterModel {
    let k = previous.k();
    let mut sums = Matrix::zeros(k, emb.cols());
    let mut counts = vec![0usize; k];
    for (i, &a) in previous.assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums.row_mut(a).iter_mut().zip(emb.row(i)) {
            *s += x;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            sums.row_mut(j).copy_from_slice(previous.centroids.row(j));
        } else {
            for s in sums.row_mut(j) {
                *s /= counts[j] as f64;
            }
        }
    }
    let inertia = clusterer::inertia(emb, &sums, &previous.assignments);
    ClusterModel {
        centroids: sums,
        assignments: previous.assignments.clone(),
        inertia,
        iterations: 0,
    }
}

/// Step-0 pseudo labels and their scores under the configured `alpha` and
/// `epsilon`, before any training.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialScores {
    pub cluster: ClusterModel,
    pub pseudo_labels: Vec<usize>,
    /// Forced replacements from `corrupt_fraction`.
    pub corrupted: Vec<bool>,
    /// Identity differs from the majority identity of the pseudo-label cluster.
    pub wrong: Vec<bool>,
    pub kl_ideal: Vec<f64>,
}

/// Reproduces the clustering, corruption and `kl_ideal` scoring of step 0.
pub fn initial_scores(config: &RefineryConfig) -> Result<InitialScores> {
    config.validate()?;
    let domain = generate_domain(config)?;
    let cluster = cluster_step(config, &domain.raw_features, 0, None)?;
    let (pseudo_labels, corrupted) = synthgen::corrupt_labels(
        &cluster.assignments,
        config.corrupt_fraction,
        cluster.k(),
        derive_seed(config.seed, STREAM_CORRUPT, 0),
    )?;
    let wrong = clusterer::wrong_label_mask(&pseudo_labels, &cluster.assignments, &domain.hidden_labels);
    let records = uncertainty::score_with_classifier(
        &domain.raw_features,
        &cluster.centroids,
        &pseudo_labels,
        config.alpha,
        config.epsilon,
    )?;
    Ok(InitialScores {
        cluster,
        pseudo_labels,
        corrupted,
        wrong,
        kl_ideal: uncertainty::scores(&records),
    })
}

fn retrieval(config: &RefineryConfig, emb: &Matrix, hidden: &[usize]) -> Result<RetrievalResult> {
    evalkit::retrieval_eval(
        emb,
        hidden,
        config.query_fraction,
        derive_seed(config.seed, STREAM_SPLIT, 0),
    )
}

struct Loop<'a> {
    config: &'a RefineryConfig,
    domain: &'a TargetDomain,
    student: EmbeddingModel,
    teacher: TeacherState,
    prev_cluster: Option<ClusterModel>,
    internal_classifier: Option<Matrix>,
}

struct StepOutput {
    record: StepRecord,
    selections: Vec<SelectionRow>,
}

impl<'a> Loop<'a> {
    fn step(&mut self, t: usize) -> Result<StepOutput> {
        let cfg = self.config;
        let stage = Stage { step: t };
        let raw = &self.domain.raw_features;
        let hidden = &self.domain.hidden_labels;

        let teacher_emb = stage.wrap("embed", embedder::embed(&self.teacher.model, raw))?;

        // clustering
        let recluster = t.is_multiple_of(cfg.recluster_every) || self.prev_cluster.is_none();
        let cluster = if recluster {
            let warm = match cfg.criterion {
                Criterion::InternalClassifier => self.internal_classifier.as_ref(),
                _ if cfg.warm_start => self.prev_cluster.as_ref().map(|c| &c.centroids),
                _ => None,
            };
            stage.wrap("cluster", cluster_step(cfg, &teacher_emb, t, warm))?
        } else {
            recompute_centroids(&teacher_emb, self.prev_cluster.as_ref().expect("checked above"))
        };
        let purity = stage.wrap("cluster", clusterer::cluster_purity(&cluster.assignments, hidden))?;

        let pseudo_labels = if cfg.corrupt_fraction > 0.0 {
            stage
                .wrap(
                    "corrupt",
                    synthgen::corrupt_labels(
                        &cluster.assignments,
                        cfg.corrupt_fraction,
                        cluster.k(),
                        derive_seed(cfg.seed, STREAM_CORRUPT, t as u64),
                    ),
                )?
                .0
        } else {
            cluster.assignments.clone()
        };
        let wrong = clusterer::wrong_label_mask(&pseudo_labels, &cluster.assignments, hidden);

        if cfg.criterion == Criterion::InternalClassifier && self.internal_classifier.is_none() {
            self.internal_classifier = Some(cluster.centroids.clone());
        }
        let classifier = match cfg.criterion {
            Criterion::InternalClassifier => self.internal_classifier.clone().expect("initialized above"),
            _ => cluster.centroids.clone(),
        };

        // scoring
        let records: Vec<UncertaintyRecord> = stage.wrap(
            "score",
            match cfg.criterion {
                Criterion::L2Centroid => {
                    let labeled = ClusterModel {
                        assignments: pseudo_labels.clone(),
                        ..cluster.clone()
                    };
                    uncertainty::l2_uncertainty(&teacher_emb, &labeled)
                }
                Criterion::Consistency => {
                    let student_emb = embedder::embed(&self.student, raw)?;
                    let labeled = ClusterModel {
                        assignments: pseudo_labels.clone(),
                        ..cluster.clone()
                    };
                    uncertainty::consistency_uncertainty(&teacher_emb, &student_emb, &labeled, cfg.alpha)
                }
                _ => uncertainty::score_with_classifier(&teacher_emb, &classifier, &pseudo_labels, cfg.alpha, cfg.epsilon),
            },
        )?;
        let u = uncertainty::scores(&records);

        // selection
        let n = u.len();
        let (p_t, beta, indicators, weights) = if cfg.criterion.uses_schedule() {
            let sel = stage.wrap("select", selector::select(&u, t, cfg.horizon, cfg.p0, cfg.h))?;
            let expected = selector::selection_count(n, sel.p_t);
            if sel.selected_count() != expected {
                return Err(Error::Contract(format!(
                    "selected {} samples, schedule demands {expected}",
                    sel.selected_count()
                ))
                .at_stage(t, "select"));
            }
            let w = embedder::indicator_weights(&sel.indicators);
            (sel.p_t, Some(sel.beta), sel.indicators, w)
        } else if cfg.criterion == Criterion::Reweight {
            let temperature = match cfg.reweight_temperature {
                Some(t) => t,
                None => mean(u.iter().copied()).unwrap_or(1.0).max(f64::MIN_POSITIVE),
            };
            let w = stage.wrap("select", selector::reweight_indicators(&u, temperature))?;
            (1.0, None, vec![true; n], w)
        } else {
            (1.0, None, vec![true; n], vec![1.0; n])
        };
        let n_selected = indicators.iter().filter(|&&v| v).count();

        let detection = stage.wrap(
            "evaluate",
            evalkit::detection_metrics(&u, &wrong, cfg.detection_top_fraction),
        )?;
        let retrieval = stage.wrap("evaluate", retrieval(cfg, &teacher_emb, hidden))?;

        // w-step on the student, then EMA into the teacher
        let problem = WStepProblem {
            raw,
            classifier: &classifier,
            pseudo_labels: &pseudo_labels,
            weights: &weights,
            alpha: cfg.alpha,
            epsilon: cfg.epsilon,
        };
        let outcome = stage.wrap(
            "wstep",
            if cfg.criterion == Criterion::InternalClassifier {
                embedder::wstep_optimize_joint(&self.student, &problem, cfg.lr, cfg.n_grad_steps)
            } else {
                embedder::wstep_optimize(&self.student, &problem, cfg.lr, cfg.n_grad_steps)
            },
        )?;
        self.student = outcome.model;
        if let Some(cls) = outcome.classifier {
            self.internal_classifier = Some(cls);
        }
        self.teacher = embedder::ema_update(&self.teacher, &self.student);
        self.prev_cluster = Some(cluster.clone());

        let selected_u = u.iter().zip(&indicators).filter(|(_, &v)| v).map(|(&x, _)| x);
        let rejected_u = u.iter().zip(&indicators).filter(|(_, &v)| !v).map(|(&x, _)| x);
        let record = StepRecord {
            t,
            p_t,
            beta,
            n_selected,
            mean_u_all: mean(u.iter().copied()).unwrap_or(0.0),
            mean_u_selected: mean(selected_u).unwrap_or(0.0),
            mean_u_rejected: mean(rejected_u),
            purity,
            n_wrong: wrong.iter().filter(|&&w| w).count(),
            detection_precision: detection.precision,
            detection_recall: detection.recall,
            detection_auroc: detection.auroc,
            wstep_loss_before: outcome.loss_before,
            wstep_loss_after: outcome.loss_after,
            inertia: cluster.inertia,
            map: retrieval.map,
            rank1: retrieval.cmc[&1],
            rank5: retrieval.cmc[&5],
            rank10: retrieval.cmc[&10],
        };
        let selections = (0..n)
            .map(|i| SelectionRow {
                step: t,
                sample_index: i,
                u: u[i],
                selected: indicators[i],
                beta,
                p_t,
            })
            .collect();
        Ok(StepOutput { record, selections })
    }

    fn final_summary(&self, steps: &[StepRecord]) -> Result<Summary> {
        let cfg = self.config;
        let stage = Stage { step: cfg.horizon + 1 };
        let hidden = &self.domain.hidden_labels;
        let emb = stage.wrap("embed", embedder::embed(&self.teacher.model, &self.domain.raw_features))?;
        let cluster = stage.wrap("cluster", cluster_step(cfg, &emb, cfg.horizon + 1, None))?;
        let purity = stage.wrap("cluster", clusterer::cluster_purity(&cluster.assignments, hidden))?;
        let r = stage.wrap("evaluate", retrieval(cfg, &emb, hidden))?;
        Ok(Summary {
            initial_purity: steps[0].purity,
            initial_map: steps[0].map,
            final_purity: purity,
            final_map: r.map,
            final_rank1: r.cmc[&1],
            final_rank5: r.cmc[&5],
            final_rank10: r.cmc[&10],
            mean_detection_auroc: mean(steps.iter().filter_map(|s| s.detection_auroc)),
        })
    }
}

fn empty_report(config: &RefineryConfig) -> RefineryReport {
    let mut echo = config.clone();
    echo.out_dir = None;
    RefineryReport {
        schema: REPORT_SCHEMA.to_string(),
        config: echo,
        steps: Vec::new(),
        summary: None,
    }
}

/// Runs the refinery and keeps side outputs; on failure the records of
/// completed steps are returned alongside the error.
pub fn run_refinery_detailed(config: &RefineryConfig) -> std::result::Result<RefineryRun, RefineryFailure> {
    let mut report = empty_report(config);
    let fail = |error: Error, partial: RefineryReport| RefineryFailure { error, partial };
    if let Err(e) = config.validate() {
        return Err(fail(e, report));
    }
    let domain = match generate_domain(config) {
        Ok(d) => d,
        Err(e) => return Err(fail(e.at_stage(0, "generate"), report)),
    };
    // source-biased starting point: the identity map ignores the shift
    let student = EmbeddingModel::identity(config.d);
    let teacher = match TeacherState::new(student.clone(), config.momentum) {
        Ok(t) => t,
        Err(e) => return Err(fail(e, report)),
    };
    let mut state = Loop {
        config,
        domain: &domain,
        student,
        teacher,
        prev_cluster: None,
        internal_classifier: None,
    };

    let mut selections = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step_seconds = Vec::new();
    for t in 0..=config.horizon {
        let start = Instant::now();
        match state.step(t) {
            Ok(out) => {
                report.steps.push(out.record);
                selections.extend(out.selections);
            }
            Err(e) => return Err(fail(e, report)),
        }
        if config.checkpoint_every > 0 && (t % config.checkpoint_every == 0 || t == config.horizon) {
            checkpoints.push((t, Checkpoint::new(&state.student, &state.teacher)));
        }
        step_seconds.push(start.elapsed().as_secs_f64());
    }
    match state.final_summary(&report.steps) {
        Ok(s) => report.summary = Some(s),
        Err(e) => return Err(fail(e, report)),
    }
    Ok(RefineryRun {
        report,
        selections,
        checkpoints,
        step_seconds,
    })
}

pub fn run_refinery(config: &RefineryConfig) -> Result<RefineryReport> {
    run_refinery_detailed(config).map(|r| r.report).map_err(|f| f.error)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        let mean = mean(values.iter().copied())?;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub criterion: Criterion,
    pub seed: u64,
    pub summary: Option<Summary>,
    pub error: Option<String>,
    /// Mean selected-set uncertainty at the first and last step.
    pub first_mean_u_selected: Option<f64>,
    pub last_mean_u_selected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub criterion: Criterion,
    pub runs: usize,
    pub failed: usize,
    pub final_purity: Option<MeanStd>,
    pub final_map: Option<MeanStd>,
    pub final_rank1: Option<MeanStd>,
    pub detection_auroc: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema: String,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn row(&self, criterion: Criterion) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.criterion == criterion)
    }
}

/// Runs every (criterion, seed) cell; failed cells are recorded and skipped
/// in the statistics.
pub fn run_ablation(base: &RefineryConfig, criteria: &[Criterion], seeds: &[u64]) -> Result<AblationTable> {
    if criteria.is_empty() {
        return Err(Error::config("criteria", "need at least one criterion"));
    }
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let jobs: Vec<(Criterion, u64)> = criteria
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|&(criterion, seed)| {
            let cfg = RefineryConfig {
                criterion,
                seed,
                ..base.clone()
            };
            match run_refinery(&cfg) {
                Ok(report) => AblationCell {
                    criterion,
                    seed,
                    first_mean_u_selected: report.steps.first().map(|s| s.mean_u_selected),
                    last_mean_u_selected: report.steps.last().map(|s| s.mean_u_selected),
                    summary: report.summary,
                    error: None,
                },
                Err(e) => AblationCell {
                    criterion,
                    seed,
                    summary: None,
                    error: Some(format!("{}:{}", e.code(), e)),
                    first_mean_u_selected: None,
                    last_mean_u_selected: None,
                },
            }
        })
        .collect();

    let rows = criteria
        .iter()
        .map(|&criterion| {
            let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.criterion == criterion).collect();
            let ok: Vec<&Summary> = mine.iter().filter_map(|c| c.summary.as_ref()).collect();
            let stat = |f: &dyn Fn(&Summary) -> Option<f64>| {
                MeanStd::of(&ok.iter().filter_map(|s| f(s)).collect::<Vec<_>>())
            };
            AblationRow {
                criterion,
                runs: mine.len(),
                failed: mine.len() - ok.len(),
                final_purity: stat(&|s| Some(s.final_purity)),
                final_map: stat(&|s| Some(s.final_map)),
                final_rank1: stat(&|s| Some(s.final_rank1)),
                detection_auroc: stat(&|s| s.mean_detection_auroc),
            }
        })
        .collect();
    Ok(AblationTable {
        schema: "p2lr-ablation-1".to_string(),
        rows,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_default_run_selects_confident_samples_first() {
        let cfg = RefineryConfig {
            corrupt_fraction: 0.2,
            horizon: 1,
            ..RefineryConfig::default()
        };
        let report = run_refinery(&cfg).unwrap();
        let s = &report.steps[0];
        assert!(s.mean_u_selected < s.mean_u_rejected.unwrap());
    }

    #[test]
    fn noiseless_domain_keeps_perfect_clusters() {
        let cfg = RefineryConfig {
            noise_sigma: 0.0,
            shift_scale: 0.0,
            ..small()
        };
        let run = run_refinery_detailed(&cfg).map_err(|f| f.error).unwrap();
        assert!(run.report.steps.iter().all(|s| s.purity == 1.0 && s.n_wrong == 0));
        assert_eq!(run.report.summary.unwrap().final_purity, 1.0);
        // the smoothed target keeps the loss above zero even on exact centroids
        assert!(run.report.steps[0].wstep_loss_before > 0.0);
    }

    #[test]
    fn initial_scores_match_first_step() {
        let cfg = RefineryConfig {
            corrupt_fraction: 0.2,
            ..small()
        };
        let init = initial_scores(&cfg).unwrap();
        assert_eq!(init.corrupted.iter().filter(|&&c| c).count(), 12);
        let run = run_refinery_detailed(&cfg).map_err(|f| f.error).unwrap();
        let step0: Vec<f64> = run.selections.iter().filter(|r| r.step == 0).map(|r| r.u).collect();
        assert_eq!(step0, init.kl_ideal);
        assert_eq!(run.report.steps[0].n_wrong, init.wrong.iter().filter(|&&w| w).count());
    }

    fn small() -> RefineryConfig {
        RefineryConfig {
            c_true: 5,
            d: 6,
            n_per_id: 12,
            horizon: 4,
            n_grad_steps: 5,
            ..RefineryConfig::default()
        }
    }

    #[test]
    fn criterion_names_roundtrip() {
        for c in Criterion::ALL {
            assert_eq!(c.as_str().parse::<Criterion>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.as_str()));
        }
        assert!("bogus".parse::<Criterion>().is_err());
    }

    #[test]
    fn defaults_and_validation() {
        let c = RefineryConfig::default();
        assert_eq!((c.alpha, c.epsilon, c.p0, c.h), (20.0, 0.99, 0.3, 1.5));
        assert_eq!(c.n(), 600);
        c.validate().unwrap();
        let bad = RefineryConfig { d: 0, ..c.clone() };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "d"));
        let bad = RefineryConfig { epsilon: 0.01, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let err = serde_json::from_str::<RefineryConfig>(r#"{"version":1,"sed":3}"#);
        assert!(err.is_err());
        let ok: RefineryConfig = serde_json::from_str(r#"{"version":1,"T":7,"criterion":"none"}"#).unwrap();
        assert_eq!(ok.horizon, 7);
        assert_eq!(ok.criterion, Criterion::None);
    }

    #[test]
    fn baseline_with_zero_horizon_selects_everything() {
        let cfg = RefineryConfig {
            criterion: Criterion::None,
            horizon: 0,
            ..small()
        };
        let report = run_refinery(&cfg).unwrap();
        assert_eq!(report.steps.len(), 1);
        assert_eq!(report.steps[0].n_selected, cfg.n());
    }

    #[test]
    fn every_criterion_runs_with_exact_counts() {
        for criterion in Criterion::ALL {
            let cfg = RefineryConfig { criterion, ..small() };
            let report = run_refinery(&cfg).unwrap_or_else(|e| panic!("{criterion:?}: {e}"));
            assert_eq!(report.steps.len(), 5);
            for w in report.steps.windows(2) {
                assert!(w[1].p_t >= w[0].p_t);
            }
            for s in &report.steps {
                let expected = if criterion.uses_schedule() {
                    selector::selection_count(cfg.n(), s.p_t)
                } else {
                    cfg.n()
                };
                assert_eq!(s.n_selected, expected, "{criterion:?} step {}", s.t);
                assert!(s.mean_u_selected <= s.mean_u_all + 1e-12);
                assert!(s.wstep_loss_after <= s.wstep_loss_before + 1e-9);
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = RefineryConfig {
            corrupt_fraction: 0.1,
            ..small()
        };
        let a = serde_json::to_string(&run_refinery(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_refinery(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_yields_empty_partial_report() {
        let cfg = RefineryConfig { lr: -1.0, ..small() };
        let failure = run_refinery_detailed(&cfg).unwrap_err();
        assert!(failure.partial.steps.is_empty());
        assert_eq!(failure.error.code(), "config");
    }

    #[test]
    fn ablation_single_cell_matches_run() {
        let cfg = small();
        let table = run_ablation(&cfg, &[Criterion::KlIdeal], &[0]).unwrap();
        let report = run_refinery(&RefineryConfig { seed: 0, ..cfg }).unwrap();
        let row = table.row(Criterion::KlIdeal).unwrap();
        let s = report.summary.unwrap();
        assert_eq!(row.final_purity.unwrap().mean, s.final_purity);
        assert_eq!(row.final_map.unwrap().mean, s.final_map);
        assert_eq!(row.final_map.unwrap().std, 0.0);
    }

    #[test]
    fn seed_derivation_separates_streams() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_eq!(derive_seed(9, 3, 4), derive_seed(9, 3, 4));
    }
}
