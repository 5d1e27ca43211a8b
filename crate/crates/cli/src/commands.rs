//! Subcommand implementations. Each builds the dataset and models from the
//! config, runs its experiment and writes the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use qge_core::attribution::{FeatureGrouping, GroundTruthMask, Instance};
use qge_core::data::{
    feature_mean, gen_blobs, gen_localization, load_csv, split_indices, DataSource,
    DatasetManifest, NormalizationStats,
};
use qge_core::experiment::{
    compare, explore, histogram, summarize, train_variant, Comparison, ComparisonSummary,
    Exploration, ModelVariant,
};
use qge_core::metaeval::{run_metaeval, MetaEvalConfig, MetaEvalReport, Target};
use qge_core::model::TrainReport;
use qge_core::{seed, BaselineKind, Classifier, EvalContext, MetricKind, MlpModel, TransformKind};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{variant_code, BaselineChoice, Config, SourceConfig, Stream, TransformChoice};
use crate::{classify, Command, Failure};

pub const CONFIG_FILE: &str = "config.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn execute(command: Command, cfg: &Config, force: bool) -> anyhow::Result<()> {
    let out = prepare_output(cfg, force)?;
    let run = Run {
        cfg,
        hash: cfg.hash(),
        out,
    };
    let mut resolved = cfg.clone();
    resolved.output.dir = Some(run.out.clone());
    write_json(&run.out.join(CONFIG_FILE), &resolved)?;
    match command {
        Command::GenData => gen_data(&run),
        Command::Train => train_models(&run),
        Command::Explore => explore_cmd(&run),
        Command::Compare => compare_cmd(&run),
        Command::Metaeval => metaeval_cmd(&run),
    }
}

struct Run<'a> {
    cfg: &'a Config,
    hash: String,
    out: PathBuf,
}

fn prepare_output(cfg: &Config, force: bool) -> anyhow::Result<PathBuf> {
    let dir = cfg
        .output
        .dir
        .clone()
        .ok_or_else(|| Failure::Config("output.dir: not set (or pass --out)".into()))?;
    if dir.exists() {
        let mut entries = fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
        if entries.next().is_some() && !force {
            return Err(Failure::Config(format!(
                "{} is not empty; refusing to resume a previous run without --force",
                dir.display()
            ))
            .into());
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Dataset split into train and holdout, with ground-truth masks when the
/// source provides them.
struct Prepared {
    instances: Vec<Instance>,
    masks: Option<Vec<GroundTruthMask>>,
    feature_names: Vec<String>,
    class_names: Vec<String>,
    normalization: Option<NormalizationStats>,
    grid: Option<(usize, usize)>,
    train_idx: Vec<usize>,
    holdout_idx: Vec<usize>,
    source: DataSource,
}

impl Prepared {
    fn dim(&self) -> usize {
        self.feature_names.len()
    }

    fn class_count(&self) -> usize {
        self.class_names.len()
    }

    fn train(&self) -> Vec<Instance> {
        self.train_idx.iter().map(|&i| self.instances[i].clone()).collect()
    }

    fn holdout(&self) -> Vec<Instance> {
        self.holdout_idx.iter().map(|&i| self.instances[i].clone()).collect()
    }

    /// Indices of the explained inputs: the first holdout instances, or the
    /// first training instances when there is no holdout.
    fn explained(&self, count: usize) -> Vec<usize> {
        let pool = if self.holdout_idx.is_empty() {
            &self.train_idx
        } else {
            &self.holdout_idx
        };
        pool.iter().copied().take(count).collect()
    }
}

fn prepare_data(cfg: &Config) -> anyhow::Result<Prepared> {
    let data_seed = cfg.seed(Stream::Data);
    let (instances, masks, feature_names, class_names, normalization, grid, source) =
        match &cfg.data.source {
            &SourceConfig::Blobs {
                dim,
                classes,
                n,
                separation,
            } => {
                let d = gen_blobs(dim, classes, n, separation, data_seed).map_err(classify)?;
                let source = DataSource::Blobs {
                    dim,
                    classes,
                    n,
                    separation,
                    seed: data_seed,
                };
                (d.instances, None, d.feature_names, d.class_names, None, None, source)
            }
            &SourceConfig::Localization {
                height,
                width,
                n,
                patch,
            } => {
                let d = gen_localization(height, width, n, patch, data_seed).map_err(classify)?;
                let names = (0..d.dim()).map(|j| format!("p{}_{}", j / width, j % width)).collect();
                let classes = (0..d.class_count()).map(|c| c.to_string()).collect();
                let source = DataSource::Localization {
                    height,
                    width,
                    n,
                    patch,
                    seed: data_seed,
                };
                let grid = Some((height, width));
                (d.instances, Some(d.masks), names, classes, None, grid, source)
            }
            SourceConfig::Csv { path, schema } => {
                if !path.exists() {
                    return Err(Failure::Data(format!("{}: file not found", path.display())).into());
                }
                let d = load_csv(path, schema).map_err(classify)?;
                let source = DataSource::Csv {
                    path: path.clone(),
                    schema: schema.clone(),
                };
                (d.instances, None, d.feature_names, d.class_names, d.normalization, None, source)
            }
        };
    let (train_idx, holdout_idx) =
        split_indices(instances.len(), cfg.data.holdout_fraction, cfg.seed(Stream::Split))
            .map_err(classify)?;
    Ok(Prepared {
        instances,
        masks,
        feature_names,
        class_names,
        normalization,
        grid,
        train_idx,
        holdout_idx,
        source,
    })
}

struct TrainedModel {
    variant: ModelVariant,
    model: MlpModel,
    report: Option<TrainReport>,
}

fn model_path(dir: &Path, variant: ModelVariant) -> PathBuf {
    dir.join("models").join(format!("{}.json", variant.as_str()))
}

/// Trains every configured variant (in parallel), or loads them from
/// `model.load_dir`.
fn build_models(cfg: &Config, data: &Prepared, allow_load: bool) -> anyhow::Result<Vec<TrainedModel>> {
    if let (true, Some(dir)) = (allow_load, &cfg.model.load_dir) {
        return cfg
            .model
            .variants
            .iter()
            .map(|&variant| {
                let path = model_path(dir, variant);
                if !path.exists() {
                    return Err(Failure::Data(format!("{}: weight file not found", path.display())).into());
                }
                let model = MlpModel::load_json(&path).map_err(classify)?;
                if model.input_dim() != data.dim() || model.class_count() != data.class_count() {
                    return Err(Failure::Data(format!(
                        "{}: model shape {}→{} does not match the data ({}→{})",
                        path.display(),
                        model.input_dim(),
                        model.class_count(),
                        data.dim(),
                        data.class_count()
                    ))
                    .into());
                }
                Ok(TrainedModel {
                    variant,
                    model,
                    report: None,
                })
            })
            .collect();
    }
    let init = MlpModel::new(data.dim(), &cfg.model.hidden, data.class_count(), cfg.seed(Stream::Init))
        .map_err(classify)?;
    let train_cfg = cfg.model.train_config(cfg.seed(Stream::Train));
    let (train, holdout) = (data.train(), data.holdout());
    cfg.model
        .variants
        .par_iter()
        .map(|&variant| {
            let (model, report) = train_variant(
                variant,
                &init,
                &train,
                &holdout,
                &train_cfg,
                cfg.model.undertrain_fraction,
                cfg.model.mask_probability,
            )
            .map_err(classify)?;
            Ok(TrainedModel {
                variant,
                model,
                report: Some(report),
            })
        })
        .collect()
}

fn baseline(cfg: &Config, data: &Prepared) -> anyhow::Result<BaselineKind> {
    Ok(match cfg.metric.baseline {
        BaselineChoice::Zeros => BaselineKind::Zeros,
        BaselineChoice::FeatureMean => BaselineKind::FeatureMean(feature_mean(&data.train()).map_err(classify)?),
    })
}

fn grouping(cfg: &Config, data: &Prepared) -> anyhow::Result<Option<FeatureGrouping>> {
    match (cfg.explain.group_block, data.grid) {
        (None, _) => Ok(None),
        (Some(block), Some((h, w))) => Ok(Some(FeatureGrouping::grid(h, w, block).map_err(classify)?)),
        (Some(_), None) => {
            Err(Failure::Config("explain.group_block: needs an image-grid data source".into()).into())
        }
    }
}

fn check_masks(cfg: &Config, data: &Prepared) -> anyhow::Result<()> {
    if data.masks.is_none() {
        if let Some(m) = cfg.metric.measures.iter().find(|m| m.needs_mask()) {
            return Err(Failure::Config(format!(
                "metric.measures: `{}` needs ground-truth masks, which this data source lacks",
                m.id()
            ))
            .into());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- gen-data

#[derive(Serialize)]
struct DataSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    data_seed: u64,
    split_seed: u64,
    rows: usize,
    dim: usize,
    class_count: usize,
    train_rows: usize,
    holdout_rows: usize,
}

fn gen_data(run: &Run<'_>) -> anyhow::Result<()> {
    let cfg = run.cfg;
    let data = prepare_data(cfg)?;
    let mut split = vec!["train"; data.instances.len()];
    for &i in &data.holdout_idx {
        split[i] = "holdout";
    }
    let data_seed = cfg.seed(Stream::Data).to_string();
    let mut w = csv_writer(&run.out.join(RESULTS_FILE))?;
    let mut header = vec!["row_id".to_string(), "split".into(), "label".into()];
    header.extend(data.feature_names.iter().cloned());
    if data.masks.is_some() {
        header.push("mask".into());
    }
    header.extend(["seed".into(), "config_hash".into()]);
    w.write_record(&header)?;
    for (i, inst) in data.instances.iter().enumerate() {
        let mut rec = vec![
            i.to_string(),
            split[i].to_string(),
            inst.label.map_or(String::new(), |l| l.to_string()),
        ];
        rec.extend(inst.features.iter().map(f64::to_string));
        if let Some(masks) = &data.masks {
            rec.push(masks[i].inside().iter().map(|&b| if b { '1' } else { '0' }).collect());
        }
        rec.extend([data_seed.clone(), run.hash.clone()]);
        w.write_record(&rec)?;
    }
    w.flush()?;

    DatasetManifest {
        source: data.source.clone(),
        rows: data.instances.len(),
        dim: data.dim(),
        class_count: data.class_count(),
        feature_names: data.feature_names.clone(),
        class_names: data.class_names.clone(),
        normalization: data.normalization.clone(),
    }
    .write(run.out.join("manifest.json"))
    .map_err(classify)?;
    write_json(
        &run.out.join(SUMMARY_FILE),
        &DataSummary {
            command: Command::GenData.as_str(),
            config_hash: &run.hash,
            data_seed: cfg.seed(Stream::Data),
            split_seed: cfg.seed(Stream::Split),
            rows: data.instances.len(),
            dim: data.dim(),
            class_count: data.class_count(),
            train_rows: data.train_idx.len(),
            holdout_rows: data.holdout_idx.len(),
        },
    )
}

// ------------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainRow<'a> {
    variant: &'static str,
    epochs_run: usize,
    steps: usize,
    train_accuracy: f64,
    holdout_accuracy: f64,
    final_loss: f64,
    stopped_early: bool,
    init_seed: u64,
    train_seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    init_seed: u64,
    train_seed: u64,
    models: Vec<(&'static str, &'a TrainReport)>,
}

fn train_models(run: &Run<'_>) -> anyhow::Result<()> {
    let cfg = run.cfg;
    let data = prepare_data(cfg)?;
    let models = build_models(cfg, &data, false)?;
    let mut w = csv_writer(&run.out.join(RESULTS_FILE))?;
    for m in &models {
        let path = model_path(&run.out, m.variant);
        fs::create_dir_all(path.parent().expect("model path has a parent"))?;
        m.model.save_json(&path).map_err(classify)?;
        let r = m.report.as_ref().expect("trained models carry a report");
        w.serialize(TrainRow {
            variant: m.variant.as_str(),
            epochs_run: r.epochs_run,
            steps: r.steps,
            train_accuracy: r.train_accuracy,
            holdout_accuracy: r.holdout_accuracy,
            final_loss: r.final_loss,
            stopped_early: r.stopped_early,
            init_seed: cfg.seed(Stream::Init),
            train_seed: cfg.seed(Stream::Train),
            config_hash: &run.hash,
        })?;
    }
    w.flush()?;
    write_json(
        &run.out.join(SUMMARY_FILE),
        &TrainSummary {
            command: Command::Train.as_str(),
            config_hash: &run.hash,
            init_seed: cfg.seed(Stream::Init),
            train_seed: cfg.seed(Stream::Train),
            models: models
                .iter()
                .map(|m| (m.variant.as_str(), m.report.as_ref().expect("trained")))
                .collect(),
        },
    )
}

// ----------------------------------------------------------------- explore

/// One exploration per (variant, measure, explained input).
struct Explored {
    variant: ModelVariant,
    metric: usize,
    input_id: usize,
    class: usize,
    seed: u64,
    exploration: Exploration,
}

fn run_explorations(cfg: &Config) -> anyhow::Result<Vec<Explored>> {
    let data = prepare_data(cfg)?;
    check_masks(cfg, &data)?;
    let models = build_models(cfg, &data, true)?;
    let baseline = baseline(cfg, &data)?;
    let grouping = grouping(cfg, &data)?;
    let inputs = data.explained(cfg.data.inputs);
    let mut out = Vec::new();
    for m in &models {
        for (mi, measure) in cfg.metric.measures.iter().enumerate() {
            for &input_id in &inputs {
                let x = &data.instances[input_id].features;
                let class = m.model.predict(x).map_err(classify)?;
                let s = seed::derive(
                    cfg.seed(Stream::Explore),
                    &[variant_code(m.variant), mi as u64, input_id as u64],
                );
                let ctx = EvalContext::new(&m.model, x, class, &baseline)
                    .with_grouping(grouping.as_ref())
                    .with_mask(data.masks.as_ref().map(|ms| &ms[input_id]))
                    .with_seed(seed::derive(s, &[0]));
                let exploration =
                    explore(measure, &ctx, cfg.explain.mode, cfg.transform.k_max, s).map_err(classify)?;
                out.push(Explored {
                    variant: m.variant,
                    metric: mi,
                    input_id,
                    class,
                    seed: s,
                    exploration,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ExploreSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    explore_seed: u64,
    series: Vec<SeriesSummary>,
}

#[derive(Serialize)]
struct SeriesSummary {
    variant: &'static str,
    metric: &'static str,
    input_id: usize,
    class: usize,
    seed: u64,
    explanations: usize,
    units: usize,
    degenerate: bool,
}

fn explore_cmd(run: &Run<'_>) -> anyhow::Result<()> {
    let cfg = run.cfg;
    let explored = run_explorations(cfg)?;
    let k_max = cfg.transform.k_max;
    let mut w = csv_writer(&run.out.join(RESULTS_FILE))?;
    let mut header: Vec<String> = ["variant", "metric", "input_id", "explanation_id", "q", "qge"]
        .map(String::from)
        .to_vec();
    header.extend((1..=k_max).map(|k| format!("qrand_{k}")));
    header.extend(["seed".into(), "config_hash".into()]);
    w.write_record(&header)?;
    for e in &explored {
        let ex = &e.exploration;
        let metric = cfg.metric.measures[e.metric].id();
        for j in 0..ex.len() {
            let mut rec = vec![
                e.variant.as_str().to_string(),
                metric.to_string(),
                e.input_id.to_string(),
                j.to_string(),
                ex.q[j].to_string(),
                ex.qge[j].to_string(),
            ];
            rec.extend(ex.qrand.iter().map(|col| col[j].to_string()));
            rec.extend([e.seed.to_string(), run.hash.clone()]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    write_json(
        &run.out.join(SUMMARY_FILE),
        &ExploreSummary {
            command: Command::Explore.as_str(),
            config_hash: &run.hash,
            explore_seed: cfg.seed(Stream::Explore),
            series: explored
                .iter()
                .map(|e| SeriesSummary {
                    variant: e.variant.as_str(),
                    metric: cfg.metric.measures[e.metric].id(),
                    input_id: e.input_id,
                    class: e.class,
                    seed: e.seed,
                    explanations: e.exploration.len(),
                    units: e.exploration.units,
                    degenerate: e.exploration.degenerate,
                })
                .collect(),
        },
    )
}

// ----------------------------------------------------------------- compare

#[derive(Serialize)]
struct CompareRow<'a> {
    variant: &'static str,
    metric: &'static str,
    /// Input id, or `mean` for the average over inputs.
    input: String,
    statistic: &'static str,
    quantile: Option<f64>,
    #[serde(rename = "K")]
    k: Option<usize>,
    value: Option<f64>,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    variant: &'static str,
    metric: &'static str,
    input_id: usize,
    lo: f64,
    hi: f64,
    count: usize,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    explore_seed: u64,
    groups: Vec<GroupSummary>,
}

#[derive(Serialize)]
struct GroupSummary {
    variant: &'static str,
    metric: &'static str,
    summary: ComparisonSummary,
}

/// Tidy rows for one comparison (per input) or summary (mean).
fn comparison_rows<'a>(
    variant: &'static str,
    metric: &'static str,
    input: String,
    seed: u64,
    hash: &'a str,
    c: &ComparisonView<'_>,
) -> Vec<CompareRow<'a>> {
    let row = |statistic, quantile, k, value| CompareRow {
        variant,
        metric,
        input: input.clone(),
        statistic,
        quantile,
        k,
        value,
        seed,
        config_hash: hash,
    };
    let mut rows = vec![
        row("tau_qge", None, None, c.tau_qge),
        row("rho_qge", None, None, c.rho_qge),
        row("delta_tau", None, None, c.delta_tau),
        row("delta_rho", None, None, c.delta_rho),
    ];
    for (k, (&t, &r)) in c.tau_qrand.iter().zip(c.rho_qrand).enumerate() {
        rows.push(row("tau_qrand", None, Some(k + 1), t));
        rows.push(row("rho_qrand", None, Some(k + 1), r));
    }
    for s in c.strata {
        rows.push(row("stratum_size", Some(s.quantile), None, Some(s.size as f64)));
        rows.push(row("stratum_tau_qge", Some(s.quantile), None, s.tau_qge));
        rows.push(row("stratum_tau_qrand", Some(s.quantile), Some(1), s.tau_qrand1));
        rows.push(row("stratum_delta_tau", Some(s.quantile), None, s.delta_tau));
    }
    if let Some((rho, k_match)) = c.curve {
        rows.push(row("k_curve_rho", None, None, rho));
        rows.push(row("k_match", None, k_match, k_match.map(|k| k as f64)));
    }
    rows
}

/// The fields shared by [`Comparison`] and [`ComparisonSummary`].
struct ComparisonView<'a> {
    tau_qge: Option<f64>,
    rho_qge: Option<f64>,
    delta_tau: Option<f64>,
    delta_rho: Option<f64>,
    tau_qrand: &'a [Option<f64>],
    rho_qrand: &'a [Option<f64>],
    strata: &'a [qge_core::experiment::StratumComparison],
    curve: Option<(Option<f64>, Option<usize>)>,
}

impl<'a> From<&'a Comparison> for ComparisonView<'a> {
    fn from(c: &'a Comparison) -> Self {
        Self {
            tau_qge: c.tau_qge,
            rho_qge: c.rho_qge,
            delta_tau: c.delta_tau,
            delta_rho: c.delta_rho,
            tau_qrand: &c.tau_qrand,
            rho_qrand: &c.rho_qrand,
            strata: &c.strata,
            curve: None,
        }
    }
}

impl<'a> From<&'a ComparisonSummary> for ComparisonView<'a> {
    fn from(s: &'a ComparisonSummary) -> Self {
        Self {
            tau_qge: s.tau_qge,
            rho_qge: s.rho_qge,
            delta_tau: s.delta_tau,
            delta_rho: s.delta_rho,
            tau_qrand: &s.tau_qrand,
            rho_qrand: &s.rho_qrand,
            strata: &s.strata,
            curve: Some((s.k_curve_rho, s.k_match)),
        }
    }
}

fn compare_cmd(run: &Run<'_>) -> anyhow::Result<()> {
    let cfg = run.cfg;
    let explored = run_explorations(cfg)?;
    let explore_seed = cfg.seed(Stream::Explore);
    let mut rows = csv_writer(&run.out.join(RESULTS_FILE))?;
    let mut hist = csv_writer(&run.out.join("histograms.csv"))?;
    let mut groups = Vec::new();
    for &variant in &cfg.model.variants {
        for (mi, measure) in cfg.metric.measures.iter().enumerate() {
            let metric = measure.id();
            let members: Vec<&Explored> = explored
                .iter()
                .filter(|e| e.variant == variant && e.metric == mi)
                .collect();
            let mut comparisons = Vec::with_capacity(members.len());
            for e in &members {
                let c = compare(&e.exploration, &cfg.stats.quantiles).map_err(classify)?;
                for r in comparison_rows(
                    variant.as_str(),
                    metric,
                    e.input_id.to_string(),
                    e.seed,
                    &run.hash,
                    &(&c).into(),
                ) {
                    rows.serialize(r)?;
                }
                for b in histogram(&e.exploration.qge, cfg.stats.histogram_bins).map_err(classify)? {
                    hist.serialize(HistogramRow {
                        variant: variant.as_str(),
                        metric,
                        input_id: e.input_id,
                        lo: b.lo,
                        hi: b.hi,
                        count: b.count,
                        seed: e.seed,
                        config_hash: &run.hash,
                    })?;
                }
                comparisons.push(c);
            }
            let summary = summarize(&comparisons, cfg.stats.k_match_tolerance).map_err(classify)?;
            for r in comparison_rows(
                variant.as_str(),
                metric,
                "mean".into(),
                explore_seed,
                &run.hash,
                &(&summary).into(),
            ) {
                rows.serialize(r)?;
            }
            groups.push(GroupSummary {
                variant: variant.as_str(),
                metric,
                summary,
            });
        }
    }
    rows.flush()?;
    hist.flush()?;
    let all_skipped = groups.iter().all(|g| {
        g.summary.tau_qge.is_none()
            && g.summary.tau_qrand.iter().all(Option::is_none)
            && g.summary.strata.iter().all(|s| s.tau_qge.is_none())
    });
    write_json(
        &run.out.join(SUMMARY_FILE),
        &CompareSummary {
            command: Command::Compare.as_str(),
            config_hash: &run.hash,
            explore_seed,
            groups,
        },
    )?;
    if all_skipped {
        return Err(Failure::Degenerate("every correlation and stratum was undefined".into()).into());
    }
    Ok(())
}

// ---------------------------------------------------------------- metaeval

#[derive(Serialize)]
struct MetaevalRow<'a> {
    variant: &'static str,
    metric: &'a str,
    transform: &'static str,
    #[serde(rename = "K")]
    k: Option<usize>,
    target: Target,
    component: &'static str,
    value: Option<f64>,
    mc: f64,
    repetitions: usize,
    trials: usize,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct MetaevalSummary<'a> {
    command: &'static str,
    config_hash: &'a str,
    reports: Vec<VariantReport>,
}

#[derive(Serialize)]
struct VariantReport {
    variant: &'static str,
    seed: u64,
    report: MetaEvalReport,
}

fn transform_kind(choice: TransformChoice, seed: u64) -> TransformKind {
    match choice {
        TransformChoice::None => TransformKind::None,
        TransformChoice::Qge => TransformKind::Qge,
        TransformChoice::Qrand { k } => TransformKind::Qrand { k, seed },
    }
}

fn metaeval_cmd(run: &Run<'_>) -> anyhow::Result<()> {
    let cfg = run.cfg;
    let data = prepare_data(cfg)?;
    check_masks(cfg, &data)?;
    let models = build_models(cfg, &data, true)?;
    let baseline = baseline(cfg, &data)?;
    let ids = data.explained(cfg.data.inputs);
    let inputs: Vec<Instance> = ids.iter().map(|&i| data.instances[i].clone()).collect();
    let masks: Option<Vec<GroundTruthMask>> =
        data.masks.as_ref().map(|ms| ids.iter().map(|&i| ms[i].clone()).collect());

    let mut reports = Vec::new();
    for m in &models {
        let seed = seed::derive(cfg.seed(Stream::Metaeval), &[variant_code(m.variant)]);
        let me = MetaEvalConfig {
            explainers: cfg.explain.explainers.clone(),
            minor_sigma: cfg.metaeval.minor_sigma,
            trials: cfg.metaeval.trials,
            repetitions: cfg.metaeval.repetitions,
            baseline: baseline.clone(),
            seed,
        };
        for measure in &cfg.metric.measures {
            for &choice in &cfg.transform.apply {
                let transform = transform_kind(choice, cfg.seed(Stream::Transform));
                let report = run_metaeval::<MetricKind>(measure, transform, &m.model, &inputs, masks.as_deref(), &me)
                    .map_err(classify)?;
                reports.push(VariantReport {
                    variant: m.variant.as_str(),
                    seed,
                    report,
                });
            }
        }
    }

    let mut w = csv_writer(&run.out.join(RESULTS_FILE))?;
    for r in &reports {
        let rep = &r.report;
        let k = match rep.transform {
            TransformKind::Qrand { k, .. } => Some(k),
            _ => None,
        };
        for t in &rep.tests {
            let cells = [
                ("iac_nr", t.vector.iac_nr),
                ("iac_ar", t.vector.iac_ar),
                ("iec_nr", t.vector.iec_nr),
                ("iec_ar", t.vector.iec_ar),
            ];
            for (component, value) in cells {
                w.serialize(MetaevalRow {
                    variant: r.variant,
                    metric: &rep.metric,
                    transform: rep.transform.id(),
                    k,
                    target: t.target,
                    component,
                    value,
                    mc: t.mc,
                    repetitions: t.repetitions.len(),
                    trials: t.trials,
                    seed: r.seed,
                    config_hash: &run.hash,
                })?;
            }
        }
    }
    w.flush()?;
    let all_skipped = reports.iter().all(|r| {
        r.report.tests.iter().all(|t| {
            [t.vector.iac_nr, t.vector.iac_ar, t.vector.iec_nr, t.vector.iec_ar]
                .iter()
                .all(Option::is_none)
        })
    });
    write_json(
        &run.out.join(SUMMARY_FILE),
        &MetaevalSummary {
            command: Command::Metaeval.as_str(),
            config_hash: &run.hash,
            reports,
        },
    )?;
    if all_skipped {
        return Err(Failure::Degenerate("every meta-evaluation cell was skipped".into()).into());
    }
    Ok(())
}
