//! The `ffoc` command line: `train`, `eval`, `grid`, `landscape`, `summarize`.
//!
//! Settings come from built-in defaults, then the `--config` JSON file, then
//! flags. Every command writes only under the output directory and leaves a
//! `metadata.json` holding the fully resolved configuration.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{load_banknote, make_splits, resolve_data_path, Dataset, PreparedData, SplitName, Standardizer};
use crate::error::{Error, Result};
use crate::experiments::{arch_label, parse_arch, read_results, run_grid, summarize, write_summaries, TableFormat};
use crate::landscape::{compute_landscape, export_landscape, landscape_file_name, StateMode};
use crate::losses::LossKind;
use crate::model::TrainedModel;
use crate::network::init_network;
use crate::scoring::{accuracy, auc, f1, flagged_fraction, score_and_flag_with, write_score_dump, Normalization};
use crate::tensor::Matrix;
use crate::training::{train, Regime, TrainData};

#[derive(Debug, Parser)]
#[command(name = "ffoc", version, about = "One-class anomaly detection with forward-forward or backprop training")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $FFOC_OUTPUT_DIR or ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Banknote CSV (default: $FFOC_BANKNOTE or data/data_banknote_authentication.txt).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write the model, its loss curves and metadata.
    Train(TrainCmd),
    /// Score a split with a saved model and write a score dump.
    Eval(EvalCmd),
    /// Run the (loss, architecture, regime, seed) grid.
    Grid(GridCmd),
    /// Export a loss surface around one layer's weights.
    Landscape(LandscapeCmd),
    /// Turn a results.csv into summary tables.
    Summarize(SummarizeCmd),
}

#[derive(Debug, Args, Default)]
pub struct DataFlags {
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Train,valid,test fractions, e.g. 0.6,0.2,0.2.
    #[arg(long)]
    pub fractions: Option<String>,
    /// Train on genuine notes only.
    #[arg(long)]
    pub oneclass: Option<bool>,
    #[arg(long)]
    pub standardize: Option<bool>,
}

#[derive(Debug, Args, Default)]
pub struct OptimFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size; 0 means full batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Threshold and radius fraction.
    #[arg(long)]
    pub nu: Option<f64>,
    /// final_layer or sum_layers.
    #[arg(long)]
    pub bp_loss: Option<String>,
    /// post_update or pre_update.
    #[arg(long)]
    pub ff_feed: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Loss constant C.
    #[arg(long)]
    pub c: Option<f64>,
    /// Widths, input first, e.g. 4,25,25.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[command(flatten)]
    pub split: DataFlags,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// train, valid or test.
    #[arg(long)]
    pub split: Option<SplitName>,
    /// Normalize by the scored batch's maximum instead of the training maximum.
    #[arg(long)]
    pub batch_max: bool,
}

#[derive(Debug, Args)]
pub struct GridCmd {
    /// Comma-separated loss names.
    #[arg(long)]
    pub losses: Option<String>,
    /// Architectures separated by `;` or `/`, e.g. "4,10,10;4,25,25".
    #[arg(long)]
    pub archs: Option<String>,
    /// Comma-separated regimes.
    #[arg(long)]
    pub regimes: Option<String>,
    /// Seeds as a range `1-50` or a list `1,2,3`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Record wall time per run (makes results.csv run-dependent).
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[command(flatten)]
    pub split: DataFlags,
}

#[derive(Debug, Args)]
pub struct LandscapeCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// 0-based layer index.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Odd number of coordinates per axis.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub direction_seed: Option<u64>,
    /// Keep the model's stored loss state instead of refitting per point.
    #[arg(long)]
    pub frozen: bool,
    #[arg(long)]
    pub split: Option<SplitName>,
}

#[derive(Debug, Args)]
pub struct SummarizeCmd {
    /// Results file (default: <out>/results.csv).
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Format printed to stdout.
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data.path = Some(d.clone());
    }
    match cli.command {
        Command::Train(c) => cmd_train(cfg, c),
        Command::Eval(c) => cmd_eval(cfg, c),
        Command::Grid(c) => cmd_grid(cfg, c),
        Command::Landscape(c) => cmd_landscape(cfg, c),
        Command::Summarize(c) => cmd_summarize(cfg, c),
    }
}

fn apply_data_flags(cfg: &mut RunConfig, f: &DataFlags) -> Result<()> {
    if let Some(s) = f.split_seed {
        cfg.data.split_seed = s;
    }
    if let Some(fr) = &f.fractions {
        let v: Vec<f64> = fr
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("cannot parse fractions `{fr}`")))?;
        cfg.data.fractions = v
            .try_into()
            .map_err(|_| Error::config("fractions need exactly three values"))?;
    }
    if let Some(o) = f.oneclass {
        cfg.data.oneclass = o;
    }
    if let Some(s) = f.standardize {
        cfg.data.standardize = s;
    }
    Ok(())
}

fn apply_optim_flags(cfg: &mut RunConfig, f: &OptimFlags) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = f.lr {
        t.learning_rate = v;
    }
    if let Some(v) = f.epochs {
        t.epochs_max = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = (v > 0).then_some(v);
    }
    if let Some(v) = f.patience {
        t.patience = v;
    }
    if let Some(v) = f.nu {
        t.nu = v;
        cfg.loss.nu = v;
    }
    if let Some(v) = &f.bp_loss {
        t.bp_loss = parse_enum(v, "bp loss")?;
    }
    if let Some(v) = &f.ff_feed {
        t.ff_feed = parse_enum(v, "ff feed")?;
    }
    Ok(())
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::config(format!("unknown {what} `{s}`")))
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| f(p.trim())).collect()
}

/// `1-50` (inclusive) or `1,2,3`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("cannot parse seeds `{s}`"));
    if let Some((a, b)) = s.split_once('-').or_else(|| s.split_once("..")) {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    parse_list(s, |p| p.parse().map_err(|_| bad()))
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, PathBuf)> {
    let path = resolve_data_path(cfg.data.path.as_deref());
    let ds = load_banknote(&path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })?;
    if !ds.has_canonical_counts() {
        log::warn!(
            "{} has {} rows / {} counterfeit, not the published {} / {}",
            path.display(),
            ds.len(),
            ds.positives(),
            crate::data::CANONICAL_ROWS,
            crate::data::CANONICAL_POSITIVES
        );
    }
    Ok((ds, path))
}

fn decisions() -> serde_json::Value {
    json!({
        "update_rule": "descent: W -= (lr/n) dL/dW, b -= (lr/n) dL/db, no momentum or weight decay",
        "initialization": "uniform(+-1/sqrt(fan_in)) weights from SplitMix64(seed), zero biases",
        "loss_state": "center = batch column means, R^2 = (1-nu) quantile of squared distances, refit per batch and held fixed while differentiating",
        "bp_loss_placement": "final layer unless bp_loss = sum_layers",
        "ff_feed": "post-update output unless ff_feed = pre_update",
        "early_stopping": "stop when the first minimum of the validation loss is more than `patience` epochs old; validation loss = final-layer loss of the frozen network with its state fitted on the validation split",
        "normalization": "distances divided by the largest training distance",
        "quantile": "linear interpolation between order statistics",
        "threshold": "flag iff P > (1-nu) quantile of training P",
        "positive_class": "label 1 (counterfeit) is the anomaly and the positive class for F1 and AUC",
        "standard_deviation": "population",
    })
}

fn write_metadata(dir: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "decisions": decisions(),
        "details": extra,
    });
    std::fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn dataset_info(ds: &Dataset, path: &Path) -> serde_json::Value {
    json!({
        "path": path,
        "rows": ds.len(),
        "positives": ds.positives(),
        "published_counts": ds.has_canonical_counts(),
    })
}

fn metrics_json(x_flags: &[u8], probs: &[f64], labels: &[u8]) -> Result<serde_json::Value> {
    let auc = match auc(probs, labels) {
        Ok(a) => json!(a),
        Err(Error::UndefinedAuc) => serde_json::Value::Null,
        Err(e) => return Err(e),
    };
    Ok(json!({
        "accuracy": accuracy(x_flags, labels)?,
        "f1": f1(x_flags, labels)?,
        "auc": auc,
        "flagged_fraction": flagged_fraction(x_flags),
        "n": labels.len(),
    }))
}

fn cmd_train(mut cfg: RunConfig, c: TrainCmd) -> Result<i32> {
    if let Some(l) = c.loss {
        cfg.loss.kind = l;
    }
    if let Some(v) = c.c {
        cfg.loss.c = Some(v);
    }
    if let Some(a) = &c.arch {
        cfg.architecture = parse_arch(a)?;
    }
    if let Some(r) = c.regime {
        cfg.train.regime = r;
    }
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    apply_optim_flags(&mut cfg, &c.optim)?;
    apply_data_flags(&mut cfg, &c.split)?;
    cfg.validate()?;

    let (ds, path) = load_dataset(&cfg)?;
    let data = PreparedData::new(&ds, &cfg.data)?;
    let spec = cfg.loss.spec();
    let net = init_network(&cfg.architecture, cfg.train.seed)?;
    let (mut model, report) = train(net, TrainData::new(&data.train, &data.valid), &spec, &cfg.train)?;
    model.standardizer = Some(data.transform.clone());
    let mut data_cfg = cfg.data.clone();
    data_cfg.path = Some(path.clone());
    model.data = Some(data_cfg);

    let scored = score_and_flag_with(&model, &data.test, Normalization::TrainMax)?;
    let test = metrics_json(&scored.flags, scored.probabilities.as_slice(), &data.test_labels)?;

    let dir = cfg.output_dir.join(format!(
        "train_{}_{}_{}_seed{}",
        spec.kind.key(),
        arch_label(&cfg.architecture),
        cfg.train.regime,
        cfg.train.seed
    ));
    std::fs::create_dir_all(&dir)?;
    model.save(&dir.join("model.json"))?;
    report.write_csv(&dir.join("report.csv"))?;
    data.splits.write_index_files(&dir.join("splits"))?;
    write_metadata(
        &dir,
        "train",
        &cfg,
        json!({
            "dataset": dataset_info(&ds, &path),
            "epochs_run": report.epochs_run,
            "stopped_early": report.stopped_early,
            "layer_train_losses": report.layer_train_losses,
            "calibration": model.calibration,
            "test_metrics": test,
        }),
    )?;
    println!("{}", json!({ "output": dir, "epochs_run": report.epochs_run, "test": test }));
    Ok(0)
}

/// Rebuilds a split of the model's dataset in the model's feature space.
fn model_split(model: &TrainedModel, cfg: &RunConfig, which: SplitName) -> Result<(Matrix, Vec<u8>, Vec<usize>, Dataset, PathBuf)> {
    let mut data_cfg = model.data.clone().unwrap_or_else(|| cfg.data.clone());
    if cfg.data.path.is_some() {
        data_cfg.path = cfg.data.path.clone();
    }
    let lookup = RunConfig {
        data: data_cfg.clone(),
        ..cfg.clone()
    };
    let (ds, path) = load_dataset(&lookup)?;
    let splits = make_splits(&ds, data_cfg.fractions, data_cfg.split_seed, data_cfg.oneclass)?;
    let idx = splits.indices(which).to_vec();
    let raw = ds.features.select_rows(&idx);
    let x = match &model.standardizer {
        Some(st) => st.apply(&raw)?,
        None => Standardizer::identity(raw.cols()).apply(&raw)?,
    };
    let labels = ds.labels_at(&idx);
    Ok((x, labels, idx, ds, path))
}

fn run_name(model_path: &Path) -> String {
    model_path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| model_path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn cmd_eval(mut cfg: RunConfig, c: EvalCmd) -> Result<i32> {
    if let Some(s) = c.split {
        cfg.eval.split = s;
    }
    if c.batch_max {
        cfg.eval.normalization = Normalization::BatchMax;
    }
    let model = TrainedModel::load(&c.model)?;
    let (x, labels, idx, ds, path) = model_split(&model, &cfg, cfg.eval.split)?;
    let scored = score_and_flag_with(&model, &x, cfg.eval.normalization)?;
    let metrics = metrics_json(&scored.flags, scored.probabilities.as_slice(), &labels)?;

    let split_key = serde_json::to_value(cfg.eval.split)?;
    let split_key = split_key.as_str().unwrap_or("split");
    let dir = cfg.output_dir.join(format!("eval_{}_{split_key}", run_name(&c.model)));
    std::fs::create_dir_all(&dir)?;
    write_score_dump(&dir.join("scores.csv"), &idx, &scored, &labels)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    write_metadata(
        &dir,
        "eval",
        &cfg,
        json!({ "model": c.model, "dataset": dataset_info(&ds, &path), "metrics": metrics }),
    )?;
    println!("{metrics}");
    Ok(0)
}

fn cmd_grid(mut cfg: RunConfig, c: GridCmd) -> Result<i32> {
    if let Some(s) = &c.losses {
        cfg.grid.losses = parse_list(s, |p| p.parse())?;
    }
    if let Some(s) = &c.archs {
        cfg.grid.architectures = s
            .split(|ch| ch == ';' || ch == '/')
            .filter(|p| !p.trim().is_empty())
            .map(parse_arch)
            .collect::<Result<_>>()?;
    }
    if let Some(s) = &c.regimes {
        cfg.grid.regimes = parse_list(s, |p| p.parse())?;
    }
    if let Some(s) = &c.seeds {
        cfg.grid.seeds = parse_seeds(s)?;
    }
    if let Some(w) = c.workers {
        cfg.workers = Some(w);
    }
    if c.timing {
        cfg.grid.record_timing = true;
    }
    apply_optim_flags(&mut cfg, &c.optim)?;
    apply_data_flags(&mut cfg, &c.split)?;
    cfg.validate()?;
    let grid = cfg.grid_spec();
    grid.validate()?;

    let (ds, path) = load_dataset(&cfg)?;
    let data = PreparedData::new(&ds, &cfg.data)?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let records = run_grid(&grid, &data, Some(&dir.join("results.csv")), cfg.workers())?;
    let summaries = summarize(&records);
    write_summaries(&dir, &summaries)?;
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    write_metadata(
        &dir,
        "grid",
        &cfg,
        json!({
            "dataset": dataset_info(&ds, &path),
            "runs": records.len(),
            "failed_runs": failed,
            "workers": cfg.workers(),
        }),
    )?;
    eprintln!("{} runs, {} failed; results in {}", records.len(), failed, dir.display());
    print!("{}", crate::experiments::emit_tables(&summaries, TableFormat::Markdown));
    Ok(if failed == records.len() { 1 } else { 0 })
}

fn cmd_landscape(mut cfg: RunConfig, c: LandscapeCmd) -> Result<i32> {
    let l = &mut cfg.landscape;
    if let Some(v) = c.layer {
        l.layer = v;
    }
    if let Some(v) = c.radius {
        l.radius = v;
    }
    if let Some(v) = c.steps {
        l.steps = v;
    }
    if let Some(v) = c.direction_seed {
        l.direction_seed = v;
    }
    if c.frozen {
        l.state_mode = StateMode::Frozen;
    }
    if let Some(v) = c.split {
        l.split = v;
    }
    let model = TrainedModel::load(&c.model)?;
    if cfg.landscape.layer >= model.network.depth() {
        return Err(Error::LayerIndex {
            index: cfg.landscape.layer,
            layers: model.network.depth(),
        });
    }
    let (x, _, _, ds, path) = model_split(&model, &cfg, cfg.landscape.split)?;
    let l = &cfg.landscape;
    let grid = compute_landscape(&model, l.layer, &x, l.radius, l.steps, l.direction_seed, l.state_mode)?;
    let dir = cfg.output_dir.join(format!("landscape_{}", run_name(&c.model)));
    std::fs::create_dir_all(&dir)?;
    let csv = dir.join(landscape_file_name(l.layer));
    let sidecar = export_landscape(&grid, &csv)?;
    write_metadata(
        &dir,
        "landscape",
        &cfg,
        json!({ "model": c.model, "dataset": dataset_info(&ds, &path), "csv": csv, "sidecar": sidecar }),
    )?;
    println!("{}", json!({ "csv": csv, "center_loss": grid.center_value() }));
    Ok(0)
}

fn cmd_summarize(cfg: RunConfig, c: SummarizeCmd) -> Result<i32> {
    let results = c.results.clone().unwrap_or_else(|| cfg.output_dir.join("results.csv"));
    let records = read_results(&results)?;
    let summaries = summarize(&records);
    write_summaries(&cfg.output_dir, &summaries)?;
    print!("{}", crate::experiments::emit_tables(&summaries, c.format));
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{BpLoss, FfFeed};

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("1-3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("4,9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn enum_flags() {
        assert_eq!(parse_enum::<BpLoss>("sum_layers", "").unwrap(), BpLoss::SumLayers);
        assert_eq!(parse_enum::<FfFeed>("pre_update", "").unwrap(), FfFeed::PreUpdate);
        assert!(parse_enum::<FfFeed>("sideways", "").is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "ffoc", "train", "--loss", "goodness", "--arch", "4,25,25", "--regime", "ff", "--seed", "1", "--oneclass", "false",
        ])
        .unwrap();
        match cli.command {
            Command::Train(t) => {
                assert_eq!(t.loss, Some(LossKind::Goodness));
                assert_eq!(t.split.oneclass, Some(false));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["ffoc", "train", "--loss", "nope"]).is_err());
    }
}
