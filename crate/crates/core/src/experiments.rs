//! Grid runs over (loss, architecture, regime, seed), the `results.csv` record
//! store, and per-cell summaries rendered as CSV, Markdown or LaTeX tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::network::{init_network, validate_architecture};
use crate::scoring::{evaluate_model, flagged_fraction, score_and_flag, MetricTriple};
use crate::stats;
use crate::training::{train, Regime, TrainConfig, TrainData};

pub const RESULTS_HEADER: &str = "loss,arch,regime,seed,accuracy,f1,auc,epochs,wall_ms,status";

pub fn default_architectures() -> Vec<Vec<usize>> {
    vec![vec![4, 10, 10], vec![4, 25, 25], vec![4, 50, 50], vec![4, 100, 100]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub losses: Vec<LossSpec>,
    pub architectures: Vec<Vec<usize>>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    /// Template for every run; `regime` and `seed` are set per run.
    pub train: TrainConfig,
    /// Write measured wall time; off by default so `results.csv` is reproducible.
    pub record_timing: bool,
}

impl Default for GridSpec {
    /// Five losses, four architectures, both regimes, seeds 1..=50.
    fn default() -> Self {
        GridSpec {
            losses: LossKind::ALL.iter().map(|&k| LossSpec::new(k)).collect(),
            architectures: default_architectures(),
            regimes: Regime::ALL.to_vec(),
            seeds: (1..=50).collect(),
            train: TrainConfig::default(),
            record_timing: false,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() || self.architectures.is_empty() || self.regimes.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("every grid axis needs at least one entry"));
        }
        let kinds: BTreeSet<LossKind> = self.losses.iter().map(|l| l.kind).collect();
        if kinds.len() != self.losses.len() {
            return Err(Error::config("grid losses must be distinct kinds"));
        }
        for l in &self.losses {
            l.validate()?;
        }
        for a in &self.architectures {
            validate_architecture(a)?;
        }
        if self.architectures.iter().collect::<BTreeSet<_>>().len() != self.architectures.len() {
            return Err(Error::config("grid architectures must be distinct"));
        }
        if self.regimes.iter().collect::<BTreeSet<_>>().len() != self.regimes.len() {
            return Err(Error::config("grid regimes must be distinct"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("grid seeds must be distinct"));
        }
        self.train.validate()
    }

    pub fn cardinality(&self) -> usize {
        self.losses.len() * self.architectures.len() * self.regimes.len() * self.seeds.len()
    }

    /// Every run key in canonical order.
    pub fn keys(&self) -> Vec<RunKey> {
        let mut keys = Vec::with_capacity(self.cardinality());
        for l in &self.losses {
            for a in &self.architectures {
                for &r in &self.regimes {
                    for &s in &self.seeds {
                        keys.push(RunKey {
                            loss: l.kind,
                            arch: a.clone(),
                            regime: r,
                            seed: s,
                        });
                    }
                }
            }
        }
        keys.sort();
        keys
    }

    fn loss_spec(&self, kind: LossKind) -> LossSpec {
        *self.losses.iter().find(|l| l.kind == kind).expect("key built from grid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub loss: LossKind,
    pub arch: Vec<usize>,
    pub regime: Regime,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Non-finite loss or parameters during training.
    Diverged,
    /// All training distances were zero, so no threshold exists.
    Degenerate,
    Failed,
}

impl RunStatus {
    pub fn key(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
            RunStatus::Degenerate => "degenerate",
            RunStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ok" => RunStatus::Ok,
            "diverged" => RunStatus::Diverged,
            "degenerate" => RunStatus::Degenerate,
            "failed" => RunStatus::Failed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub key: RunKey,
    /// `None` unless the run succeeded.
    pub metrics: Option<MetricTriple>,
    pub epochs: usize,
    pub wall_ms: u64,
    pub status: RunStatus,
    /// Flagged fraction of the model's own training split and that split's
    /// size. Only known for runs made in this process.
    #[serde(skip)]
    pub calibration_check: Option<(f64, usize)>,
}

impl ExperimentRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn csv_line(&self) -> String {
        let (a, f, u) = match &self.metrics {
            Some(m) => (format!("{:?}", m.accuracy), format!("{:?}", m.f1), format!("{:?}", m.auc)),
            None => (String::new(), String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{a},{f},{u},{},{},{}",
            self.key.loss.key(),
            arch_label(&self.key.arch),
            self.key.regime.key(),
            self.key.seed,
            self.epochs,
            self.wall_ms,
            self.status.key()
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("results line `{line}`: bad {what}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad("column count"));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let status = RunStatus::parse(f[9]).ok_or_else(|| bad("status"))?;
        let metrics = if f[4].is_empty() {
            None
        } else {
            Some(MetricTriple {
                accuracy: num(f[4], "accuracy")?,
                f1: num(f[5], "f1")?,
                auc: num(f[6], "auc")?,
            })
        };
        Ok(ExperimentRecord {
            key: RunKey {
                loss: f[0].parse().map_err(|_| bad("loss"))?,
                arch: parse_arch(f[1]).map_err(|_| bad("arch"))?,
                regime: f[2].parse().map_err(|_| bad("regime"))?,
                seed: f[3].parse().map_err(|_| bad("seed"))?,
            },
            metrics,
            epochs: f[7].parse().map_err(|_| bad("epochs"))?,
            wall_ms: f[8].parse().map_err(|_| bad("wall_ms"))?,
            status,
            calibration_check: None,
        })
    }
}

/// `4-10-10` for `[4, 10, 10]`.
pub fn arch_label(arch: &[usize]) -> String {
    arch.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// Accepts `4-10-10`, `4,10,10` or `(4,10,10)`.
pub fn parse_arch(s: &str) -> Result<Vec<usize>> {
    let t = s.trim().trim_start_matches('(').trim_end_matches(')');
    let arch = t
        .split(|c| c == '-' || c == ',' || c == 'x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::config(format!("cannot parse architecture `{s}`")))?;
    validate_architecture(&arch)?;
    Ok(arch)
}

/// Trains and evaluates one grid cell. Failures become records.
pub fn run_one(key: &RunKey, grid: &GridSpec, data: &PreparedData) -> ExperimentRecord {
    let start = Instant::now();
    let spec = grid.loss_spec(key.loss);
    let cfg = TrainConfig {
        regime: key.regime,
        seed: key.seed,
        ..grid.train.clone()
    };
    let outcome = (|| {
        let net = init_network(&key.arch, key.seed)?;
        let (model, report) = train(net, TrainData::new(&data.train, &data.valid), &spec, &cfg)?;
        let (metrics, _) = evaluate_model(&model, &data.test, &data.test_labels)?;
        let own = score_and_flag(&model, &data.train)?;
        Ok::<_, Error>((metrics, report.epochs_run, (flagged_fraction(&own.flags), data.train.rows())))
    })();
    let wall_ms = if grid.record_timing {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    let mut rec = ExperimentRecord {
        key: key.clone(),
        metrics: None,
        epochs: 0,
        wall_ms,
        status: RunStatus::Ok,
        calibration_check: None,
    };
    match outcome {
        Ok((m, epochs, check)) => {
            rec.metrics = Some(m);
            rec.epochs = epochs;
            rec.calibration_check = Some(check);
        }
        Err(Error::NonFinite { epoch, layer }) => {
            log::info!("{key:?} diverged at epoch {epoch}, layer {layer}");
            rec.status = RunStatus::Diverged;
            rec.epochs = epoch;
        }
        Err(Error::DegenerateCalibration) => {
            log::info!("{key:?}: degenerate calibration");
            rec.status = RunStatus::Degenerate;
        }
        Err(e) => {
            log::warn!("{key:?} failed: {e}");
            rec.status = RunStatus::Failed;
        }
    }
    rec
}

/// Runs every key of `grid` not already present in `results` (if given),
/// appending each record to that file as it completes. Once the grid is done
/// the file is rewritten in canonical key order. Returns the grid's records
/// in canonical order, including any loaded from the file.
pub fn run_grid(grid: &GridSpec, data: &PreparedData, results: Option<&Path>, workers: usize) -> Result<Vec<ExperimentRecord>> {
    grid.validate()?;
    let width = data.train.cols();
    if let Some(a) = grid.architectures.iter().find(|a| a[0] != width) {
        return Err(Error::config(format!(
            "architecture {} does not start with the data width {width}",
            arch_label(a)
        )));
    }
    let mut done: BTreeMap<RunKey, ExperimentRecord> = BTreeMap::new();
    if let Some(path) = results {
        if path.exists() {
            for r in read_results(path)? {
                done.insert(r.key.clone(), r);
            }
        }
    }
    let todo: Vec<RunKey> = grid.keys().into_iter().filter(|k| !done.contains_key(k)).collect();
    log::info!("{} runs to do, {} already recorded", todo.len(), grid.cardinality() - todo.len());

    let sink = match results {
        Some(path) => Some(Mutex::new(open_sink(path)?)),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let fresh: Vec<Result<ExperimentRecord>> = pool.install(|| {
        todo.par_iter()
            .map(|key| {
                let rec = run_one(key, grid, data);
                if let Some(sink) = &sink {
                    let mut f = sink.lock().expect("sink poisoned");
                    writeln!(f, "{}", rec.csv_line())?;
                    f.flush()?;
                }
                Ok(rec)
            })
            .collect()
    });
    drop(sink);
    for rec in fresh {
        let rec = rec?;
        done.insert(rec.key.clone(), rec);
    }
    if let Some(path) = results {
        write_results(path, done.values())?;
    }
    let wanted: BTreeSet<RunKey> = grid.keys().into_iter().collect();
    Ok(done.into_values().filter(|r| wanted.contains(&r.key)).collect())
}

fn open_sink(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    } else {
        // an interrupted write may have left a partial line
        let text = std::fs::read_to_string(path)?;
        if !text.ends_with('\n') {
            writeln!(f)?;
        }
    }
    Ok(f)
}

/// Writes `records` with a header via a temporary file and rename.
pub fn write_results<'a>(path: &Path, records: impl IntoIterator<Item = &'a ExperimentRecord>) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(f, "{RESULTS_HEADER}")?;
        for r in records {
            writeln!(f, "{}", r.csv_line())?;
        }
        f.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Reads a results file. A malformed final line (an interrupted append) is
/// dropped; malformed lines elsewhere are errors. Later duplicates win.
pub fn read_results(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines: Vec<&str> = text.lines().collect();
    match lines.first() {
        None => return Ok(Vec::new()),
        Some(&h) if h.trim() == RESULTS_HEADER => {
            lines.remove(0);
        }
        Some(_) => {
            return Err(Error::Parse {
                path: PathBuf::from(path),
                line: 1,
                msg: format!("expected header `{RESULTS_HEADER}`"),
            })
        }
    }
    let count = lines.len();
    let mut out: BTreeMap<RunKey, ExperimentRecord> = BTreeMap::new();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match ExperimentRecord::parse_csv_line(line) {
            Ok(r) => {
                out.insert(r.key.clone(), r);
            }
            Err(_) if i + 1 == count && !text.ends_with('\n') => {
                log::warn!("dropping partial final line in {}", path.display());
            }
            Err(e) => {
                return Err(Error::Parse {
                    path: PathBuf::from(path),
                    line: i + 2,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub regime: Regime,
    pub loss: LossKind,
    pub arch: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
}

impl MetricSummary {
    /// Order-independent: values are sorted before summing.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(MetricSummary {
            mean: stats::mean(&v)?,
            std: stats::population_std(&v)?,
            max: *v.last()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub accuracy: MetricSummary,
    pub f1: MetricSummary,
    pub auc: MetricSummary,
    /// Successful runs summarized.
    pub count: usize,
    /// Runs excluded because they failed.
    pub failures: usize,
}

/// Per-(regime, loss, architecture) summaries over successful runs. Cells
/// where every run failed are omitted with a warning.
pub fn summarize(records: &[ExperimentRecord]) -> BTreeMap<CellKey, CellSummary> {
    let mut cells: BTreeMap<CellKey, (Vec<MetricTriple>, usize)> = BTreeMap::new();
    for r in records {
        let key = CellKey {
            regime: r.key.regime,
            loss: r.key.loss,
            arch: r.key.arch.clone(),
        };
        let cell = cells.entry(key).or_default();
        match (&r.metrics, r.status) {
            (Some(m), RunStatus::Ok) => cell.0.push(*m),
            _ => cell.1 += 1,
        }
    }
    let mut out = BTreeMap::new();
    for (key, (ms, failures)) in cells {
        if ms.is_empty() {
            log::warn!(
                "no successful runs for {} {} {}; cell omitted",
                key.regime,
                key.loss,
                arch_label(&key.arch)
            );
            continue;
        }
        let pick = |f: fn(&MetricTriple) -> f64| MetricSummary::from_values(&ms.iter().map(f).collect::<Vec<_>>()).expect("non-empty");
        out.insert(
            key,
            CellSummary {
                accuracy: pick(|m| m.accuracy),
                f1: pick(|m| m.f1),
                auc: pick(|m| m.auc),
                count: ms.len(),
                failures,
            },
        );
    }
    out
}

/// Mean test accuracy over the successful runs of `regime`.
pub fn grand_mean_accuracy(records: &[ExperimentRecord], regime: Regime) -> Option<f64> {
    let mut acc: Vec<f64> = records
        .iter()
        .filter(|r| r.key.regime == regime && r.is_ok())
        .filter_map(|r| r.metrics.map(|m| m.accuracy))
        .collect();
    acc.sort_by(f64::total_cmp);
    stats::mean(&acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Markdown,
    Latex,
}

impl TableFormat {
    pub const ALL: [TableFormat; 3] = [TableFormat::Csv, TableFormat::Markdown, TableFormat::Latex];

    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Markdown => "md",
            TableFormat::Latex => "tex",
        }
    }
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "md" | "markdown" => Ok(TableFormat::Markdown),
            "tex" | "latex" => Ok(TableFormat::Latex),
            _ => Err(Error::config(format!("unknown table format `{s}`"))),
        }
    }
}

const COLUMNS: [&str; 14] = [
    "regime", "loss", "arch", "accuracy_mean", "accuracy_std", "accuracy_max", "f1_mean", "f1_std", "f1_max", "auc_mean",
    "auc_std", "auc_max", "runs", "failed",
];

/// The cells of every row as text, shared by all formats.
fn table_rows(summaries: &BTreeMap<CellKey, CellSummary>) -> Vec<[String; 14]> {
    let num = |x: f64| format!("{x:?}");
    summaries
        .iter()
        .map(|(k, s)| {
            [
                k.regime.key().to_string(),
                k.loss.to_string(),
                format!("({})", k.arch.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
                num(s.accuracy.mean),
                num(s.accuracy.std),
                num(s.accuracy.max),
                num(s.f1.mean),
                num(s.f1.std),
                num(s.f1.max),
                num(s.auc.mean),
                num(s.auc.std),
                num(s.auc.max),
                s.count.to_string(),
                s.failures.to_string(),
            ]
        })
        .collect()
}

/// One row per cell, ordered by regime, loss and architecture.
pub fn emit_tables(summaries: &BTreeMap<CellKey, CellSummary>, format: TableFormat) -> String {
    let rows = table_rows(summaries);
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&COLUMNS.join(","));
            out.push('\n');
            for r in &rows {
                let cells: Vec<String> = r
                    .iter()
                    .map(|c| if c.contains(',') { format!("\"{c}\"") } else { c.clone() })
                    .collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(COLUMNS.len()));
            for r in &rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
        }
        TableFormat::Latex => {
            let _ = writeln!(out, "\\begin{{tabular}}{{lll{}}}", "r".repeat(COLUMNS.len() - 3));
            out.push_str("\\hline\n");
            let head: Vec<String> = COLUMNS.iter().map(|c| c.replace('_', "\\_")).collect();
            let _ = writeln!(out, "{} \\\\", head.join(" & "));
            out.push_str("\\hline\n");
            for r in &rows {
                let _ = writeln!(out, "{} \\\\", r.join(" & "));
            }
            out.push_str("\\hline\n\\end{tabular}\n");
        }
    }
    out
}

/// Writes `summary.csv`, `summary.md` and `summary.tex` into `dir`.
pub fn write_summaries(dir: &Path, summaries: &BTreeMap<CellKey, CellSummary>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in TableFormat::ALL {
        std::fs::write(dir.join(format!("summary.{}", f.extension())), emit_tables(summaries, f))?;
    }
    Ok(())
}
