//! Comparison metrics, experiment sweeps and CSV output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_orlib, split, to_returns, Layout, ReturnsData};
use crate::error::{Error, Result};
use crate::pipeline::{track, Model, TrackResult};
use crate::portfolio::TrackerConfig;

pub const CSV_HEADER: &str =
    "dataset,n_stocks,k,model,tei,teo,cons,supo,seed,iterations,runtime_ms";

/// Published baseline values shipped with the crate.
pub const BUILTIN_REFERENCE: &str = include_str!("../reference/published_tables.csv");

/// In/out-of-sample consistency `|tei - teo|`.
pub fn cons(tei: f64, teo: f64) -> f64 {
    (tei - teo).abs()
}

/// Out-of-sample improvement of `teo2` over the baseline `teo1`, in percent.
pub fn supo(teo1: f64, teo2: f64) -> Result<f64> {
    if !(teo1 > 0.0) {
        return Err(Error::ZeroBaseline(teo1));
    }
    Ok((teo1 - teo2) / teo1 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub tei: f64,
    pub teo: f64,
}

/// Published errors keyed by `(dataset, k, source)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceTable {
    entries: BTreeMap<(String, usize, String), ReferenceEntry>,
}

impl ReferenceTable {
    /// Parses a CSV with at least the columns `dataset,k,source,tei,teo`.
    /// Lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Record {
            dataset: String,
            k: usize,
            source: String,
            tei: f64,
            teo: f64,
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut entries = BTreeMap::new();
        for rec in reader.deserialize::<Record>() {
            let rec = rec.map_err(|e| Error::Validation(format!("reference table: {e}")))?;
            entries.insert(
                (rec.dataset, rec.k, rec.source),
                ReferenceEntry {
                    tei: rec.tei,
                    teo: rec.teo,
                },
            );
        }
        if entries.is_empty() {
            return Err(Error::Validation("empty reference table".into()));
        }
        Ok(Self { entries })
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_REFERENCE).expect("shipped reference table parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get(&self, dataset: &str, k: usize, source: &str) -> Option<ReferenceEntry> {
        self.entries
            .get(&(dataset.to_string(), k, source.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSource {
    pub path: PathBuf,
    pub layout: Layout,
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub datasets: Vec<DatasetSource>,
    pub k_values: Vec<usize>,
    pub models: Vec<Model>,
    pub cfg: TrackerConfig,
    /// Rows placed in the training block; `None` splits in half.
    pub split_count: Option<usize>,
    pub seeds: Vec<u64>,
    pub reference: Option<ReferenceTable>,
    /// Baseline sources tried in order when computing SupO.
    pub baselines: Vec<String>,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Record wall-clock time. Off by default so output is reproducible.
    pub timings: bool,
}

impl ExperimentSpec {
    pub fn new(datasets: Vec<DatasetSource>, k_values: Vec<usize>, models: Vec<Model>) -> Self {
        Self {
            datasets,
            k_values,
            models,
            cfg: TrackerConfig::default(),
            split_count: None,
            seeds: vec![42],
            reference: None,
            baselines: vec!["torrubiano".into(), "l1".into()],
            jobs: None,
            timings: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeedTag {
    Seed(u64),
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub n_stocks: usize,
    pub k: usize,
    pub model: Model,
    pub tei: Option<f64>,
    pub teo: Option<f64>,
    pub cons: Option<f64>,
    pub supo_vs_reference: Option<f64>,
    pub seed: SeedTag,
    pub iterations: Option<usize>,
    pub runtime_ms: Option<f64>,
    pub error: Option<String>,
}

impl ResultRow {
    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }

    fn sort_key(&self) -> (&str, usize, Model, SeedTag) {
        (&self.dataset, self.k, self.model, self.seed)
    }
}

fn load_dataset(src: &DatasetSource, split_count: Option<usize>) -> Result<ReturnsData> {
    let panel = load_orlib(&src.path, src.layout)?;
    let data = to_returns(&panel);
    let train = split_count.unwrap_or(data.n_periods() / 2);
    split(&data, train)
}

fn supo_for(spec: &ExperimentSpec, dataset: &str, k: usize, teo: f64) -> Option<f64> {
    let table = spec.reference.as_ref()?;
    spec.baselines
        .iter()
        .find_map(|src| table.get(dataset, k, src))
        .and_then(|r| supo(r.teo, teo).ok())
}

fn row_from(
    spec: &ExperimentSpec,
    data: &ReturnsData,
    k: usize,
    model: Model,
    seed: u64,
    outcome: Result<TrackResult>,
) -> ResultRow {
    let mut row = ResultRow {
        dataset: data.source_name.clone(),
        n_stocks: data.n_stocks(),
        k,
        model,
        tei: None,
        teo: None,
        cons: None,
        supo_vs_reference: None,
        seed: SeedTag::Seed(seed),
        iterations: None,
        runtime_ms: None,
        error: None,
    };
    match outcome {
        Ok(r) => {
            row.tei = Some(r.tei);
            row.teo = Some(r.teo);
            row.cons = Some(cons(r.tei, r.teo));
            row.supo_vs_reference = supo_for(spec, &row.dataset, k, r.teo);
            row.iterations = Some(r.iterations);
            row.runtime_ms = spec.timings.then_some(r.runtime_ms);
        }
        Err(e) => {
            log::error!("{} k={k} {model} seed={seed}: {e}", row.dataset);
            row.error = Some(e.to_string());
        }
    }
    row
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median over the successful seed rows of one cell, or `None` if all failed.
fn median_row(spec: &ExperimentSpec, group: &[&ResultRow]) -> Option<ResultRow> {
    let ok: Vec<&&ResultRow> = group.iter().filter(|r| !r.is_error()).collect();
    if ok.is_empty() {
        return None;
    }
    let first = ok[0];
    let tei = median(ok.iter().filter_map(|r| r.tei).collect());
    let teo = median(ok.iter().filter_map(|r| r.teo).collect());
    let mut its: Vec<usize> = ok.iter().filter_map(|r| r.iterations).collect();
    its.sort_unstable();
    Some(ResultRow {
        dataset: first.dataset.clone(),
        n_stocks: first.n_stocks,
        k: first.k,
        model: first.model,
        tei: Some(tei),
        teo: Some(teo),
        cons: Some(cons(tei, teo)),
        supo_vs_reference: supo_for(spec, &first.dataset, first.k, teo),
        seed: SeedTag::Median,
        iterations: Some(its[(its.len() - 1) / 2]),
        runtime_ms: None,
        error: None,
    })
}

/// Runs every `(dataset, k, model, seed)` cell. Cell failures become error
/// rows; only an invalid experiment or an unreadable dataset aborts the sweep.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    if spec.datasets.is_empty() {
        return Err(Error::Validation("no datasets given".into()));
    }
    if spec.k_values.is_empty() {
        return Err(Error::Validation("no k values given".into()));
    }
    if spec.models.is_empty() {
        return Err(Error::Validation("no models given".into()));
    }
    if spec.seeds.is_empty() {
        return Err(Error::Validation("no seeds given".into()));
    }
    let datasets = spec
        .datasets
        .iter()
        .map(|d| load_dataset(d, spec.split_count))
        .collect::<Result<Vec<_>>>()?;
    for data in &datasets {
        for &k in &spec.k_values {
            if k == 0 || k >= data.n_stocks() {
                return Err(Error::KOutOfRange {
                    k,
                    n: data.n_stocks(),
                });
            }
            if !spec.cfg.bounds.budget_feasible(k) {
                return Err(Error::InfeasibleBounds {
                    eta: spec.cfg.bounds.eta,
                    delta: spec.cfg.bounds.delta,
                    k,
                });
            }
        }
    }
    let mut probe = spec.cfg;
    probe.k = spec.k_values[0];
    probe.validate()?;

    let mut cells = Vec::new();
    for data in &datasets {
        for &k in &spec.k_values {
            for &model in &spec.models {
                for &seed in &spec.seeds {
                    cells.push((data, k, model, seed));
                }
            }
        }
    }
    let run_cells = || -> Vec<ResultRow> {
        cells
            .par_iter()
            .map(|&(data, k, model, seed)| {
                let mut cfg = spec.cfg;
                cfg.k = k;
                cfg.seed = seed;
                row_from(spec, data, k, model, seed, track(model, data, &cfg))
            })
            .collect()
    };
    let mut rows = match spec.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?
            .install(run_cells),
        None => run_cells(),
    };

    if spec.seeds.len() > 1 {
        let mut groups: BTreeMap<(String, usize, Model), Vec<&ResultRow>> = BTreeMap::new();
        for r in &rows {
            groups
                .entry((r.dataset.clone(), r.k, r.model))
                .or_default()
                .push(r);
        }
        let medians: Vec<ResultRow> = groups
            .values()
            .filter_map(|g| median_row(spec, g))
            .collect();
        rows.extend(medians);
    }
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(rows)
}

fn sci(v: f64) -> String {
    format!("{v:.5e}")
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

fn write_records<W: std::io::Write>(
    w: W,
    records: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for rec in records {
        out.write_record(&rec)
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

fn row_record(r: &ResultRow) -> Vec<String> {
    let seed = match r.seed {
        SeedTag::Seed(s) => s.to_string(),
        SeedTag::Median => "median".to_string(),
    };
    vec![
        r.dataset.clone(),
        r.n_stocks.to_string(),
        r.k.to_string(),
        r.model.to_string(),
        opt(r.tei, sci),
        opt(r.teo, sci),
        opt(r.cons, sci),
        opt(r.supo_vs_reference, sci),
        seed,
        opt(r.iterations, |i| i.to_string()),
        opt(r.runtime_ms, sci),
    ]
}

fn header_record() -> Vec<String> {
    CSV_HEADER.split(',').map(String::from).collect()
}

/// Renders rows as CSV text; reals use six significant digits.
pub fn csv_string(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    let records = std::iter::once(header_record()).chain(rows.iter().map(row_record));
    write_records(&mut buf, records).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("records are UTF-8")
}

pub fn emit_csv(rows: &[ResultRow], destination: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Validation("no rows to write".into()));
    }
    let records = std::iter::once(header_record()).chain(rows.iter().map(row_record));
    write_records(fs::File::create(destination)?, records)
}

pub const PLOT_METRICS: [&str; 3] = ["tei", "teo", "cons"];

/// Writes `{dataset}_{metric}.csv` files with columns `k,<model>...` into
/// `dir`. With several seeds the median rows are plotted. Returns the paths.
pub fn emit_plot_series(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Validation("no rows to plot".into()));
    }
    fs::create_dir_all(dir)?;
    let has_median = rows.iter().any(|r| r.seed == SeedTag::Median);
    let mut by_dataset: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows
        .iter()
        .filter(|r| (r.seed == SeedTag::Median) == has_median)
    {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let mut written = Vec::new();
    for (dataset, rs) in by_dataset {
        let mut models: Vec<Model> = rs.iter().map(|r| r.model).collect();
        models.sort();
        models.dedup();
        let mut ks: Vec<usize> = rs.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        for metric in PLOT_METRICS {
            let header = std::iter::once("k".to_string())
                .chain(models.iter().map(|m| m.to_string()))
                .collect();
            let body = ks.iter().map(|&k| {
                std::iter::once(k.to_string())
                    .chain(models.iter().map(|m| {
                        // with one seed per cell there is exactly one matching row
                        let v =
                            rs.iter().find(|r| r.k == k && r.model == *m).and_then(
                                |r| match metric {
                                    "tei" => r.tei,
                                    "teo" => r.teo,
                                    _ => r.cons,
                                },
                            );
                        opt(v, sci)
                    }))
                    .collect()
            });
            let path = dir.join(format!("{dataset}_{metric}.csv"));
            write_records(
                fs::File::create(&path)?,
                std::iter::once(header).chain(body),
            )?;
            written.push(path);
        }
    }
    Ok(written)
}
