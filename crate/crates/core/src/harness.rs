//! Experiment orchestration: sum-rate comparisons across a grid of network
//! sizes, size-transfer of trained models, running-time measurements, and a
//! markdown/CSV report.
//!
//! Every table is kept as strings once built, so the CSV files and the
//! markdown report show identical values.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{equal_split_allocate, heuristic_allocate};
use crate::channel::NetworkConfig;
use crate::dataset::{read_dataset, Dataset};
use crate::error::{Error, Result};
use crate::ewmmse::{self, SolverOptions};
use crate::gnn::{load_model, save_model, GnnModel, PowerHead};
use crate::rate::{is_feasible, weighted_sum_rate, Allocation};
use crate::rng::SplitMix64;
use crate::trainer::{init_model, train, TrainConfig};
use crate::ChannelInstance;

/// Generalization ratios above this percentage are flagged.
pub const GENERALIZATION_WARNING_PCT: f64 = 102.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Ewmmse,
    Gnn,
    IcpGnn,
    Heuristic,
    EqualSplit,
}

impl Algorithm {
    pub fn is_learned(self) -> bool {
        matches!(self, Algorithm::Gnn | Algorithm::IcpGnn)
    }

    fn head(self) -> PowerHead {
        match self {
            Algorithm::IcpGnn => PowerHead::ChannelCap,
            _ => PowerHead::Normalize,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Ewmmse => "ewmmse",
            Algorithm::Gnn => "gnn",
            Algorithm::IcpGnn => "icp-gnn",
            Algorithm::Heuristic => "heuristic",
            Algorithm::EqualSplit => "equal-split",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ewmmse" => Ok(Algorithm::Ewmmse),
            "gnn" => Ok(Algorithm::Gnn),
            "icp-gnn" | "icp" => Ok(Algorithm::IcpGnn),
            "heuristic" => Ok(Algorithm::Heuristic),
            "equal-split" | "equal" => Ok(Algorithm::EqualSplit),
            other => Err(Error::Plan(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// One network size in the grid, with optional pre-built artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub d: usize,
    pub m: usize,
    /// Test set to use instead of generating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gnn_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icp_model: Option<PathBuf>,
}

impl Cell {
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            test_data: None,
            gnn_model: None,
            icp_model: None,
        }
    }

    fn model_path(&self, alg: Algorithm) -> Option<&Path> {
        match alg {
            Algorithm::Gnn => self.gnn_model.as_deref(),
            Algorithm::IcpGnn => self.icp_model.as_deref(),
            _ => None,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D={}, M={}", self.d, self.m)
    }
}

/// Physical parameters shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Physical {
    pub area_side: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub gamma: f64,
    pub noise_power: f64,
    pub p_max: f64,
}

impl Default for Physical {
    fn default() -> Self {
        let c = NetworkConfig::new(1, 1);
        Self {
            area_side: c.area_side,
            d_min: c.d_min,
            d_max: c.d_max,
            gamma: c.gamma,
            noise_power: c.noise_power,
            p_max: c.p_max,
        }
    }
}

impl Physical {
    pub fn config(&self, d: usize, m: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            area_side: self.area_side,
            d_min: self.d_min,
            d_max: self.d_max,
            gamma: self.gamma,
            noise_power: self.noise_power,
            p_max: self.p_max,
            ..NetworkConfig::new(d, m).with_seed(seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub seed: u64,
    pub samples: usize,
}

impl Default for TestSpec {
    fn default() -> Self {
        Self {
            seed: 1_000_003,
            samples: 200,
        }
    }
}

/// How to train a model for a cell that has no checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    /// Seed of the training set; the validation seed is derived from it.
    pub data_seed: u64,
    pub samples: usize,
    pub val_samples: usize,
    #[serde(default)]
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationSpec {
    pub anchor: Cell,
    pub targets: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSpec {
    /// Cells to time; defaults to the plan's cells.
    #[serde(default)]
    pub cells: Vec<Cell>,
    /// Instances per cell, taken from the front of the test set.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub cells: Vec<Cell>,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub test: TestSpec,
    #[serde(default)]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub physical: Physical,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub generalization: Option<GeneralizationSpec>,
    #[serde(default)]
    pub timing: Option<TimingSpec>,
    pub output_dir: PathBuf,
}

impl ExperimentPlan {
    /// Laptop-sized grid: D ∈ {10, 20}, M ∈ {2, 4}, 200 test instances.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        let cells: Vec<Cell> = [(10, 2), (10, 4), (20, 2), (20, 4)]
            .into_iter()
            .map(|(d, m)| Cell::new(d, m))
            .collect();
        Self {
            cells: cells.clone(),
            algorithms: vec![
                Algorithm::Ewmmse,
                Algorithm::Gnn,
                Algorithm::Heuristic,
                Algorithm::EqualSplit,
            ],
            test: TestSpec::default(),
            train: Some(TrainSpec {
                data_seed: 1,
                samples: 2000,
                val_samples: 200,
                config: TrainConfig::default(),
            }),
            physical: Physical::default(),
            solver: SolverOptions::default(),
            generalization: Some(GeneralizationSpec {
                anchor: Cell::new(10, 2),
                targets: cells,
            }),
            timing: Some(TimingSpec {
                cells: vec![Cell::new(30, 10)],
                samples: 20,
            }),
            output_dir: output_dir.into(),
        }
    }

    /// Reads a JSON plan; relative paths inside it are taken relative to
    /// the plan file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: ExperimentPlan =
            serde_json::from_str(&text).map_err(|e| Error::Plan(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        plan.rebase(base);
        plan.validate()?;
        Ok(plan)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let gen = self
            .generalization
            .iter_mut()
            .flat_map(|g| std::iter::once(&mut g.anchor).chain(&mut g.targets));
        let timing = self.timing.iter_mut().flat_map(|t| t.cells.iter_mut());
        for cell in self.cells.iter_mut().chain(gen).chain(timing) {
            for p in [&mut cell.test_data, &mut cell.gnn_model, &mut cell.icp_model]
                .into_iter()
                .flatten()
            {
                fix(p);
            }
        }
    }

    /// Checks that every cell can be resolved to a dataset and, for learned
    /// algorithms, a model.
    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Plan("no algorithms listed".into()));
        }
        if self.test.samples == 0 {
            return Err(Error::Plan("test set must have at least one sample".into()));
        }
        let mut cells: Vec<&Cell> = self.cells.iter().collect();
        if let Some(g) = &self.generalization {
            cells.push(&g.anchor);
            cells.extend(&g.targets);
        }
        for cell in &cells {
            if cell.d == 0 || cell.m == 0 {
                return Err(Error::Plan(format!("cell {cell} has an empty dimension")));
            }
            self.physical
                .config(cell.d, cell.m, 0)
                .validate()
                .map_err(|e| Error::Plan(e.to_string()))?;
        }
        for cell in &self.cells {
            for &alg in self.algorithms.iter().filter(|a| a.is_learned()) {
                if cell.model_path(alg).is_none() && self.train.is_none() {
                    return Err(Error::Plan(format!(
                        "cell {cell}: no {alg} model given and no training section to build one"
                    )));
                }
            }
        }
        if let Some(g) = &self.generalization {
            for cell in std::iter::once(&g.anchor).chain(&g.targets) {
                if cell.gnn_model.is_none() && self.train.is_none() {
                    return Err(Error::Plan(format!(
                        "generalization cell {cell}: no gnn model given and no training section to build one"
                    )));
                }
            }
        }
        Ok(())
    }

    fn timing_cells(&self) -> Vec<Cell> {
        match &self.timing {
            Some(t) if !t.cells.is_empty() => t.cells.clone(),
            _ => self.cells.clone(),
        }
    }
}

/// Per-instance outcome of one algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub index: usize,
    pub sum_rate: f64,
    pub feasible: bool,
    pub wall_time_s: f64,
}

/// One summary row per (algorithm, cell).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub algorithm: Algorithm,
    pub d: usize,
    pub m: usize,
    pub mean_sum_rate: f64,
    pub std_sum_rate: f64,
    pub mean_wall_time_s: f64,
    pub violations: usize,
    pub dataset_hash: String,
    pub instances: Vec<InstanceResult>,
}

impl ResultRow {
    fn new(algorithm: Algorithm, data: &Dataset, hash: &str, instances: Vec<InstanceResult>) -> Self {
        let n = instances.len().max(1) as f64;
        let mean = instances.iter().map(|r| r.sum_rate).sum::<f64>() / n;
        let var = instances.iter().map(|r| (r.sum_rate - mean).powi(2)).sum::<f64>() / n;
        Self {
            algorithm,
            d: data.config.d,
            m: data.config.m,
            mean_sum_rate: mean,
            std_sum_rate: var.sqrt(),
            mean_wall_time_s: instances.iter().map(|r| r.wall_time_s).sum::<f64>() / n,
            violations: instances.iter().filter(|r| !r.feasible).count(),
            dataset_hash: hash.to_string(),
            instances,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn row(&self, algorithm: Algorithm, d: usize, m: usize) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.d == d && r.m == m)
    }

    /// Sum rates and feasibility only; identical across reruns of a plan.
    pub fn to_table(&self) -> Table {
        Table::new(
            "sumrate",
            "Mean sum rate per cell",
            &[
                "algorithm",
                "D",
                "M",
                "mean_sum_rate",
                "std_sum_rate",
                "violations",
                "dataset_hash",
            ],
            self.rows
                .iter()
                .map(|r| {
                    vec![
                        r.algorithm.to_string(),
                        r.d.to_string(),
                        r.m.to_string(),
                        r.mean_sum_rate.to_string(),
                        r.std_sum_rate.to_string(),
                        r.violations.to_string(),
                        r.dataset_hash.clone(),
                    ]
                })
                .collect(),
        )
    }

    /// Wall times measured during the sum-rate run.
    pub fn wall_time_table(&self) -> Table {
        Table::new(
            "sumrate_wall_time",
            "Mean wall time per instance during the sum-rate run",
            &["algorithm", "D", "M", "mean_wall_time_s"],
            self.rows
                .iter()
                .map(|r| {
                    vec![
                        r.algorithm.to_string(),
                        r.d.to_string(),
                        r.m.to_string(),
                        r.mean_wall_time_s.to_string(),
                    ]
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizationRow {
    pub anchor: (usize, usize),
    pub target: (usize, usize),
    pub transferred_sum_rate: f64,
    pub native_sum_rate: f64,
    pub ratio_pct: f64,
}

impl GeneralizationRow {
    pub fn warning(&self) -> bool {
        self.ratio_pct > GENERALIZATION_WARNING_PCT
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneralizationTable {
    pub rows: Vec<GeneralizationRow>,
}

impl GeneralizationTable {
    pub fn to_table(&self) -> Table {
        Table::new(
            "generalization",
            "Transferred model relative to a natively trained model",
            &[
                "anchor_D",
                "anchor_M",
                "target_D",
                "target_M",
                "transferred_sum_rate",
                "native_sum_rate",
                "ratio_pct",
                "warning",
            ],
            self.rows
                .iter()
                .map(|r| {
                    vec![
                        r.anchor.0.to_string(),
                        r.anchor.1.to_string(),
                        r.target.0.to_string(),
                        r.target.1.to_string(),
                        r.transferred_sum_rate.to_string(),
                        r.native_sum_rate.to_string(),
                        format!("{:.2}", r.ratio_pct),
                        if r.warning() {
                            "above-102pct".into()
                        } else {
                            String::new()
                        },
                    ]
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub algorithm: Algorithm,
    pub d: usize,
    pub m: usize,
    pub instances: usize,
    pub repetitions: usize,
    pub median_s: f64,
    pub q1_s: f64,
    pub q3_s: f64,
    /// Whole-set inference time divided by the set size (learned methods).
    pub batch_amortized_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn row(&self, algorithm: Algorithm, d: usize, m: usize) -> Option<&TimingRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.d == d && r.m == m)
    }

    pub fn to_table(&self) -> Table {
        Table::new(
            "timing",
            "Wall time per instance",
            &[
                "algorithm",
                "D",
                "M",
                "instances",
                "repetitions",
                "median_s",
                "q1_s",
                "q3_s",
                "log10_median_s",
                "batch_amortized_s",
            ],
            self.rows
                .iter()
                .map(|r| {
                    vec![
                        r.algorithm.to_string(),
                        r.d.to_string(),
                        r.m.to_string(),
                        r.instances.to_string(),
                        r.repetitions.to_string(),
                        format!("{:.9}", r.median_s),
                        format!("{:.9}", r.q1_s),
                        format!("{:.9}", r.q3_s),
                        format!("{:.4}", r.median_s.log10()),
                        r.batch_amortized_s.map(|t| format!("{t:.9}")).unwrap_or_default(),
                    ]
                })
                .collect(),
        )
    }
}

/// A rendered table: the single source for both CSV and markdown output.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// File stem of the CSV.
    pub name: String,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, title: &str, header: &[&str], rows: Vec<Vec<String>>) -> Self {
        Self {
            name: name.into(),
            title: title.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows,
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.header).map_err(fail)?;
        for row in &self.rows {
            w.write_record(row).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Reads a CSV written by [`Table::to_csv`]; the title is inferred from
    /// the file stem.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let bad = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let header: Vec<String> = r.headers().map_err(bad)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(bad)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string();
        let title = match name.as_str() {
            "sumrate" => "Mean sum rate per cell".to_string(),
            "sumrate_wall_time" => "Mean wall time per instance during the sum-rate run".to_string(),
            "generalization" => "Transferred model relative to a natively trained model".to_string(),
            "timing" => "Wall time per instance".to_string(),
            other => other.to_string(),
        };
        Ok(Self {
            name,
            title,
            header,
            rows,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("## {}\n\n", self.title);
        out.push_str(&format!("| {} |\n", self.header.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for row in &self.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out
    }
}

/// Writes `report.md` and one CSV per table into `dir`.
pub fn emit_report(tables: &[Table], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut md = String::from("# Experiment report\n");
    for t in tables {
        let path = dir.join(format!("{}.csv", t.name));
        fs::write(&path, t.to_csv()?).map_err(|e| Error::io(&path, e))?;
        md.push('\n');
        md.push_str(&t.to_markdown());
        if let Some(col) = t.header.iter().position(|h| h == "warning") {
            let flagged = t
                .rows
                .iter()
                .filter(|r| r.get(col).is_some_and(|v| !v.is_empty()))
                .count();
            if flagged > 0 {
                md.push_str(&format!(
                    "\nWarning: {flagged} cell(s) exceed {GENERALIZATION_WARNING_PCT}% of the native model; \
                     the native model is likely under-trained.\n"
                ));
            }
        }
        if let Some(col) = t.header.iter().position(|h| h == "dataset_hash") {
            let mut hashes: Vec<&str> = t.rows.iter().filter_map(|r| r.get(col).map(String::as_str)).collect();
            hashes.sort_unstable();
            hashes.dedup();
            md.push_str(&format!(
                "\nTest sets: {} distinct (see `dataset_hash`).\n",
                hashes.len()
            ));
        }
    }
    let path = dir.join("report.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))
}

/// Runs one non-learned algorithm on an instance.
pub fn solve_instance(
    alg: Algorithm,
    inst: &ChannelInstance,
    config: &NetworkConfig,
    solver: &SolverOptions,
    model: Option<&GnnModel>,
) -> Result<Allocation> {
    match alg {
        Algorithm::Ewmmse => Ok(ewmmse::solve(inst, config, solver)?.allocation),
        Algorithm::Heuristic => heuristic_allocate(inst, config),
        Algorithm::EqualSplit => equal_split_allocate(inst, config),
        Algorithm::Gnn | Algorithm::IcpGnn => model
            .ok_or_else(|| Error::Plan(format!("{alg} needs a model")))?
            .infer(inst),
    }
}

/// Resolves datasets and models for cells, caching what it builds.
pub struct Harness<'p> {
    plan: &'p ExperimentPlan,
    datasets: HashMap<(usize, usize), (Dataset, String)>,
    models: HashMap<(Algorithm, usize, usize), GnnModel>,
}

impl<'p> Harness<'p> {
    pub fn new(plan: &'p ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            plan,
            datasets: HashMap::new(),
            models: HashMap::new(),
        })
    }

    fn test_set(&mut self, cell: &Cell) -> Result<&(Dataset, String)> {
        let key = (cell.d, cell.m);
        if !self.datasets.contains_key(&key) {
            let data = match &cell.test_data {
                Some(path) => {
                    let data = read_dataset(path).map_err(|e| Error::Plan(format!("cell {cell}: {e}")))?;
                    if (data.config.d, data.config.m) != key {
                        return Err(Error::Plan(format!(
                            "cell {cell}: test data has D={}, M={}",
                            data.config.d, data.config.m
                        )));
                    }
                    data
                }
                None => {
                    let cfg = self.plan.physical.config(cell.d, cell.m, self.plan.test.seed);
                    Dataset::generate(cfg, self.plan.test.samples)?
                }
            };
            let hash = data.content_hash();
            self.datasets.insert(key, (data, hash));
        }
        Ok(&self.datasets[&key])
    }

    fn model(&mut self, alg: Algorithm, cell: &Cell) -> Result<&GnnModel> {
        let key = (alg, cell.d, cell.m);
        if !self.models.contains_key(&key) {
            let model = match cell.model_path(alg) {
                Some(path) => load_model(path).map_err(|e| Error::Plan(format!("cell {cell}: {alg} model: {e}")))?,
                None => self.train_model(alg, cell)?,
            };
            self.models.insert(key, model);
        }
        Ok(&self.models[&key])
    }

    fn train_model(&self, alg: Algorithm, cell: &Cell) -> Result<GnnModel> {
        let spec = self
            .plan
            .train
            .as_ref()
            .ok_or_else(|| Error::Plan(format!("cell {cell}: no {alg} model and no training section")))?;
        let val_seed = SplitMix64::new(spec.data_seed).next_u64();
        let train_set = Dataset::generate(self.plan.physical.config(cell.d, cell.m, spec.data_seed), spec.samples)?;
        let val_set = Dataset::generate(self.plan.physical.config(cell.d, cell.m, val_seed), spec.val_samples)?;
        let init = init_model(&train_set, &spec.config, alg.head());
        let (model, log) = train(&train_set, &val_set, init, &spec.config)?;
        let dir = self.plan.output_dir.join("models");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = format!("{alg}_D{}_M{}", cell.d, cell.m);
        save_model(&model, dir.join(format!("{stem}.json")))?;
        let log_path = dir.join(format!("{stem}_trainlog.csv"));
        fs::write(&log_path, log.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        Ok(model)
    }

    fn run_algorithm(&mut self, alg: Algorithm, cell: &Cell) -> Result<ResultRow> {
        let plan = self.plan;
        let model = if alg.is_learned() {
            Some(self.model(alg, cell)?.clone())
        } else {
            None
        };
        let (data, hash) = self.test_set(cell)?;
        let cfg = &data.config;
        let mut instances = Vec::with_capacity(data.len());
        for (index, inst) in data.samples.iter().enumerate() {
            let started = Instant::now();
            let alloc = solve_instance(alg, inst, cfg, &plan.solver, model.as_ref())?;
            let wall_time_s = started.elapsed().as_secs_f64();
            instances.push(InstanceResult {
                index,
                sum_rate: weighted_sum_rate(inst, &alloc.power, cfg),
                feasible: is_feasible(&alloc.power, cfg.p_max),
                wall_time_s,
            });
        }
        Ok(ResultRow::new(alg, data, hash, instances))
    }

    /// Every algorithm on every cell's test set. Writes the summary CSV and
    /// per-instance detail files into the output directory.
    pub fn sumrate(&mut self) -> Result<ResultTable> {
        let mut table = ResultTable::default();
        for cell in &self.plan.cells {
            for &alg in &self.plan.algorithms {
                table.rows.push(self.run_algorithm(alg, cell)?);
            }
        }
        let dir = self.plan.output_dir.join("instances");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for row in &table.rows {
            let detail = Table::new(
                "",
                "",
                &["index", "sum_rate", "feasible"],
                row.instances
                    .iter()
                    .map(|r| vec![r.index.to_string(), r.sum_rate.to_string(), r.feasible.to_string()])
                    .collect(),
            );
            let path = dir.join(format!("{}_D{}_M{}.csv", row.algorithm, row.d, row.m));
            fs::write(&path, detail.to_csv()?).map_err(|e| Error::io(&path, e))?;
        }
        for t in [table.to_table(), table.wall_time_table()] {
            let path = self.plan.output_dir.join(format!("{}.csv", t.name));
            fs::write(&path, t.to_csv()?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(table)
    }

    /// The anchor cell's model on each target cell, relative to the target's
    /// own model.
    pub fn generalization(&mut self) -> Result<GeneralizationTable> {
        let spec = self
            .plan
            .generalization
            .clone()
            .ok_or_else(|| Error::Plan("plan has no generalization section".into()))?;
        let base = self.model(Algorithm::Gnn, &spec.anchor)?.clone();
        let mut table = GeneralizationTable::default();
        for target in &spec.targets {
            let native = self.model(Algorithm::Gnn, target)?.clone();
            let (data, _) = self.test_set(target)?;
            let transferred = mean_rate(&base, data)?;
            let native_rate = if (target.d, target.m) == (spec.anchor.d, spec.anchor.m) {
                transferred
            } else {
                mean_rate(&native, data)?
            };
            table.rows.push(GeneralizationRow {
                anchor: (spec.anchor.d, spec.anchor.m),
                target: (target.d, target.m),
                transferred_sum_rate: transferred,
                native_sum_rate: native_rate,
                ratio_pct: 100.0 * transferred / native_rate,
            });
        }
        Ok(table)
    }

    /// Per-instance wall time on a single thread, `repetitions` runs each.
    pub fn timing(&mut self, repetitions: usize) -> Result<TimingTable> {
        if repetitions == 0 {
            return Err(Error::Plan("timing needs at least one repetition".into()));
        }
        let plan = self.plan;
        let samples = self.plan.timing.as_ref().map_or(self.plan.test.samples, |t| t.samples);
        let mut table = TimingTable::default();
        for cell in self.plan.timing_cells() {
            for &alg in &self.plan.algorithms {
                let model = if alg.is_learned() {
                    Some(self.model(alg, &cell)?.clone())
                } else {
                    None
                };
                let (data, _) = self.test_set(&cell)?;
                let n = samples.min(data.len());
                let set = &data.samples[..n];
                let mut per_instance = Vec::with_capacity(n);
                for inst in set {
                    let mut reps = Vec::with_capacity(repetitions);
                    for _ in 0..repetitions {
                        let started = Instant::now();
                        let alloc = solve_instance(alg, inst, &data.config, &plan.solver, model.as_ref())?;
                        reps.push(started.elapsed().as_secs_f64());
                        std::hint::black_box(alloc);
                    }
                    per_instance.push(quantile(&mut reps, 0.5));
                }
                let batch_amortized_s = match &model {
                    Some(model) => {
                        let mut reps = Vec::with_capacity(repetitions);
                        for _ in 0..repetitions {
                            let started = Instant::now();
                            for inst in set {
                                std::hint::black_box(model.infer(inst)?);
                            }
                            reps.push(started.elapsed().as_secs_f64() / n as f64);
                        }
                        Some(quantile(&mut reps, 0.5))
                    }
                    None => None,
                };
                table.rows.push(TimingRow {
                    algorithm: alg,
                    d: cell.d,
                    m: cell.m,
                    instances: n,
                    repetitions,
                    median_s: quantile(&mut per_instance, 0.5),
                    q1_s: quantile(&mut per_instance, 0.25),
                    q3_s: quantile(&mut per_instance, 0.75),
                    batch_amortized_s,
                });
            }
        }
        Ok(table)
    }
}

fn mean_rate(model: &GnnModel, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for inst in &data.samples {
        total += weighted_sum_rate(inst, &model.infer(inst)?.power, &data.config);
    }
    Ok(total / data.len().max(1) as f64)
}

/// Linear-interpolated quantile; sorts `values` in place.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

pub fn run_sumrate_experiment(plan: &ExperimentPlan) -> Result<ResultTable> {
    Harness::new(plan)?.sumrate()
}

pub fn run_generalization(plan: &ExperimentPlan) -> Result<GeneralizationTable> {
    Harness::new(plan)?.generalization()
}

pub fn run_timing(plan: &ExperimentPlan, repetitions: usize) -> Result<TimingTable> {
    Harness::new(plan)?.timing(repetitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::write_dataset;

    fn small_plan(dir: &Path) -> ExperimentPlan {
        ExperimentPlan {
            cells: vec![Cell::new(3, 2)],
            algorithms: vec![Algorithm::Heuristic, Algorithm::EqualSplit],
            test: TestSpec { seed: 5, samples: 8 },
            train: None,
            physical: Physical::default(),
            solver: SolverOptions::default(),
            generalization: None,
            timing: None,
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn one_row_per_algorithm_and_cell() {
        let dir = tempfile::tempdir().unwrap();
        let table = run_sumrate_experiment(&small_plan(dir.path())).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(dir.path().join("instances/heuristic_D3_M2.csv").exists());
    }

    #[test]
    fn reruns_give_identical_csv() {
        let dir = tempfile::tempdir().unwrap();
        let plan = small_plan(dir.path());
        run_sumrate_experiment(&plan).unwrap();
        let first = fs::read(dir.path().join("sumrate.csv")).unwrap();
        run_sumrate_experiment(&plan).unwrap();
        assert_eq!(first, fs::read(dir.path().join("sumrate.csv")).unwrap());
    }

    #[test]
    fn dominant_channel_favors_heuristic() {
        // No interference, and one channel far stronger than the other for
        // every pair: the full budget on it beats splitting.
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig::new(3, 2);
        let samples = (0..4)
            .map(|k| {
                ChannelInstance::from_fn(3, 2, |c, i, j| match (c, i == j) {
                    (_, false) => 0.0,
                    (0, true) => 1.0 + k as f64 * 0.1,
                    _ => 1e-3,
                })
                .unwrap()
            })
            .collect();
        let data_path = dir.path().join("dominant.mcra");
        write_dataset(&Dataset::new(cfg, samples).unwrap(), &data_path).unwrap();
        let mut plan = small_plan(dir.path());
        plan.cells[0].test_data = Some(data_path);
        let table = run_sumrate_experiment(&plan).unwrap();
        let h = table.row(Algorithm::Heuristic, 3, 2).unwrap().mean_sum_rate;
        let e = table.row(Algorithm::EqualSplit, 3, 2).unwrap().mean_sum_rate;
        assert!(h > e, "{h} vs {e}");
    }

    #[test]
    fn missing_model_names_the_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = small_plan(dir.path());
        plan.algorithms.push(Algorithm::Gnn);
        plan.cells[0].gnn_model = Some(dir.path().join("absent.json"));
        let err = run_sumrate_experiment(&plan).unwrap_err();
        assert!(matches!(&err, Error::Plan(msg) if msg.contains("D=3, M=2")), "{err}");
        plan.cells[0].gnn_model = None;
        assert!(matches!(plan.validate(), Err(Error::Plan(_))));
    }

    #[test]
    fn timing_schema_does_not_depend_on_repetitions() {
        let dir = tempfile::tempdir().unwrap();
        let plan = small_plan(dir.path());
        let one = run_timing(&plan, 1).unwrap().to_table();
        let five = run_timing(&plan, 5).unwrap().to_table();
        assert_eq!(one.header, five.header);
        assert_eq!(one.rows.len(), five.rows.len());
    }

    #[test]
    fn report_sections_and_verbatim_values() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[], dir.path()).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("report.md")).unwrap(),
            "# Experiment report\n"
        );

        let table = run_sumrate_experiment(&small_plan(dir.path())).unwrap().to_table();
        emit_report(std::slice::from_ref(&table), dir.path()).unwrap();
        let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert_eq!(md.matches("\n## ").count(), 1);
        let back = Table::read_csv(dir.path().join("sumrate.csv")).unwrap();
        assert_eq!(back.rows.len(), table.rows.len());
        for row in &back.rows {
            assert!(md.contains(&format!("| {} |", row.join(" | "))));
        }
    }

    #[test]
    fn anchor_transfers_to_itself_at_100_pct() {
        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("m.json");
        let model = GnnModel::init(&mut crate::rng::Rng::from_seed(3), crate::gnn::NormStats::IDENTITY, 1.0);
        save_model(&model, &model_path).unwrap();
        let mut cell = Cell::new(3, 2);
        cell.gnn_model = Some(model_path);
        let mut plan = small_plan(dir.path());
        plan.generalization = Some(GeneralizationSpec {
            anchor: cell.clone(),
            targets: vec![cell],
        });
        let table = run_generalization(&plan).unwrap();
        assert_eq!(table.rows[0].ratio_pct, 100.0);
        assert_eq!(table.to_table().rows[0][6], "100.00");
    }

    #[test]
    fn quantiles() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&mut v, 0.5), 2.5);
        assert_eq!(quantile(&mut v, 0.0), 1.0);
        assert_eq!(quantile(&mut v, 1.0), 4.0);
    }

    #[test]
    fn plan_paths_are_relative_to_the_plan_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = small_plan(Path::new("out"));
        plan.cells[0].gnn_model = Some("models/m.json".into());
        let path = dir.path().join("plan.json");
        fs::write(&path, serde_json::to_string(&plan).unwrap()).unwrap();
        let loaded = ExperimentPlan::load(&path).unwrap();
        assert_eq!(loaded.output_dir, dir.path().join("out"));
        assert_eq!(loaded.cells[0].gnn_model, Some(dir.path().join("models/m.json")));
    }
}
