//! Experiment runner: flat TOML configs, exhaustive validation, and the
//! four run modes (centralized, decentralized, equivalence, degree sweep).
//!
//! Precedence, lowest to highest: built-in defaults, config file, `--seeds`,
//! `--set key=value`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::checkpoint::save_network;
use crate::data::{
    load_csv, synthetic_blobs, BlobSpec, CsvSchema, LabeledDataset, Normalization,
    NormalizationStats,
};
use crate::error::{Error, Result};
use crate::model::{RandomDistribution, SsfnDims};
use crate::network::{
    comm_ratio, d_max, ConsensusMode, MixingMatrix, DEFAULT_ROUND_CAP, DEFAULT_TAU,
};
use crate::trainer::{
    partition_dataset, relative_gap, train_centralized, train_decentralized, ConsensusSetting,
    EvalReport, TopologySpec, TrainConfig, TrainOutcome,
};

/// Bumped whenever the summary column set changes.
pub const SUMMARY_VERSION: u32 = 1;

pub const SUMMARY_HEADER: [&str; 14] = [
    "version",
    "config_hash",
    "mode",
    "seed",
    "workers",
    "degree",
    "train_accuracy",
    "test_accuracy",
    "train_error_db",
    "consensus_rounds",
    "scalars_exchanged",
    "payload_scalars",
    "comm_ratio",
    "layers",
];

pub const TRACE_HEADER: [&str; 4] = ["layer", "admm_iter", "objective", "residual"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Centralized,
    Decentralized,
    EquivalenceCheck,
    DegreeSweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::Decentralized => "decentralized",
            Mode::EquivalenceCheck => "equivalence",
            Mode::DegreeSweep => "degree_sweep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "centralized" => Some(Mode::Centralized),
            "decentralized" => Some(Mode::Decentralized),
            "equivalence" => Some(Mode::EquivalenceCheck),
            "degree_sweep" => Some(Mode::DegreeSweep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
        label_column: String,
    },
    Synthetic {
        train_samples: usize,
        test_samples: usize,
        separation: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub data: DataSource,
    /// Required for synthetic data; checked against CSV data when given.
    pub input_dim: Option<usize>,
    pub classes: usize,
    pub layers: usize,
    pub hidden: usize,
    pub workers: usize,
    pub degree: usize,
    /// Degrees visited by a sweep; empty means `1..=d_max(M)`.
    pub degrees: Vec<usize>,
    pub mixing_csv: Option<PathBuf>,
    pub admm_iterations: usize,
    pub consensus: ConsensusSetting,
    pub mu0: f64,
    pub mu_layers: f64,
    pub eps_bound: f64,
    pub random: RandomDistribution,
    pub normalization: Normalization,
    /// Gradient-descent iteration count used only for the comm ratio.
    pub gd_iterations: u64,
    pub seeds: Vec<u64>,
    pub checkpoint: bool,
    pub equivalence_tol: f64,
}

/// One configuration problem, tied to the key that caused it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub key: String,
    pub message: String,
}

impl Diagnostic {
    fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

fn config_error(diags: &[Diagnostic]) -> Error {
    Error::Config(diags.iter().map(ToString::to_string).collect())
}

pub fn read_config(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.parse::<Table>().map_err(|e| {
        Error::Config(vec![format!(
            "{}: {}",
            path.display(),
            e.to_string().trim()
        )])
    })
}

/// Applies `key=value` overrides. Values are read as TOML, falling back to a
/// bare string.
pub fn apply_overrides(
    table: &mut Table,
    sets: &[String],
) -> std::result::Result<(), Vec<Diagnostic>> {
    let mut diags = Vec::new();
    for s in sets {
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                let v = v.trim();
                let value = v
                    .parse::<Value>()
                    .unwrap_or_else(|_| Value::String(v.to_string()));
                let k = k.trim();
                // Either one sizes the hidden layer; an override replaces both.
                if k == "hidden" || k == "extra_neurons" {
                    table.remove("hidden");
                    table.remove("extra_neurons");
                }
                table.insert(k.to_string(), value);
            }
            _ => diags.push(Diagnostic::new(
                "--set",
                format!("expected key=value, got {s:?}"),
            )),
        }
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(diags)
    }
}

struct Reader<'a> {
    table: &'a Table,
    used: BTreeSet<&'static str>,
    diags: Vec<Diagnostic>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.used.insert(key);
        self.table.get(key)
    }

    fn bad(&mut self, key: &str, want: &str, got: &Value) {
        self.diags
            .push(Diagnostic::new(key, format!("expected {want}, got {got}")));
    }

    fn opt_uint(&mut self, key: &'static str) -> Option<u64> {
        match self.raw(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            v => {
                self.bad(key, "a non-negative integer", v);
                None
            }
        }
    }

    fn uint(&mut self, key: &'static str, default: u64) -> u64 {
        self.opt_uint(key).unwrap_or(default)
    }

    fn opt_float(&mut self, key: &'static str) -> Option<f64> {
        match self.raw(key)? {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            v => {
                self.bad(key, "a number", v);
                None
            }
        }
    }

    fn float(&mut self, key: &'static str, default: f64) -> f64 {
        self.opt_float(key).unwrap_or(default)
    }

    fn opt_str(&mut self, key: &'static str) -> Option<String> {
        match self.raw(key)? {
            Value::String(s) => Some(s.clone()),
            v => {
                self.bad(key, "a string", v);
                None
            }
        }
    }

    fn boolean(&mut self, key: &'static str, default: bool) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.bad(key, "true or false", v);
                default
            }
        }
    }

    fn uint_list(&mut self, key: &'static str) -> Option<Vec<u64>> {
        let v = self.raw(key)?;
        let parsed = match v {
            Value::Array(items) => items
                .iter()
                .map(|x| match x {
                    Value::Integer(i) if *i >= 0 => Some(*i as u64),
                    _ => None,
                })
                .collect::<Option<Vec<_>>>(),
            Value::Integer(i) if *i >= 0 => Some(vec![*i as u64]),
            _ => None,
        };
        if parsed.is_none() {
            self.bad(key, "a list of non-negative integers", v);
        }
        parsed
    }

    fn choice<T>(
        &mut self,
        key: &'static str,
        default: T,
        options: &str,
        parse: fn(&str) -> Option<T>,
    ) -> T {
        match self.opt_str(key) {
            None => default,
            Some(s) => parse(&s).unwrap_or_else(|| {
                self.diags.push(Diagnostic::new(
                    key,
                    format!("unknown value {s:?}; expected one of {options}"),
                ));
                default
            }),
        }
    }
}

fn resolve_path(base: Option<&Path>, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    let joined = match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    };
    std::path::absolute(&joined).unwrap_or(joined)
}

fn usize_of(x: u64) -> usize {
    usize::try_from(x).unwrap_or(usize::MAX)
}

impl ExperimentSpec {
    /// Typed extraction of every key. All type errors and unknown keys are
    /// reported together. Relative paths resolve against `base_dir`.
    pub fn from_table(
        table: &Table,
        base_dir: Option<&Path>,
    ) -> std::result::Result<Self, Vec<Diagnostic>> {
        let mut r = Reader {
            table,
            used: BTreeSet::new(),
            diags: Vec::new(),
        };
        let mode = r.choice(
            "mode",
            Mode::Decentralized,
            "centralized, decentralized, equivalence, degree_sweep",
            Mode::parse,
        );
        let classes = r.opt_uint("classes");
        if classes.is_none() && !table.contains_key("classes") {
            r.diags.push(Diagnostic::new("classes", "required"));
        }
        let classes = usize_of(classes.unwrap_or(0));
        let input_dim = r.opt_uint("input_dim").map(usize_of);

        let train_csv = r.opt_str("train_csv");
        let test_csv = r.opt_str("test_csv");
        let label_column = r.opt_str("label_column").unwrap_or_else(|| "label".into());
        let train_samples = usize_of(r.uint("samples", 400));
        let test_samples = usize_of(r.uint("test_samples", 200));
        let separation = r.float("separation", 3.0);
        let data_seed = r.uint("data_seed", 0);
        let data = match train_csv {
            Some(train) => DataSource::Csv {
                train: resolve_path(base_dir, &train),
                test: test_csv.map(|t| resolve_path(base_dir, &t)),
                label_column,
            },
            None => {
                if test_csv.is_some() {
                    r.diags
                        .push(Diagnostic::new("test_csv", "given without train_csv"));
                }
                DataSource::Synthetic {
                    train_samples,
                    test_samples,
                    separation,
                    seed: data_seed,
                }
            }
        };

        let layers = usize_of(r.uint("layers", 20));
        let hidden = match (r.opt_uint("hidden"), r.opt_uint("extra_neurons")) {
            (Some(_), Some(_)) => {
                r.diags.push(Diagnostic::new(
                    "hidden",
                    "set either hidden or extra_neurons, not both",
                ));
                0
            }
            (Some(n), None) => usize_of(n),
            (None, extra) => 2 * classes + usize_of(extra.unwrap_or(1000)),
        };
        let workers = usize_of(r.uint("workers", 20));
        let degree = usize_of(r.uint("degree", 4));
        let degrees = r
            .uint_list("degrees")
            .map(|v| v.into_iter().map(usize_of).collect())
            .unwrap_or_default();
        let mixing_csv = r.opt_str("mixing_csv").map(|p| resolve_path(base_dir, &p));
        let admm_iterations = usize_of(r.uint("admm_iterations", 100));

        let consensus_kind = r.opt_str("consensus").unwrap_or_else(|| "gossip".into());
        let rounds = r.opt_uint("consensus_rounds");
        let tau = r.opt_float("tau");
        let round_cap = r.opt_uint("round_cap");
        let consensus = match consensus_kind.as_str() {
            "exact" => {
                for (key, set) in [
                    ("consensus_rounds", rounds.is_some()),
                    ("tau", tau.is_some()),
                    ("round_cap", round_cap.is_some()),
                ] {
                    if set {
                        r.diags.push(Diagnostic::new(
                            key,
                            "only meaningful with consensus = \"gossip\"",
                        ));
                    }
                }
                ConsensusSetting::Exact
            }
            "gossip" => match rounds {
                Some(b) => {
                    if tau.is_some() || round_cap.is_some() {
                        r.diags.push(Diagnostic::new(
                            "consensus_rounds",
                            "fixed rounds cannot be combined with tau or round_cap",
                        ));
                    }
                    ConsensusSetting::Gossip(ConsensusMode::FixedRounds(usize_of(b)))
                }
                None => ConsensusSetting::Gossip(ConsensusMode::Tolerance {
                    tau: tau.unwrap_or(DEFAULT_TAU),
                    round_cap: round_cap.map(usize_of).unwrap_or(DEFAULT_ROUND_CAP),
                }),
            },
            other => {
                r.diags.push(Diagnostic::new(
                    "consensus",
                    format!("unknown value {other:?}; expected one of exact, gossip"),
                ));
                ConsensusSetting::Exact
            }
        };

        let mu0 = r.float("mu0", 1.0);
        let mu_layers = r.float("mu_layers", 1.0);
        let eps_bound = r.float("eps_bound", 2.0 * classes as f64);
        let random = r.choice(
            "random",
            RandomDistribution::ScaledNormal,
            "normal, uniform",
            RandomDistribution::parse,
        );
        let normalization = r.choice(
            "normalization",
            Normalization::ZScorePerDim,
            "none, unit, zscore",
            Normalization::parse,
        );
        let gd_iterations = r.uint("gd_iterations", 10_000);
        let seeds = r.uint_list("seeds").unwrap_or_else(|| (0..5).collect());
        let checkpoint = r.boolean("checkpoint", false);
        let equivalence_tol = r.float("equivalence_tol", 1e-4);

        let mut diags = r.diags;
        for key in table.keys() {
            if !r.used.contains(key.as_str()) {
                diags.push(Diagnostic::new(key, "unknown key"));
            }
        }
        if !diags.is_empty() {
            return Err(diags);
        }
        Ok(Self {
            mode,
            data,
            input_dim,
            classes,
            layers,
            hidden,
            workers,
            degree,
            degrees,
            mixing_csv,
            admm_iterations,
            consensus,
            mu0,
            mu_layers,
            eps_bound,
            random,
            normalization,
            gd_iterations,
            seeds,
            checkpoint,
            equivalence_tol,
        })
    }

    /// Reads a config file, applies `--seeds` then `--set` overrides.
    pub fn load(path: Option<&Path>, seeds: Option<&[u64]>, sets: &[String]) -> Result<Self> {
        let (mut table, base) = match path {
            Some(p) => (read_config(p)?, p.parent().map(Path::to_path_buf)),
            None => (Table::new(), None),
        };
        if let Some(seeds) = seeds {
            let list = seeds.iter().map(|&s| Value::Integer(s as i64)).collect();
            table.insert("seeds".into(), Value::Array(list));
        }
        apply_overrides(&mut table, sets).map_err(|d| config_error(&d))?;
        Self::from_table(&table, base.as_deref()).map_err(|d| config_error(&d))
    }

    /// Every key with its effective value. Parsing this table yields an
    /// equal spec.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.to_string(), v);
        };
        let int = |x: usize| Value::Integer(x as i64);
        let path = |p: &Path| Value::String(p.to_string_lossy().into_owned());
        put("mode", Value::String(self.mode.name().into()));
        match &self.data {
            DataSource::Csv {
                train,
                test,
                label_column,
            } => {
                put("train_csv", path(train));
                if let Some(test) = test {
                    put("test_csv", path(test));
                }
                put("label_column", Value::String(label_column.clone()));
            }
            DataSource::Synthetic {
                train_samples,
                test_samples,
                separation,
                seed,
            } => {
                put("samples", int(*train_samples));
                put("test_samples", int(*test_samples));
                put("separation", Value::Float(*separation));
                put("data_seed", Value::Integer(*seed as i64));
            }
        }
        if let Some(p) = self.input_dim {
            put("input_dim", int(p));
        }
        put("classes", int(self.classes));
        put("layers", int(self.layers));
        put("hidden", int(self.hidden));
        put("workers", int(self.workers));
        put("degree", int(self.degree));
        if !self.degrees.is_empty() {
            put(
                "degrees",
                Value::Array(self.degrees.iter().map(|&d| int(d)).collect()),
            );
        }
        if let Some(p) = &self.mixing_csv {
            put("mixing_csv", path(p));
        }
        put("admm_iterations", int(self.admm_iterations));
        match self.consensus {
            ConsensusSetting::Exact => put("consensus", Value::String("exact".into())),
            ConsensusSetting::Gossip(mode) => {
                put("consensus", Value::String("gossip".into()));
                match mode {
                    ConsensusMode::FixedRounds(b) => put("consensus_rounds", int(b)),
                    ConsensusMode::Tolerance { tau, round_cap } => {
                        put("tau", Value::Float(tau));
                        put("round_cap", int(round_cap));
                    }
                }
            }
        }
        put("mu0", Value::Float(self.mu0));
        put("mu_layers", Value::Float(self.mu_layers));
        put("eps_bound", Value::Float(self.eps_bound));
        put("random", Value::String(self.random.name().into()));
        put(
            "normalization",
            Value::String(self.normalization.name().into()),
        );
        put("gd_iterations", Value::Integer(self.gd_iterations as i64));
        put(
            "seeds",
            Value::Array(
                self.seeds
                    .iter()
                    .map(|&s| Value::Integer(s as i64))
                    .collect(),
            ),
        );
        put("checkpoint", Value::Boolean(self.checkpoint));
        put("equivalence_tol", Value::Float(self.equivalence_tol));
        t
    }

    /// SHA-256 of the resolved config text.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_table().to_string().as_bytes()))
    }

    /// Decentralized-gradient to ADMM traffic ratio `n I / (Q K)`.
    pub fn comm_ratio(&self) -> f64 {
        comm_ratio(
            self.hidden as u64,
            self.gd_iterations,
            self.classes as u64,
            self.admm_iterations as u64,
        )
    }

    /// Degrees visited by a sweep.
    pub fn sweep_degrees(&self) -> Vec<usize> {
        if self.degrees.is_empty() {
            (1..=d_max(self.workers)).collect()
        } else {
            self.degrees.clone()
        }
    }

    pub fn train_config(&self, input_dim: usize, seed: u64) -> Result<TrainConfig> {
        let dims = SsfnDims::new(input_dim, self.classes, self.hidden, self.layers)?;
        let topology = match &self.mixing_csv {
            Some(p) => TopologySpec::Explicit(MixingMatrix::read_csv(File::open(p)?)?),
            None => TopologySpec::Circular {
                degree: self.degree,
            },
        };
        Ok(TrainConfig {
            dims,
            workers: self.workers,
            topology,
            admm_iterations: self.admm_iterations,
            consensus: self.consensus,
            mu0: self.mu0,
            mu_layers: self.mu_layers,
            eps_bound: self.eps_bound,
            seed,
            random: self.random,
        })
    }

    /// Loads (or generates) the data and normalizes it with train-split
    /// statistics.
    pub fn load_data(&self) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
        let (train, test) = match &self.data {
            DataSource::Csv {
                train,
                test,
                label_column,
            } => {
                let schema = CsvSchema::new(label_column.clone(), self.classes);
                let tr = load_csv(train, &schema)?;
                let te = test.as_ref().map(|p| load_csv(p, &schema)).transpose()?;
                (tr, te)
            }
            DataSource::Synthetic {
                train_samples,
                test_samples,
                separation,
                seed,
            } => {
                let all = synthetic_blobs(&BlobSpec {
                    input_dim: self.input_dim.unwrap_or(0),
                    classes: self.classes,
                    samples: train_samples + test_samples,
                    separation: *separation,
                    seed: *seed,
                })?;
                let idx: Vec<usize> = (0..all.len()).collect();
                let (a, b) = idx.split_at(*train_samples);
                (all.select(a), (!b.is_empty()).then(|| all.select(b)))
            }
        };
        if let Some(p) = self.input_dim {
            if p != train.input_dim() {
                return Err(Error::Dimension(format!(
                    "input_dim = {p} but the training data has {} features",
                    train.input_dim()
                )));
            }
        }
        if let Some(te) = &test {
            if te.input_dim() != train.input_dim() {
                return Err(Error::Dimension(format!(
                    "test data has {} features, training data {}",
                    te.input_dim(),
                    train.input_dim()
                )));
            }
        }
        let stats = NormalizationStats::fit(self.normalization, train.features());
        let train = stats.apply_dataset(&train)?;
        let test = test.map(|t| stats.apply_dataset(&t)).transpose()?;
        Ok((train, test))
    }
}

fn count_csv_rows(path: &Path) -> std::result::Result<usize, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut n = 0;
    for rec in reader.records() {
        rec.map_err(|e| e.to_string())?;
        n += 1;
    }
    Ok(n)
}

/// Every violated invariant, not just the first. Empty iff the spec is
/// runnable.
pub fn validate_config(spec: &ExperimentSpec) -> Vec<Diagnostic> {
    let mut d = Vec::new();
    let q = spec.classes;
    if q == 0 {
        d.push(Diagnostic::new("classes", "must be >= 1"));
    }
    if spec.hidden < 2 * q + 1 {
        d.push(Diagnostic::new(
            "hidden",
            format!(
                "random block empty: n = {} but n >= 2Q + 1 = {} is required",
                spec.hidden,
                2 * q + 1
            ),
        ));
    }
    if spec.layers == 0 {
        d.push(Diagnostic::new("layers", "must be >= 1"));
    }
    if spec.workers == 0 {
        d.push(Diagnostic::new("workers", "must be >= 1"));
    }
    let uses_gossip =
        matches!(spec.consensus, ConsensusSetting::Gossip(_)) || spec.mode == Mode::DegreeSweep;
    match &spec.mixing_csv {
        Some(p) if uses_gossip => match File::open(p)
            .map_err(Error::from)
            .and_then(MixingMatrix::read_csv)
        {
            Ok(h) if h.node_count() != spec.workers => d.push(Diagnostic::new(
                "mixing_csv",
                format!("has {} nodes for {} workers", h.node_count(), spec.workers),
            )),
            Ok(_) => {}
            Err(e) => d.push(Diagnostic::new("mixing_csv", e.to_string())),
        },
        None if spec.workers > 1 && uses_gossip => {
            let dm = d_max(spec.workers);
            if spec.degree == 0 {
                d.push(Diagnostic::new("degree", "must be >= 1"));
            } else if spec.degree > dm {
                d.push(Diagnostic::new(
                    "degree",
                    format!(
                        "{} exceeds d_max = {dm} for {} workers",
                        spec.degree, spec.workers
                    ),
                ));
            }
        }
        _ => {}
    }
    if spec.mode == Mode::DegreeSweep {
        if spec.mixing_csv.is_some() {
            d.push(Diagnostic::new(
                "mixing_csv",
                "a degree sweep builds its own circular topologies",
            ));
        }
        if spec.workers < 3 {
            d.push(Diagnostic::new(
                "workers",
                "a degree sweep needs at least 3 workers",
            ));
        }
        let dm = d_max(spec.workers);
        for &deg in &spec.degrees {
            if deg == 0 || deg > dm {
                d.push(Diagnostic::new(
                    "degrees",
                    format!(
                        "{deg} is outside 1..=d_max = {dm} for {} workers",
                        spec.workers
                    ),
                ));
            }
        }
    } else if !spec.degrees.is_empty() {
        d.push(Diagnostic::new(
            "degrees",
            "only meaningful in degree_sweep mode",
        ));
    }
    if spec.admm_iterations == 0 && spec.mode != Mode::Centralized {
        d.push(Diagnostic::new("admm_iterations", "must be >= 1"));
    }
    if let ConsensusSetting::Gossip(mode) = spec.consensus {
        match mode {
            ConsensusMode::FixedRounds(0) => {
                d.push(Diagnostic::new("consensus_rounds", "must be >= 1"))
            }
            ConsensusMode::Tolerance { tau, round_cap } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    d.push(Diagnostic::new("tau", format!("must be > 0, got {tau}")));
                }
                if round_cap == 0 {
                    d.push(Diagnostic::new("round_cap", "must be >= 1"));
                }
            }
            _ => {}
        }
    }
    for (key, mu) in [("mu0", spec.mu0), ("mu_layers", spec.mu_layers)] {
        if !(mu > 0.0 && mu.is_finite()) {
            d.push(Diagnostic::new(key, format!("mu must be > 0, got {mu}")));
        }
    }
    if !(spec.eps_bound > 0.0 && spec.eps_bound.is_finite()) {
        d.push(Diagnostic::new(
            "eps_bound",
            format!("must be > 0, got {}", spec.eps_bound),
        ));
    }
    if spec.gd_iterations == 0 {
        d.push(Diagnostic::new("gd_iterations", "must be >= 1"));
    }
    if spec.seeds.is_empty() {
        d.push(Diagnostic::new("seeds", "need at least one seed"));
    }
    if spec.equivalence_tol.is_nan() || spec.equivalence_tol <= 0.0 {
        d.push(Diagnostic::new("equivalence_tol", "must be > 0"));
    }

    let train_rows = match &spec.data {
        DataSource::Synthetic {
            train_samples,
            test_samples,
            separation,
            ..
        } => {
            if spec.input_dim.unwrap_or(0) == 0 {
                d.push(Diagnostic::new(
                    "input_dim",
                    "synthetic data needs input_dim >= 1",
                ));
            }
            if *test_samples == 0 {
                d.push(Diagnostic::new("test_samples", "must be >= 1"));
            }
            if !(*separation >= 0.0 && separation.is_finite()) {
                d.push(Diagnostic::new("separation", "must be finite and >= 0"));
            }
            Some(*train_samples)
        }
        DataSource::Csv { train, test, .. } => {
            if let Some(t) = test {
                if !t.is_file() {
                    d.push(Diagnostic::new(
                        "test_csv",
                        format!("{} not found", t.display()),
                    ));
                }
            }
            if train.is_file() {
                match count_csv_rows(train) {
                    Ok(n) => Some(n),
                    Err(e) => {
                        d.push(Diagnostic::new("train_csv", e));
                        None
                    }
                }
            } else {
                d.push(Diagnostic::new(
                    "train_csv",
                    format!("{} not found", train.display()),
                ));
                None
            }
        }
    };
    if let Some(j) = train_rows {
        if spec.workers > 0 && j < spec.workers {
            d.push(Diagnostic::new(
                "workers",
                format!("{j} training samples cannot fill {} shards", spec.workers),
            ));
        }
    }
    d
}

/// One summary line.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: Mode,
    pub seed: u64,
    pub workers: usize,
    pub degree: Option<usize>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub train_error_db: f64,
    pub consensus_rounds: u64,
    pub scalars_exchanged: u64,
    pub payload_scalars: u64,
    pub objectives: Vec<f64>,
}

/// Result of `run`.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub rows: Vec<SummaryRow>,
    /// Per seed, per layer relative gaps (equivalence mode only).
    pub gaps: Vec<(u64, Vec<f64>)>,
    /// `Some` in equivalence mode.
    pub verdict: Option<bool>,
}

struct Run {
    row: SummaryRow,
    outcome: TrainOutcome,
}

fn train_one(
    cfg: &TrainConfig,
    mode: Mode,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
) -> Result<Run> {
    let outcome = if mode == Mode::Centralized {
        train_centralized(cfg, train)?
    } else {
        let shards = partition_dataset(train, cfg.workers, cfg.seed)?;
        train_decentralized(cfg, &shards)?
    };
    let eval = EvalReport::new(&outcome.network, train, test.unwrap_or(train))?;
    let gossip = mode != Mode::Centralized && matches!(cfg.consensus, ConsensusSetting::Gossip(_));
    let row = SummaryRow {
        mode,
        seed: cfg.seed,
        workers: if mode == Mode::Centralized {
            1
        } else {
            cfg.workers
        },
        degree: match (&cfg.topology, gossip) {
            (TopologySpec::Circular { degree }, true) => Some(*degree),
            _ => None,
        },
        train_accuracy: eval.train_accuracy,
        test_accuracy: test.map(|_| eval.test_accuracy),
        train_error_db: eval.train_error_db,
        consensus_rounds: outcome.ledger.consensus_rounds,
        scalars_exchanged: outcome.ledger.scalars_exchanged,
        payload_scalars: outcome.ledger.payload_scalars,
        objectives: outcome.reports.iter().map(|r| r.objective).collect(),
    };
    log::info!(
        "{} seed {}: train {:.2}% test {}",
        mode.name(),
        cfg.seed,
        row.train_accuracy,
        row.test_accuracy.map_or("-".into(), |a| format!("{a:.2}%"))
    );
    Ok(Run { row, outcome })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_trace(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TRACE_HEADER)?;
    for rep in &outcome.reports {
        for (k, (obj, res)) in rep
            .objective_trace
            .iter()
            .zip(&rep.primal_residual_trace)
            .enumerate()
        {
            w.write_record([
                rep.layer.to_string(),
                k.to_string(),
                obj.to_string(),
                res.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_layers(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "layer",
        "objective",
        "consensus_rounds",
        "scalars_exchanged",
        "payload_scalars",
    ])?;
    for rep in &outcome.reports {
        let comm = outcome
            .ledger
            .per_layer
            .iter()
            .find(|c| c.layer == rep.layer);
        w.write_record([
            rep.layer.to_string(),
            rep.objective.to_string(),
            comm.map_or(0, |c| c.rounds).to_string(),
            comm.map_or(0, |c| c.scalars_exchanged).to_string(),
            comm.map_or(0, |c| c.payload_scalars).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn write_summary(path: &Path, hash: &str, ratio: f64, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            SUMMARY_VERSION.to_string(),
            hash.to_string(),
            r.mode.name().to_string(),
            r.seed.to_string(),
            r.workers.to_string(),
            opt(r.degree),
            r.train_accuracy.to_string(),
            opt(r.test_accuracy),
            r.train_error_db.to_string(),
            r.consensus_rounds.to_string(),
            r.scalars_exchanged.to_string(),
            r.payload_scalars.to_string(),
            ratio.to_string(),
            r.objectives.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation over seeds, per (mode, degree) group.
fn write_aggregate(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["mode", "degree", "metric", "runs", "mean", "std"])?;
    let mut groups: Vec<(Mode, Option<usize>)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.mode, r.degree)) {
            groups.push((r.mode, r.degree));
        }
    }
    for (mode, degree) in groups {
        let members: Vec<&SummaryRow> = rows
            .iter()
            .filter(|r| r.mode == mode && r.degree == degree)
            .collect();
        let metrics: [(&str, Vec<f64>); 4] = [
            (
                "train_accuracy",
                members.iter().map(|r| r.train_accuracy).collect(),
            ),
            (
                "test_accuracy",
                members.iter().filter_map(|r| r.test_accuracy).collect(),
            ),
            (
                "train_error_db",
                members.iter().map(|r| r.train_error_db).collect(),
            ),
            (
                "consensus_rounds",
                members.iter().map(|r| r.consensus_rounds as f64).collect(),
            ),
        ];
        for (name, xs) in metrics {
            if xs.is_empty() {
                continue;
            }
            let (m, s) = mean_std(&xs);
            w.write_record([
                mode.name().to_string(),
                opt(degree),
                name.to_string(),
                xs.len().to_string(),
                m.to_string(),
                s.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_timing(path: &Path, entries: &[(Mode, u64, Option<usize>, Duration)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["mode", "seed", "degree", "wall_seconds"])?;
    for (mode, seed, degree, t) in entries {
        w.write_record([
            mode.name().to_string(),
            seed.to_string(),
            opt(*degree),
            t.as_secs_f64().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the experiment and writes its artifacts into `out_dir`:
/// `config.resolved.toml`, `summary.csv`, `aggregate.csv`, `timing.csv`,
/// per-run `trace_*.csv` and `layers_*.csv`, plus `gaps.csv`/`verdict.csv`
/// (equivalence) or `sweep.csv` (degree sweep). Everything except
/// `timing.csv` is byte-identical across reruns of the same config.
pub fn run(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunReport> {
    let diags = validate_config(spec);
    if !diags.is_empty() {
        return Err(config_error(&diags));
    }
    fs::create_dir_all(out_dir)?;
    let resolved = spec.to_table().to_string();
    fs::write(out_dir.join("config.resolved.toml"), &resolved)?;
    let hash = hex::encode(Sha256::digest(resolved.as_bytes()));
    log::info!("config hash {hash}");

    let (train, test) = spec.load_data()?;
    if train.len() < spec.workers {
        return Err(config_error(&[Diagnostic::new(
            "workers",
            format!(
                "{} training samples cannot fill {} shards",
                train.len(),
                spec.workers
            ),
        )]));
    }
    let input_dim = train.input_dim();
    let test = test.as_ref();

    // (label, run) pairs per seed, in a fixed order.
    let per_seed: Vec<Vec<(String, Run)>> = spec
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(String, Run)>> {
            let cfg = spec.train_config(input_dim, seed)?;
            match spec.mode {
                Mode::Centralized | Mode::Decentralized => Ok(vec![(
                    format!("seed{seed}"),
                    train_one(&cfg, spec.mode, &train, test)?,
                )]),
                Mode::EquivalenceCheck => Ok(vec![
                    (
                        format!("centralized_seed{seed}"),
                        train_one(&cfg, Mode::Centralized, &train, test)?,
                    ),
                    (
                        format!("decentralized_seed{seed}"),
                        train_one(&cfg, Mode::Decentralized, &train, test)?,
                    ),
                ]),
                Mode::DegreeSweep => {
                    let consensus = match cfg.consensus {
                        ConsensusSetting::Exact => {
                            ConsensusSetting::Gossip(ConsensusMode::default())
                        }
                        g => g,
                    };
                    spec.sweep_degrees()
                        .into_iter()
                        .map(|degree| {
                            let c = TrainConfig {
                                topology: TopologySpec::Circular { degree },
                                consensus,
                                ..cfg.clone()
                            };
                            let mut run = train_one(&c, Mode::Decentralized, &train, test)?;
                            run.row.mode = Mode::DegreeSweep;
                            Ok((format!("seed{seed}_d{degree}"), run))
                        })
                        .collect()
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for runs in &per_seed {
        for (label, run) in runs {
            write_trace(&out_dir.join(format!("trace_{label}.csv")), &run.outcome)?;
            write_layers(&out_dir.join(format!("layers_{label}.csv")), &run.outcome)?;
            if spec.checkpoint {
                save_network(
                    &run.outcome.network,
                    out_dir.join(format!("network_{label}.txt")),
                )?;
            }
            rows.push(run.row.clone());
            timing.push((
                run.row.mode,
                run.row.seed,
                run.row.degree,
                run.outcome.wall_time,
            ));
        }
    }
    let ratio = spec.comm_ratio();
    write_summary(&out_dir.join("summary.csv"), &hash, ratio, &rows)?;
    write_aggregate(&out_dir.join("aggregate.csv"), &rows)?;
    write_timing(&out_dir.join("timing.csv"), &timing)?;

    let mut gaps = Vec::new();
    let mut verdict = None;
    match spec.mode {
        Mode::EquivalenceCheck => {
            let mut w = csv_writer(&out_dir.join("gaps.csv"))?;
            w.write_record(["seed", "layer", "relative_gap"])?;
            let mut max_gap = 0.0f64;
            let mut accuracy_match = true;
            for (seed, runs) in spec.seeds.iter().zip(&per_seed) {
                let (cen, dec) = (&runs[0].1, &runs[1].1);
                let layer_gaps: Vec<f64> = dec
                    .outcome
                    .layer_solutions()
                    .iter()
                    .zip(cen.outcome.layer_solutions())
                    .map(|(a, b)| relative_gap(a, b))
                    .collect();
                for (l, g) in layer_gaps.iter().enumerate() {
                    w.write_record([seed.to_string(), l.to_string(), g.to_string()])?;
                    max_gap = max_gap.max(*g);
                }
                accuracy_match &= cen.row.test_accuracy == dec.row.test_accuracy
                    && cen.row.train_accuracy == dec.row.train_accuracy;
                gaps.push((*seed, layer_gaps));
            }
            w.flush()?;
            let pass = max_gap <= spec.equivalence_tol && accuracy_match;
            let mut v = csv_writer(&out_dir.join("verdict.csv"))?;
            v.write_record(["max_gap", "tolerance", "accuracy_match", "verdict"])?;
            v.write_record([
                max_gap.to_string(),
                spec.equivalence_tol.to_string(),
                accuracy_match.to_string(),
                if pass { "pass" } else { "fail" }.to_string(),
            ])?;
            v.flush()?;
            log::info!(
                "equivalence max gap {max_gap:e}: {}",
                if pass { "pass" } else { "fail" }
            );
            verdict = Some(pass);
        }
        Mode::DegreeSweep => {
            let mut w = csv_writer(&out_dir.join("sweep.csv"))?;
            w.write_record([
                "degree",
                "second_eigenvalue",
                "mean_consensus_rounds",
                "mean_scalars_exchanged",
                "mean_payload_scalars",
                "mean_test_accuracy",
            ])?;
            for degree in spec.sweep_degrees() {
                let group: Vec<&SummaryRow> =
                    rows.iter().filter(|r| r.degree == Some(degree)).collect();
                let cfg = TrainConfig {
                    topology: TopologySpec::Circular { degree },
                    ..spec.train_config(input_dim, 0)?
                };
                let lambda2 = cfg.mixing()?.second_eigenvalue_magnitude();
                let mean = |f: &dyn Fn(&SummaryRow) -> f64| {
                    mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>()).0
                };
                w.write_record([
                    degree.to_string(),
                    lambda2.to_string(),
                    mean(&|r| r.consensus_rounds as f64).to_string(),
                    mean(&|r| r.scalars_exchanged as f64).to_string(),
                    mean(&|r| r.payload_scalars as f64).to_string(),
                    opt(test.map(|_| mean(&|r| r.test_accuracy.unwrap_or(f64::NAN)))),
                ])?;
            }
            w.flush()?;
        }
        _ => {}
    }

    Ok(RunReport {
        config_hash: hash,
        rows,
        gaps,
        verdict,
    })
}
