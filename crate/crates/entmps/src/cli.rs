//! Batch command-line surface: `ingest`, `train`, `entropy`, `pipeline`,
//! `pairsweep`.
//!
//! Configuration is a flat `key=value` text file; every key has a CLI flag of
//! the same name (`--seed 7` overrides `seed=3` from `--config`). Each
//! command writes its fully resolved configuration next to its outputs, so
//! any run can be replayed exactly. All commands require an explicit seed.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime/training error,
//! 3 i/o error. `ENTMPS_THREADS` caps internal parallelism (0 or unset uses
//! all cores).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::architect::{
    run_pipeline, ArchitectError, PipelineConfig, PipelineInputs, PipelineReport,
};
use crate::data::{
    dct_all, linearize, load_idx, read_cache, rescale_by, rescale_frequency, select_pair,
    write_cache, zigzag_path, DataError, LinearizedSet, SitePath,
};
use crate::entropy::{profile, EntropyError, EntropyProfile};
use crate::feature::{encode_dataset, FeatureConfig, FeatureError};
use crate::model::{ModelError, MpsClassifier};
use crate::trainer::{evaluate, train, TrainConfig, TrainError, TrainHistory};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) | CliError::Io(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. }
            | DataError::BadMagic { .. }
            | DataError::Truncated { .. }
            | DataError::BadCacheMagic { .. } => CliError::Io(e.to_string()),
            DataError::Tensor(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. }
            | ModelError::BadMagic { .. }
            | ModelError::Truncated { .. }
            | ModelError::ChecksumMismatch { .. } => CliError::Io(e.to_string()),
            ModelError::InvalidDims(_)
            | ModelError::SampleMismatch { .. }
            | ModelError::Data(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_)
            | TrainError::EmptyDataset
            | TrainError::LabelOutOfRange { .. } => CliError::Validation(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EntropyError> for CliError {
    fn from(e: EntropyError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ArchitectError> for CliError {
    fn from(e: ArchitectError) -> Self {
        match e {
            ArchitectError::BadConfig(_) => CliError::Validation(e.to_string()),
            ArchitectError::Train(t) => t.into(),
            ArchitectError::Feature(f) => f.into(),
            ArchitectError::Model(m) => m.into(),
            ArchitectError::Entropy(en) => en.into(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Render a float with 17 significant digits, enough to reproduce the exact
/// bit pattern when re-parsed.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathMode {
    Zigzag,
    RowMajor,
    FromFile,
}

/// Fully resolved run configuration shared by all subcommands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_cache: Option<PathBuf>,
    pub test_cache: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub pair: (u8, u8),
    pub dct: bool,
    pub path_mode: PathMode,
    pub path_file: Option<PathBuf>,
    pub d: usize,
    pub angle_scale: f64,
    pub chi: usize,
    pub label_dim: usize,
    pub batch: usize,
    pub delta: f64,
    pub sweeps: usize,
    pub tol: f64,
    pub seed: u64,
    pub c: f64,
    pub slack: f64,
    pub max_loops: usize,
    pub out: PathBuf,
    pub deterministic: bool,
    pub env_decay: f64,
    pub resample_per_site: bool,
    pub pairs: Option<String>,
    /// Image side length for the 2D SEE map; 0 infers the smallest square
    /// containing every path entry (exact for full-image paths).
    pub map_side: usize,
    /// Feature angle factor for the real-space half of `pairsweep` (raw
    /// pixels want a much narrower cone than frequency coefficients).
    pub angle_scale_real: f64,
}

const KNOWN_KEYS: &[&str] = &[
    "images",
    "labels",
    "test-images",
    "test-labels",
    "train-cache",
    "test-cache",
    "model",
    "pair",
    "dct",
    "path",
    "path-file",
    "d",
    "angle-scale",
    "chi",
    "label-dim",
    "batch",
    "delta",
    "sweeps",
    "tol",
    "seed",
    "c",
    "slack",
    "max-loops",
    "out",
    "deterministic",
    "env-decay",
    "resample-per-site",
    "pairs",
    "map-side",
    "angle-scale-real",
];

impl RunConfig {
    /// Merge defaults, an optional config file, and flag overrides (later
    /// sources win), then parse and validate.
    pub fn resolve(
        config_file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = config_file {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Validation(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        for k in map.keys() {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(CliError::Validation(format!("unknown config key {k:?}")));
            }
        }

        let get = |k: &str| map.get(k).map(String::as_str);
        let path_of = |k: &str| get(k).map(PathBuf::from);
        let usize_of = |k: &str, default: usize| -> Result<usize, CliError> {
            match get(k) {
                None => Ok(default),
                Some(s) => s
                    .parse()
                    .map_err(|_| CliError::Validation(format!("{k}: bad integer {s:?}"))),
            }
        };
        let f64_of = |k: &str, default: f64| -> Result<f64, CliError> {
            match get(k) {
                None => Ok(default),
                Some(s) => s
                    .parse()
                    .map_err(|_| CliError::Validation(format!("{k}: bad number {s:?}"))),
            }
        };
        let bool_of = |k: &str, default: bool| -> Result<bool, CliError> {
            match get(k) {
                None => Ok(default),
                Some("true") | Some("1") => Ok(true),
                Some("false") | Some("0") => Ok(false),
                Some(s) => Err(CliError::Validation(format!("{k}: bad boolean {s:?}"))),
            }
        };

        let pair = match get("pair") {
            None => (0u8, 2u8),
            Some(s) => parse_pair(s)?,
        };
        let path_mode = match get("path") {
            None | Some("zigzag") => PathMode::Zigzag,
            Some("rowmajor") => PathMode::RowMajor,
            Some("from-file") => PathMode::FromFile,
            Some(other) => {
                return Err(CliError::Validation(format!(
                    "path: expected zigzag|rowmajor|from-file, got {other:?}"
                )))
            }
        };
        let seed = match get("seed") {
            None => {
                return Err(CliError::Validation(
                    "seed is mandatory (no wall-clock seeding)".into(),
                ))
            }
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Validation(format!("seed: bad integer {s:?}")))?,
        };

        let cfg = Self {
            images: path_of("images"),
            labels: path_of("labels"),
            test_images: path_of("test-images"),
            test_labels: path_of("test-labels"),
            train_cache: path_of("train-cache"),
            test_cache: path_of("test-cache"),
            model: path_of("model"),
            pair,
            dct: bool_of("dct", false)?,
            path_mode,
            path_file: path_of("path-file"),
            d: usize_of("d", 2)?,
            angle_scale: f64_of("angle-scale", 1.0)?,
            chi: usize_of("chi", 16)?,
            label_dim: usize_of("label-dim", 2)?,
            batch: usize_of("batch", 1000)?,
            delta: f64_of("delta", 1.0)?,
            sweeps: usize_of("sweeps", 20)?,
            tol: f64_of("tol", 1e-4)?,
            seed,
            c: f64_of("c", 0.75)?,
            slack: f64_of("slack", 0.05)?,
            max_loops: usize_of("max-loops", 2)?,
            out: path_of("out").unwrap_or_else(|| PathBuf::from("entmps-out")),
            deterministic: bool_of("deterministic", true)?,
            env_decay: f64_of("env-decay", 1.0)?,
            resample_per_site: bool_of("resample-per-site", false)?,
            pairs: get("pairs").map(str::to_string),
            map_side: usize_of("map-side", 0)?,
            angle_scale_real: f64_of("angle-scale-real", 0.3)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.d < 2 {
            return Err(CliError::Validation("d must be >= 2".into()));
        }
        if self.chi < 1 {
            return Err(CliError::Validation("chi must be >= 1".into()));
        }
        if self.label_dim < 2 {
            return Err(CliError::Validation("label-dim must be >= 2".into()));
        }
        if self.sweeps < 1 {
            return Err(CliError::Validation("sweeps must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(CliError::Validation("batch must be >= 1".into()));
        }
        if !(self.delta > 0.0) {
            return Err(CliError::Validation("delta must be > 0".into()));
        }
        if !(self.angle_scale > 0.0) {
            return Err(CliError::Validation("angle-scale must be > 0".into()));
        }
        if !(self.angle_scale_real > 0.0) {
            return Err(CliError::Validation("angle-scale-real must be > 0".into()));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(CliError::Validation("c must be in (0, 1)".into()));
        }
        if !(self.slack >= 0.0) {
            return Err(CliError::Validation("slack must be >= 0".into()));
        }
        if !(self.env_decay > 0.0 && self.env_decay <= 1.0) {
            return Err(CliError::Validation("env-decay must be in (0, 1]".into()));
        }
        if self.pair.0 == self.pair.1 || self.pair.0 > 9 || self.pair.1 > 9 {
            return Err(CliError::Validation(format!(
                "pair: classes must be distinct digits, got ({}, {})",
                self.pair.0, self.pair.1
            )));
        }
        if self.path_mode == PathMode::FromFile && self.path_file.is_none() {
            return Err(CliError::Validation(
                "path=from-file requires path-file".into(),
            ));
        }
        Ok(())
    }

    /// The full configuration as `key=value` lines, defaults included.
    pub fn emit_resolved(&self) -> String {
        let mut s = String::new();
        let path_str =
            |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "images={}", path_str(&self.images));
        let _ = writeln!(s, "labels={}", path_str(&self.labels));
        let _ = writeln!(s, "test-images={}", path_str(&self.test_images));
        let _ = writeln!(s, "test-labels={}", path_str(&self.test_labels));
        let _ = writeln!(s, "train-cache={}", path_str(&self.train_cache));
        let _ = writeln!(s, "test-cache={}", path_str(&self.test_cache));
        let _ = writeln!(s, "model={}", path_str(&self.model));
        let _ = writeln!(s, "pair={},{}", self.pair.0, self.pair.1);
        let _ = writeln!(s, "dct={}", self.dct);
        let mode = match self.path_mode {
            PathMode::Zigzag => "zigzag",
            PathMode::RowMajor => "rowmajor",
            PathMode::FromFile => "from-file",
        };
        let _ = writeln!(s, "path={mode}");
        let _ = writeln!(s, "path-file={}", path_str(&self.path_file));
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "angle-scale={}", self.angle_scale);
        let _ = writeln!(s, "chi={}", self.chi);
        let _ = writeln!(s, "label-dim={}", self.label_dim);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "delta={}", self.delta);
        let _ = writeln!(s, "sweeps={}", self.sweeps);
        let _ = writeln!(s, "tol={}", self.tol);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "c={}", self.c);
        let _ = writeln!(s, "slack={}", self.slack);
        let _ = writeln!(s, "max-loops={}", self.max_loops);
        let _ = writeln!(s, "out={}", self.out.display());
        let _ = writeln!(s, "deterministic={}", self.deterministic);
        let _ = writeln!(s, "env-decay={}", self.env_decay);
        let _ = writeln!(s, "resample-per-site={}", self.resample_per_site);
        let _ = writeln!(s, "map-side={}", self.map_side);
        let _ = writeln!(s, "angle-scale-real={}", self.angle_scale_real);
        if let Some(p) = &self.pairs {
            let _ = writeln!(s, "pairs={p}");
        }
        s
    }

    fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            delta: self.delta,
            sweeps_max: self.sweeps,
            conv_tol: self.tol,
            seed: self.seed,
            deterministic: self.deterministic,
            resample_per_site: self.resample_per_site,
            env_decay: self.env_decay,
        }
    }

    fn feature_cfg(&self) -> Result<FeatureConfig, CliError> {
        Ok(FeatureConfig::new(self.d, self.angle_scale)?)
    }

    fn train_cache_path(&self) -> PathBuf {
        self.train_cache
            .clone()
            .unwrap_or_else(|| self.out.join("train.cache"))
    }

    fn test_cache_path(&self) -> PathBuf {
        self.test_cache
            .clone()
            .unwrap_or_else(|| self.out.join("test.cache"))
    }
}

fn parse_pair(s: &str) -> Result<(u8, u8), CliError> {
    let bad = || CliError::Validation(format!("pair: expected two digits like 0,2 got {s:?}"));
    let (a, b) = s.split_once([',', '-']).ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    // probe writability up front so nothing heavy runs first
    let probe = cfg.out.join(".write-probe");
    fs::write(&probe, b"ok").map_err(|e| io_err(&cfg.out, e))?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

fn require_file(what: &str, p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let p = p
        .clone()
        .ok_or_else(|| CliError::Validation(format!("{what} is required")))?;
    if !p.is_file() {
        return Err(CliError::Validation(format!(
            "{what}: no such file {}",
            p.display()
        )));
    }
    Ok(p)
}

fn read_path_file(path: &Path) -> Result<SitePath, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut order = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        order.push(line.parse().map_err(|_| {
            CliError::Validation(format!(
                "{}:{}: bad site index {line:?}",
                path.display(),
                lineno + 1
            ))
        })?);
    }
    Ok(SitePath::new(order)?)
}

fn write_path_file(path: &Path, site_path: &SitePath) -> Result<(), CliError> {
    let mut s = String::new();
    for &i in site_path.order() {
        let _ = writeln!(s, "{i}");
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

/// The site path the linearized data of length `l` was produced with.
///
/// `from-file` reads the given file. The constructible modes build the path
/// from the data length and cross-check it against the `path.txt` a previous
/// `ingest` left in the output directory, so a silently mismatched site
/// order cannot slip through. Non-square lengths (truncated caches) fall
/// back to `path.txt` when present.
fn resolve_path(cfg: &RunConfig, l: usize) -> Result<SitePath, CliError> {
    let read_sized = |f: &Path| -> Result<SitePath, CliError> {
        let p = read_path_file(f)?;
        if p.len() != l {
            return Err(CliError::Validation(format!(
                "{}: path has {} entries, data has {l} sites",
                f.display(),
                p.len()
            )));
        }
        Ok(p)
    };
    if cfg.path_mode == PathMode::FromFile {
        return read_sized(cfg.path_file.as_ref().expect("validated earlier"));
    }
    if let Some(f) = &cfg.path_file {
        if f.is_file() {
            return read_sized(f);
        }
    }
    let implicit = cfg.out.join("path.txt");
    let side = (l as f64).sqrt().round() as usize;
    if side * side != l {
        if implicit.is_file() {
            return read_sized(&implicit);
        }
        return Err(CliError::Validation(format!(
            "data length {l} is not a square; pass path-file to describe the site order"
        )));
    }
    let constructed = match cfg.path_mode {
        PathMode::Zigzag => zigzag_path(side),
        PathMode::RowMajor => SitePath::identity(l),
        PathMode::FromFile => unreachable!("handled above"),
    };
    if implicit.is_file() {
        let recorded = read_sized(&implicit)?;
        if recorded != constructed {
            return Err(CliError::Validation(format!(
                "{} disagrees with the requested path mode; the caches were \
                 linearized with a different site order (pass --path from-file \
                 --path-file {} to use it)",
                implicit.display(),
                implicit.display()
            )));
        }
    }
    Ok(constructed)
}

/// Read MNIST, select the class pair, optionally move to frequency space,
/// linearize along the configured path and persist train/test caches.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let images = require_file("images", &cfg.images)?;
    let labels = require_file("labels", &cfg.labels)?;
    let test_images = require_file("test-images", &cfg.test_images)?;
    let test_labels = require_file("test-labels", &cfg.test_labels)?;
    ensure_out_dir(cfg)?;

    let train_full = load_idx(&images, &labels)?;
    let test_full = load_idx(&test_images, &test_labels)?;
    let (a, b) = cfg.pair;
    let mut train_set = select_pair(&train_full, a, b)?;
    let mut test_set = select_pair(&test_full, a, b)?;
    drop(train_full);
    drop(test_full);

    if cfg.dct {
        train_set = dct_all(&train_set)?;
        test_set = dct_all(&test_set)?;
    }
    let side = train_set.side;
    let path = match cfg.path_mode {
        PathMode::Zigzag => zigzag_path(side),
        PathMode::RowMajor => SitePath::identity(side * side),
        PathMode::FromFile => {
            let f = cfg.path_file.as_ref().expect("validated");
            let p = read_path_file(f)?;
            if !p.is_bijection() || p.len() != side * side {
                return Err(CliError::Validation(format!(
                    "{}: ingest path must be a bijection over all {} pixels",
                    f.display(),
                    side * side
                )));
            }
            p
        }
    };

    let mut train_lin = linearize(&train_set, &path)?;
    let mut test_lin = linearize(&test_set, &path)?;
    let mut scale = 1.0;
    if cfg.dct {
        scale = rescale_frequency(&mut train_lin)?;
        rescale_by(&mut test_lin, scale);
    }

    write_cache(&cfg.train_cache_path(), &train_lin)?;
    write_cache(&cfg.test_cache_path(), &test_lin)?;
    write_path_file(&cfg.out.join("path.txt"), &path)?;
    fs::write(cfg.out.join("ingest.config.txt"), cfg.emit_resolved())
        .map_err(|e| io_err(&cfg.out, e))?;

    println!(
        "ingested pair ({a}, {b}): train {} samples, test {} samples, L={}, dct={}, scale={}",
        train_lin.len(),
        test_lin.len(),
        train_lin.n_sites,
        cfg.dct,
        scale
    );
    Ok(())
}

fn load_split(cfg: &RunConfig) -> Result<(LinearizedSet, LinearizedSet, SitePath), CliError> {
    let train_path = cfg.train_cache_path();
    let test_path = cfg.test_cache_path();
    for p in [&train_path, &test_path] {
        if !p.is_file() {
            return Err(CliError::Validation(format!(
                "dataset cache {} not found; run `entmps ingest` first",
                p.display()
            )));
        }
    }
    let train_lin = read_cache(&train_path)?;
    let test_lin = read_cache(&test_path)?;
    if train_lin.n_sites != test_lin.n_sites {
        return Err(CliError::Validation(format!(
            "train cache has {} sites, test cache {}",
            train_lin.n_sites, test_lin.n_sites
        )));
    }
    let path = resolve_path(cfg, train_lin.n_sites)?;
    Ok((train_lin, test_lin, path))
}

/// Train one classifier on the cached pair and write the model, the history
/// CSV and the resolved config. The last stdout line is
/// `test_accuracy=<value>`.
pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let (train_lin, test_lin, path) = load_split(cfg)?;
    ensure_out_dir(cfg)?;
    let feature = cfg.feature_cfg()?;
    let enc_train = encode_dataset(&train_lin, &feature)?;
    let enc_test = encode_dataset(&test_lin, &feature)?;

    let mut mps = MpsClassifier::init_random(path, cfg.d, cfg.chi, cfg.label_dim, cfg.seed)?;
    let history = train(&mut mps, &enc_train, Some(&enc_test), &cfg.train_cfg())?;

    let model_path = cfg.out.join("model.entmps");
    mps.save(&model_path)?;
    write_history_csv(&cfg.out.join("history.csv"), &history)?;
    fs::write(cfg.out.join("train.config.txt"), cfg.emit_resolved())
        .map_err(|e| io_err(&cfg.out, e))?;

    let (_, test_acc) = evaluate(&mps, &enc_test)?;
    println!("model written to {}", model_path.display());
    println!("test_accuracy={test_acc}");
    Ok(())
}

/// Entropy profile of a saved model: per-site CSV plus a 2D SEE map keyed by
/// the original pixel coordinates through the model's stored path.
pub fn cmd_entropy(cfg: &RunConfig) -> Result<(), CliError> {
    let model_path = require_file("model", &cfg.model)?;
    ensure_out_dir(cfg)?;
    let mps = MpsClassifier::load(&model_path)?;
    let prof = profile(&mps)?;

    write_profile_csv(&cfg.out.join("profile.csv"), &prof)?;
    write_see_map_csv(&cfg.out.join("see_map.csv"), &prof, cfg.map_side)?;
    fs::write(cfg.out.join("entropy.config.txt"), cfg.emit_resolved())
        .map_err(|e| io_err(&cfg.out, e))?;
    println!(
        "profile written for {} sites (max SEE {})",
        prof.see.len(),
        prof.see.iter().cloned().fold(0.0f64, f64::max)
    );
    Ok(())
}

/// Full entanglement-guided pipeline over the cached pair; writes the report
/// JSON, every stage model, entropy CSVs and training histories.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<(), CliError> {
    let (train_lin, test_lin, path) = load_split(cfg)?;
    ensure_out_dir(cfg)?;
    let feature = cfg.feature_cfg()?;
    let inputs = PipelineInputs {
        train: &train_lin,
        test: &test_lin,
        initial_path: path,
        feature,
        chi: cfg.chi,
        label_dim: cfg.label_dim,
        train_cfg: cfg.train_cfg(),
    };
    let pipeline_cfg = PipelineConfig {
        c: cfg.c,
        slack: cfg.slack,
        max_loops: cfg.max_loops,
    };
    let outcome = run_pipeline(&inputs, &pipeline_cfg)?;

    fs::write(
        cfg.out.join("report.json"),
        report_to_json(&outcome.report),
    )
    .map_err(|e| io_err(&cfg.out, e))?;
    for (name, model) in &outcome.stage_models {
        model.save(&cfg.out.join(format!("model_{name}.entmps")))?;
    }
    outcome
        .model
        .save(&cfg.out.join("model_truncated.entmps"))?;
    for (name, hist) in &outcome.stage_histories {
        write_history_csv(&cfg.out.join(format!("history_{name}.csv")), hist)?;
    }
    write_entropy_csv(
        &cfg.out.join("entropy_initial.csv"),
        &outcome.report.see_before,
        &outcome.report.bee_before,
    )?;
    write_entropy_csv(
        &cfg.out.join("entropy_final.csv"),
        &outcome.report.see_after,
        &outcome.report.bee_after,
    )?;
    write_path_file(&cfg.out.join("final_path.txt"), &outcome.report.final_path)?;
    fs::write(cfg.out.join("pipeline.config.txt"), cfg.emit_resolved())
        .map_err(|e| io_err(&cfg.out, e))?;

    println!(
        "pipeline done: L~={} xi={} xi_initial={} iterations={}",
        outcome.report.l_tilde,
        outcome.report.xi,
        outcome.report.xi_initial,
        outcome.report.iterations
    );
    Ok(())
}

/// Train frequency- and real-space classifiers for a list of digit pairs and
/// tabulate accuracies and complexity ratios.
pub fn cmd_pairsweep(cfg: &RunConfig) -> Result<(), CliError> {
    let images = require_file("images", &cfg.images)?;
    let labels = require_file("labels", &cfg.labels)?;
    let test_images = require_file("test-images", &cfg.test_images)?;
    let test_labels = require_file("test-labels", &cfg.test_labels)?;
    ensure_out_dir(cfg)?;
    let pairs = parse_pairs_list(cfg.pairs.as_deref().unwrap_or("all"))?;

    let train_full = load_idx(&images, &labels)?;
    let test_full = load_idx(&test_images, &test_labels)?;
    let side = train_full.side;
    let zigzag = zigzag_path(side);
    let rowmajor = SitePath::identity(side * side);
    let feature = cfg.feature_cfg()?;
    let feature_real = FeatureConfig::new(cfg.d, cfg.angle_scale_real)?;

    let mut csv = String::from("pair_a,pair_b,accuracy_dct,accuracy_real,xi_dct,xi_real,note\n");
    for &(a, b) in &pairs {
        eprintln!("pair ({a}, {b})...");
        let result = (|| -> Result<(f64, f64, f64, f64), CliError> {
            let train_set = select_pair(&train_full, a, b)?;
            let test_set = select_pair(&test_full, a, b)?;

            // frequency space: DCT + zigzag + global max-abs rescale
            let mut train_freq = linearize(&dct_all(&train_set)?, &zigzag)?;
            let mut test_freq = linearize(&dct_all(&test_set)?, &zigzag)?;
            let scale = rescale_frequency(&mut train_freq)?;
            rescale_by(&mut test_freq, scale);
            let (acc_dct, xi_dct) =
                train_and_ratio(cfg, &feature, &train_freq, &test_freq, &zigzag)?;

            // real space: plain row-major pixels, narrow feature cone
            let train_real = linearize(&train_set, &rowmajor)?;
            let test_real = linearize(&test_set, &rowmajor)?;
            let (acc_real, xi_real) =
                train_and_ratio(cfg, &feature_real, &train_real, &test_real, &rowmajor)?;
            Ok((acc_dct, acc_real, xi_dct, xi_real))
        })();
        match result {
            Ok((acc_dct, acc_real, xi_dct, xi_real)) => {
                let _ = writeln!(
                    csv,
                    "{a},{b},{},{},{},{},",
                    fmt_f64(acc_dct),
                    fmt_f64(acc_real),
                    fmt_f64(xi_dct),
                    fmt_f64(xi_real)
                );
            }
            Err(e) => {
                eprintln!("pair ({a}, {b}) failed: {}", e.message());
                let _ = writeln!(csv, "{a},{b},,,,,\"{}\"", e.message().replace('"', "'"));
            }
        }
    }
    let out_csv = cfg.out.join("pairsweep.csv");
    fs::write(&out_csv, csv).map_err(|e| io_err(&out_csv, e))?;
    fs::write(cfg.out.join("pairsweep.config.txt"), cfg.emit_resolved())
        .map_err(|e| io_err(&cfg.out, e))?;
    println!("pairsweep written to {}", out_csv.display());
    Ok(())
}

fn train_and_ratio(
    cfg: &RunConfig,
    feature: &FeatureConfig,
    train_lin: &LinearizedSet,
    test_lin: &LinearizedSet,
    path: &SitePath,
) -> Result<(f64, f64), CliError> {
    let enc_train = encode_dataset(train_lin, feature)?;
    let enc_test = encode_dataset(test_lin, feature)?;
    let mut mps =
        MpsClassifier::init_random(path.clone(), cfg.d, cfg.chi, cfg.label_dim, cfg.seed)?;
    train(&mut mps, &enc_train, None, &cfg.train_cfg())?;
    let (_, acc) = evaluate(&mps, &enc_test)?;
    let prof = profile(&mps)?;
    let l_tilde = crate::architect::find_truncation(&prof.bee, cfg.label_dim, cfg.c);
    Ok((acc, l_tilde as f64 / train_lin.n_sites as f64))
}

fn parse_pairs_list(s: &str) -> Result<Vec<(u8, u8)>, CliError> {
    if s.trim() == "all" {
        let mut v = Vec::new();
        for a in 0u8..10 {
            for b in (a + 1)..10 {
                v.push((a, b));
            }
        }
        return Ok(v);
    }
    let mut seen = std::collections::HashSet::new();
    let mut v = Vec::new();
    for item in s.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (a, b) = item.split_once('-').ok_or_else(|| {
            CliError::Validation(format!("pairs: expected items like 0-2, got {item:?}"))
        })?;
        let a: u8 = a
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("pairs: bad digit in {item:?}")))?;
        let b: u8 = b
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("pairs: bad digit in {item:?}")))?;
        if a == b || a > 9 || b > 9 {
            return Err(CliError::Validation(format!(
                "pairs: classes must be distinct digits, got {item:?}"
            )));
        }
        if !seen.insert((a, b)) {
            eprintln!("warning: duplicate pair ({a}, {b}) ignored");
            continue;
        }
        v.push((a, b));
    }
    if v.is_empty() {
        return Err(CliError::Validation("pairs: empty list".into()));
    }
    Ok(v)
}

fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<(), CliError> {
    let mut s = String::from("sweep,nll,train_accuracy,test_accuracy,wall_seconds\n");
    for r in &history.records {
        let test = r.test_accuracy.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.sweep,
            fmt_f64(r.nll),
            fmt_f64(r.train_accuracy),
            test,
            fmt_f64(r.wall_seconds)
        );
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

fn write_profile_csv(path: &Path, prof: &EntropyProfile) -> Result<(), CliError> {
    let mut s = String::from("site,see,bee\n");
    for (l, &see) in prof.see.iter().enumerate() {
        let bee = prof.bee.get(l).map(|&b| fmt_f64(b)).unwrap_or_default();
        let _ = writeln!(s, "{l},{},{bee}", fmt_f64(see));
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

fn write_entropy_csv(path: &Path, see: &[f64], bee: &[f64]) -> Result<(), CliError> {
    let mut s = String::from("site,see,bee\n");
    for (l, &sv) in see.iter().enumerate() {
        let bv = bee.get(l).map(|&b| fmt_f64(b)).unwrap_or_default();
        let _ = writeln!(s, "{l},{},{bv}", fmt_f64(sv));
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

/// SEE keyed back to 2D pixel coordinates through the model's site path.
/// With `side_override == 0` the side is the smallest square that fits every
/// path entry, which is exact for whole-image paths; truncated models should
/// pass the original image side via `map-side`.
fn write_see_map_csv(path: &Path, prof: &EntropyProfile, side_override: usize) -> Result<(), CliError> {
    let max_flat = prof.path.order().iter().copied().max().unwrap_or(0);
    let mut side = if side_override > 0 {
        side_override
    } else {
        (max_flat as f64 + 1.0).sqrt().ceil() as usize
    };
    side = side.max(1);
    if side * side <= max_flat {
        return Err(CliError::Validation(format!(
            "map-side {side} cannot fit path entry {max_flat}"
        )));
    }
    let mut s = String::from("x,y,see\n");
    for (l, &flat) in prof.path.order().iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", flat / side, flat % side, fmt_f64(prof.see[l]));
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

fn report_to_json(report: &PipelineReport) -> String {
    let ints = |v: &[usize]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let floats = |v: &[f64]| v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",");
    let mut s = String::from("{\n");
    let _ = writeln!(s, "  \"initial_path\": [{}],", ints(report.initial_path.order()));
    let _ = writeln!(s, "  \"final_path\": [{}],", ints(report.final_path.order()));
    let _ = writeln!(s, "  \"see_before\": [{}],", floats(&report.see_before));
    let _ = writeln!(s, "  \"see_after\": [{}],", floats(&report.see_after));
    let _ = writeln!(s, "  \"bee_before\": [{}],", floats(&report.bee_before));
    let _ = writeln!(s, "  \"bee_after\": [{}],", floats(&report.bee_after));
    let _ = writeln!(s, "  \"l_tilde\": {},", report.l_tilde);
    let _ = writeln!(s, "  \"xi\": {},", fmt_f64(report.xi));
    let _ = writeln!(s, "  \"xi_initial\": {},", fmt_f64(report.xi_initial));
    let _ = writeln!(s, "  \"iterations\": {},", report.iterations);
    let _ = writeln!(s, "  \"loops_exhausted\": {},", report.loops_exhausted);
    let accs = report
        .accuracies
        .iter()
        .map(|(k, v)| format!("\"{}\": {}", k.replace('"', ""), fmt_f64(*v)))
        .collect::<Vec<_>>()
        .join(", ");
    let _ = writeln!(s, "  \"accuracies\": {{{accs}}}");
    s.push('}');
    s.push('\n');
    s
}

const USAGE: &str = "\
entmps - unitary MPS image classifiers with entanglement-guided architecture

usage: entmps <command> [--config FILE] [--key value]...

commands:
  ingest     read MNIST IDX files, select a digit pair, optionally DCT,
             linearize along a path and write train/test caches
  train      train one classifier on the cached pair; writes model.entmps,
             history.csv and prints test_accuracy=<value>
  entropy    SEE/BEE profile of a saved model (profile.csv, see_map.csv)
  pipeline   full entanglement-guided architecture pipeline (report.json)
  pairsweep  accuracy/complexity table over many digit pairs

config keys (each is also a --flag):
  images labels test-images test-labels   MNIST IDX file paths
  train-cache test-cache                  dataset cache paths (default <out>/)
  model                                   model file (entropy command)
  pair        digit pair, e.g. 0,2        dct         true|false
  path        zigzag|rowmajor|from-file   path-file   site order file
  d           physical dimension (2)      angle-scale feature angle factor (1)
  chi         max bond dimension (16)     label-dim   number of classes (2)
  batch       samples per sweep (1000)    delta       env mixing constant (1)
  sweeps      max sweeps (20)             tol         NLL convergence (1e-4)
  seed        RNG seed (required)         out         output directory
  c           BEE threshold fraction (0.75)
  slack       SEE descending slack (0.05) max-loops   reorder loops (2)
  deterministic true|false (true)         env-decay   accumulator decay (1)
  resample-per-site true|false (false)    pairs       e.g. 0-2,3-5 or all
  map-side    image side for the 2D SEE map (0 = infer; set for truncated models)
  angle-scale-real  feature angle for pairsweep's real-space models (0.3)

environment: ENTMPS_THREADS caps worker threads (0 or unset = all cores).
exit codes: 0 ok, 1 validation error, 2 runtime error, 3 i/o error.
";

/// Parse argv (without the program name), run the command, and return the
/// process exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        print!("{USAGE}");
        return if args.is_empty() { 1 } else { 0 };
    }
    let command = args[0].as_str();
    let mut config_file: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" || arg == "-h" {
            print!("{USAGE}");
            return 0;
        }
        let Some(key) = arg.strip_prefix("--") else {
            eprintln!("unexpected argument {arg:?} (flags look like --key value)");
            return 1;
        };
        let Some(value) = args.get(i + 1) else {
            eprintln!("flag --{key} is missing its value");
            return 1;
        };
        if key == "config" {
            config_file = Some(PathBuf::from(value));
        } else {
            overrides.push((key.to_string(), value.clone()));
        }
        i += 2;
    }

    if let Ok(threads) = std::env::var("ENTMPS_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) => crate::par::limit_threads(n),
            Err(_) => {
                eprintln!("ENTMPS_THREADS must be an integer, got {threads:?}");
                return 1;
            }
        }
    }

    let cfg = match RunConfig::resolve(config_file.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return e.exit_code();
        }
    };
    let result = match command {
        "ingest" => cmd_ingest(&cfg),
        "train" => cmd_train(&cfg),
        "entropy" => cmd_entropy(&cfg),
        "pipeline" => cmd_pipeline(&cfg),
        "pairsweep" => cmd_pairsweep(&cfg),
        other => {
            eprintln!("unknown command {other:?}\n\n{USAGE}");
            return 1;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_f64_has_17_significant_digits_and_roundtrips() {
        for &x in &[0.1, std::f64::consts::PI, 0.9896, 1e-300, -3.5] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn resolve_requires_seed_and_rejects_unknown_keys() {
        let err = RunConfig::resolve(None, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let err = RunConfig::resolve(
            None,
            &[("seed".into(), "1".into()), ("bogus".into(), "x".into())],
        )
        .unwrap_err();
        assert!(err.message().contains("bogus"));
    }

    #[test]
    fn resolve_applies_file_then_flag_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        fs::write(&cfg_path, "# comment\nseed=3\nchi=8\npair=1,7\n").unwrap();
        let cfg = RunConfig::resolve(
            Some(&cfg_path),
            &[("chi".into(), "32".into())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.chi, 32);
        assert_eq!(cfg.pair, (1, 7));
    }

    #[test]
    fn resolved_config_roundtrips_through_a_file() {
        let overrides: Vec<(String, String)> = vec![
            ("seed".into(), "11".into()),
            ("dct".into(), "true".into()),
            ("angle-scale".into(), "0.37".into()),
            ("out".into(), "somewhere".into()),
        ];
        let cfg = RunConfig::resolve(None, &overrides).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("resolved.cfg");
        fs::write(&p, cfg.emit_resolved()).unwrap();
        let again = RunConfig::resolve(Some(&p), &[]).unwrap();
        assert_eq!(again.seed, 11);
        assert!(again.dct);
        assert_eq!(again.angle_scale, 0.37);
        assert_eq!(again.out, PathBuf::from("somewhere"));
        assert_eq!(again.emit_resolved(), cfg.emit_resolved());
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = |k: &str, v: &str| {
            RunConfig::resolve(
                None,
                &[("seed".into(), "1".into()), (k.into(), v.into())],
            )
            .unwrap_err()
        };
        assert_eq!(bad("sweeps", "0").exit_code(), 1);
        assert_eq!(bad("pair", "3,3").exit_code(), 1);
        assert_eq!(bad("c", "1.5").exit_code(), 1);
        assert_eq!(bad("path", "diagonal").exit_code(), 1);
        assert_eq!(bad("dct", "maybe").exit_code(), 1);
    }

    #[test]
    fn pairs_list_parsing_and_dedup() {
        let all = parse_pairs_list("all").unwrap();
        assert_eq!(all.len(), 45);
        let some = parse_pairs_list("0-2, 3-5, 0-2").unwrap();
        assert_eq!(some, vec![(0, 2), (3, 5)]);
        assert!(parse_pairs_list("3-3").is_err());
        assert!(parse_pairs_list("").is_err());
    }
}
