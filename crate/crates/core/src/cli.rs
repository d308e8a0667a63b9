//! Command-line front end: `synth`, `train`, `eval` and `interpret`.
//!
//! Every command writes a manifest (canonical key-sorted text) holding the
//! resolved settings and a SHA-256 checksum for each artifact. Exit codes:
//! 0 success, 2 usage error, 1 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::attention::attention_scores;
use crate::data::{load, Dataset, SynthSpec};
use crate::error::MattError;
use crate::layers::{ConvSpec, DEFAULT_EPS, DEFAULT_EPS_RE};
use crate::model::{forward, saliency_values, Checkpoint, MattConfig, Variant};
use crate::train::{evaluate, history_csv, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "matt", version, about = "Manifold attention network for EEG decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export gradient saliency and attention scores.
    Interpret(InterpretArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 256)]
    pub timepoints: usize,
    /// One oscillation frequency (Hz) per class, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8,13,21")]
    pub freqs: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the per-class mixing matrices; keep it fixed across splits.
    #[arg(long, default_value_t = 7)]
    pub mixing_seed: u64,
    #[arg(long, default_value_t = 128.0)]
    pub sampling_rate: f64,
    /// Dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Full,
    FeOnly,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 350)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.125)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub temporal_filters: usize,
    #[arg(long, default_value_t = 12)]
    pub temporal_kernel: usize,
    /// Spatial filter count; defaults to the channel count.
    #[arg(long)]
    pub spatial_filters: Option<usize>,
    /// Attention dimension; defaults to temporal filters minus 4.
    #[arg(long)]
    pub d_u: Option<usize>,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_EPS_RE)]
    pub eps_re: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(MattError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<MattError> for CliError {
    fn from(e: MattError) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(e: MattError) -> CliError {
    CliError::Usage(e.to_string())
}

/// Settings, inputs, outputs and checksums of one command run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub fields: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.fields.insert(key.into(), value.to_string());
    }

    /// Write `bytes` to `dir/name` and record its checksum.
    pub fn artifact(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, MattError> {
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        self.set(format!("output.{name}"), path.display());
        self.set(format!("sha256.{name}"), sha256_hex(bytes));
        Ok(path)
    }

    pub fn to_text(&self) -> String {
        self.fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, MattError> {
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MattError::Format(format!("malformed manifest line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        Ok(Self { fields })
    }

    pub fn write(&self, path: &Path) -> Result<(), MattError> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), MattError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), MattError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn record_config(manifest: &mut RunManifest, prefix: &str, text: &str) {
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            manifest.set(format!("{prefix}.{k}"), v);
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<RunManifest, CliError> {
    let spec = SynthSpec {
        classes: a.classes,
        channels: a.channels,
        timepoints: a.timepoints,
        sampling_rate_hz: a.sampling_rate,
        freqs: a.freqs.clone(),
        noise: a.noise,
        trials_per_class: a.per_class,
        mixing_seed: a.mixing_seed,
        seed: a.seed,
    };
    spec.validate().map_err(usage)?;
    let dataset = crate::data::synth(&spec)?;
    let bytes = dataset.to_bytes();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_atomic(&a.out, &bytes)?;

    let mut m = RunManifest::new("synth");
    m.set("config.channels", spec.channels);
    m.set("config.classes", spec.classes);
    m.set(
        "config.freqs",
        spec.freqs.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(","),
    );
    m.set("config.mixing_seed", spec.mixing_seed);
    m.set("config.noise", format!("{:?}", spec.noise));
    m.set("config.per_class", spec.trials_per_class);
    m.set("config.sampling_rate_hz", format!("{:?}", spec.sampling_rate_hz));
    m.set("config.timepoints", spec.timepoints);
    m.set("seed", spec.seed);
    m.set("output.dataset", a.out.display());
    m.set("sha256.dataset", sha256_hex(&bytes));
    let mut manifest_path = a.out.as_os_str().to_owned();
    manifest_path.push(".manifest");
    m.write(Path::new(&manifest_path))?;
    Ok(m)
}

pub fn train_configs(a: &TrainArgs, data: &Dataset) -> Result<(MattConfig, TrainConfig), CliError> {
    let h = &data.header;
    let conv = ConvSpec {
        spatial_filters: a.spatial_filters.unwrap_or(h.channels),
        temporal_filters: a.temporal_filters,
        temporal_kernel: a.temporal_kernel,
        stride: 1,
    };
    let cfg = MattConfig {
        channels: h.channels,
        timepoints: h.timepoints,
        classes: h.classes,
        conv,
        d_u: a.d_u.unwrap_or(a.temporal_filters.saturating_sub(4).max(1)),
        m: a.m,
        eps: a.eps,
        eps_re: a.eps_re,
        seed: a.seed,
        variant: match a.variant {
            VariantArg::Full => Variant::Full,
            VariantArg::FeOnly => Variant::FeOnly,
        },
    };
    cfg.validate().map_err(usage)?;
    let tc = TrainConfig {
        iterations: a.iters,
        lr: a.lr,
        batch_size: a.batch,
        seed: a.seed,
        val_fraction: a.val_frac,
    };
    tc.validate().map_err(usage)?;
    Ok((cfg, tc))
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunManifest, CliError> {
    let data = load(&a.data)?;
    let (cfg, tc) = train_configs(a, &data)?;
    let outcome = train(&data, &cfg, &tc)?;
    ensure_dir(&a.out)?;
    let mut m = RunManifest::new("train");
    record_config(&mut m, "config.model", &cfg.to_text());
    m.set("config.train.batch_size", tc.batch_size);
    m.set("config.train.iterations", tc.iterations);
    m.set("config.train.lr", format!("{:?}", tc.lr));
    m.set("config.train.val_fraction", format!("{:?}", tc.val_fraction));
    m.set("seed", tc.seed);
    m.set("input.data", a.data.display());
    m.set("sha256.input.data", sha256_hex(&data.to_bytes()));
    m.set("best_iteration", outcome.best_iteration);
    m.set("best_val_loss", format!("{:?}", outcome.best_val_loss()));
    m.artifact(&a.out, "model.ckpt", &outcome.checkpoint.to_bytes())?;
    m.artifact(&a.out, "history.csv", history_csv(&outcome.history).as_bytes())?;
    m.write(&a.out.join("manifest.txt"))?;
    Ok(m)
}

fn csv_row(values: impl IntoIterator<Item = String>) -> String {
    let mut s = values.into_iter().collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

pub fn cmd_eval(a: &EvalArgs) -> Result<RunManifest, CliError> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = load(&a.data)?;
    let report = evaluate(&ck, &data)?;
    ensure_dir(&a.out)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy", format!("{:?}", report.accuracy));
    if let Some(auc) = report.auc {
        metrics.insert("auc", format!("{auc:?}"));
    }
    metrics.insert("n_trials", data.len().to_string());
    let metrics_text: String = metrics.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let confusion: String = report
        .confusion
        .iter()
        .map(|row| csv_row(row.iter().map(|c| c.to_string())))
        .collect();
    let mut attention = String::from("epoch,score\n");
    for (j, s) in report.attention_profile.iter().enumerate() {
        let _ = writeln!(attention, "{j},{s:?}");
    }

    let mut m = RunManifest::new("eval");
    record_config(&mut m, "config.model", &ck.config.to_text());
    m.set("seed", ck.config.seed);
    m.set("input.ckpt", a.ckpt.display());
    m.set("input.data", a.data.display());
    m.artifact(&a.out, "metrics.txt", metrics_text.as_bytes())?;
    m.artifact(&a.out, "confusion.csv", confusion.as_bytes())?;
    m.artifact(&a.out, "attention.csv", attention.as_bytes())?;
    m.write(&a.out.join("manifest.txt"))?;
    Ok(m)
}

pub fn cmd_interpret(a: &InterpretArgs) -> Result<RunManifest, CliError> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let cfg = &ck.config;
    if a.class >= cfg.classes {
        return Err(MattError::Index {
            index: a.class,
            bound: cfg.classes,
        }
        .into());
    }
    let data = load(&a.data)?;
    let h = &data.header;
    if (h.channels, h.timepoints) != (cfg.channels, cfg.timepoints) {
        return Err(MattError::Contract(format!(
            "model expects {}x{} trials, dataset has {}x{}",
            cfg.channels, cfg.timepoints, h.channels, h.timepoints
        ))
        .into());
    }
    let members: Vec<_> = data.trials.iter().filter(|t| t.label == a.class).collect();
    if members.is_empty() {
        return Err(MattError::EmptyInput(format!("no trials of class {}", a.class)).into());
    }
    let values = ck.params.values();
    let mut mean_abs = nalgebra::DMatrix::<f64>::zeros(cfg.channels, cfg.timepoints);
    let mut scores = Vec::with_capacity(members.len());
    for t in &members {
        let s = saliency_values(t, &values, cfg, a.class)?;
        mean_abs += s.abs();
        if let Some(att) = forward(t, &ck.params, cfg)?.attention {
            scores.push(attention_scores(&att));
        }
    }
    mean_abs /= members.len() as f64;

    let saliency_csv: String = mean_abs
        .row_iter()
        .map(|r| csv_row(r.iter().map(|x| format!("{x:?}"))))
        .collect();
    let mut scores_csv = String::new();
    if !scores.is_empty() {
        scores_csv.push_str(&csv_row((0..cfg.m).map(|j| format!("epoch_{j}"))));
        for s in &scores {
            scores_csv.push_str(&csv_row(s.iter().map(|x| format!("{x:?}"))));
        }
    }

    ensure_dir(&a.out)?;
    let mut m = RunManifest::new("interpret");
    record_config(&mut m, "config.model", &cfg.to_text());
    m.set("config.class", a.class);
    m.set("seed", cfg.seed);
    m.set("input.ckpt", a.ckpt.display());
    m.set("input.data", a.data.display());
    m.artifact(&a.out, "saliency.csv", saliency_csv.as_bytes())?;
    if !scores.is_empty() {
        m.artifact(&a.out, "attention_scores.csv", scores_csv.as_bytes())?;
    }
    m.write(&a.out.join("manifest.txt"))?;
    Ok(m)
}

pub fn execute(cli: &Cli) -> Result<RunManifest, CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Interpret(a) => cmd_interpret(a),
    }
}

/// Parse arguments, run the command, report errors on stderr, and return
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("matt: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_with_defaults() {
        let cli = Cli::try_parse_from(["matt", "synth", "--out", "x.bin"]).unwrap();
        match cli.command {
            Command::Synth(a) => {
                assert_eq!(a.freqs, vec![8.0, 13.0, 21.0]);
                assert_eq!(a.per_class, 60);
            }
            _ => panic!("wrong subcommand"),
        }
        let cli = Cli::try_parse_from(["matt", "train", "--data", "d", "--out", "o", "--m", "7"]).unwrap();
        match cli.command {
            Command::Train(a) => {
                assert_eq!((a.m, a.iters, a.batch), (7, 350, 32));
                assert_eq!(a.lr, 1e-2);
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["matt", "train", "--out", "o"]), EXIT_USAGE);
        assert_eq!(run(["matt", "bogus"]), EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d.bin");
        let out = out.to_str().unwrap();
        assert_eq!(run(["matt", "synth", "--classes", "2", "--freqs", "8,13,21", "--out", out]), EXIT_USAGE);
    }

    #[test]
    fn manifest_text_is_sorted_and_parses() {
        let mut m = RunManifest::new("eval");
        m.set("zeta", 1);
        m.set("alpha", "x");
        let text = m.to_text();
        assert_eq!(text, "alpha=x\ncommand=eval\nzeta=1\n");
        assert_eq!(RunManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn checksum_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
