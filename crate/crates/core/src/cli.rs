//! The `insp` command line: argument parsing, TOML config files and the
//! drivers behind each subcommand.
//!
//! Every setting resolves as flag, then config file, then built-in default,
//! and the effective values are echoed to stderr before any work starts.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::conv_approx::{reports_to_csv, validate_approx, Kernel, SinusoidMixture, TestSignal, ValidationConfig};
use crate::convnet::{
    accuracy, history_csv, input_jets, train_convnet_observed, ConvLayerSpec, ConvNet, ConvNetSpec, ConvTrainConfig,
    AugmentConfig,
};
use crate::deriv::{multi_index_set, JetEngine};
use crate::error::{Error, Result};
use crate::fitting::{fit_observed, psnr_from_signed_mse, Architecture, TrainConfig};
use crate::inr::{build_siren, load_inr, save_inr, SirenNetwork, DEFAULT_OMEGA0};
use crate::insp_op::{load_operator, process, save_operator, train_operator, EdgeMode, InspOperator, OperatorSpec};
use crate::numerics::{AdamWConfig, SeedTree};
use crate::signal::{self, load_netpbm, load_wav, save_pgm, save_ppm, save_wav, SignalGrid};

const DEFAULT_RATE: u32 = 16_000;

#[derive(Debug, Parser)]
#[command(name = "insp", version, about = "Fit, differentiate and process implicit neural representations")]
pub struct Cli {
    /// TOML file with default settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true, env = "INSP_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a network to an image or WAV file (or every entry of a manifest).
    Fit(FitArgs),
    /// Print partial derivatives of a network at given points.
    Derive(DeriveArgs),
    /// Decode an operator applied to a network.
    Apply(ApplyArgs),
    /// Train a derivative-stack operator on (network, target image) pairs.
    TrainOp(TrainOpArgs),
    /// Check a polynomial-in-gradient approximation of a convolution.
    ValidateConv(ValidateArgs),
    /// Train or evaluate a classifier running on networks.
    Convnet(ConvnetArgs),
    /// Sample a network on a lattice.
    Decode(DecodeArgs),
    /// PSNR and SSIM between two signals.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub input: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// `path[,label]` lines; fits each entry into `--out-dir`.
    #[arg(long, conflicts_with = "input")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub out_dir: Option<PathBuf>,
    /// Hidden widths, e.g. `64,64,64` or `3x64`.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub omega0: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop once the fit reaches this PSNR (full batch only).
    #[arg(long)]
    pub target_psnr: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    pub inr: PathBuf,
    /// Comma-separated coordinates; repeatable.
    #[arg(long, required = true, allow_hyphen_values = true)]
    pub at: Vec<String>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    pub inr: PathBuf,
    #[arg(long, conflicts_with = "preset")]
    pub operator: Option<PathBuf>,
    /// `identity`, `edge` or `laplacian`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(short, long)]
    pub output: PathBuf,
    /// `HxW` for images, a sample count for audio.
    #[arg(long)]
    pub resolution: Option<String>,
    #[arg(long)]
    pub rate: Option<u32>,
    /// `intensity` maps `[-1, 1]` to `[0, 1]`; `minmax` stretches raw values.
    /// Defaults to `minmax` for the edge and laplacian presets.
    #[arg(long)]
    pub range: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub inr: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub resolution: Option<String>,
    #[arg(long)]
    pub rate: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Blur,
    Denoise,
    Deblur,
    Inpaint,
}

#[derive(Debug, Args)]
pub struct TrainOpArgs {
    pub task: Task,
    /// `inr_path,target_path` lines.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// `linear` or `mlp`.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// One fusion network over all channels instead of one per channel.
    #[arg(long)]
    pub cross_channel: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// `gaussian:SIGMA`, `delta` or `derivative:AXIS`.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub degrees: Option<String>,
    #[arg(long)]
    pub band: Option<f64>,
    #[arg(long)]
    pub lattice: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sinusoid terms in the test signal.
    #[arg(long)]
    pub terms: Option<usize>,
    #[arg(long)]
    pub max_freq: Option<u32>,
    /// Use a scalar network as the test signal instead of sinusoids.
    #[arg(long)]
    pub inr: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvnetArgs {
    #[command(subcommand)]
    pub action: ConvnetAction,
}

#[derive(Debug, Subcommand)]
pub enum ConvnetAction {
    Train(ConvTrainArgs),
    Eval(ConvEvalArgs),
}

#[derive(Debug, Args)]
pub struct ConvTrainArgs {
    /// `inr_path,label` lines.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Per-layer derivative orders, e.g. `2,2`.
    #[arg(long)]
    pub orders: Option<String>,
    #[arg(long)]
    pub filters: Option<String>,
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long)]
    pub lattice: Option<usize>,
    #[arg(long)]
    pub pool_grid: Option<usize>,
    #[arg(long)]
    pub coord_scale: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub augment: bool,
    /// Permute training labels (null-model control).
    #[arg(long)]
    pub shuffle_labels: bool,
}

#[derive(Debug, Args)]
pub struct ConvEvalArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub reference: PathBuf,
    pub candidate: PathBuf,
}

// ---------------------------------------------------------------------------
// config file

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub derive: DeriveSection,
    #[serde(default)]
    pub apply: ApplySection,
    #[serde(default)]
    pub decode: ResolutionSection,
    #[serde(default)]
    pub train_op: TrainOpSection,
    #[serde(default)]
    pub validate_conv: ValidateSection,
    #[serde(default)]
    pub convnet: ConvnetSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub hidden: Option<Vec<usize>>,
    pub omega0: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub target_psnr: Option<f64>,
    pub log_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveSection {
    pub order: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionSection {
    pub resolution: Option<String>,
    pub rate: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplySection {
    pub resolution: Option<String>,
    pub rate: Option<u32>,
    pub range: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpSection {
    pub kind: Option<String>,
    pub order: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub cross_channel: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    pub kernel: Option<String>,
    pub degrees: Option<Vec<usize>>,
    pub band: Option<f64>,
    pub lattice: Option<usize>,
    pub samples: Option<usize>,
    pub terms: Option<usize>,
    pub max_freq: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvnetSection {
    pub classes: Option<usize>,
    pub orders: Option<Vec<usize>>,
    pub filters: Option<Vec<usize>>,
    pub channels: Option<Vec<usize>>,
    pub lattice: Option<usize>,
    pub pool_grid: Option<usize>,
    pub coord_scale: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub augment: Option<bool>,
}

pub fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse {what} `{s}`"));
    if let Some((n, w)) = s.split_once('x') {
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        let w: usize = w.trim().parse().map_err(|_| bad())?;
        return Ok(vec![w; n]);
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn parse_coords(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("cannot parse point `{s}`"))))
        .collect()
}

/// `HxW` (rows by columns) or a single count.
fn parse_resolution(s: &str, m: usize) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("cannot parse resolution `{s}`"))))
        .collect::<Result<_>>()?;
    if dims.len() != m || dims.contains(&0) {
        return Err(Error::Config(format!("resolution `{s}` does not describe a {m}-D lattice")));
    }
    Ok(dims)
}

fn echo<T: Serialize>(name: &str, cfg: &T) {
    let text = toml::to_string(cfg).unwrap_or_default();
    eprintln!("# effective {name} config");
    for line in text.lines() {
        eprintln!("#   {line}");
    }
}

// ---------------------------------------------------------------------------
// file helpers

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file so a failed run leaves nothing
/// behind at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// A decoded input signal; `rate` is set for audio.
pub struct LoadedSignal {
    pub grid: SignalGrid,
    pub rate: Option<u32>,
}

pub fn load_signal(path: &Path) -> Result<LoadedSignal> {
    let bytes = read(path)?;
    if bytes.starts_with(b"RIFF") {
        let (grid, rate) = load_wav(&bytes)?;
        Ok(LoadedSignal { grid, rate: Some(rate) })
    } else {
        Ok(LoadedSignal {
            grid: load_netpbm(&bytes)?,
            rate: None,
        })
    }
}

pub fn save_signal(path: &Path, grid: &SignalGrid, rate: u32) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = match ext.as_str() {
        "pgm" => save_pgm(grid)?,
        "ppm" => save_ppm(grid)?,
        "wav" => save_wav(grid, rate)?,
        _ => return Err(Error::Unsupported(format!("output extension `.{ext}`"))),
    };
    write_atomic(path, &bytes)
}

/// Nonempty `a,b` lines with paths resolved against the manifest's folder.
fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, Option<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (p, rest) = match line.split_once(',') {
            Some((p, r)) => (p.trim(), Some(r.trim().to_string())),
            None => (line, None),
        };
        out.push((base.join(p), rest));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

fn load_net(path: &Path) -> Result<SirenNetwork> {
    load_inr(&read(path)?)
}

fn default_shape(m: usize, res: Option<&str>) -> Result<Vec<usize>> {
    match res {
        Some(r) => parse_resolution(r, m),
        None if m == 1 => Ok(vec![DEFAULT_RATE as usize]),
        None => Ok(vec![64; m]),
    }
}

// ---------------------------------------------------------------------------
// drivers

struct Context {
    seed: u64,
    config: ConfigFile,
}

/// Runs a parsed command line; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let threads = cli.threads.or(config.threads).unwrap_or(1);
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    eprintln!("# seed = {seed}, threads = {threads} (computation is single-threaded)");
    let ctx = Context { seed, config };
    match cli.command {
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Derive(a) => cmd_derive(&ctx, a),
        Command::Apply(a) => cmd_apply(&ctx, a),
        Command::TrainOp(a) => cmd_train_op(&ctx, a),
        Command::ValidateConv(a) => cmd_validate_conv(&ctx, a),
        Command::Convnet(a) => match a.action {
            ConvnetAction::Train(t) => cmd_convnet_train(&ctx, t),
            ConvnetAction::Eval(e) => cmd_convnet_eval(&ctx, e),
        },
        Command::Decode(a) => cmd_decode(&ctx, a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Exit status for an error: 1 for numerical failures, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        1
    } else {
        2
    }
}

#[derive(Debug, Serialize)]
struct FitSettings {
    hidden: Vec<usize>,
    omega0: f64,
    steps: usize,
    lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_psnr: Option<f64>,
    log_every: usize,
    seed: u64,
}

fn cmd_fit(ctx: &Context, a: FitArgs) -> Result<()> {
    let c = &ctx.config.fit;
    let hidden = match &a.hidden {
        Some(h) => parse_list(h, "hidden widths")?,
        None => c.hidden.clone().unwrap_or_else(|| Architecture::default().hidden),
    };
    let s = FitSettings {
        hidden,
        omega0: a.omega0.or(c.omega0).unwrap_or(DEFAULT_OMEGA0),
        steps: a.steps.or(c.steps).unwrap_or(TrainConfig::default().steps),
        lr: a.lr.or(c.lr).unwrap_or(AdamWConfig::default().lr),
        batch_size: a.batch_size.or(c.batch_size),
        target_psnr: a.target_psnr.or(c.target_psnr),
        log_every: a.log_every.or(c.log_every).unwrap_or(100).max(1),
        seed: ctx.seed,
    };
    let jobs: Vec<(PathBuf, PathBuf, Option<String>)> = match (&a.input, &a.manifest) {
        (Some(input), None) => {
            let out = a.output.clone().ok_or_else(|| Error::Config("fit needs --output".into()))?;
            vec![(input.clone(), out, None)]
        }
        (None, Some(manifest)) => {
            let dir = a.out_dir.clone().ok_or_else(|| Error::Config("--manifest needs --out-dir".into()))?;
            let entries = read_manifest(manifest)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let base = manifest.parent().unwrap_or(Path::new(""));
            entries
                .into_iter()
                .map(|(p, label)| {
                    let rel = p.strip_prefix(base).unwrap_or(&p).with_extension("insp");
                    let name = rel.to_string_lossy().replace(['/', '\\'], "_");
                    (p, dir.join(name), label)
                })
                .collect()
        }
        _ => return Err(Error::Config("fit needs an input path or --manifest".into())),
    };
    for (input, _, _) in &jobs {
        if !input.exists() {
            return Err(Error::io(input, std::io::ErrorKind::NotFound.into()));
        }
    }
    echo("fit", &s);
    let arch = Architecture {
        hidden: s.hidden.clone(),
        omega0: s.omega0,
    };
    let cfg = TrainConfig {
        steps: s.steps,
        batch_size: s.batch_size,
        adam: AdamWConfig {
            lr: s.lr,
            ..Default::default()
        },
        seed: s.seed,
        early_stop_psnr: s.target_psnr,
    };
    let single = jobs.len() == 1 && a.manifest.is_none();
    let mut manifest_out = String::new();
    for (input, output, label) in &jobs {
        let sig = load_signal(input)?;
        let data = sig.grid.to_constraints()?;
        let seeds = SeedTree::new(cfg.seed);
        let net = build_siren(data.input_dim(), data.channels(), &arch.hidden, arch.omega0, seeds.child(0).seed())?;
        let channels = data.channels() as f64;
        let every = s.log_every;
        let fit = fit_observed(net, &data, &cfg, &mut |step, loss| {
            if single && step % every == 0 {
                eprintln!("{step},{loss:.9e}");
            }
        })?;
        let psnr = psnr_from_signed_mse(fit.best_loss / channels);
        eprintln!("# {}: {} steps, best psnr {psnr:.3} dB", input.display(), fit.history.len());
        write_atomic(output, &save_inr(&fit.net)?)?;
        if let Some(l) = label {
            let _ = writeln!(manifest_out, "{},{l}", output.file_name().unwrap().to_string_lossy());
        }
    }
    if let (Some(dir), false) = (&a.out_dir, manifest_out.is_empty()) {
        write_atomic(&dir.join("manifest.csv"), manifest_out.as_bytes())?;
    }
    Ok(())
}

fn cmd_derive(ctx: &Context, a: DeriveArgs) -> Result<()> {
    let order = a.order.or(ctx.config.derive.order).unwrap_or(2);
    let net = load_net(&a.inr)?;
    let engine = JetEngine::with_max_order(order.max(JetEngine::default().max_order));
    let set = multi_index_set(net.input_dim(), order);
    let mut out = String::from("point,channel,index,value\n");
    for (pi, at) in a.at.iter().enumerate() {
        let x = parse_coords(at)?;
        let st = engine.eval(&net, &x, order)?;
        for c in 0..net.output_dim() {
            for (n, v) in set.iter().zip(st.channel(c)) {
                let idx: Vec<String> = n.exponents().iter().map(u8::to_string).collect();
                let _ = writeln!(out, "{pi},{c},{},{v:e}", idx.join(":"));
            }
        }
    }
    match a.output {
        Some(p) => write_atomic(&p, out.as_bytes()),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn preset(name: &str, m: usize) -> Result<InspOperator> {
    match name {
        "identity" => Ok(InspOperator::identity(m)),
        "edge" => Ok(InspOperator::edge_detector(m, EdgeMode::Magnitude)),
        "laplacian" => Ok(InspOperator::laplacian(m)),
        _ => Err(Error::Config(format!("unknown preset `{name}` (identity, edge, laplacian)"))),
    }
}

fn cmd_apply(ctx: &Context, a: ApplyArgs) -> Result<()> {
    let net = load_net(&a.inr)?;
    let op = match (&a.operator, &a.preset) {
        (Some(p), None) => load_operator(&read(p)?)?,
        (None, Some(name)) => preset(name, net.input_dim())?,
        _ => return Err(Error::Config("apply needs --operator or --preset".into())),
    };
    let c = &ctx.config.apply;
    let shape = default_shape(net.input_dim(), a.resolution.as_deref().or(c.resolution.as_deref()))?;
    let rate = a.rate.or(c.rate).unwrap_or(DEFAULT_RATE);
    let derivative_preset = matches!(a.preset.as_deref(), Some("edge" | "laplacian"));
    let range = a
        .range
        .clone()
        .or(c.range.clone())
        .unwrap_or_else(|| if derivative_preset { "minmax" } else { "intensity" }.into());
    let p = process(&net, &op)?;
    let grid = match range.as_str() {
        "intensity" => p.decode(&shape)?,
        "minmax" => signal::rescale_unit(&p.sample(&shape)?),
        r => return Err(Error::Config(format!("unknown range `{r}` (intensity, minmax)"))),
    };
    save_signal(&a.output, &grid, rate)
}

fn cmd_decode(ctx: &Context, a: DecodeArgs) -> Result<()> {
    let net = load_net(&a.inr)?;
    let c = &ctx.config.decode;
    let shape = default_shape(net.input_dim(), a.resolution.as_deref().or(c.resolution.as_deref()))?;
    let rate = a.rate.or(c.rate).unwrap_or(DEFAULT_RATE);
    save_signal(&a.output, &signal::decode(&net, &shape)?, rate)
}

#[derive(Debug, Serialize)]
struct TrainOpSettings {
    task: Task,
    kind: String,
    order: usize,
    hidden: Vec<usize>,
    cross_channel: bool,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
}

fn cmd_train_op(ctx: &Context, a: TrainOpArgs) -> Result<()> {
    let c = &ctx.config.train_op;
    let hidden = match &a.hidden {
        Some(h) => parse_list(h, "hidden widths")?,
        None => c.hidden.clone().unwrap_or_else(|| vec![64, 64]),
    };
    let s = TrainOpSettings {
        task: a.task,
        kind: a.kind.clone().or(c.kind.clone()).unwrap_or_else(|| "mlp".into()),
        order: a.order.or(c.order).unwrap_or(2),
        hidden,
        cross_channel: a.cross_channel || c.cross_channel.unwrap_or(false),
        steps: a.steps.or(c.steps).unwrap_or(1000),
        lr: a.lr.or(c.lr).unwrap_or(1e-3),
        batch_size: a.batch_size.or(c.batch_size).unwrap_or(4096),
        seed: ctx.seed,
    };
    let spec = match s.kind.as_str() {
        "linear" => OperatorSpec::Linear { order: s.order },
        "mlp" => OperatorSpec::Fusion {
            order: s.order,
            hidden: s.hidden.clone(),
            cross_channel: s.cross_channel,
        },
        k => return Err(Error::Config(format!("unknown operator kind `{k}` (linear, mlp)"))),
    };
    let entries = read_manifest(&a.manifest)?;
    echo("train-op", &s);
    let mut pairs = Vec::with_capacity(entries.len());
    for (inr, target) in entries {
        let target = target.ok_or_else(|| Error::Config(format!("manifest line for {} lacks a target", inr.display())))?;
        let target_path = a.manifest.parent().unwrap_or(Path::new("")).join(target);
        pairs.push((load_net(&inr)?, load_signal(&target_path)?.grid));
    }
    let total: usize = pairs.iter().map(|(_, g)| g.points() * g.channels()).sum();
    let cfg = TrainConfig {
        steps: s.steps,
        batch_size: Some(s.batch_size.min(total)),
        adam: AdamWConfig {
            lr: s.lr,
            ..Default::default()
        },
        seed: s.seed,
        early_stop_psnr: None,
    };
    let fit = train_operator(&pairs, &spec, &cfg)?;
    for (step, loss) in fit.history.iter().enumerate() {
        if step % 100 == 0 || step + 1 == fit.history.len() {
            eprintln!("{step},{loss:.9e}");
        }
    }
    write_atomic(&a.output, &save_operator(&fit.op)?)
}

#[derive(Debug, Serialize)]
struct ValidateSettings {
    kernel: String,
    degrees: Vec<usize>,
    band: f64,
    lattice: usize,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    terms: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_freq: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inr: Option<String>,
    seed: u64,
}

fn cmd_validate_conv(ctx: &Context, a: ValidateArgs) -> Result<()> {
    let c = &ctx.config.validate_conv;
    let defaults = ValidationConfig::default();
    let degrees = match &a.degrees {
        Some(d) => parse_list(d, "degrees")?,
        None => c.degrees.clone().unwrap_or_else(|| vec![2, 4, 6, 8]),
    };
    let sinusoids = a.inr.is_none();
    let s = ValidateSettings {
        kernel: a.kernel.clone().or(c.kernel.clone()).unwrap_or_else(|| "gaussian:0.05".into()),
        degrees,
        band: a.band.or(c.band).unwrap_or(defaults.band),
        lattice: a.lattice.or(c.lattice).unwrap_or(defaults.lattice),
        samples: a.samples.or(c.samples).unwrap_or(defaults.samples),
        terms: sinusoids.then(|| a.terms.or(c.terms).unwrap_or(3)),
        max_freq: sinusoids.then(|| a.max_freq.or(c.max_freq).unwrap_or(3)),
        inr: a.inr.as_ref().map(|p| p.display().to_string()),
        seed: ctx.seed,
    };
    let kernel = Kernel::parse(&s.kernel).map_err(|e| Error::Config(e.to_string()))?;
    echo("validate-conv", &s);
    let net = a.inr.as_deref().map(load_net).transpose()?;
    let mixture;
    let signal = match &net {
        Some(n) => TestSignal::Inr(n),
        None => {
            mixture = SinusoidMixture::random(s.seed, 1, s.terms.unwrap(), s.max_freq.unwrap());
            TestSignal::Sinusoids(&mixture)
        }
    };
    let max_degree = s.degrees.iter().copied().max().unwrap_or(0);
    let cfg = ValidationConfig {
        band: s.band,
        lattice: s.lattice,
        samples: s.samples,
        max_jet_order: max_degree.max(defaults.max_jet_order),
    };
    let reports = s
        .degrees
        .iter()
        .map(|&d| validate_approx(signal, &kernel, d, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let csv = reports_to_csv(&reports)?;
    match a.output {
        Some(p) => write_atomic(&p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn labelled(path: &Path) -> Result<Vec<(SirenNetwork, usize)>> {
    read_manifest(path)?
        .into_iter()
        .map(|(p, label)| {
            let label = label
                .and_then(|l| l.parse().ok())
                .ok_or_else(|| Error::Config(format!("manifest line for {} lacks an integer label", p.display())))?;
            Ok((load_net(&p)?, label))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct ConvnetSettings {
    classes: usize,
    orders: Vec<usize>,
    filters: Vec<usize>,
    channels: Vec<usize>,
    lattice: usize,
    pool_grid: usize,
    coord_scale: f64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    augment: bool,
    shuffle_labels: bool,
    seed: u64,
}

fn cmd_convnet_train(ctx: &Context, a: ConvTrainArgs) -> Result<()> {
    let c = &ctx.config.convnet;
    let base = ConvNetSpec::two_layer(10);
    let list = |flag: &Option<String>, cfg: &Option<Vec<usize>>, what: &str, default: Vec<usize>| -> Result<Vec<usize>> {
        match flag {
            Some(f) => parse_list(f, what),
            None => Ok(cfg.clone().unwrap_or(default)),
        }
    };
    let train_defaults = ConvTrainConfig::default();
    let s = ConvnetSettings {
        classes: a.classes.or(c.classes).unwrap_or(base.classes),
        orders: list(&a.orders, &c.orders, "orders", base.layers.iter().map(|l| l.order).collect())?,
        filters: list(&a.filters, &c.filters, "filters", base.layers.iter().map(|l| l.filters).collect())?,
        channels: list(&a.channels, &c.channels, "channels", base.layers.iter().map(|l| l.out_channels).collect())?,
        lattice: a.lattice.or(c.lattice).unwrap_or(base.lattice),
        pool_grid: a.pool_grid.or(c.pool_grid).unwrap_or(base.pool_grid),
        coord_scale: a.coord_scale.or(c.coord_scale).unwrap_or(base.coord_scale),
        epochs: a.epochs.or(c.epochs).unwrap_or(train_defaults.epochs),
        batch_size: a.batch_size.or(c.batch_size).unwrap_or(train_defaults.batch_size),
        lr: a.lr.or(c.lr).unwrap_or(train_defaults.adam.lr),
        augment: a.augment || c.augment.unwrap_or(false),
        shuffle_labels: a.shuffle_labels,
        seed: ctx.seed,
    };
    if s.orders.len() != s.filters.len() || s.orders.len() != s.channels.len() {
        return Err(Error::Config("orders, filters and channels need one entry per layer".into()));
    }
    let mut train = labelled(&a.train)?;
    let test = match &a.test {
        Some(t) => labelled(t)?,
        None => Vec::new(),
    };
    let first = &train[0].0;
    let spec = ConvNetSpec {
        m: first.input_dim(),
        in_channels: first.output_dim(),
        layers: s
            .orders
            .iter()
            .zip(&s.filters)
            .zip(&s.channels)
            .map(|((&o, &f), &ch)| ConvLayerSpec::new(o, f, ch))
            .collect(),
        lattice: s.lattice,
        pool_grid: s.pool_grid,
        classes: s.classes,
        coord_scale: s.coord_scale,
        ..base
    };
    echo("convnet", &s);
    eprintln!("# normalization statistics are constants for coordinate jets and differentiated for parameter gradients");
    if s.shuffle_labels {
        use rand::seq::SliceRandom;
        let mut labels: Vec<usize> = train.iter().map(|p| p.1).collect();
        labels.shuffle(&mut SeedTree::new(s.seed).child(7).stream(0));
        for (p, l) in train.iter_mut().zip(labels) {
            p.1 = l;
        }
    }
    let cfg = ConvTrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        adam: AdamWConfig {
            lr: s.lr,
            ..Default::default()
        },
        seed: s.seed,
        augment: s.augment.then(AugmentConfig::default),
        engine: JetEngine::with_max_order(spec.total_order().max(JetEngine::default().max_order)),
    };
    let fit = train_convnet_observed(&train, &test, &spec, &cfg, &mut |e| {
        eprintln!(
            "epoch {},loss {:.6},train_acc {:.4},test_acc {:.4}",
            e.epoch, e.train_loss, e.train_acc, e.test_acc
        );
    })?;
    write_atomic(&a.output, &fit.net.save()?)?;
    if let Some(h) = &a.history {
        write_atomic(h, history_csv(&fit.history).as_bytes())?;
    }
    Ok(())
}

fn cmd_convnet_eval(_ctx: &Context, a: ConvEvalArgs) -> Result<()> {
    let net = ConvNet::load(&read(&a.params)?)?;
    let test = labelled(&a.test)?;
    let engine = JetEngine::with_max_order(net.spec().total_order().max(JetEngine::default().max_order));
    let inputs = test
        .iter()
        .map(|(n, _)| input_jets(net.spec(), &engine, n))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(|p| p.1).collect();
    println!("accuracy={:.4}", accuracy(&net, &inputs, &labels)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let r = load_signal(&a.reference)?.grid;
    let c = load_signal(&a.candidate)?.grid;
    let p = signal::psnr(&r, &c)?;
    if r.dims() == 2 {
        println!("psnr={p:.4} ssim={:.4}", signal::ssim(&r, &c)?);
    } else {
        println!("psnr={p:.4}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_resolutions() {
        assert_eq!(parse_list("3x64", "w").unwrap(), vec![64, 64, 64]);
        assert_eq!(parse_list("8, 16", "w").unwrap(), vec![8, 16]);
        assert!(parse_list("a,b", "w").is_err());
        assert_eq!(parse_resolution("32x48", 2).unwrap(), vec![32, 48]);
        assert!(parse_resolution("32", 2).is_err());
        assert_eq!(parse_coords("0.5,-0.25").unwrap(), vec![0.5, -0.25]);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let bad: std::result::Result<ConfigFile, _> = toml::from_str("[fit]\nstepz = 3\n");
        assert!(bad.is_err());
        let good: ConfigFile = toml::from_str("seed = 4\n[fit]\nsteps = 3\nhidden = [8, 8]\n").unwrap();
        assert_eq!(good.fit.steps, Some(3));
        assert_eq!(good.seed, Some(4));
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"abc");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x.bin"), b"abc").is_err());
    }

    #[test]
    fn exit_codes_split_numerical_failures() {
        assert_eq!(exit_code(&Error::Conditioning { degree: 3 }), 1);
        assert_eq!(exit_code(&Error::Divergence { step: 1, loss: f64::NAN }), 1);
        assert_eq!(exit_code(&Error::EmptyDataset), 2);
    }
}
