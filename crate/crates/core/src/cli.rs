//! `mmoe` command line: data generation, training, evaluation, the ablation
//! and mask-rate studies, gradient checking and run summaries.
//!
//! Outputs land under `--out` (default `$MMOE_OUT`, else `mmoe-out`), one
//! directory per configuration hash. Failures print one JSON line on stderr:
//! `{"error":{"kind":..,"exit_code":..,"message":..}}`. Exit codes: 1 failed
//! gradient check, 2 bad input, 3 I/O, 4 numerical divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, LossMode, Mode, MoeMode, Model};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Label};
use crate::metrics;
use crate::moe::MaskConfig;
use crate::rng;
use crate::synthdata::{self, build_protocol, read_manifest, render_iris, DeviceId, ProtocolId, MANIFEST_FILE};
use crate::tensor::{grad_check, GradCheckOptions, GradReport};
use crate::trainer::{self, run_experiment, to_pretty_json, EpochLog, LoadedSplit, RunRecord, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "mmoe", version, about = "Masked mixture-of-experts iris anti-spoofing at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    GenerateData(GenerateArgs),
    /// Train one configuration on a protocol and evaluate it.
    Train(RunArgs),
    /// Score a protocol's test rows with a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Train vanilla, +S, +S+L, +S+M and +S+M+L.
    Ablate(RunArgs),
    /// Train the masked model under the four mask-rate sets.
    MaskSweep(RunArgs),
    /// Finite-difference check of the full model's gradients.
    GradCheck(GradCheckArgs),
    /// Summarize finished runs.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct OutArg {
    /// Output root.
    #[arg(long, env = "MMOE_OUT", default_value = "mmoe-out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Divide the full-size subset counts by this factor.
    #[arg(long, default_value_t = synthdata::DEFAULT_SCALE)]
    scale: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = synthdata::DEFAULT_IMAGE_SIZE)]
    size: usize,
    /// Write into this directory instead of `<out>/data-<hash>`.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TrainConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the shuffle, initialization and mask seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    moe: Option<String>,
    /// Comma-separated per-expert rates, or Rate_1 .. Rate_4.
    #[arg(long)]
    rates: Option<String>,
    /// Cosine agreement loss: on or off.
    #[arg(long)]
    cosine: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// per-class or per-sample.
    #[arg(long)]
    loss_mode: Option<String>,
    /// Dataset root (defaults to the directory `generate-data` writes with its defaults).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug, Clone)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "P1")]
    protocol: String,
    #[arg(long, default_value_t = metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug, Clone)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 2)]
    experts: usize,
    #[arg(long, default_value_t = 1)]
    slots: usize,
    #[arg(long, default_value = "masked")]
    moe: String,
    /// Defaults to 0 for the first expert and 0.25 for the rest.
    #[arg(long)]
    rates: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug, Clone)]
struct ReportArgs {
    /// Directory holding run directories (default `<out>/runs`).
    #[arg(long)]
    runs: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

/// Settings that determine a generated dataset.
#[derive(Serialize)]
struct DataSettings {
    seed: u64,
    scale: usize,
    size: usize,
}

impl DataSettings {
    fn default_dir(&self, out: &Path) -> PathBuf {
        out.join(format!("data-{}", short_hash(&serde_json::to_string(self).expect("serializes"))))
    }
}

fn default_data_dir(out: &Path) -> PathBuf {
    DataSettings { seed: 0, scale: synthdata::DEFAULT_SCALE, size: synthdata::DEFAULT_IMAGE_SIZE }.default_dir(out)
}

fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn emit(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("json"));
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_rates(s: &str) -> Result<Vec<f64>> {
    if let Some(k) = s.strip_prefix("Rate_").or_else(|| s.strip_prefix("rate")) {
        let k: usize = k.parse().map_err(|_| Error::Invalid(format!("unknown rate set `{s}`")))?;
        return Ok(MaskConfig::preset(k, 0)?.rates);
    }
    let rates = s
        .split(',')
        .map(|r| r.trim().parse::<f64>().map_err(|_| Error::Invalid(format!("bad mask rate `{r}`"))))
        .collect::<Result<Vec<_>>>()?;
    MaskConfig::new(rates.clone(), 0)?;
    Ok(rates)
}

fn parse_switch(s: &str) -> Result<bool> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Invalid(format!("expected on or off, got `{other}`"))),
    }
}

/// Config file (or defaults) with flag overrides applied.
fn resolve(args: &RunArgs) -> Result<TrainConfig> {
    let mut c = match &args.config {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        c.seed = s;
        c.encoder.init_seed = s;
        c.encoder.mask_seed = s;
    }
    if let Some(p) = &args.protocol {
        c.protocol = ProtocolId::parse(p)?;
    }
    if let Some(m) = &args.moe {
        c.encoder.moe = MoeMode::parse(m)?;
    }
    if let Some(r) = &args.rates {
        c.encoder.mask_rates = parse_rates(r)?;
    }
    if let Some(s) = &args.cosine {
        c.cosine_loss = parse_switch(s)?;
    }
    if let Some(t) = args.threshold {
        c.threshold = t;
    }
    if let Some(e) = args.epochs {
        c.epochs = e;
    }
    if let Some(b) = args.batch_size {
        c.batch_size = b;
    }
    if let Some(lr) = args.lr {
        c.adam.lr = lr;
    }
    if let Some(m) = &args.loss_mode {
        c.loss_mode = LossMode::parse(m)?;
    }
    c.validate()?;
    Ok(c)
}

fn data_dir(args_data: &Option<PathBuf>, out: &Path) -> PathBuf {
    args_data.clone().unwrap_or_else(|| default_data_dir(out))
}

fn progress(name: &str) -> impl FnMut(&EpochLog) + '_ {
    move |e: &EpochLog| {
        eprintln!(
            "[{name}] epoch {} steps {} l_clip {:.6} l_mmoe {:.6} total {:.6}",
            e.epoch, e.steps, e.l_clip, e.l_mmoe, e.total
        )
    }
}

/// Trains into `<out>/runs/<hash>`.
fn run_one(name: &str, config: &TrainConfig, data: &Path, out: &Path) -> Result<(PathBuf, RunRecord)> {
    let dir = out.join("runs").join(config.short_hash());
    let started = Instant::now();
    let outcome = run_experiment(config, data, &dir, &mut progress(name))?;
    eprintln!("[{name}] finished in {:.1}s -> {}", started.elapsed().as_secs_f64(), dir.display());
    Ok((dir, outcome.record))
}

fn cmd_generate(a: &GenerateArgs) -> Result<i32> {
    let settings = DataSettings { seed: a.seed, scale: a.scale, size: a.size };
    let dir = a.dir.clone().unwrap_or_else(|| settings.default_dir(&a.out.out));
    emit(&json!({"command": "generate-data", "config": settings, "dir": dir}));
    let specs = synthdata::scaled_subsets(a.scale)?;
    let rows = synthdata::generate_subsets(&specs, a.seed, a.size, &dir)?;
    write(&dir.join("subsets.json"), &to_pretty_json(&specs))?;
    emit(&json!({"dir": dir, "images": rows.len(), "manifest": dir.join(MANIFEST_FILE)}));
    Ok(0)
}

/// `dir` is reported relative to `out` so summaries do not depend on the root.
fn summary_line(name: &str, dir: &Path, out: &Path, r: &RunRecord) -> serde_json::Value {
    json!({
        "name": name,
        "config_hash": r.config_hash,
        "run_dir": dir.strip_prefix(out).unwrap_or(dir),
        "final_l_mmoe": r.epochs.last().map(|e| e.l_mmoe),
        "final_total": r.epochs.last().map(|e| e.total),
        "metrics": r.eval,
    })
}

fn cmd_train(a: &RunArgs) -> Result<i32> {
    let c = resolve(a)?;
    emit(&json!({"command": "train", "config": c}));
    let (dir, record) = run_one("train", &c, &data_dir(&a.data, &a.out.out), &a.out.out)?;
    emit(&summary_line("train", &dir, &a.out.out, &record));
    Ok(0)
}

/// The five ablation configurations over a base config.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |moe: MoeMode, cosine: bool| {
        let mut c = base.clone();
        c.encoder.moe = moe;
        c.cosine_loss = cosine;
        c
    };
    vec![
        ("vanilla", with(MoeMode::Off, false)),
        ("+S", with(MoeMode::Soft, false)),
        ("+S+L", with(MoeMode::Soft, true)),
        ("+S+M", with(MoeMode::Masked, false)),
        ("+S+M+L", with(MoeMode::Masked, true)),
    ]
}

/// Masked + cosine loss under Rate_1 .. Rate_4.
pub fn sweep_configs(base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    (1..=4)
        .map(|k| {
            let mut c = base.clone();
            c.encoder.moe = MoeMode::Masked;
            c.cosine_loss = true;
            c.encoder.mask_rates = MaskConfig::preset(k, 0)?.rates;
            Ok((format!("Rate_{k}"), c))
        })
        .collect()
}

fn cmd_study(kind: &str, a: &RunArgs, configs: Vec<(String, TrainConfig)>, base: &TrainConfig) -> Result<i32> {
    emit(&json!({"command": kind, "config": base}));
    let data = data_dir(&a.data, &a.out.out);
    let mut lines = Vec::new();
    for (name, c) in &configs {
        let (dir, record) = run_one(name, c, &data, &a.out.out)?;
        lines.push(summary_line(name, &dir, &a.out.out, &record));
    }
    let dir = a.out.out.join(format!("{kind}-{}", base.short_hash()));
    write(&dir.join("summary.json"), &to_pretty_json(&lines))?;
    emit(&json!({"summary": dir.join("summary.json"), "runs": lines}));
    Ok(0)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let protocol = ProtocolId::parse(&a.protocol)?;
    let data = data_dir(&a.data, &a.out.out);
    let ckpt = std::fs::read(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
    let ckpt_hash: String = Sha256::digest(&ckpt).iter().map(|b| format!("{b:02x}")).collect();
    let settings = json!({"checkpoint_sha256": ckpt_hash, "protocol": protocol, "threshold": a.threshold, "data": data});
    emit(&json!({"command": "evaluate", "config": settings}));
    let text = String::from_utf8(ckpt).map_err(|e| Error::Format { what: "checkpoint", detail: e.to_string() })?;
    let model = Model::from_checkpoint_json(&text)?;
    let manifest = read_manifest(&data.join(MANIFEST_FILE))?;
    let split = build_protocol(protocol, &manifest)?;
    let test = LoadedSplit::load(&data, split.test)?;
    if let Some(img) = test.images.first() {
        if img.width != model.config().image_side {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint expects {}px images, data has {}px",
                model.config().image_side,
                img.width
            )));
        }
    }
    let ev = trainer::evaluate(&model, &test, a.threshold)?;
    let dir = a.out.out.join("eval").join(short_hash(&settings.to_string()));
    if let Some(w) = ev.write(&dir)? {
        eprintln!("warning: {w}");
    }
    emit(&json!({"eval_dir": dir, "metrics": ev.report}));
    Ok(0)
}

/// Encoder used by `grad-check`.
fn grad_check_config(a: &GradCheckArgs) -> Result<EncoderConfig> {
    let rates = match &a.rates {
        Some(r) => parse_rates(r)?,
        None => std::iter::once(0.0).chain(std::iter::repeat(0.25)).take(a.experts).collect(),
    };
    let c = EncoderConfig {
        image_side: a.side,
        patch_side: a.patch,
        dim: a.dim,
        blocks: a.blocks,
        heads: 2,
        mlp_hidden: 2 * a.dim,
        moe: MoeMode::parse(&a.moe)?,
        experts: a.experts,
        slots: a.slots,
        expert_hidden: 2 * a.dim,
        mask_rates: rates,
        mask_seed: a.seed,
        eval_masking: false,
        init_seed: a.seed,
    };
    c.validate()?;
    Ok(c)
}

/// Gradient check of the total loss over every parameter of a freshly
/// initialized model on two rendered images, masks fixed at step 0.
pub fn full_model_grad_check(config: &EncoderConfig, seed: u64, opts: GradCheckOptions) -> Result<GradReport> {
    let model = Model::init(config)?;
    let images: Vec<GrayImage> = [Label::Real, Label::Fake]
        .iter()
        .enumerate()
        .map(|(i, &l)| render_iris(rng::key(&[seed, i as u64]), l, 1, DeviceId::LG2200, config.image_side))
        .collect::<Result<_>>()?;
    let refs: Vec<&GrayImage> = images.iter().collect();
    let patches = model.patch_batch(&refs)?;
    let labels = [Label::Real, Label::Fake];
    let build = |ps: &[crate::tensor::Tensor]| {
        let mut m = model.clone();
        m.set_params(ps.to_vec())?;
        Ok(m.batch_loss(&patches, &labels, &[0, 1], Mode::Train { step: 0 }, LossMode::PerClass, true)?.total)
    };
    grad_check(build, &model.params(), opts)
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<i32> {
    let config = grad_check_config(a)?;
    emit(&json!({"command": "grad-check", "config": config, "eps": a.eps, "tolerance": a.tolerance}));
    let opts = GradCheckOptions { eps: a.eps, tolerance: a.tolerance, ..Default::default() };
    let report = full_model_grad_check(&config, a.seed, opts)?;
    let names: Vec<String> = Model::init(&config)?.named_params().into_iter().map(|(n, _)| n).collect();
    let per_param: Vec<serde_json::Value> = names
        .iter()
        .zip(&report.params)
        .map(|(n, p)| json!({"name": n, "max_rel_error": p.max_rel_error, "worst_index": p.worst_index}))
        .collect();
    let out = json!({
        "pass": report.pass,
        "max_rel_error": report.max_rel_error,
        "worst_param": names[report.worst.0],
        "worst_index": report.worst.1,
        "tolerance": report.tolerance,
        "params": per_param,
    });
    let hash = short_hash(&serde_json::to_string(&json!({"config": config, "eps": a.eps, "tolerance": a.tolerance})).expect("json"));
    let dir = a.out.out.join(format!("grad-check-{hash}"));
    write(&dir.join("report.json"), &to_pretty_json(&out))?;
    emit(&json!({"pass": report.pass, "max_rel_error": report.max_rel_error, "report": dir.join("report.json")}));
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let root = a.runs.clone().unwrap_or_else(|| a.out.out.join("runs"));
    emit(&json!({"command": "report", "config": {"runs": root}}));
    let entries = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("run.json").is_file()).collect();
    dirs.sort();
    let mut rows = Vec::new();
    for d in &dirs {
        let path = d.join("run.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let r: RunRecord =
            serde_json::from_str(&text).map_err(|e| Error::Format { what: "run record", detail: e.to_string() })?;
        let m = r.eval.as_ref();
        eprintln!(
            "{:<14} {:<6} {:<7} cos={:<5} acer={:.4} auc={:.4} eer={:.4} l_mmoe={:.5}",
            &r.config_hash[..12],
            r.protocol.to_string(),
            r.moe.as_str(),
            r.cosine_loss,
            m.map_or(f64::NAN, |m| m.acer),
            m.map_or(f64::NAN, |m| m.auc),
            m.map_or(f64::NAN, |m| m.eer),
            r.epochs.last().map_or(0.0, |e| e.l_mmoe),
        );
        rows.push(json!({
            "config_hash": r.config_hash,
            "protocol": r.protocol,
            "moe": r.moe,
            "cosine_loss": r.cosine_loss,
            "final_l_mmoe": r.epochs.last().map(|e| e.l_mmoe),
            "metrics": r.eval,
        }));
    }
    let hash = short_hash(&serde_json::to_string(&rows).expect("json"));
    let dir = a.out.out.join(format!("report-{hash}"));
    write(&dir.join("summary.json"), &to_pretty_json(&rows))?;
    emit(&json!({"summary": dir.join("summary.json"), "runs": rows.len()}));
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenerateData(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Ablate(a) => {
            let base = resolve(&a)?;
            let configs = ablation_configs(&base).into_iter().map(|(n, c)| (n.to_string(), c)).collect();
            cmd_study("ablate", &a, configs, &base)
        }
        Command::MaskSweep(a) => {
            let base = resolve(&a)?;
            let configs = sweep_configs(&base)?;
            cmd_study("mask-sweep", &a, configs, &base)
        }
        Command::GradCheck(a) => cmd_grad_check(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn error_line(kind: &str, code: i32, message: &str) {
    eprintln!("{}", json!({"error": {"kind": kind, "exit_code": code, "message": message}}));
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            error_line("usage", 2, e.to_string().lines().next().unwrap_or("bad arguments"));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            error_line(e.kind(), e.exit_code(), &e.to_string());
            e.exit_code()
        }
    }
}
