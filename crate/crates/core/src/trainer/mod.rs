//! Optimization loop, evaluation and experiment bookkeeping.

mod adam;
mod pca;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, LossMode, Mode, MoeMode, Model};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Label};
use crate::metrics::{self, MetricsReport, RocPoint, ScoreSet};
use crate::rng;
use crate::synthdata::{build_protocol, read_manifest, ManifestRow, ProtocolId, MANIFEST_FILE};
use crate::tensor::backward;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use pca::{project_features, Projection};

/// Images scored per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub protocol: ProtocolId,
    pub encoder: EncoderConfig,
    /// Add the block-averaged cosine distance to the loss.
    pub cosine_loss: bool,
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives the epoch shuffle.
    pub seed: u64,
    /// Operating point for ACER and ACC.
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            protocol: ProtocolId::P1,
            encoder: EncoderConfig::default(),
            cosine_loss: true,
            loss_mode: LossMode::PerClass,
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            threshold: metrics::DEFAULT_THRESHOLD,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format { what: "train config", detail: e.to_string() })
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(compact.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub l_clip: f64,
    /// Cosine term as added to the loss (0 when the cosine loss is off).
    pub l_mmoe: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub protocol: ProtocolId,
    pub moe: MoeMode,
    pub cosine_loss: bool,
    pub param_count: usize,
    pub train_size: usize,
    pub epochs: Vec<EpochLog>,
    /// Least-squares slope of the total loss over the last 20% of epochs is ≤ 0.
    pub final_trend_nonincreasing: bool,
    pub eval: Option<MetricsReport>,
}

/// Manifest rows with their decoded images.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub rows: Vec<ManifestRow>,
    pub images: Vec<GrayImage>,
}

impl LoadedSplit {
    pub fn load(root: &Path, rows: Vec<ManifestRow>) -> Result<Self> {
        let images = rows.iter().map(|r| GrayImage::read_pgm(&root.join(&r.path))).collect::<Result<_>>()?;
        Ok(LoadedSplit { rows, images })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence { epoch, step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Slope of an ordinary least-squares line through `ys` at x = 0, 1, ...
fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        num += (i as f64 - mx) * (y - my);
        den += (i as f64 - mx) * (i as f64 - mx);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// True when the total loss trends flat or down over the final 20% of epochs
/// (at least two epochs). Fewer than two epochs trivially pass.
pub fn final_trend_nonincreasing(log: &[EpochLog]) -> bool {
    if log.len() < 2 {
        return true;
    }
    let window = ((log.len() as f64 * 0.2).ceil() as usize).max(2);
    let ys: Vec<f64> = log[log.len() - window..].iter().map(|e| e.total).collect();
    slope(&ys) <= 1e-12
}

/// Minimizes `l_clip + l_mmoe` over `data` with Adam. `progress` sees each
/// finished epoch.
pub fn train(config: &TrainConfig, data: &LoadedSplit, progress: &mut dyn FnMut(&EpochLog)) -> Result<(Model, Vec<EpochLog>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut model = Model::init(&config.encoder)?;
    let mut state = AdamState::new(&model.params());
    let labels = data.labels();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, rng::key(&[0x5eed, epoch as u64])));
        let (mut l_clip, mut l_mmoe, mut total, mut steps) = (0.0, 0.0, 0.0, 0);
        for batch in order.chunks(config.batch_size) {
            let imgs: Vec<&GrayImage> = batch.iter().map(|&i| &data.images[i]).collect();
            let lab: Vec<Label> = batch.iter().map(|&i| labels[i]).collect();
            let keys: Vec<u64> = batch.iter().map(|&i| i as u64).collect();
            let patches = model.patch_batch(&imgs)?;
            let mode = Mode::Train { step: step as u64 };
            let bundle = model
                .batch_loss(&patches, &lab, &keys, mode, config.loss_mode, config.cosine_loss)
                .map_err(|e| diverged(epoch, step, e))?;
            let params = model.params();
            let grads = backward(&bundle.total).map_err(|e| diverged(epoch, step, e))?;
            let grads: Vec<Vec<f64>> = params.iter().map(|p| grads.wrt(p)).collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step, detail: "non-finite gradient".into() });
            }
            model.set_params(adam_step(&params, &grads, &mut state, &config.adam)?)?;

            let v = bundle.values();
            let w = batch.len() as f64;
            l_clip += v.l_clip * w;
            l_mmoe += v.l_mmoe * w;
            total += v.total * w;
            steps += 1;
            step += 1;
        }
        let n = data.len() as f64;
        let entry = EpochLog { epoch, steps, l_clip: l_clip / n, l_mmoe: l_mmoe / n, total: total / n };
        progress(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

/// Eval-mode scores, metrics and embeddings for every row of a split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub paths: Vec<String>,
    pub scores: ScoreSet,
    pub report: MetricsReport,
    pub roc: Vec<RocPoint>,
    pub embeddings: Vec<Vec<f64>>,
}

pub fn evaluate(model: &Model, data: &LoadedSplit, threshold: f64) -> Result<Evaluation> {
    let frozen = model.frozen();
    let mut scores = Vec::with_capacity(data.len());
    let mut embeddings = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(EVAL_BATCH) {
        let imgs: Vec<&GrayImage> = chunk.iter().collect();
        let (emb, s) = frozen.embed_and_score(&imgs)?;
        let d = emb.shape()[1];
        embeddings.extend(emb.data().chunks_exact(d).map(<[f64]>::to_vec));
        scores.extend(s);
    }
    let set = ScoreSet::new(scores, data.labels())?;
    let report = metrics::report(&set, threshold)?;
    let roc = metrics::roc(&set)?;
    Ok(Evaluation { paths: data.rows.iter().map(|r| r.path.clone()).collect(), scores: set, report, roc, embeddings })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

impl Evaluation {
    /// Writes `scores.csv`, `metrics.json`, `roc.csv` and, with at least three
    /// rows, `features.csv` (2-D principal-component projection of the embeddings).
    /// Returns a warning from the projection, if any.
    pub fn write(&self, dir: &Path) -> Result<Option<String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("scores.csv"), &metrics::scores_csv(&self.paths, &self.scores)?)?;
        write(&dir.join("metrics.json"), &to_pretty_json(&self.report))?;
        write(&dir.join("roc.csv"), &metrics::roc_csv(&self.roc))?;
        if self.embeddings.len() < 3 {
            return Ok(None);
        }
        let proj = project_features(&self.embeddings)?;
        let mut csv = String::from("path,label,pc1,pc2\n");
        for ((p, l), c) in self.paths.iter().zip(self.scores.labels()).zip(&proj.coords) {
            csv.push_str(&format!("{p},{},{},{}\n", l.as_str(), c[0], c[1]));
        }
        write(&dir.join("features.csv"), &csv)?;
        Ok(proj.warning)
    }
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub record: RunRecord,
    pub evaluation: Evaluation,
}

/// Loads the protocol split from a generated dataset, trains, evaluates on the
/// protocol's test rows, and writes `config.json`, `model.json` (or
/// `config.checkpoint`), `run.json` and the evaluation files into `run_dir`.
pub fn run_experiment(
    config: &TrainConfig,
    data_root: &Path,
    run_dir: &Path,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<RunOutcome> {
    config.validate()?;
    let manifest = read_manifest(&data_root.join(MANIFEST_FILE))?;
    let split = build_protocol(config.protocol, &manifest)?;
    let train_data = LoadedSplit::load(data_root, split.train)?;
    let test_data = LoadedSplit::load(data_root, split.test)?;

    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write(&run_dir.join("config.json"), &to_pretty_json(config))?;
    let (model, epochs) = train(config, &train_data, progress)?;
    let ckpt = config.checkpoint.clone().unwrap_or_else(|| run_dir.join("model.json"));
    model.save(&ckpt)?;
    let evaluation = evaluate(&model, &test_data, config.threshold)?;
    if let Some(w) = evaluation.write(run_dir)? {
        eprintln!("warning: {w}");
    }
    let record = RunRecord {
        config_hash: config.hash(),
        seed: config.seed,
        protocol: config.protocol,
        moe: config.encoder.moe,
        cosine_loss: config.cosine_loss,
        param_count: model.param_count(),
        train_size: train_data.len(),
        final_trend_nonincreasing: final_trend_nonincreasing(&epochs),
        epochs,
        eval: Some(evaluation.report.clone()),
    };
    write(&run_dir.join("run.json"), &to_pretty_json(&record))?;
    Ok(RunOutcome { model, record, evaluation })
}
