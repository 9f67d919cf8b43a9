//! Command implementations behind the `ruig` binary: run configuration,
//! dataset generation, training, evaluation reports, overlays and ablations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, parse_box, parse_point, BBox, Variant, Vocab};
use crate::geometry::{acc_hit, prediction_iou, Point, Prediction};
use crate::kv;
use crate::model::{greedy_decode, Checkpoint, ModelConfig, ParamStore};
use crate::objectives::{Baseline, LossWeights};
use crate::synthgen::{
    self, gen_split, label_pools, read_dataset, write_dataset, Dataset, GenSpec, GroundingSample,
};
use crate::trainer::{
    OutputDir, StepRecord, TrainConfig, TrainError, TrainItem, TrainLog, Trainer,
};

/// Failures grouped by the process exit status they map to.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Data(e.to_string())
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => AppError::Numeric(e.to_string()),
            TrainError::Config(m) => AppError::Usage(m),
            other => AppError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;

/// Everything a training run needs besides the data: model shape, optimizer
/// and objective settings, plus the seeds and extra arms used by ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub k_sweep: Vec<usize>,
    pub arms: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_model: 128,
            enc_layers: 2,
            dec_layers: 4,
            heads: 4,
            patch: 8,
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            k_sweep: Vec::new(),
            arms: ARMS.iter().map(|a| a.name.to_string()).collect(),
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| ()))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Flat `key=value` text; omitted keys keep defaults, unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let entries = kv::parse(text).map_err(|e| AppError::Usage(format!("config: {e}")))?;
        for e in entries {
            let v = e.value.as_str();
            let bad = || {
                AppError::Usage(format!(
                    "config line {}: invalid value `{v}` for `{}`",
                    e.line, e.key
                ))
            };
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            let t = &mut c.train;
            match e.key.as_str() {
                "d_model" => c.d_model = num!(),
                "enc_layers" => c.enc_layers = num!(),
                "dec_layers" => c.dec_layers = num!(),
                "heads" => c.heads = num!(),
                "patch" => c.patch = num!(),
                "epochs" => t.epochs = num!(),
                "batch_size" => t.batch_size = num!(),
                "lr" => t.lr = num!(),
                "beta1" => t.beta1 = num!(),
                "beta2" => t.beta2 = num!(),
                "adam_eps" => t.adam_eps = num!(),
                "clip_norm" => t.clip_norm = num!(),
                "k" => t.k = num!(),
                "weights" => t.weights = v.parse().map_err(|_| bad())?,
                "variant" => t.variant = v.parse().map_err(|_| bad())?,
                "baseline" => t.baseline = v.parse().map_err(|_| bad())?,
                "force_structural" => t.force_structural = num!(),
                "seed" => t.seed = num!(),
                "checkpoint_every" => t.checkpoint_every = num!(),
                "seeds" => c.seeds = list(v).map_err(|_| bad())?,
                "k_sweep" => c.k_sweep = list(v).map_err(|_| bad())?,
                "arms" => {
                    let arms: Vec<String> = list(v).map_err(|_| bad())?;
                    if let Some(a) = arms.iter().find(|a| arm(a).is_none()) {
                        return Err(AppError::Usage(format!(
                            "config line {}: unknown arm `{a}`",
                            e.line
                        )));
                    }
                    c.arms = arms;
                }
                other => {
                    return Err(AppError::Usage(format!(
                        "config line {}: unknown key `{other}`",
                        e.line
                    )));
                }
            }
        }
        c.train
            .validate()
            .map_err(|e| AppError::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let baseline = match t.baseline {
            Baseline::None => "none",
            Baseline::Mean => "mean",
        };
        format!(
            "d_model={}\nenc_layers={}\ndec_layers={}\nheads={}\npatch={}\nepochs={}\nbatch_size={}\nlr={}\nbeta1={}\nbeta2={}\nadam_eps={}\nclip_norm={}\nk={}\nweights={},{}\nvariant={}\nbaseline={}\nforce_structural={}\nseed={}\ncheckpoint_every={}\nseeds={}\nk_sweep={}\narms={}\n",
            self.d_model,
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.patch,
            t.epochs,
            t.batch_size,
            t.lr,
            t.beta1,
            t.beta2,
            t.adam_eps,
            t.clip_norm,
            t.k,
            t.weights.ce,
            t.weights.pg,
            t.variant,
            baseline,
            t.force_structural,
            t.seed,
            t.checkpoint_every,
            join(&self.seeds),
            join(&self.k_sweep),
            self.arms.join(","),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn model_config(&self, spec: &GenSpec, vocab: &Vocab) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            image_width: spec.width as usize,
            image_height: spec.height as usize,
            channels: spec.channels as usize,
            patch: self.patch,
            d_model: self.d_model,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            vocab_size: vocab.len(),
            max_len: codec::MAX_SEQ_LEN,
        };
        cfg.validate().map_err(|e| AppError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Data

pub const SPLIT_FILE: &str = "split.txt";

/// Generates `out/train` and `out/test` plus a record of the label split.
pub fn gen_data(
    spec: &GenSpec,
    out: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<()> {
    let (train, test) = gen_split(spec, n_train, n_test, seed).map_err(data)?;
    write_dataset(&train, spec, &out.join("train")).map_err(data)?;
    write_dataset(&test, spec, &out.join("test")).map_err(data)?;
    let (a, b) = label_pools(spec, seed).map_err(data)?;
    let used = |s: &[GroundingSample]| -> std::collections::BTreeSet<String> {
        s.iter()
            .flat_map(|x| x.manifest.iter().map(|e| e.label.clone()))
            .collect()
    };
    let (ua, ub) = (used(&train), used(&test));
    let disjoint = ua.is_disjoint(&ub);
    if spec.regime == synthgen::Regime::Unseen && !disjoint {
        return Err(AppError::Data("unseen split shares label words".into()));
    }
    let text = format!(
        "seed={seed}\nregime={}\nn_train={n_train}\nn_test={n_test}\ntrain_pool={}\ntest_pool={}\nlabels_disjoint={disjoint}\n{}",
        spec.regime,
        a.join(","),
        b.join(","),
        spec.to_text()
    );
    fs::write(out.join(SPLIT_FILE), text).map_err(data)
}

/// Reads `root/split` when it exists, otherwise treats `root` as the dataset itself.
pub fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    let dir = root.join(split);
    let dir = if dir.join(synthgen::ANNOTATIONS).exists() {
        dir
    } else {
        root.to_path_buf()
    };
    let ds = read_dataset(&dir).map_err(data)?;
    if ds.samples.is_empty() {
        return Err(AppError::Data(format!(
            "{} holds no samples",
            dir.display()
        )));
    }
    Ok(ds)
}

pub fn to_items(ds: &Dataset, vocab: &Vocab) -> Result<Vec<TrainItem>> {
    ds.samples
        .iter()
        .map(|s| {
            Ok(TrainItem {
                image: s.image(),
                instruction: vocab
                    .encode_words(&s.instruction)
                    .map_err(|e| AppError::Data(format!("{}: {e}", s.id)))?,
                gt: s.gt,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training

pub const VOCAB_META: &str = "vocab.words";

/// Trains on `dataset/train` (or `dataset`), writing checkpoint, log, vocab and
/// config echo under `out`. Resumes from `out/checkpoint.bin` when `resume`.
pub fn train_run(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    resume: bool,
    quiet: bool,
) -> Result<TrainLog> {
    let ds = load_split(dataset, "train")?;
    let model = cfg.model_config(&ds.spec, &ds.vocab)?;
    let items = to_items(&ds, &ds.vocab)?;
    let od = OutputDir {
        dir: out.to_path_buf(),
    };
    fs::create_dir_all(out).map_err(data)?;
    let mut trainer = if resume && od.checkpoint().exists() {
        let ck = Checkpoint::load(&od.checkpoint()).map_err(data)?;
        let t = Trainer::resume(&ck, cfg.train.clone())?;
        if t.model != model {
            return Err(AppError::Usage(
                "checkpoint model shape differs from the config".into(),
            ));
        }
        t
    } else {
        Trainer::new(model, cfg.train.clone())?
    };
    ds.vocab.write_to(&out.join("vocab.txt")).map_err(data)?;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(data)?;
    let spe = trainer.steps_per_epoch(items.len());
    let mut epoch_acc: Vec<StepRecord> = Vec::new();
    // the checkpoint carries its vocabulary so grounding needs no other file
    trainer
        .meta
        .insert(VOCAB_META.into(), ds.vocab.words().join(" "));
    let log = trainer.run(&items, Some(&od), |r| {
        epoch_acc.push(r.clone());
        if !quiet && (r.step + 1) % spe == 0 {
            let n = epoch_acc.len() as f64;
            let mean = |f: fn(&StepRecord) -> f64| epoch_acc.iter().map(f).sum::<f64>() / n;
            eprintln!(
                "epoch {:>3}  ce {:.4}  pg {:+.4}  reward {:.3}  malformed {:.3}  lr {:.2e}",
                r.epoch,
                mean(|r| r.ce),
                mean(|r| r.pg),
                mean(|r| r.mean_reward),
                mean(|r| r.malformed_fraction),
                r.lr
            );
            epoch_acc.clear();
        }
    })?;
    Ok(log)
}

/// A trained model loaded for inference.
pub struct LoadedModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub meta: BTreeMap<String, String>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path).map_err(data)?;
    let (config, params) = ck.model().map_err(data)?;
    let vocab = match ck.meta.get(VOCAB_META) {
        Some(words) => Vocab::new(&words.split_whitespace().collect::<Vec<_>>()).map_err(data)?,
        None => {
            let p = path.with_file_name("vocab.txt");
            Vocab::read_from(&p).map_err(|e| AppError::Data(format!("{}: {e}", p.display())))?
        }
    };
    if vocab.len() != config.vocab_size {
        return Err(AppError::Data(
            "checkpoint vocabulary does not match the model".into(),
        ));
    }
    Ok(LoadedModel {
        config,
        params,
        vocab,
        meta: ck.meta,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

pub fn prediction_from(ids: &[codec::TokenId], digits: usize) -> Prediction {
    if let Ok(b) = parse_box(ids, digits) {
        Prediction::Box(b)
    } else if let Ok((x, y)) = parse_point(ids, digits) {
        Prediction::Point(Point::new(x, y))
    } else {
        Prediction::Malformed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub acc: f64,
    pub miou: f64,
    pub malformed_fraction: f64,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub prediction: Prediction,
    pub gt: [u32; 4],
    pub iou: f64,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(
        records: Vec<EvalRecord>,
        seed: u64,
        config: BTreeMap<String, String>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(AppError::Data("nothing to evaluate".into()));
        }
        let n = records.len();
        let hits = records.iter().filter(|r| r.hit).count();
        let malformed = records
            .iter()
            .filter(|r| r.prediction == Prediction::Malformed)
            .count();
        let iou_sum: f64 = records.iter().map(|r| r.iou).sum();
        Ok(EvalReport {
            summary: EvalSummary {
                n,
                acc: hits as f64 / n as f64,
                miou: iou_sum / n as f64,
                malformed_fraction: malformed as f64 / n as f64,
                seed,
                config,
            },
            records,
        })
    }

    /// Summary line followed by one line per sample.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.summary).expect("summary serializes");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let summary: EvalSummary = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| AppError::Data("empty report".into()))?,
        )
        .map_err(data)?;
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(data))
            .collect::<Result<Vec<EvalRecord>>>()?;
        Ok(EvalReport { summary, records })
    }
}

pub fn evaluate(model: &LoadedModel, samples: &[GroundingSample], seed: u64) -> Result<EvalReport> {
    let cfg = &model.config;
    if let Some(s) = samples
        .iter()
        .find(|s| (s.width as usize, s.height as usize) != (cfg.image_width, cfg.image_height))
    {
        return Err(AppError::Data(format!(
            "sample {} is {}x{} but the model expects {}x{}",
            s.id, s.width, s.height, cfg.image_width, cfg.image_height
        )));
    }
    let digits = codec::digits_for(cfg.image_width as u32, cfg.image_height as u32);
    let records = samples
        .par_iter()
        .map(|s| -> Result<EvalRecord> {
            let instr = model
                .vocab
                .encode_words(&s.instruction)
                .map_err(|e| AppError::Data(format!("{}: {e}", s.id)))?;
            let dec = greedy_decode(&model.params, cfg, &s.image(), &instr).map_err(data)?;
            let prediction = prediction_from(dec.target.ids(), digits);
            Ok(EvalRecord {
                id: s.id.clone(),
                prediction,
                gt: s.gt.as_array(),
                iou: prediction_iou(&prediction, &s.gt),
                hit: acc_hit(&prediction, &s.gt),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config: BTreeMap<String, String> = model
        .meta
        .iter()
        .filter(|(k, _)| k.as_str() != VOCAB_META)
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    EvalReport::from_records(records, seed, config)
}

pub fn eval_run(checkpoint: &Path, dataset: &Path, out: &Path, seed: u64) -> Result<EvalReport> {
    let model = load_model(checkpoint)?;
    let ds = load_split(dataset, "test")?;
    if ds.vocab != model.vocab {
        return Err(AppError::Data(
            "dataset vocabulary differs from the checkpoint's".into(),
        ));
    }
    let report = evaluate(&model, &ds.samples, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(data)?;
    }
    fs::write(out, report.to_jsonl()).map_err(data)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Overlays

pub const RED: [u8; 3] = [255, 0, 0];
pub const GREEN: [u8; 3] = [0, 255, 0];

/// Draws the 1-pixel outline of `b` (clipped to the image) onto `pixels`.
pub fn draw_box(pixels: &mut [u8], width: u32, height: u32, b: &BBox, color: [u8; 3]) {
    if !b.is_valid() || b.x_min >= width || b.y_min >= height {
        return;
    }
    let x1 = b.x_max.min(width - 1);
    let y1 = b.y_max.min(height - 1);
    let mut put = |x: u32, y: u32| {
        let i = (y as usize * width as usize + x as usize) * 3;
        pixels[i..i + 3].copy_from_slice(&color);
    };
    for x in b.x_min..=x1 {
        if b.y_min < height {
            put(x, b.y_min);
        }
        if b.y_max < height {
            put(x, b.y_max);
        }
    }
    for y in b.y_min..=y1 {
        put(b.x_min, y);
        if b.x_max < width {
            put(b.x_max, y);
        }
    }
}

/// Ground truth in green, prediction in red on top.
pub fn overlay(
    pixels: &[u8],
    width: u32,
    height: u32,
    prediction: &Prediction,
    gt: Option<&BBox>,
) -> Vec<u8> {
    let mut out = pixels.to_vec();
    if let Some(g) = gt {
        draw_box(&mut out, width, height, g, GREEN);
    }
    match prediction {
        Prediction::Box(b) => draw_box(&mut out, width, height, b, RED),
        Prediction::Point(p) => {
            let b = BBox::new(
                p.x.saturating_sub(1),
                p.y.saturating_sub(1),
                p.x + 1,
                p.y + 1,
            );
            draw_box(&mut out, width, height, &b, RED);
        }
        Prediction::Malformed => {}
    }
    out
}

pub struct Grounding {
    pub prediction: Prediction,
    pub tokens: String,
}

pub fn ground(
    model: &LoadedModel,
    image: &Path,
    instruction: &str,
    gt: Option<BBox>,
    out: Option<&Path>,
) -> Result<Grounding> {
    let (w, h, pixels) = synthgen::read_ppm(image).map_err(data)?;
    let cfg = &model.config;
    if (w as usize, h as usize) != (cfg.image_width, cfg.image_height) {
        return Err(AppError::Data(format!(
            "image is {w}x{h} but the model expects {}x{}",
            cfg.image_width, cfg.image_height
        )));
    }
    let instr = model.vocab.encode_words(instruction).map_err(data)?;
    let tensor = crate::tensor::Tensor::new(
        vec![h as usize, w as usize, 3],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .map_err(data)?;
    let dec = greedy_decode(&model.params, cfg, &tensor, &instr).map_err(data)?;
    let digits = codec::digits_for(w, h);
    let prediction = prediction_from(dec.target.ids(), digits);
    if let Some(path) = out {
        let drawn = overlay(&pixels, w, h, &prediction, gt.as_ref());
        synthgen::write_ppm(path, w, h, &drawn).map_err(data)?;
    }
    Ok(Grounding {
        prediction,
        tokens: model.vocab.decode(dec.target.ids()),
    })
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Copy, Debug)]
pub struct Arm {
    pub name: &'static str,
    pub variant: Variant,
    pub pg: bool,
}

pub const ARMS: [Arm; 6] = [
    Arm {
        name: "Base-CenterPoint",
        variant: Variant::CenterPoint,
        pg: false,
    },
    Arm {
        name: "Base-B-box",
        variant: Variant::BBox,
        pg: false,
    },
    Arm {
        name: "RUIG-CenterPoint",
        variant: Variant::CenterPoint,
        pg: true,
    },
    Arm {
        name: "RUIG-Vertices",
        variant: Variant::Vertices,
        pg: true,
    },
    Arm {
        name: "RUIG-B-box",
        variant: Variant::BBox,
        pg: true,
    },
    Arm {
        name: "RUIG-AllTokens",
        variant: Variant::AllTokens,
        pg: true,
    },
];

pub fn arm(name: &str) -> Option<Arm> {
    ARMS.iter().copied().find(|a| a.name == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub k: usize,
    pub acc: f64,
    pub miou: f64,
    pub malformed_fraction: f64,
}

/// The run config for one arm: variant and loss weights set, everything else kept.
pub fn arm_config(base: &RunConfig, a: &Arm, seed: u64, k: usize) -> RunConfig {
    let mut c = base.clone();
    c.train.variant = a.variant;
    c.train.weights = LossWeights {
        ce: 1.0,
        pg: if a.pg { 1.0 } else { 0.0 },
    };
    c.train.seed = seed;
    c.train.k = k;
    c
}

fn run_arm(
    base: &RunConfig,
    a: &Arm,
    seed: u64,
    k: usize,
    dataset: &Path,
    dir: &Path,
    quiet: bool,
) -> Result<AblationRow> {
    let cfg = arm_config(base, a, seed, k);
    if !quiet {
        eprintln!("== {} seed {seed} k {k}", a.name);
    }
    train_run(&cfg, dataset, dir, false, quiet)?;
    let report = eval_run(
        &dir.join("checkpoint.bin"),
        dataset,
        &dir.join("report.jsonl"),
        seed,
    )?;
    Ok(AblationRow {
        arm: a.name.to_string(),
        seed,
        k,
        acc: report.summary.acc,
        miou: report.summary.miou,
        malformed_fraction: report.summary.malformed_fraction,
    })
}

/// Trains and evaluates every configured arm for every seed, then the optional
/// k-sweep of RUIG-B-box on the first seed. Rows are appended to `out/ablation.jsonl`.
pub fn ablate(
    base: &RunConfig,
    dataset: &Path,
    out: &Path,
    quiet: bool,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out).map_err(data)?;
    let table = out.join("ablation.jsonl");
    let mut file = fs::File::create(&table).map_err(data)?;
    let mut rows = Vec::new();
    let mut jobs: Vec<(Arm, u64, usize, PathBuf)> = Vec::new();
    for &seed in &base.seeds {
        for name in &base.arms {
            let a = arm(name).ok_or_else(|| AppError::Usage(format!("unknown arm `{name}`")))?;
            jobs.push((
                a,
                seed,
                base.train.k,
                out.join(format!("{}-s{seed}", a.name)),
            ));
        }
    }
    if let Some(&seed) = base.seeds.first() {
        let a = arm("RUIG-B-box").expect("built-in arm");
        for &k in &base.k_sweep {
            jobs.push((a, seed, k, out.join(format!("{}-s{seed}-k{k}", a.name))));
        }
    }
    for (a, seed, k, dir) in jobs {
        let row = run_arm(base, &a, seed, k, dataset, &dir, quiet)?;
        writeln!(
            file,
            "{}",
            serde_json::to_string(&row).expect("row serializes")
        )
        .map_err(data)?;
        file.flush().map_err(data)?;
        rows.push(row);
    }
    if !quiet {
        eprintln!("{}", ablation_summary(&rows));
    }
    Ok(rows)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median acc / mIoU per arm (at the default k) as a plain-text table.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let mut by_arm: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_arm.entry((r.arm.clone(), r.k)).or_default();
        e.0.push(r.acc);
        e.1.push(r.miou);
    }
    let mut s = format!(
        "{:<18} {:>4} {:>6} {:>8} {:>8}\n",
        "arm", "k", "runs", "acc", "miou"
    );
    for ((a, k), (mut acc, mut miou)) in by_arm {
        s.push_str(&format!(
            "{:<18} {:>4} {:>6} {:>8.4} {:>8.4}\n",
            a,
            k,
            acc.len(),
            median(&mut acc),
            median(&mut miou)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_errors() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let err = RunConfig::from_text("epochs=3\nlearning_rate=1\n").unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("learning_rate"));
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::from_text("k=zero").is_err());
        assert!(RunConfig::from_text("arms=Base-B-box,Nope").is_err());
        let c = RunConfig::from_text("variant=alltokens\nweights=1,0\nseeds=4,5\n").unwrap();
        assert_eq!(c.train.variant, Variant::AllTokens);
        assert_eq!(c.train.weights.pg, 0.0);
        assert_eq!(c.seeds, vec![4, 5]);
    }

    #[test]
    fn overlay_draws_only_outlines() {
        let (w, h) = (20u32, 10u32);
        let px: Vec<u8> = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
        let pred = Prediction::Box(BBox::new(2, 2, 8, 6));
        let gt = BBox::new(5, 1, 15, 8);
        let out = overlay(&px, w, h, &pred, Some(&gt));
        let on_edge = |b: &BBox, x: u32, y: u32| {
            (x == b.x_min || x == b.x_max) && (b.y_min..=b.y_max).contains(&y)
                || (y == b.y_min || y == b.y_max) && (b.x_min..=b.x_max).contains(&x)
        };
        let pb = BBox::new(2, 2, 8, 6);
        for y in 0..h {
            for x in 0..w {
                let i = ((y * w + x) * 3) as usize;
                let got = [out[i], out[i + 1], out[i + 2]];
                if on_edge(&pb, x, y) {
                    assert_eq!(got, RED);
                } else if on_edge(&gt, x, y) {
                    assert_eq!(got, GREEN);
                } else {
                    assert_eq!(&out[i..i + 3], &px[i..i + 3]);
                }
            }
        }
    }

    #[test]
    fn report_consistency() {
        let rec = |id: &str, hit: bool, iou: f64| EvalRecord {
            id: id.into(),
            prediction: if hit {
                Prediction::Box(BBox::new(0, 0, 1, 1))
            } else {
                Prediction::Malformed
            },
            gt: [0, 0, 1, 1],
            iou,
            hit,
        };
        let r = EvalReport::from_records(
            vec![
                rec("a", true, 1.0),
                rec("b", false, 0.0),
                rec("c", true, 0.3),
            ],
            7,
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(r.summary.acc, 2.0 / 3.0);
        assert_eq!(r.summary.malformed_fraction, 1.0 / 3.0);
        let back = EvalReport::from_jsonl(&r.to_jsonl()).unwrap();
        assert_eq!(back, r);
        assert!(EvalReport::from_records(vec![], 0, BTreeMap::new()).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
    }
}
