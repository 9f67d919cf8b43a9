//! Deterministic training loop: Adam, cosine annealing, global-norm clipping,
//! checkpointing with bit-exact resume, and a per-step JSONL log.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{BBox, TokenId, Variant};
use crate::model::{Checkpoint, ModelConfig, ModelError, ParamStore};
use crate::objectives::{
    combined_step_loss, Baseline, LossWeights, ObjectiveConfig, ObjectiveError, StepItem,
};
use crate::synthgen::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error("gradient for `{0}` does not match its parameter")]
    Shape(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("resume: {0}")]
    Resume(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub k: usize,
    pub weights: LossWeights,
    pub variant: Variant,
    pub baseline: Baseline,
    pub force_structural: bool,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            k: 64,
            weights: LossWeights::default(),
            variant: Variant::BBox,
            baseline: Baseline::None,
            force_structural: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 {
            return bad("epochs, batch_size and k must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive");
        }
        if self.weights.ce == 0.0 && self.weights.pg == 0.0 {
            return bad("at least one loss weight must be non-zero");
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            variant: self.variant,
            k: self.k,
            weights: self.weights,
            baseline: self.baseline,
            force_structural: self.force_structural,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = format!("{},{}", self.weights.ce, self.weights.pg);
        let baseline = match self.baseline {
            Baseline::None => "none",
            Baseline::Mean => "mean",
        };
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("k", self.k.to_string()),
            ("weights", w),
            ("variant", self.variant.name().to_string()),
            ("baseline", baseline.to_string()),
            ("force_structural", self.force_structural.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect()
    }
}

pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let s = (step as f64).min(total);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * s / total).cos())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(
    grads: &mut BTreeMap<String, Vec<f64>>,
    max_norm: f64,
) -> std::result::Result<f64, String> {
    if !(max_norm > 0.0) {
        return Err("max_norm must be positive".into());
    }
    let sq: f64 = grads.values().flatten().map(|g| g * g).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err("non-finite gradient".into());
    }
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    Ok(norm)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    h: AdamHyper,
) -> Result<()> {
    for (name, g) in grads {
        let n = params.get(name).map(Tensor::numel);
        if n != Some(g.len()) {
            return Err(TrainError::Shape(name.clone()));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        if m.len() != g.len() || v.len() != g.len() {
            return Err(TrainError::Shape(name.clone()));
        }
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let mh = *mi / bc1;
            let vh = *vi / bc2;
            *w -= h.lr * mh / (vh.sqrt() + h.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub pg: f64,
    pub total: f64,
    pub mean_reward: f64,
    pub malformed_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn epoch_means(&self, f: impl Fn(&StepRecord) -> f64) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = sums.entry(r.epoch).or_default();
            e.0 += f(r);
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(
                    serde_json::from_str(&line)
                        .map_err(|e| TrainError::Resume(format!("log: {e}")))?,
                );
            }
        }
        Ok(TrainLog { records })
    }
}

/// One preprocessed training example.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Tensor,
    pub instruction: Vec<TokenId>,
    pub gt: BBox,
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OutputDir { dir: dir.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: TrainLog,
    pub steps: u64,
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    /// Extra metadata stored in every checkpoint.
    pub meta: BTreeMap<String, String>,
}

const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";

impl Trainer {
    /// Fresh parameters initialized from the training seed.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&model, derive_seed(config.seed, 0x1417, 0))?;
        Ok(Trainer {
            model,
            config,
            params,
            adam: AdamState::default(),
            step: 0,
            meta: BTreeMap::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, &self.params);
        ck.meta.extend(self.config.to_pairs());
        ck.meta.extend(self.meta.clone());
        ck.meta.insert("train.step".into(), self.step.to_string());
        ck.meta
            .insert("train.adam_t".into(), self.adam.t.to_string());
        for (name, m) in &self.adam.m {
            let shape = self
                .params
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or(vec![m.len()]);
            ck.tensors.insert(
                format!("{OPT_M}{name}"),
                Tensor::new(shape.clone(), m.clone()).expect("finite"),
            );
            let v = &self.adam.v[name];
            ck.tensors.insert(
                format!("{OPT_V}{name}"),
                Tensor::new(shape, v.clone()).expect("finite"),
            );
        }
        ck
    }

    /// Restores parameters, optimizer moments and the step counter. The
    /// training config must match the one stored in the checkpoint.
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let (model, params) = ck.model()?;
        for (k, v) in config.to_pairs() {
            if k == "train.checkpoint_every" || k == "train.epochs" {
                continue;
            }
            match ck.meta.get(&k) {
                Some(have) if *have == v => {}
                have => {
                    return Err(TrainError::Resume(format!(
                        "{k} is {v} but the checkpoint has {}",
                        have.map_or("nothing", String::as_str)
                    )))
                }
            }
        }
        let num = |k: &str| -> Result<u64> {
            ck.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainError::Resume(format!("missing {k}")))
        };
        let mut adam = AdamState {
            t: num("train.adam_t")?,
            ..AdamState::default()
        };
        for (name, t) in &ck.tensors {
            if let Some(p) = name.strip_prefix(OPT_M) {
                adam.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix(OPT_V) {
                adam.v.insert(p.to_string(), t.data().to_vec());
            }
        }
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            params,
            adam,
            step: num("train.step")?,
            meta: BTreeMap::new(),
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.steps_per_epoch(n) * self.config.epochs as u64
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            0xE90C,
            epoch as u64,
        )));
        order
    }

    /// Runs one optimizer step on the batch scheduled for `self.step`.
    pub fn train_step(&mut self, data: &[TrainItem]) -> Result<StepRecord> {
        let n = data.len();
        let spe = self.steps_per_epoch(n);
        let total = self.total_steps(n);
        let epoch = (self.step / spe) as usize;
        let b = (self.step % spe) as usize;
        let order = self.epoch_order(epoch, n);
        let bs = self.config.batch_size;
        let idx = &order[b * bs..((b + 1) * bs).min(n)];
        let items: Vec<StepItem> = idx
            .iter()
            .map(|&i| StepItem {
                image: &data[i].image,
                instruction: &data[i].instruction,
                gt: data[i].gt,
            })
            .collect();
        let seeds: Vec<u64> = (0..items.len())
            .map(|j| {
                derive_seed(
                    self.config.seed,
                    0x5A3_91E_u64.wrapping_add(self.step),
                    j as u64,
                )
            })
            .collect();
        let (loss, mut grads) = match combined_step_loss(
            &self.params,
            &self.model,
            &items,
            &self.config.objective(),
            &seeds,
        ) {
            Err(ObjectiveError::Tensor(e)) => {
                return Err(TrainError::NonFinite {
                    step: self.step,
                    what: format!("value ({e})"),
                })
            }
            other => other?,
        };
        if !loss.total.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                what: "loss".into(),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm).map_err(|_| {
            TrainError::NonFinite {
                step: self.step,
                what: "gradient".into(),
            }
        })?;
        let lr = cosine_lr(self.step, total, self.config.lr);
        let hyper = AdamHyper {
            lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        };
        adam_step(&mut self.params, &grads, &mut self.adam, hyper)?;
        let rec = StepRecord {
            step: self.step,
            epoch,
            lr,
            ce: loss.ce,
            pg: loss.pg,
            total: loss.total,
            mean_reward: loss.mean_reward,
            malformed_fraction: loss.malformed_fraction,
            grad_norm,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Trains to completion, writing the log and checkpoints under `out` when given.
    /// `on_step` sees every record as it is produced.
    pub fn run(
        &mut self,
        data: &[TrainItem],
        out: Option<&OutputDir>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let total = self.total_steps(data.len());
        let mut log = TrainLog::default();
        let mut log_file = match out {
            Some(o) => {
                fs::create_dir_all(&o.dir)?;
                // keep records from before a resume point, drop anything later
                let kept: Vec<StepRecord> = if self.step > 0 && o.log().exists() {
                    TrainLog::read(&o.log())?
                        .records
                        .into_iter()
                        .filter(|r| r.step < self.step)
                        .collect()
                } else {
                    Vec::new()
                };
                let mut f = fs::File::create(o.log())?;
                for r in &kept {
                    writeln!(
                        f,
                        "{}",
                        serde_json::to_string(r).expect("record serializes")
                    )?;
                }
                log.records = kept;
                Some(f)
            }
            None => None,
        };
        while self.step < total {
            let rec = self.train_step(data)?;
            on_step(&rec);
            if let Some(f) = log_file.as_mut() {
                writeln!(
                    f,
                    "{}",
                    serde_json::to_string(&rec).expect("record serializes")
                )?;
            }
            log.records.push(rec);
            let every = self.config.checkpoint_every;
            if let Some(o) = out {
                if self.step == total || (every > 0 && self.step.is_multiple_of(every)) {
                    self.checkpoint().save(&o.checkpoint())?;
                }
            }
        }
        if let Some(f) = log_file.as_mut() {
            f.flush()?;
        }
        Ok(log)
    }
}

/// Convenience wrapper: fresh trainer, full run, final parameters.
pub fn train(
    model: ModelConfig,
    config: TrainConfig,
    data: &[TrainItem],
    out: Option<&OutputDir>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, config)?;
    let log = t.run(data, out, |_| {})?;
    Ok(TrainOutcome {
        params: t.params,
        log,
        steps: t.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn clipping() {
        let mut g: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![3.0, 4.0])].into();
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["a"][1] - 0.8).abs() < 1e-15);
        let mut small: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![0.3, 0.4])].into();
        clip_global_norm(&mut small, 1.0).unwrap();
        assert_eq!(small["a"], vec![0.3, 0.4]);
        let mut four: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![2.0; 4])].into();
        clip_global_norm(&mut four, 1.0).unwrap();
        assert_eq!(four["a"], vec![0.5; 4]);
        let mut bad: BTreeMap<String, Vec<f64>> = [("a".to_string(), vec![f64::NAN])].into();
        assert!(clip_global_norm(&mut bad, 1.0).is_err());
        assert!(clip_global_norm(&mut small, 0.0).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut p = ParamStore::new();
        p.insert("w".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let h = AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut st = AdamState::default();
        let zero: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![0.0, 0.0])].into();
        adam_step(&mut p, &zero, &mut st, h).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);

        let mut st = AdamState::default();
        let one: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![1.0, 1.0])].into();
        adam_step(&mut p, &one, &mut st, h).unwrap();
        // bias-corrected first step: m_hat = v_hat = 1, update = lr / (1 + eps)
        let oracle = 1e-4 / (1.0 + 1e-8);
        assert!((1.0 - p.get("w").unwrap().data()[0] - oracle).abs() < 1e-15);
        assert!((1.0 - p.get("w").unwrap().data()[0] - 1e-4).abs() < 1e-6);

        let wrong: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![1.0])].into();
        assert!(matches!(
            adam_step(&mut p, &wrong, &mut st, h),
            Err(TrainError::Shape(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            weights: LossWeights { ce: 0.0, pg: 0.0 },
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
