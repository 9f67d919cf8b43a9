//! Training objectives: masked token-wise cross-entropy and the policy-gradient
//! surrogate whose rewards are shared across the tokens of one coordinate group.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    self, build_target_sequence, template, BBox, Role, Slot, TargetFormat, TokenId, TokenSequence,
    Variant, DIGIT_0, NUM_DIGITS, PAD,
};
use crate::geometry::{center, iou, point_reward, Point};
use crate::model::{
    build_memory, decode, sample_on_tape, Bound, DecodedSequence, KvCache, Memory, ModelConfig,
    ModelError, ParamStore, SampleOptions,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
    #[error("every target position is masked")]
    AllMasked,
    #[error("policy gradient needs at least one sample")]
    NoSamples,
    #[error("{0}")]
    Invalid(String),
    #[error("decode space of {0} sequences exceeds the enumeration limit")]
    SpaceTooLarge(usize),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Mean negative log-likelihood of `target` under `logits` (`[M, V]`, row `i`
/// scoring `target[i]`), skipping instruction and padding positions.
pub fn ce_loss(g: &mut Graph, logits: Var, target: &TokenSequence) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != target.len() {
        return Err(ObjectiveError::Invalid(format!(
            "logits {shape:?} do not align with {} target tokens",
            target.len()
        )));
    }
    let picks: Vec<(usize, usize)> = target
        .ids()
        .iter()
        .zip(target.roles())
        .enumerate()
        .filter(|(_, (_, r))| !matches!(r, Role::Instruction | Role::Pad))
        .map(|(i, (&id, _))| (i, id))
        .collect();
    if picks.is_empty() {
        return Err(ObjectiveError::AllMasked);
    }
    let lsm = g.log_softmax(logits)?;
    let chosen = g.pick(lsm, &picks)?;
    let total = g.sum(chosen)?;
    Ok(g.scale(total, -1.0 / picks.len() as f64)?)
}

/// Which reward group a decoded position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    None,
    Box,
    Point1,
    Point2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardAssignment {
    pub rewards: Vec<f64>,
    pub groups: Vec<Group>,
    /// The sample's scalar reward (IoU for box targets, point reward for points).
    pub score: f64,
    pub malformed: bool,
}

impl RewardAssignment {
    fn zeros(n: usize, malformed: bool) -> Self {
        RewardAssignment {
            rewards: vec![0.0; n],
            groups: vec![Group::None; n],
            score: 0.0,
            malformed,
        }
    }
}

/// Parsed coordinate values of a target segment, or `None` when it does not follow `format`.
fn parse_values(ids: &[TokenId], format: TargetFormat, digits: usize) -> Option<Vec<u32>> {
    match format {
        TargetFormat::Box => codec::parse_box(ids, digits)
            .ok()
            .map(|b| b.as_array().to_vec()),
        TargetFormat::Point => codec::parse_point(ids, digits)
            .ok()
            .map(|(x, y)| vec![x, y]),
    }
}

pub fn assign_rewards(
    sample: &DecodedSequence,
    gt: &BBox,
    variant: Variant,
    width: u32,
    height: u32,
    digits: usize,
) -> RewardAssignment {
    let ids = sample.target.ids();
    let n = ids.len();
    let format = variant.format();
    let Some(values) = parse_values(ids, format, digits) else {
        return RewardAssignment::zeros(n, true);
    };
    let fields: Vec<Option<usize>> = template(format, digits)
        .iter()
        .map(|s| match s {
            Slot::Value { field, .. } => Some(*field),
            Slot::Fixed(..) => None,
        })
        .collect();
    let mut out = RewardAssignment::zeros(n, false);
    match variant {
        Variant::BBox | Variant::AllTokens => {
            let b = BBox::from_array([values[0], values[1], values[2], values[3]]);
            if !b.is_valid() {
                out.malformed = true;
                return out;
            }
            let r = iou(&b, gt).unwrap_or(0.0);
            out.score = r;
            for (i, f) in fields.iter().enumerate() {
                let covered = if variant == Variant::AllTokens {
                    sample.target.roles()[i] != Role::Pad
                } else {
                    f.is_some()
                };
                if covered {
                    out.rewards[i] = r;
                    out.groups[i] = Group::Box;
                }
            }
        }
        Variant::CenterPoint => {
            let c = center(gt);
            let r = point_reward(Point::new(values[0], values[1]), c, width, height);
            out.score = r;
            for (i, f) in fields.iter().enumerate() {
                if f.is_some() {
                    out.rewards[i] = r;
                    out.groups[i] = Group::Point1;
                }
            }
        }
        Variant::Vertices => {
            let r1 = point_reward(
                Point::new(values[0], values[1]),
                Point::new(gt.x_min, gt.y_min),
                width,
                height,
            );
            let r2 = point_reward(
                Point::new(values[2], values[3]),
                Point::new(gt.x_max, gt.y_max),
                width,
                height,
            );
            out.score = (r1 + r2) / 2.0;
            for (i, f) in fields.iter().enumerate() {
                match f {
                    Some(0 | 1) => {
                        out.rewards[i] = r1;
                        out.groups[i] = Group::Point1;
                    }
                    Some(_) => {
                        out.rewards[i] = r2;
                        out.groups[i] = Group::Point2;
                    }
                    None => {}
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    Mean,
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Baseline::None),
            "mean" => Ok(Baseline::Mean),
            other => Err(format!("unknown baseline `{other}` (expected none|mean)")),
        }
    }
}

/// Per-position reward weights after optional baseline subtraction.
pub fn adjusted_rewards(rewards: &[RewardAssignment], baseline: Baseline) -> Vec<Vec<f64>> {
    match baseline {
        Baseline::None => rewards.iter().map(|r| r.rewards.clone()).collect(),
        Baseline::Mean => {
            let k = rewards.len() as f64;
            let mut sums: BTreeMap<Group, f64> = BTreeMap::new();
            for r in rewards {
                let mut seen: Vec<Group> = Vec::new();
                for (&gr, &v) in r.groups.iter().zip(&r.rewards) {
                    if gr != Group::None && !seen.contains(&gr) {
                        seen.push(gr);
                        *sums.entry(gr).or_default() += v;
                    }
                }
            }
            rewards
                .iter()
                .map(|r| {
                    r.groups
                        .iter()
                        .zip(&r.rewards)
                        .map(|(gr, &v)| match sums.get(gr) {
                            Some(s) if *gr != Group::None => v - s / k,
                            _ => 0.0,
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// `-(1/k) Σ_k Σ_n r_{k,n} logP_{k,n}` where `logps[k]` is an `[n_k, 1]` column of
/// per-position log-probabilities and the rewards are constants.
pub fn pg_loss(
    g: &mut Graph,
    logps: &[Var],
    rewards: &[RewardAssignment],
    baseline: Baseline,
) -> Result<Var> {
    if logps.is_empty() {
        return Err(ObjectiveError::NoSamples);
    }
    if logps.len() != rewards.len() {
        return Err(ObjectiveError::Invalid(format!(
            "{} log-prob columns for {} reward assignments",
            logps.len(),
            rewards.len()
        )));
    }
    let weights = adjusted_rewards(rewards, baseline);
    let mut total: Option<Var> = None;
    for (&lp, w) in logps.iter().zip(weights) {
        if g.shape(lp) != [w.len(), 1] {
            return Err(ObjectiveError::Invalid(format!(
                "log-prob shape {:?} does not match {} rewards",
                g.shape(lp),
                w.len()
            )));
        }
        let wv = g.constant(vec![w.len(), 1], w)?;
        let term = g.mul(lp, wv)?;
        let term = g.sum(term)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(g.scale(total.expect("non-empty"), -1.0 / logps.len() as f64)?)
}

/// Relative weights of the two objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub pg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, pg: 1.0 }
    }
}

impl FromStr for LossWeights {
    type Err = String;

    /// Parses `ce,pg`, e.g. `1,0`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("weights `{s}` must be `ce,pg`"))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| format!("bad weight `{x}`"))
        };
        Ok(LossWeights {
            ce: parse(a)?,
            pg: parse(b)?,
        })
    }
}

/// Settings shared by every item of a training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub k: usize,
    pub weights: LossWeights,
    pub baseline: Baseline,
    pub force_structural: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            variant: Variant::BBox,
            k: 64,
            weights: LossWeights::default(),
            baseline: Baseline::None,
            force_structural: true,
        }
    }
}

/// One training example: image, instruction words (without delimiters) and target box.
#[derive(Clone, Copy, Debug)]
pub struct StepItem<'a> {
    pub image: &'a Tensor,
    pub instruction: &'a [TokenId],
    pub gt: BBox,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pg: f64,
    pub total: f64,
    pub mean_reward: f64,
    pub malformed_fraction: f64,
}

/// Loss terms of one item, built on `g` with parameters `p`.
pub struct ItemLoss {
    pub total: Var,
    pub ce: Option<Var>,
    pub pg: Option<Var>,
    pub samples: Vec<DecodedSequence>,
    pub rewards: Vec<RewardAssignment>,
}

/// Teacher-forced log-probabilities of already drawn samples, one `[n, 1]`
/// variable per sample. All samples share one batched decoder pass.
pub fn score_samples(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    mem: &Memory,
    samples: &[DecodedSequence],
    force_structural: bool,
) -> Result<Vec<Var>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let mut rows: Vec<Vec<TokenId>> = samples
        .iter()
        .map(|s| {
            let mut ids = s.full_ids();
            ids.pop();
            ids
        })
        .collect();
    let t = rows.iter().map(Vec::len).max().unwrap_or(0);
    for r in rows.iter_mut() {
        r.resize(t, PAD);
    }
    let logits = decode(g, p, cfg, mem, &rows, &mut KvCache::new())?;
    let v = cfg.vocab_size;
    let bt = rows.len() * t;
    let lsm = g.log_softmax(logits)?;
    let full = g.reshape(lsm, vec![bt * v, 1])?;
    let table = if force_structural {
        let dig = g.slice(logits, 1, DIGIT_0, DIGIT_0 + NUM_DIGITS)?;
        let dig = g.log_softmax(dig)?;
        let dig = g.reshape(dig, vec![bt * NUM_DIGITS, 1])?;
        g.concat(&[full, dig], 0)?
    } else {
        full
    };
    samples
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let base = j * t + s.prompt.len();
            let idx = s
                .target
                .ids()
                .iter()
                .enumerate()
                .map(|(i, &tok)| {
                    let row = base + i - 1;
                    if force_structural && !s.forced[i] {
                        bt * v + row * NUM_DIGITS + (tok - DIGIT_0)
                    } else {
                        row * v + tok
                    }
                })
                .collect();
            Ok(g.gather(table, idx)?)
        })
        .collect()
}

/// Builds the CE and policy-gradient terms for one item. Samples are drawn from
/// the current parameters and then re-scored on the tape so that the surrogate
/// differentiates through their log-probabilities.
pub fn item_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    item: &StepItem,
    obj: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<ItemLoss> {
    let digits = codec::digits_for(cfg.image_width as u32, cfg.image_height as u32);
    let format = obj.variant.format();
    let y = build_target_sequence(item.instruction, &item.gt, obj.variant, digits)?;
    let mem = build_memory(g, p, cfg, item.image)?;
    let use_pg = obj.weights.pg != 0.0;
    let use_ce = obj.weights.ce != 0.0;
    if !use_pg && !use_ce {
        return Err(ObjectiveError::Invalid("both loss weights are zero".into()));
    }
    let mut rewards = Vec::new();
    let (samples, pg) = if use_pg {
        let opts = SampleOptions {
            k: obj.k,
            force_structural: obj.force_structural,
            format,
            digits,
        };
        let (samples, logps) = sample_on_tape(g, p, cfg, &mem, item.instruction, opts, rng)?;
        for s in &samples {
            rewards.push(assign_rewards(
                s,
                &item.gt,
                obj.variant,
                cfg.image_width as u32,
                cfg.image_height as u32,
                digits,
            ));
        }
        let pg = pg_loss(g, &logps, &rewards, obj.baseline)?;
        (samples, Some(pg))
    } else {
        (Vec::new(), None)
    };

    let ce = if use_ce {
        let rows = vec![y.ids()[..y.len() - 1].to_vec()];
        let logits = decode(g, p, cfg, &mem, &rows, &mut KvCache::new())?;
        Some(ce_loss(g, logits, &y.tail(1))?)
    } else {
        None
    };

    let total = match (ce, pg) {
        (Some(c), Some(q)) => {
            let c = g.scale(c, obj.weights.ce)?;
            let q = g.scale(q, obj.weights.pg)?;
            g.add(c, q)?
        }
        (Some(c), None) => g.scale(c, obj.weights.ce)?,
        (None, Some(q)) => g.scale(q, obj.weights.pg)?,
        (None, None) => unreachable!(),
    };
    Ok(ItemLoss {
        total,
        ce,
        pg,
        samples,
        rewards,
    })
}

/// Mean loss over a batch and the gradient of that mean, keyed by parameter name.
/// Items run on independent tapes; `seeds[i]` drives item `i`'s sampling.
pub fn combined_step_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &[StepItem],
    obj: &ObjectiveConfig,
    seeds: &[u64],
) -> Result<(LossBreakdown, BTreeMap<String, Vec<f64>>)> {
    if batch.is_empty() || seeds.len() != batch.len() {
        return Err(ObjectiveError::Invalid(
            "batch and seed counts must match and be non-zero".into(),
        ));
    }
    if obj.k == 0 {
        return Err(ObjectiveError::Invalid("k must be at least 1".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let per_item: Vec<(LossBreakdown, Vec<(String, Vec<f64>)>)> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(item, &seed)| -> Result<_> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let p = Bound::new(&mut g, store, true);
            let loss = item_loss(&mut g, &p, cfg, item, obj, &mut rng)?;
            let read = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            let k = loss.rewards.len().max(1) as f64;
            let stats = LossBreakdown {
                ce: read(&g, loss.ce),
                pg: read(&g, loss.pg),
                total: g.value(loss.total).item(),
                mean_reward: loss.rewards.iter().map(|r| r.score).sum::<f64>() / k,
                malformed_fraction: loss.rewards.iter().filter(|r| r.malformed).count() as f64 / k,
            };
            let scaled = g.scale(loss.total, scale)?;
            let mut grads = g.backward(scaled)?;
            let named = p
                .iter()
                .map(|(name, &v)| (name.clone(), grads.take(v).unwrap_or_default()))
                .collect();
            Ok((stats, named))
        })
        .collect::<Result<_>>()?;

    let mut out = LossBreakdown::default();
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (stats, named) in per_item {
        out.ce += stats.ce * scale;
        out.pg += stats.pg * scale;
        out.total += stats.total * scale;
        out.mean_reward += stats.mean_reward * scale;
        out.malformed_fraction += stats.malformed_fraction * scale;
        for (name, gv) in named {
            match grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, gv);
                }
            }
        }
    }
    if !out.pg.is_finite() || !out.ce.is_finite() {
        return Err(ObjectiveError::Invalid("non-finite loss".into()));
    }
    Ok((out, grads))
}

/// A policy whose full output space can be listed, for exact expectations.
pub trait EnumerablePolicy {
    fn params(&self) -> Vec<Tensor>;
    fn space(&self) -> Vec<Vec<usize>>;
    fn reward(&self, seq: &[usize]) -> f64;
    /// Per-position log-probabilities of `seq` as an `[n, 1]` column.
    fn log_probs(
        &self,
        g: &mut Graph,
        params: &[Var],
        seq: &[usize],
    ) -> std::result::Result<Var, TensorError>;
}

pub const MAX_ENUMERATION: usize = 10_000;

/// `E[R]` and its gradient with respect to each parameter tensor, by enumeration.
pub fn exact_expectation(policy: &impl EnumerablePolicy) -> Result<(f64, Vec<Vec<f64>>)> {
    let space = policy.space();
    if space.len() > MAX_ENUMERATION {
        return Err(ObjectiveError::SpaceTooLarge(space.len()));
    }
    let mut g = Graph::new();
    let params: Vec<Var> = policy.params().iter().map(|t| g.param(t)).collect();
    let mut total: Option<Var> = None;
    for seq in &space {
        let lp = policy.log_probs(&mut g, &params, seq)?;
        let lp = g.sum(lp)?;
        let prob = g.exp(lp)?;
        let term = g.scale(prob, policy.reward(seq))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| ObjectiveError::Invalid("empty decode space".into()))?;
    let value = g.value(total).item();
    let mut grads = g.backward(total)?;
    let grads = params
        .iter()
        .map(|&v| grads.take(v).unwrap_or_default())
        .collect();
    Ok((value, grads))
}

/// Two-slot autoregressive tabular policy over `vocab` symbols. The first slot
/// has logits `theta1` (`[1, V]`), the second slot's logits are row `a` of
/// `theta2` (`[V, V]`). The reward is the 1-D IoU of the inclusive interval
/// `[a, b]` against `target`, zero when `a > b`.
#[derive(Clone, Debug)]
pub struct TabularToy {
    pub vocab: usize,
    pub theta1: Tensor,
    pub theta2: Tensor,
    pub target: (usize, usize),
}

impl TabularToy {
    pub fn random(vocab: usize, target: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect::<Vec<f64>>()
        };
        TabularToy {
            vocab,
            theta1: Tensor::new(vec![1, vocab], draw(vocab)).expect("finite"),
            theta2: Tensor::new(vec![vocab, vocab], draw(vocab * vocab)).expect("finite"),
            target,
        }
    }

    fn probs(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let v = self.vocab;
        let a = Self::draw(&Self::probs(self.theta1.data()), rng);
        let b = Self::draw(&Self::probs(&self.theta2.data()[a * v..(a + 1) * v]), rng);
        vec![a, b]
    }

    pub fn reward_assignment(&self, seq: &[usize]) -> RewardAssignment {
        let r = self.reward(seq);
        RewardAssignment {
            rewards: vec![r; seq.len()],
            groups: vec![Group::Box; seq.len()],
            score: r,
            malformed: false,
        }
    }
}

impl EnumerablePolicy for TabularToy {
    fn params(&self) -> Vec<Tensor> {
        vec![self.theta1.clone(), self.theta2.clone()]
    }

    fn space(&self) -> Vec<Vec<usize>> {
        (0..self.vocab)
            .flat_map(|a| (0..self.vocab).map(move |b| vec![a, b]))
            .collect()
    }

    fn reward(&self, seq: &[usize]) -> f64 {
        let (a, b) = (seq[0], seq[1]);
        if a > b {
            return 0.0;
        }
        let (lo, hi) = self.target;
        let inter = (b.min(hi) + 1).saturating_sub(a.max(lo));
        let union = (b - a + 1) + (hi - lo + 1) - inter;
        inter as f64 / union as f64
    }

    fn log_probs(
        &self,
        g: &mut Graph,
        params: &[Var],
        seq: &[usize],
    ) -> std::result::Result<Var, TensorError> {
        let l1 = g.log_softmax(params[0])?;
        let l2 = g.log_softmax(params[1])?;
        let a = g.pick(l1, &[(0, seq[0])])?;
        let b = g.pick(l2, &[(seq[0], seq[1])])?;
        g.concat(&[a, b], 0)
    }
}
