//! Tiny vision-encoder / language-decoder transformer.
//!
//! The encoder embeds non-overlapping image patches and runs pre-norm
//! self-attention blocks. The decoder consumes the instruction segment as
//! prefix context, attends causally to its own tokens and to the image tokens
//! through cross-attention, and predicts the next token.
//!
//! Incremental decoding reuses per-layer key/value caches; the same code path
//! with an empty cache is the teacher-forced training pass.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::codec::{
    self, instruction_segment, template, Role, Slot, TargetFormat, TokenId, TokenSequence,
    BBOX_OPEN, DIGIT_0, EOS, MAX_SEQ_LEN, NUM_DIGITS, PAD,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image shape {got:?} does not match config {want:?}")]
    ImageShape { got: Vec<usize>, want: Vec<usize> },
    #[error("prefix of {0} tokens leaves no room under the {MAX_SEQ_LEN}-token limit")]
    PrefixOverflow(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 96x64x3 input, patch 8, d=128, 2 encoder and 4 decoder layers, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            image_width: 96,
            image_height: 64,
            channels: 3,
            patch: 8,
            d_model: 128,
            enc_layers: 2,
            dec_layers: 4,
            heads: 4,
            vocab_size,
            max_len: MAX_SEQ_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.patch == 0
            || !self.image_width.is_multiple_of(self.patch)
            || !self.image_height.is_multiple_of(self.patch)
        {
            return err(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_width, self.image_height, self.patch
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.max_len != MAX_SEQ_LEN {
            return err(format!(
                "max_len must be {MAX_SEQ_LEN}, got {}",
                self.max_len
            ));
        }
        if self.vocab_size < codec::FIRST_WORD
            || self.channels == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
        {
            return err("vocab, channels and layer counts must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_width / self.patch) * (self.image_height / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("image_width", self.image_width),
            ("image_height", self.image_height),
            ("channels", self.channels),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ]
        .iter()
        .map(|(k, v)| (format!("model.{k}"), v.to_string()))
        .collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            map.get(&format!("model.{k}"))
                .ok_or_else(|| ModelError::Checkpoint(format!("missing model.{k}")))?
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad model.{k}")))
        };
        let cfg = ModelConfig {
            image_width: get("image_width")?,
            image_height: get("image_height")?,
            channels: get("channels")?,
            patch: get("patch")?,
            d_model: get("d_model")?,
            enc_layers: get("enc_layers")?,
            dec_layers: get("dec_layers")?,
            heads: get("heads")?,
            vocab_size: get("vocab_size")?,
            max_len: get("max_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named, ordered model parameters.
/// 2-D sine/cosine table over the patch grid: the first half of the channels
/// encodes the column, the second half the row.
fn grid_positions(cfg: &ModelConfig) -> Tensor {
    let d = cfg.d_model;
    let (gw, gh) = (cfg.image_width / cfg.patch, cfg.image_height / cfg.patch);
    let half = d / 2;
    let mut data = Vec::with_capacity(gw * gh * d);
    let enc = |out: &mut Vec<f64>, pos: usize, width: usize| {
        for i in 0..width {
            let freq = 1.0 / 100f64.powf((i / 2 * 2) as f64 / width as f64);
            let a = pos as f64 * freq;
            out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    };
    for y in 0..gh {
        for x in 0..gw {
            enc(&mut data, x, half);
            enc(&mut data, y, d - half);
        }
    }
    Tensor::new(vec![gw * gh, d], data).expect("finite table")
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Seeded random initialization for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let pdim = cfg.patch * cfg.patch * cfg.channels;
        let mut normal = |store: &mut ParamStore, name: String, shape: Vec<usize>, std: f64| {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            store.insert(name, Tensor::new(shape, data).expect("finite init"));
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let enc_res = fan(d) / (2.0 * cfg.enc_layers as f64).sqrt();
        let dec_res = fan(d) / (2.0 * cfg.dec_layers as f64).sqrt();

        normal(&mut store, "enc.patch".into(), vec![pdim, d], fan(pdim));
        store.insert("enc.pos".into(), grid_positions(cfg));
        for l in 0..cfg.enc_layers {
            let p = format!("enc.{l}");
            normal(&mut store, format!("{p}.attn.qkv"), vec![d, 3 * d], fan(d));
            normal(&mut store, format!("{p}.attn.out"), vec![d, d], enc_res);
            normal(&mut store, format!("{p}.mlp.in"), vec![d, 4 * d], fan(d));
            normal(
                &mut store,
                format!("{p}.mlp.out"),
                vec![4 * d, d],
                enc_res / 2.0,
            );
        }
        normal(&mut store, "dec.tok".into(), vec![cfg.vocab_size, d], 0.02);
        normal(&mut store, "dec.pos".into(), vec![cfg.max_len, d], 0.02);
        for l in 0..cfg.dec_layers {
            let p = format!("dec.{l}");
            normal(&mut store, format!("{p}.self.qkv"), vec![d, 3 * d], fan(d));
            normal(&mut store, format!("{p}.self.out"), vec![d, d], dec_res);
            normal(&mut store, format!("{p}.cross.q"), vec![d, d], fan(d));
            normal(&mut store, format!("{p}.cross.kv"), vec![d, 2 * d], fan(d));
            normal(&mut store, format!("{p}.cross.out"), vec![d, d], dec_res);
            normal(&mut store, format!("{p}.mlp.in"), vec![d, 4 * d], fan(d));
            normal(
                &mut store,
                format!("{p}.mlp.out"),
                vec![4 * d, d],
                dec_res / 2.0,
            );
        }
        normal(
            &mut store,
            "dec.head".into(),
            vec![d, cfg.vocab_size],
            fan(d),
        );

        let mut norms: Vec<String> = vec!["enc.ln".into(), "dec.ln".into()];
        for l in 0..cfg.enc_layers {
            norms.extend([format!("enc.{l}.ln1"), format!("enc.{l}.ln2")]);
        }
        for l in 0..cfg.dec_layers {
            norms.extend([
                format!("dec.{l}.ln1"),
                format!("dec.{l}.ln2"),
                format!("dec.{l}.ln3"),
            ]);
        }
        for n in norms {
            store.insert(format!("{n}.g"), Tensor::new(vec![d], vec![1.0; d])?);
            store.insert(format!("{n}.b"), Tensor::zeros(vec![d])?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Parameters registered as leaves of one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t)
                } else {
                    let mut t = t.clone();
                    t.requires_grad = false;
                    g.leaf(t)
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Binds existing graph variables, paired with `names` in order.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Bound {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Image tokens plus per-layer cross-attention keys (transposed) and values, split by head.
pub struct Memory {
    pub tokens: Var,
    num_tokens: usize,
    /// `[layer][head]` -> (`[dh, N]`, `[N, dh]`)
    kv: Vec<Vec<(Var, Var)>>,
}

/// Per-layer self-attention keys and values for tokens already decoded, each `[B, S, d]`.
#[derive(Default)]
pub struct KvCache {
    len: usize,
    batch: usize,
    layers: Vec<(Var, Var)>,
}

impl KvCache {
    pub fn new() -> Self {
        KvCache::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Repeats a batch-1 cache `batch` times.
    pub fn expand(&mut self, g: &mut Graph, batch: usize) -> Result<()> {
        if self.batch != 1 || batch == 1 || self.layers.is_empty() {
            return Ok(());
        }
        for (k, v) in self.layers.iter_mut() {
            *k = g.concat(&vec![*k; batch], 0)?;
            *v = g.concat(&vec![*v; batch], 0)?;
        }
        self.batch = batch;
        Ok(())
    }
}

fn linear(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    Ok(g.matmul(x, w)?)
}

fn norm(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
    Ok(g.layer_norm(x, p.var(&format!("{name}.g")), p.var(&format!("{name}.b")))?)
}

fn mlp(g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, p.var(&format!("{prefix}.mlp.in")))?;
    let h = g.gelu(h)?;
    linear(g, h, p.var(&format!("{prefix}.mlp.out")))
}

/// Multi-head attention over a batch: `q` is `[B, T, d]`, `k`/`v` are `[B, S, d]`.
/// Returns `[B*T, d]`.
fn batched_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let (b, t, d) = (qs[0], qs[1], qs[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 2, h * dh, (h + 1) * dh)?;
        let kh = g.slice(k, 2, h * dh, (h + 1) * dh)?;
        let vh = g.slice(v, 2, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, scale)?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 2)?
    };
    Ok(g.reshape(cat, vec![b * t, d])?)
}

/// Patch-embeds `image` (`H x W x C`, values in `[0,1]`) and encodes it to `[N_x, d]`.
pub fn encode_image(g: &mut Graph, p: &Bound, cfg: &ModelConfig, image: &Tensor) -> Result<Var> {
    let want = vec![cfg.image_height, cfg.image_width, cfg.channels];
    if image.shape() != want.as_slice() {
        return Err(ModelError::ImageShape {
            got: image.shape().to_vec(),
            want,
        });
    }
    let (w, c, ps) = (cfg.image_width, cfg.channels, cfg.patch);
    let (gw, gh) = (cfg.image_width / ps, cfg.image_height / ps);
    let pdim = ps * ps * c;
    let px = image.data();
    let mut patches = Vec::with_capacity(gw * gh * pdim);
    for py in 0..gh {
        for pxi in 0..gw {
            for dy in 0..ps {
                let row = (py * ps + dy) * w;
                for dx in 0..ps {
                    let base = (row + pxi * ps + dx) * c;
                    patches.extend(px[base..base + c].iter().map(|v| v - 0.5));
                }
            }
        }
    }
    let n = gw * gh;
    let patches = g.constant(vec![n, pdim], patches)?;
    let x = linear(g, patches, p.var("enc.patch"))?;
    let mut x = g.add(x, p.var("enc.pos"))?;
    let d = cfg.d_model;
    for l in 0..cfg.enc_layers {
        let pre = format!("enc.{l}");
        let h = norm(g, p, x, &format!("{pre}.ln1"))?;
        let qkv = linear(g, h, p.var(&format!("{pre}.attn.qkv")))?;
        let qkv = g.reshape(qkv, vec![1, n, 3 * d])?;
        let q = g.slice(qkv, 2, 0, d)?;
        let k = g.slice(qkv, 2, d, 2 * d)?;
        let v = g.slice(qkv, 2, 2 * d, 3 * d)?;
        let a = batched_attention(g, q, k, v, cfg.heads, None)?;
        let a = linear(g, a, p.var(&format!("{pre}.attn.out")))?;
        x = g.add(x, a)?;
        let h = norm(g, p, x, &format!("{pre}.ln2"))?;
        let m = mlp(g, p, h, &pre)?;
        x = g.add(x, m)?;
    }
    norm(g, p, x, "enc.ln")
}

/// Encodes the image and precomputes every decoder layer's cross-attention keys and values.
pub fn build_memory(g: &mut Graph, p: &Bound, cfg: &ModelConfig, image: &Tensor) -> Result<Memory> {
    let tokens = encode_image(g, p, cfg, image)?;
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    let mut kv = Vec::with_capacity(cfg.dec_layers);
    for l in 0..cfg.dec_layers {
        let both = linear(g, tokens, p.var(&format!("dec.{l}.cross.kv")))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let k = g.slice(both, 1, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(k)?;
            let v = g.slice(both, 1, d + h * dh, d + (h + 1) * dh)?;
            heads.push((kt, v));
        }
        kv.push(heads);
    }
    Ok(Memory {
        tokens,
        num_tokens: cfg.num_patches(),
        kv,
    })
}

/// Runs the decoder over `rows` (B sequences of equal length T) that follow the
/// tokens already in `cache`, extending the cache. Returns logits `[B*T, V]`.
pub fn decode(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    mem: &Memory,
    rows: &[Vec<TokenId>],
    cache: &mut KvCache,
) -> Result<Var> {
    let b = rows.len();
    let t = rows.first().map_or(0, Vec::len);
    if b == 0 || t == 0 || rows.iter().any(|r| r.len() != t) {
        return Err(ModelError::Config(
            "decode needs a non-empty rectangular batch".into(),
        ));
    }
    if !cache.is_empty() && cache.batch != b {
        return Err(ModelError::Config(format!(
            "cache holds batch {} but {b} rows were given",
            cache.batch
        )));
    }
    let start = cache.len;
    if start + t > cfg.max_len {
        return Err(ModelError::PrefixOverflow(start + t));
    }
    let (d, heads, dh) = (cfg.d_model, cfg.heads, cfg.head_dim());
    let ids: Vec<TokenId> = rows.iter().flatten().copied().collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(ModelError::Config(format!("token id {bad} outside vocab")));
    }
    let positions: Vec<usize> = (0..b).flat_map(|_| start..start + t).collect();
    let tok = g.gather(p.var("dec.tok"), ids)?;
    let pos = g.gather(p.var("dec.pos"), positions)?;
    let mut x = g.add(tok, pos)?;

    let s_total = start + t;
    let mut mask = Vec::with_capacity(b * t * s_total);
    for _ in 0..b {
        for i in 0..t {
            mask.extend((0..s_total).map(|s| if s <= start + i { 0.0 } else { MASKED }));
        }
    }
    let mask = g.constant(vec![b, t, s_total], mask)?;

    let fresh = cache.layers.is_empty();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.dec_layers {
        let pre = format!("dec.{l}");
        let h = norm(g, p, x, &format!("{pre}.ln1"))?;
        let qkv = linear(g, h, p.var(&format!("{pre}.self.qkv")))?;
        let qkv = g.reshape(qkv, vec![b, t, 3 * d])?;
        let q = g.slice(qkv, 2, 0, d)?;
        let mut k = g.slice(qkv, 2, d, 2 * d)?;
        let mut v = g.slice(qkv, 2, 2 * d, 3 * d)?;
        if !fresh {
            let (ck, cv) = cache.layers[l];
            k = g.concat(&[ck, k], 1)?;
            v = g.concat(&[cv, v], 1)?;
            cache.layers[l] = (k, v);
        } else {
            cache.layers.push((k, v));
        }
        let a = batched_attention(g, q, k, v, heads, Some(mask))?;
        let a = linear(g, a, p.var(&format!("{pre}.self.out")))?;
        x = g.add(x, a)?;

        let h = norm(g, p, x, &format!("{pre}.ln2"))?;
        let q = linear(g, h, p.var(&format!("{pre}.cross.q")))?;
        let mut outs = Vec::with_capacity(heads);
        for (hi, &(kt, vh)) in mem.kv[l].iter().enumerate() {
            let qh = g.slice(q, 1, hi * dh, (hi + 1) * dh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s)?;
            outs.push(g.matmul(a, vh)?);
        }
        let c = if heads == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        let c = linear(g, c, p.var(&format!("{pre}.cross.out")))?;
        x = g.add(x, c)?;

        let h = norm(g, p, x, &format!("{pre}.ln3"))?;
        let m = mlp(g, p, h, &pre)?;
        x = g.add(x, m)?;
    }
    cache.len = s_total;
    cache.batch = b;
    let x = norm(g, p, x, "dec.ln")?;
    linear(g, x, p.var("dec.head"))
}

impl fmt::Debug for Memory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Memory({} image tokens)", self.num_tokens)
    }
}

/// Next-token logits after `prefix`, computed with a fresh graph.
pub fn decode_logits(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    if prefix.is_empty() || prefix.len() >= cfg.max_len {
        return Err(ModelError::PrefixOverflow(prefix.len()));
    }
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store, false);
    let mem = build_memory(&mut g, &p, cfg, image)?;
    let logits = decode(
        &mut g,
        &p,
        cfg,
        &mem,
        &[prefix.to_vec()],
        &mut KvCache::new(),
    )?;
    let v = cfg.vocab_size;
    let data = g.value(logits).data();
    Ok(data[data.len() - v..].to_vec())
}

/// A generated target segment with the log-probability of each emitted token.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedSequence {
    /// The instruction segment that conditioned the decode.
    pub prompt: TokenSequence,
    /// Tokens after the instruction segment, starting with `<predict_bbox>`.
    pub target: TokenSequence,
    /// Log-probability of each target token under the distribution it was emitted from.
    pub logprobs: Vec<f64>,
    /// True where the token was dictated by the template rather than chosen by the model.
    pub forced: Vec<bool>,
    /// Full per-position log-probability vectors, when requested.
    pub distributions: Option<Vec<Vec<f64>>>,
}

impl DecodedSequence {
    /// Instruction segment followed by the target.
    pub fn full_ids(&self) -> Vec<TokenId> {
        let mut ids = self.prompt.ids().to_vec();
        ids.extend_from_slice(self.target.ids());
        ids
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - lz).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from a log-probability vector by inverse CDF.
pub fn sample_index(logp: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total mass: take the last index with mass
    logp.iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(logp.len() - 1)
}

fn last_rows(g: &Graph, logits: Var, b: usize, v: usize) -> Vec<Vec<f64>> {
    let data = g.value(logits).data();
    let t = data.len() / (b * v);
    (0..b)
        .map(|r| data[((r + 1) * t - 1) * v..(r + 1) * t * v].to_vec())
        .collect()
}

fn all_rows(g: &Graph, logits: Var, v: usize) -> Vec<Vec<f64>> {
    g.value(logits)
        .data()
        .chunks(v)
        .map(<[f64]>::to_vec)
        .collect()
}

/// Keeps the logits of every decode call so the log-probability of each
/// emitted token can be read back as a tape variable.
struct Recorder {
    enabled: bool,
    chunks: Vec<Var>,
    // per sequence: (chunk, row within chunk, token, digit-restricted)
    picks: Vec<Vec<(usize, usize, TokenId, bool)>>,
}

impl Recorder {
    fn new(enabled: bool, batch: usize) -> Self {
        Recorder {
            enabled,
            chunks: Vec::new(),
            picks: vec![Vec::new(); batch],
        }
    }

    fn chunk(&mut self, logits: Var) -> usize {
        if self.enabled {
            self.chunks.push(logits);
        }
        self.chunks.len().saturating_sub(1)
    }

    fn pick(&mut self, seq: usize, chunk: usize, row: usize, tok: TokenId, digit: bool) {
        if self.enabled {
            self.picks[seq].push((chunk, row, tok, digit));
        }
    }

    fn finish(self, g: &mut Graph, v: usize) -> Result<Option<Vec<Var>>> {
        if !self.enabled {
            return Ok(None);
        }
        let any_digit = self.picks.iter().flatten().any(|p| p.3);
        let mut parts = Vec::new();
        let mut full_off = Vec::new();
        let mut digit_off = Vec::new();
        let mut off = 0;
        for &c in &self.chunks {
            let rows = g.shape(c)[0];
            let lsm = g.log_softmax(c)?;
            parts.push(g.reshape(lsm, vec![rows * v, 1])?);
            full_off.push(off);
            off += rows * v;
        }
        if any_digit {
            for &c in &self.chunks {
                let rows = g.shape(c)[0];
                let d = g.slice(c, 1, DIGIT_0, DIGIT_0 + NUM_DIGITS)?;
                let d = g.log_softmax(d)?;
                parts.push(g.reshape(d, vec![rows * NUM_DIGITS, 1])?);
                digit_off.push(off);
                off += rows * NUM_DIGITS;
            }
        }
        let table = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };
        self.picks
            .iter()
            .map(|seq| {
                let idx = seq
                    .iter()
                    .map(|&(c, row, tok, digit)| {
                        if digit {
                            digit_off[c] + row * NUM_DIGITS + (tok - DIGIT_0)
                        } else {
                            full_off[c] + row * v + tok
                        }
                    })
                    .collect();
                Ok(g.gather(table, idx)?)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// Decoding policy for [`Decoder::run`].
#[derive(Clone, Copy, Debug)]
enum Policy {
    Greedy,
    Sample,
}

/// Autoregressive decoding against an already-built image memory.
pub struct Decoder<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Bound,
    pub memory: &'a Memory,
    pub keep_distributions: bool,
}

impl<'a> Decoder<'a> {
    /// Free-running decode of `batch` sequences after the instruction and a
    /// forced `<predict_bbox>`; stops at `<eos>` or the length limit.
    fn run_free(
        &self,
        g: &mut Graph,
        prompt: &TokenSequence,
        batch: usize,
        policy: Policy,
        record: bool,
        rng: &mut impl Rng,
    ) -> Result<(Vec<DecodedSequence>, Option<Vec<Var>>)> {
        let v = self.cfg.vocab_size;
        let limit = self.cfg.max_len;
        let mut rec = Recorder::new(record, batch);
        if prompt.len() + 1 >= limit {
            return Err(ModelError::PrefixOverflow(prompt.len() + 1));
        }
        let mut cache = KvCache::new();
        let mut first = prompt.ids().to_vec();
        first.push(BBOX_OPEN);
        let logits = decode(g, self.params, self.cfg, self.memory, &[first], &mut cache)?;
        let c0 = rec.chunk(logits);
        let rows = all_rows(g, logits, v);
        let n0 = rows.len();
        for r in 0..batch {
            rec.pick(r, c0, n0 - 2, BBOX_OPEN, false);
        }
        let mut last_chunk = c0;
        let mut last_row: Vec<usize> = vec![n0 - 1; batch];
        let lp_open = log_softmax_row(&rows[rows.len() - 2])[BBOX_OPEN];
        let mut next = vec![rows[rows.len() - 1].clone(); batch];
        cache.expand(g, batch)?;

        let mut out: Vec<DecodedSequence> = (0..batch)
            .map(|_| DecodedSequence {
                prompt: prompt.clone(),
                target: TokenSequence::default(),
                logprobs: vec![lp_open],
                forced: vec![true],
                distributions: self
                    .keep_distributions
                    .then(|| vec![log_softmax_row(&rows[rows.len() - 2])]),
            })
            .collect();
        let mut ids: Vec<Vec<TokenId>> = vec![vec![BBOX_OPEN]; batch];
        let mut done = vec![false; batch];
        let mut len = prompt.len() + 1;
        while len < limit && done.iter().any(|d| !d) {
            let mut feed = Vec::with_capacity(batch);
            for r in 0..batch {
                if done[r] {
                    feed.push(vec![PAD]);
                    continue;
                }
                let lp = log_softmax_row(&next[r]);
                let tok = match policy {
                    Policy::Greedy => argmax(&next[r]),
                    Policy::Sample => sample_index(&lp, rng),
                };
                ids[r].push(tok);
                rec.pick(r, last_chunk, last_row[r], tok, false);
                out[r].logprobs.push(lp[tok]);
                out[r].forced.push(false);
                if let Some(dist) = out[r].distributions.as_mut() {
                    dist.push(lp);
                }
                done[r] = tok == EOS;
                feed.push(vec![tok]);
            }
            len += 1;
            if len >= limit || done.iter().all(|&d| d) {
                break;
            }
            let logits = decode(g, self.params, self.cfg, self.memory, &feed, &mut cache)?;
            last_chunk = rec.chunk(logits);
            last_row = (0..batch).collect();
            next = last_rows(g, logits, batch, v);
        }
        for (seq, ids) in out.iter_mut().zip(ids) {
            let digits =
                codec::digits_for(self.cfg.image_width as u32, self.cfg.image_height as u32);
            let format = if codec::parse_point(&ids, digits).is_ok() {
                TargetFormat::Point
            } else {
                TargetFormat::Box
            };
            let roles = codec::infer_roles(&ids, format, digits);
            seq.target =
                TokenSequence::new(ids, roles).map_err(|e| ModelError::Config(e.to_string()))?;
        }
        let logps = rec.finish(g, v)?;
        Ok((out, logps))
    }

    /// Decodes `batch` sequences following the target template: prompt tokens are
    /// forced and every value slot is sampled from the digit-restricted distribution.
    fn run_forced(
        &self,
        g: &mut Graph,
        prompt: &TokenSequence,
        format: TargetFormat,
        digits: usize,
        batch: usize,
        record: bool,
        rng: &mut impl Rng,
    ) -> Result<(Vec<DecodedSequence>, Option<Vec<Var>>)> {
        let v = self.cfg.vocab_size;
        let slots = template(format, digits);
        let mut rec = Recorder::new(record, batch);
        if prompt.len() + slots.len() > self.cfg.max_len {
            return Err(ModelError::PrefixOverflow(prompt.len() + slots.len()));
        }
        let mut out: Vec<DecodedSequence> = (0..batch)
            .map(|_| DecodedSequence {
                prompt: prompt.clone(),
                target: TokenSequence::default(),
                logprobs: Vec::with_capacity(slots.len()),
                forced: Vec::with_capacity(slots.len()),
                distributions: self.keep_distributions.then(Vec::new),
            })
            .collect();
        let mut ids: Vec<Vec<TokenId>> = vec![Vec::with_capacity(slots.len()); batch];
        let mut cache = KvCache::new();

        // `pending` holds fixed tokens whose logits rows are still needed.
        let mut pending: Vec<TokenId> = prompt.ids().to_vec();
        // Number of trailing rows in `pending` that predict template slots.
        let mut first_chunk = true;
        let mut slot = 0;
        while slot < slots.len() {
            // extend the chunk with fixed slots up to the next value slot
            let chunk_start = slot;
            while slot < slots.len() {
                if let Slot::Fixed(id, _) = slots[slot] {
                    if slot + 1 < slots.len() {
                        pending.push(id);
                    }
                    slot += 1;
                } else {
                    break;
                }
            }
            // rows of the last (slot - chunk_start + 1) fed tokens predict slots chunk_start..=slot
            let n_pred = slot - chunk_start + usize::from(slot < slots.len());
            let rows_batch: Vec<Vec<TokenId>> = if first_chunk {
                vec![pending.clone()]
            } else {
                (0..batch)
                    .map(|r| {
                        let mut row = vec![*ids[r].last().unwrap()];
                        row.extend_from_slice(&pending);
                        row
                    })
                    .collect()
            };
            let logits = decode(
                g,
                self.params,
                self.cfg,
                self.memory,
                &rows_batch,
                &mut cache,
            )?;
            let c = rec.chunk(logits);
            let data = g.value(logits).data().to_vec();
            let b_rows = rows_batch.len();
            let t = rows_batch[0].len();
            if first_chunk {
                cache.expand(g, batch)?;
            }
            for r in 0..batch {
                let br = r.min(b_rows - 1);
                for j in 0..n_pred {
                    let row_idx = br * t + t - n_pred + j;
                    let lp = log_softmax_row(&data[row_idx * v..(row_idx + 1) * v]);
                    let s = chunk_start + j;
                    let (tok, lpt) = match slots[s] {
                        Slot::Fixed(id, _) => (id, lp[id]),
                        Slot::Value { .. } => {
                            let digit_lp = log_softmax_row(
                                &data[row_idx * v + DIGIT_0..row_idx * v + DIGIT_0 + NUM_DIGITS],
                            );
                            let dgt = sample_index(&digit_lp, rng);
                            (DIGIT_0 + dgt, digit_lp[dgt])
                        }
                    };
                    ids[r].push(tok);
                    rec.pick(r, c, row_idx, tok, matches!(slots[s], Slot::Value { .. }));
                    out[r].logprobs.push(lpt);
                    out[r].forced.push(matches!(slots[s], Slot::Fixed(..)));
                    if let Some(dist) = out[r].distributions.as_mut() {
                        dist.push(lp);
                    }
                }
            }
            pending.clear();
            first_chunk = false;
            if slot < slots.len() {
                slot += 1; // the value slot just sampled
            }
        }
        let roles: Vec<Role> = slots
            .iter()
            .map(|s| match s {
                Slot::Fixed(_, r) => *r,
                Slot::Value { .. } => Role::CoordValue,
            })
            .collect();
        for (seq, ids) in out.iter_mut().zip(ids) {
            seq.target = TokenSequence::new(ids, roles.clone())
                .map_err(|e| ModelError::Config(e.to_string()))?;
        }
        let logps = rec.finish(g, v)?;
        Ok((out, logps))
    }
}

/// Options for stochastic decoding.
#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub k: usize,
    pub force_structural: bool,
    pub format: TargetFormat,
    pub digits: usize,
}

/// Argmax decoding within an existing graph.
pub fn greedy_in(
    g: &mut Graph,
    params: &Bound,
    cfg: &ModelConfig,
    memory: &Memory,
    instruction: &[TokenId],
) -> Result<DecodedSequence> {
    let prompt = instruction_segment(instruction).map_err(|e| ModelError::Config(e.to_string()))?;
    let dec = Decoder {
        cfg,
        params,
        memory,
        keep_distributions: false,
    };
    // greedy never touches the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(dec
        .run_free(g, &prompt, 1, Policy::Greedy, false, &mut rng)?
        .0
        .remove(0))
}

/// Draws `opts.k` sequences within an existing graph.
pub fn sample_in(
    g: &mut Graph,
    params: &Bound,
    cfg: &ModelConfig,
    memory: &Memory,
    instruction: &[TokenId],
    opts: SampleOptions,
    rng: &mut impl Rng,
) -> Result<Vec<DecodedSequence>> {
    if opts.k == 0 {
        return Err(ModelError::Config("k must be at least 1".into()));
    }
    let prompt = instruction_segment(instruction).map_err(|e| ModelError::Config(e.to_string()))?;
    let dec = Decoder {
        cfg,
        params,
        memory,
        keep_distributions: false,
    };
    Ok(sample_with(&dec, g, &prompt, opts, false, rng)?.0)
}

fn sample_with(
    dec: &Decoder,
    g: &mut Graph,
    prompt: &TokenSequence,
    opts: SampleOptions,
    record: bool,
    rng: &mut impl Rng,
) -> Result<(Vec<DecodedSequence>, Option<Vec<Var>>)> {
    if opts.force_structural {
        dec.run_forced(g, prompt, opts.format, opts.digits, opts.k, record, rng)
    } else {
        dec.run_free(g, prompt, opts.k, Policy::Sample, record, rng)
    }
}

/// Like [`sample_in`], also returning each sequence's target log-probabilities
/// as an `[n, 1]` variable on the tape. Value slots use the digit-restricted
/// distribution when structure is forced.
pub fn sample_on_tape(
    g: &mut Graph,
    params: &Bound,
    cfg: &ModelConfig,
    memory: &Memory,
    instruction: &[TokenId],
    opts: SampleOptions,
    rng: &mut impl Rng,
) -> Result<(Vec<DecodedSequence>, Vec<Var>)> {
    if opts.k == 0 {
        return Err(ModelError::Config("k must be at least 1".into()));
    }
    let prompt = instruction_segment(instruction).map_err(|e| ModelError::Config(e.to_string()))?;
    let dec = Decoder {
        cfg,
        params,
        memory,
        keep_distributions: false,
    };
    let (seqs, logps) = sample_with(&dec, g, &prompt, opts, true, rng)?;
    Ok((seqs, logps.expect("recording was enabled")))
}

/// Greedy decode of one image/instruction pair.
pub fn greedy_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    instruction: &[TokenId],
) -> Result<DecodedSequence> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store, false);
    let mem = build_memory(&mut g, &p, cfg, image)?;
    greedy_in(&mut g, &p, cfg, &mem, instruction)
}

/// Samples `opts.k` independent sequences from the model's per-step softmax.
pub fn sample_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    instruction: &[TokenId],
    opts: SampleOptions,
    rng: &mut impl Rng,
) -> Result<Vec<DecodedSequence>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store, false);
    let mem = build_memory(&mut g, &p, cfg, image)?;
    sample_in(&mut g, &p, cfg, &mem, instruction, opts, rng)
}

/// Like [`sample_decode`] but keeps each position's full log-probability vector.
pub fn sample_decode_with_distributions(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    instruction: &[TokenId],
    opts: SampleOptions,
    rng: &mut impl Rng,
) -> Result<Vec<DecodedSequence>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store, false);
    let mem = build_memory(&mut g, &p, cfg, image)?;
    let prompt = instruction_segment(instruction).map_err(|e| ModelError::Config(e.to_string()))?;
    let dec = Decoder {
        cfg,
        params: &p,
        memory: &mem,
        keep_distributions: true,
    };
    Ok(sample_with(&dec, &mut g, &prompt, opts, false, rng)?.0)
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 8] = b"RUIGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: header (magic, version, key=value metadata) followed by
/// named little-endian f64 tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(cfg: &ModelConfig, store: &ParamStore) -> Self {
        Checkpoint {
            meta: cfg.to_pairs().into_iter().collect(),
            tensors: store.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Model config and the non-optimizer tensors.
    pub fn model(&self) -> Result<(ModelConfig, ParamStore)> {
        let cfg = ModelConfig::from_map(&self.meta)?;
        let mut store = ParamStore::new();
        for (k, v) in &self.tensors {
            if !k.starts_with("optim.") {
                let mut t = v.clone();
                t.grad = None;
                t.requires_grad = false;
                store.insert(k.clone(), t);
            }
        }
        let expected = ParamStore::init(&cfg, 0)?;
        for (name, t) in expected.iter() {
            match store.get(name) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if store.len() != expected.len() {
            return Err(ModelError::Checkpoint("unexpected extra parameters".into()));
        }
        Ok((cfg, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let corrupt = |m: &str| ModelError::Checkpoint(m.to_string());
        fn take<'b>(r: &mut &'b [u8], n: usize) -> Result<&'b [u8]> {
            if r.len() < n {
                return Err(ModelError::Checkpoint("truncated file".into()));
            }
            let (head, tail) = r.split_at(n);
            *r = tail;
            Ok(head)
        }
        let u32_at = |r: &mut &[u8]| -> Result<u32> {
            Ok(u32::from_le_bytes(take(r, 4)?.try_into().unwrap()))
        };
        if take(&mut r, 8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32_at(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = u32_at(&mut r)? as usize;
        let meta_text = std::str::from_utf8(take(&mut r, meta_len)?)
            .map_err(|_| corrupt("metadata is not utf-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt("bad metadata line"))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = u32_at(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32_at(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| corrupt("tensor name is not utf-8"))?
                .to_string();
            let rank = u32_at(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut r, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(
                &mut r,
                n.checked_mul(8)
                    .ok_or_else(|| corrupt("tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(ModelError::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
