//! Procedural UI-like screenshots with templated instructions and exact
//! ground-truth boxes.
//!
//! Each screen holds a few non-overlapping solid rectangles on a light
//! background, every one stamped with a three-letter label drawn from a 5x7
//! bitmap font. Instructions refer to one element by label, by color, or by its
//! position relative to another element, and always have exactly one referent.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{BBox, Vocab};
use crate::kv;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 200;
const GAP: u32 = 2;
const BACKGROUND: [u8; 3] = [245, 245, 245];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("could not place {0} elements without overlap")]
    Placement(usize),
    #[error("label vocabulary of {words} words cannot be split into two pools of {need}")]
    VocabTooSmall { words: usize, need: usize },
    #[error("{0}")]
    Precondition(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("annotation schema version {0} is not supported (expected {SCHEMA_VERSION})")]
    Schema(u32),
}

pub type Result<T> = std::result::Result<T, SynthError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const LABEL_WORDS: [&str; 32] = [
    "add", "bag", "bed", "bus", "cab", "cap", "cup", "dog", "egg", "fan", "fig", "fox", "gem",
    "hat", "hen", "ink", "jar", "jet", "key", "kit", "log", "map", "mug", "net", "owl", "pen",
    "pig", "rug", "sun", "tag", "van", "web",
];

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 50, 47]),
    ("green", [60, 160, 60]),
    ("blue", [40, 90, 200]),
    ("orange", [240, 140, 20]),
    ("purple", [140, 70, 180]),
    ("teal", [20, 150, 150]),
    ("brown", [140, 90, 50]),
    ("gray", [120, 120, 120]),
];

pub const TEMPLATE_WORDS: [&str; 8] = [
    "click", "the", "box", "right", "left", "above", "below", "of",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Right,
    Left,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Right,
        Relation::Left,
        Relation::Above,
        Relation::Below,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Relation::Right => "right",
            Relation::Left => "left",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Whether `e` lies strictly beyond `anchor` in this direction while
    /// overlapping it on the other axis.
    pub fn holds(self, e: &BBox, anchor: &BBox) -> bool {
        let y_overlap = e.y_min <= anchor.y_max && anchor.y_min <= e.y_max;
        let x_overlap = e.x_min <= anchor.x_max && anchor.x_min <= e.x_max;
        match self {
            Relation::Right => e.x_min > anchor.x_max && y_overlap,
            Relation::Left => e.x_max < anchor.x_min && y_overlap,
            Relation::Above => e.y_max < anchor.y_min && x_overlap,
            Relation::Below => e.y_min > anchor.y_max && x_overlap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Seen,
    Unseen,
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "seen" => Ok(Regime::Seen),
            "unseen" => Ok(Regime::Unseen),
            other => Err(format!("unknown regime `{other}` (expected seen|unseen)")),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Seen => "seen",
            Regime::Unseen => "unseen",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub min_elements: usize,
    pub max_elements: usize,
    pub min_size: (u32, u32),
    pub max_size: (u32, u32),
    /// How many of [`LABEL_WORDS`] are in play.
    pub words: usize,
    /// How many of [`PALETTE`] are in play.
    pub colors: usize,
    /// Relative weights of the by-label, by-color and relational templates.
    pub template_mix: [f64; 3],
    pub regime: Regime,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            width: 96,
            height: 64,
            channels: 3,
            min_elements: 3,
            max_elements: 5,
            min_size: (20, 10),
            max_size: (34, 18),
            words: 24,
            colors: 8,
            template_mix: [0.4, 0.3, 0.3],
            regime: Regime::Seen,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.channels != 3 {
            return bad("only 3-channel images are supported");
        }
        if self.min_elements == 0 || self.min_elements > self.max_elements {
            return bad("element count range must satisfy 1 <= min <= max");
        }
        if self.min_size.0 < glyph_width(3) + 2 || self.min_size.1 < GLYPH_H + 2 {
            return bad("elements must be large enough to hold a label");
        }
        if self.min_size.0 > self.max_size.0 || self.min_size.1 > self.max_size.1 {
            return bad("element size range is inverted");
        }
        if self.max_size.0 > self.width || self.max_size.1 > self.height {
            return bad("elements cannot exceed the image");
        }
        if self.words < self.max_elements || self.words > LABEL_WORDS.len() {
            return bad("word count must cover max_elements and not exceed the built-in list");
        }
        if self.colors == 0 || self.colors > PALETTE.len() {
            return bad("color count out of range");
        }
        if self
            .template_mix
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
            || self.template_mix[0] <= 0.0
        {
            return bad("template weights must be non-negative with a positive by-label weight");
        }
        Ok(())
    }

    pub fn labels(&self) -> &'static [&'static str] {
        &LABEL_WORDS[..self.words]
    }

    pub fn palette(&self) -> &'static [(&'static str, [u8; 3])] {
        &PALETTE[..self.colors]
    }

    /// Every word an instruction can contain, in a fixed order.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
        words.extend(self.palette().iter().map(|(n, _)| *n));
        words.extend(self.labels());
        Vocab::new(&words).expect("built-in words are distinct")
    }

    pub fn to_text(&self) -> String {
        let mix = self
            .template_mix
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "width={}\nheight={}\nchannels={}\nmin_elements={}\nmax_elements={}\nmin_size={},{}\nmax_size={},{}\nwords={}\ncolors={}\ntemplate_mix={}\nregime={}\n",
            self.width,
            self.height,
            self.channels,
            self.min_elements,
            self.max_elements,
            self.min_size.0,
            self.min_size.1,
            self.max_size.0,
            self.max_size.1,
            self.words,
            self.colors,
            mix,
            self.regime
        )
    }

    /// Parses `key=value` lines; omitted keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = GenSpec::default();
        for entry in kv::parse(text).map_err(|e| SynthError::Spec(e.to_string()))? {
            let v = entry.value.as_str();
            let err = |what: &str| {
                SynthError::Spec(format!(
                    "line {}: {what} `{v}` for {}",
                    entry.line, entry.key
                ))
            };
            let num = || v.parse::<u64>().map_err(|_| err("bad number"));
            let pair = || -> Result<(u32, u32)> {
                let (a, b) = v.split_once(',').ok_or_else(|| err("expected w,h"))?;
                Ok((
                    a.trim().parse().map_err(|_| err("bad number"))?,
                    b.trim().parse().map_err(|_| err("bad number"))?,
                ))
            };
            match entry.key.as_str() {
                "width" => spec.width = num()? as u32,
                "height" => spec.height = num()? as u32,
                "channels" => spec.channels = num()? as u32,
                "min_elements" => spec.min_elements = num()? as usize,
                "max_elements" => spec.max_elements = num()? as usize,
                "min_size" => spec.min_size = pair()?,
                "max_size" => spec.max_size = pair()?,
                "words" => spec.words = num()? as usize,
                "colors" => spec.colors = num()? as usize,
                "template_mix" => {
                    let parts: Vec<f64> = v
                        .split(',')
                        .map(|p| p.trim().parse::<f64>().map_err(|_| err("bad weight")))
                        .collect::<Result<_>>()?;
                    spec.template_mix = parts
                        .try_into()
                        .map_err(|_| err("expected three weights"))?;
                }
                "regime" => spec.regime = v.parse().map_err(|_| err("bad regime"))?,
                _ => {
                    return Err(SynthError::Spec(format!(
                        "line {}: unknown key `{}`",
                        entry.line, entry.key
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Element {
    pub label: String,
    pub color: String,
    pub bbox: [u32; 4],
}

impl Element {
    pub fn bbox(&self) -> BBox {
        BBox::from_array(self.bbox)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    pub width: u32,
    pub height: u32,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    pub instruction: String,
    pub gt: BBox,
    pub manifest: Vec<Element>,
}

impl GroundingSample {
    /// `H x W x 3` tensor with values in `[0, 1]`.
    pub fn image(&self) -> Tensor {
        Tensor::new(
            vec![self.height as usize, self.width as usize, 3],
            self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        )
        .expect("finite pixels")
    }
}

// ---------------------------------------------------------------------------
// Glyphs

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

#[rustfmt::skip]
const FONT: [[u8; 7]; 26] = [
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // A
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
    [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
    [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
    [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
    [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
    [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
    [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
    [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
    [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
    [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
    [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
    [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111], // Z
];

fn glyph_width(chars: u32) -> u32 {
    chars * (GLYPH_W + 1) - 1
}

/// The lit pixels of `word` (letters only, case-insensitive) relative to its top-left corner.
pub fn glyph_pixels(word: &str) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for (i, ch) in word.chars().enumerate() {
        let Some(rows) = ch
            .to_ascii_uppercase()
            .is_ascii_uppercase()
            .then(|| FONT[(ch.to_ascii_uppercase() as u8 - b'A') as usize])
        else {
            continue;
        };
        let x0 = i as u32 * (GLYPH_W + 1);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - dx)) != 0 {
                    out.push((x0 + dx, dy as u32));
                }
            }
        }
    }
    out
}

fn text_color(fill: [u8; 3]) -> [u8; 3] {
    let luma = 0.299 * fill[0] as f64 + 0.587 * fill[1] as f64 + 0.114 * fill[2] as f64;
    if luma > 140.0 {
        [0, 0, 0]
    } else {
        [255, 255, 255]
    }
}

// ---------------------------------------------------------------------------
// Generation

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-item seed derived from a master seed and a stream/index pair.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

fn overlaps_with_gap(a: &BBox, b: &BBox) -> bool {
    a.x_min <= b.x_max + GAP
        && b.x_min <= a.x_max + GAP
        && a.y_min <= b.y_max + GAP
        && b.y_min <= a.y_max + GAP
}

fn render(spec: &GenSpec, manifest: &[Element]) -> Vec<u8> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut px: Vec<u8> = BACKGROUND.iter().copied().cycle().take(w * h * 3).collect();
    for el in manifest {
        let fill = spec
            .palette()
            .iter()
            .find(|(n, _)| *n == el.color)
            .map(|(_, c)| *c)
            .expect("manifest colors come from the palette");
        let b = el.bbox();
        for y in b.y_min..=b.y_max {
            for x in b.x_min..=b.x_max {
                let i = (y as usize * w + x as usize) * 3;
                px[i..i + 3].copy_from_slice(&fill);
            }
        }
        let tw = glyph_width(el.label.len() as u32);
        let ox = b.x_min + (b.width() - tw) / 2;
        let oy = b.y_min + (b.height() - GLYPH_H) / 2;
        let ink = text_color(fill);
        for (dx, dy) in glyph_pixels(&el.label) {
            let i = ((oy + dy) as usize * w + (ox + dx) as usize) * 3;
            px[i..i + 3].copy_from_slice(&ink);
        }
    }
    px
}

fn place(spec: &GenSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BBox>> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bw = rng.gen_range(spec.min_size.0..=spec.max_size.0);
            let bh = rng.gen_range(spec.min_size.1..=spec.max_size.1);
            let x = rng.gen_range(0..=spec.width - bw);
            let y = rng.gen_range(0..=spec.height - bh);
            let b = BBox::new(x, y, x + bw - 1, y + bh - 1);
            if boxes.iter().all(|o| !overlaps_with_gap(o, &b)) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement(n));
        }
    }
    Ok(boxes)
}

fn choose_instruction(
    spec: &GenSpec,
    manifest: &[Element],
    rng: &mut ChaCha8Rng,
) -> (String, usize) {
    let target = rng.gen_range(0..manifest.len());
    let el = &manifest[target];
    let total: f64 = spec.template_mix.iter().sum();
    let u = rng.gen::<f64>() * total;
    let kind = if u < spec.template_mix[0] {
        0
    } else if u < spec.template_mix[0] + spec.template_mix[1] {
        1
    } else {
        2
    };
    if kind == 1 && manifest.iter().filter(|e| e.color == el.color).count() == 1 {
        return (format!("click the {} box", el.color), target);
    }
    if kind == 2 {
        let tb = el.bbox();
        let mut options = Vec::new();
        for (ai, anchor) in manifest.iter().enumerate() {
            if ai == target {
                continue;
            }
            for rel in Relation::ALL {
                let ab = anchor.bbox();
                if rel.holds(&tb, &ab)
                    && manifest
                        .iter()
                        .enumerate()
                        .all(|(j, e)| j == target || !rel.holds(&e.bbox(), &ab))
                {
                    options.push((ai, rel));
                }
            }
        }
        if let Some(&(ai, rel)) = options.choose(rng) {
            return (
                format!("click the box {} of {}", rel.word(), manifest[ai].label),
                target,
            );
        }
    }
    (format!("click {}", el.label), target)
}

fn gen_with_labels(
    seed: u64,
    spec: &GenSpec,
    labels: &[&str],
    id: String,
) -> Result<GroundingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(spec.min_elements..=spec.max_elements);
    let boxes = place(spec, n, &mut rng)?;
    let names: Vec<&str> = labels.choose_multiple(&mut rng, n).copied().collect();
    let palette = spec.palette();
    let manifest: Vec<Element> = boxes
        .iter()
        .zip(names)
        .map(|(b, label)| Element {
            label: label.to_string(),
            color: palette[rng.gen_range(0..palette.len())].0.to_string(),
            bbox: b.as_array(),
        })
        .collect();
    let (instruction, target) = choose_instruction(spec, &manifest, &mut rng);
    Ok(GroundingSample {
        id,
        width: spec.width,
        height: spec.height,
        pixels: render(spec, &manifest),
        instruction,
        gt: manifest[target].bbox(),
        manifest,
    })
}

/// Deterministic sample for `(seed, spec)` using the spec's full label list.
pub fn gen_sample(seed: u64, spec: &GenSpec) -> Result<GroundingSample> {
    spec.validate()?;
    gen_with_labels(seed, spec, spec.labels(), format!("s{seed:016x}"))
}

/// Label pools for the train and test sides under `spec.regime`.
pub fn label_pools(spec: &GenSpec, seed: u64) -> Result<(Vec<&'static str>, Vec<&'static str>)> {
    let all = spec.labels().to_vec();
    match spec.regime {
        Regime::Seen => Ok((all.clone(), all)),
        Regime::Unseen => {
            let need = spec.max_elements;
            if all.len() < 2 * need {
                return Err(SynthError::VocabTooSmall {
                    words: all.len(),
                    need,
                });
            }
            let mut shuffled = all;
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF00D, 0)));
            let test = shuffled.split_off(shuffled.len() / 2);
            Ok((shuffled, test))
        }
    }
}

fn gen_many(
    spec: &GenSpec,
    seed: u64,
    stream: u64,
    n: usize,
    labels: &[&str],
    prefix: &str,
) -> Result<Vec<GroundingSample>> {
    (0..n)
        .map(|i| {
            // placement failures are resolved by reseeding deterministically
            let mut attempt = 0u64;
            loop {
                let s = derive_seed(seed, stream, ((i as u64) << 8) | attempt);
                match gen_with_labels(s, spec, labels, format!("{prefix}-{i:06}")) {
                    Err(SynthError::Placement(_)) if attempt < 255 => attempt += 1,
                    other => return other,
                }
            }
        })
        .collect()
}

/// Train and test samples under `spec.regime`.
pub fn gen_split(
    spec: &GenSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<GroundingSample>, Vec<GroundingSample>)> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(SynthError::Precondition(
            "n_train and n_test must be at least 1".into(),
        ));
    }
    let (train_labels, test_labels) = label_pools(spec, seed)?;
    Ok((
        gen_many(spec, seed, 1, n_train, &train_labels, "train")?,
        gen_many(spec, seed, 2, n_test, &test_labels, "test")?,
    ))
}

// ---------------------------------------------------------------------------
// PPM and dataset persistence

pub fn write_ppm(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    write!(f, "P6\n{width} {height}\n255\n").map_err(io_err(path))?;
    f.write_all(pixels).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Reads a binary 8-bit PPM; returns `(width, height, rgb bytes)`.
pub fn read_ppm(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |m: &str| SynthError::Corrupt(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if fields[0] != "P6" {
        return Err(corrupt("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<u32>().map_err(|_| corrupt("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(corrupt("only 8-bit PPM is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let n = w as usize * h as usize * 3;
    if bytes.len() < pos + n {
        return Err(corrupt("truncated pixel data"));
    }
    Ok((w, h, bytes[pos..pos + n].to_vec()))
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    schema_version: u32,
    id: String,
    image_file: String,
    instruction_text: String,
    gt: [u32; 4],
    manifest: Vec<Element>,
}

pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const GENSPEC_FILE: &str = "genspec.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Writes `images/*.ppm`, the annotation file, the spec dump and the vocabulary.
pub fn write_dataset(samples: &[GroundingSample], spec: &GenSpec, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let ann_path = dir.join(ANNOTATIONS);
    let mut ann = BufWriter::new(fs::File::create(&ann_path).map_err(io_err(&ann_path))?);
    for s in samples {
        let image_file = format!("images/{}.ppm", s.id);
        write_ppm(&dir.join(&image_file), s.width, s.height, &s.pixels)?;
        let rec = AnnotationRecord {
            schema_version: SCHEMA_VERSION,
            id: s.id.clone(),
            image_file,
            instruction_text: s.instruction.clone(),
            gt: s.gt.as_array(),
            manifest: s.manifest.clone(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(ann, "{line}").map_err(io_err(&ann_path))?;
    }
    ann.flush().map_err(io_err(&ann_path))?;
    let spec_path = dir.join(GENSPEC_FILE);
    fs::write(&spec_path, spec.to_text()).map_err(io_err(&spec_path))?;
    let vocab_path = dir.join(VOCAB_FILE);
    spec.vocab()
        .write_to(&vocab_path)
        .map_err(|e| SynthError::Corrupt(format!("{}: {e}", vocab_path.display())))
}

/// A dataset directory as read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: GenSpec,
    pub vocab: Vocab,
    pub samples: Vec<GroundingSample>,
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let spec_path = dir.join(GENSPEC_FILE);
    let spec = GenSpec::from_text(&fs::read_to_string(&spec_path).map_err(io_err(&spec_path))?)?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = Vocab::read_from(&vocab_path)
        .map_err(|e| SynthError::Corrupt(format!("{}: {e}", vocab_path.display())))?;
    let ann_path = dir.join(ANNOTATIONS);
    let f = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| {
            SynthError::Corrupt(format!("{} line {}: {e}", ann_path.display(), i + 1))
        })?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(SynthError::Schema(rec.schema_version));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(SynthError::Corrupt(format!(
                "duplicate sample id {}",
                rec.id
            )));
        }
        let (w, h, pixels) = read_ppm(&dir.join(&rec.image_file))?;
        if (w, h) != (spec.width, spec.height) {
            return Err(SynthError::Corrupt(format!(
                "{} is {w}x{h}, spec says {}x{}",
                rec.image_file, spec.width, spec.height
            )));
        }
        samples.push(GroundingSample {
            id: rec.id,
            width: w,
            height: h,
            pixels,
            instruction: rec.instruction_text,
            gt: BBox::from_array(rec.gt),
            manifest: rec.manifest,
        });
    }
    Ok(Dataset {
        spec,
        vocab,
        samples,
    })
}
