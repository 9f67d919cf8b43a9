//! Closed token vocabulary and the linguistic box/point format.
//!
//! A decoded target looks like
//! `<predict_bbox> <x_min> 0 1 2 </x_min> ... </predict_bbox> <eos>`, with
//! every coordinate written as a fixed number of zero-padded digit tokens.
//! Each position carries a [`Role`] used for loss masking and reward
//! assignment.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

/// Upper bound on a full decoded sequence (instruction segment included).
pub const MAX_SEQ_LEN: usize = 128;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const INSTR_OPEN: TokenId = 2;
pub const INSTR_CLOSE: TokenId = 3;
pub const BBOX_OPEN: TokenId = 4;
pub const BBOX_CLOSE: TokenId = 5;
pub const X_MIN_OPEN: TokenId = 6;
pub const Y_MIN_OPEN: TokenId = 8;
pub const X_MAX_OPEN: TokenId = 10;
pub const Y_MAX_OPEN: TokenId = 12;
pub const X_CTR_OPEN: TokenId = 14;
pub const Y_CTR_OPEN: TokenId = 16;
pub const DIGIT_0: TokenId = 18;
pub const NUM_DIGITS: usize = 10;
/// First id after the fixed special and digit tokens.
pub const FIRST_WORD: TokenId = DIGIT_0 + NUM_DIGITS;

const SPECIALS: [&str; 18] = [
    "<pad>",
    "<eos>",
    "<instruction>",
    "</instruction>",
    "<predict_bbox>",
    "</predict_bbox>",
    "<x_min>",
    "</x_min>",
    "<y_min>",
    "</y_min>",
    "<x_max>",
    "</x_max>",
    "<y_max>",
    "</y_max>",
    "<x_ctr>",
    "</x_ctr>",
    "<y_ctr>",
    "</y_ctr>",
];

pub fn is_digit(id: TokenId) -> bool {
    (DIGIT_0..DIGIT_0 + NUM_DIGITS).contains(&id)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("coordinate {value} does not fit in {digits} digits")]
    Overflow { value: u32, digits: usize },
    #[error("digit width must be at least 1")]
    ZeroDigits,
    #[error("malformed sequence: {0}")]
    Malformed(String),
    #[error("sequence of {0} tokens exceeds the {MAX_SEQ_LEN}-token budget")]
    TooLong(usize),
    #[error("out-of-vocabulary words: {}", .0.join(", "))]
    OutOfVocab(Vec<String>),
    #[error("duplicate token `{0}` in vocabulary")]
    Duplicate(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("vocabulary i/o: {0}")]
    Io(String),
}

/// Token id <-> surface form mapping. Ids are dense and stable: the 18
/// special tokens, the ten digits, then generator words in the given order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self, CodecError> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..NUM_DIGITS).map(|d| d.to_string()));
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(CodecError::InvalidVocab(format!("bad word `{w}`")));
            }
            tokens.push(w.to_string());
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self, CodecError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CodecError::Duplicate(t.clone()));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[FIRST_WORD..]
    }

    /// Whitespace word-level tokenization of instruction text.
    pub fn encode_words(&self, text: &str) -> Result<Vec<TokenId>, CodecError> {
        let mut ids = Vec::new();
        let mut missing = Vec::new();
        for w in text.split_whitespace() {
            match self.id(w) {
                Some(id) if id >= FIRST_WORD => ids.push(id),
                _ => missing.push(w.to_string()),
            }
        }
        if missing.is_empty() {
            Ok(ids)
        } else {
            Err(CodecError::OutOfVocab(missing))
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One surface form per line; the line index is the id.
    pub fn write_to(&self, path: &Path) -> Result<(), CodecError> {
        let mut f = std::fs::File::create(path).map_err(|e| CodecError::Io(e.to_string()))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| CodecError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, CodecError> {
        let f = std::fs::File::open(path).map_err(|e| CodecError::Io(e.to_string()))?;
        let tokens = std::io::BufReader::new(f)
            .lines()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CodecError::Io(e.to_string()))?;
        let fixed = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain((0..NUM_DIGITS).map(|d| d.to_string()));
        if tokens.len() < FIRST_WORD || !tokens.iter().zip(fixed).all(|(a, b)| *a == b) {
            return Err(CodecError::InvalidVocab(
                "dump does not start with the fixed special and digit tokens".into(),
            ));
        }
        Self::from_tokens(tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Instruction,
    TaskPrompt,
    CoordPrompt,
    CoordValue,
    Eos,
    Pad,
}

/// Token ids with one role per position.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, roles: Vec<Role>) -> Result<Self, CodecError> {
        if ids.len() != roles.len() {
            return Err(CodecError::Malformed(format!(
                "{} ids but {} roles",
                ids.len(),
                roles.len()
            )));
        }
        if ids.len() > MAX_SEQ_LEN {
            return Err(CodecError::TooLong(ids.len()));
        }
        if let Some(p) = (0..ids.len()).find(|&i| roles[i] == Role::CoordValue && !is_digit(ids[i]))
        {
            return Err(CodecError::Malformed(format!(
                "coord_value position {p} holds non-digit id {}",
                ids[p]
            )));
        }
        Ok(TokenSequence { ids, roles })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn concat(&self, other: &TokenSequence) -> Result<TokenSequence, CodecError> {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut roles = self.roles.clone();
        roles.extend_from_slice(&other.roles);
        TokenSequence::new(ids, roles)
    }

    /// Positions `start..`.
    pub fn tail(&self, start: usize) -> TokenSequence {
        TokenSequence {
            ids: self.ids[start..].to_vec(),
            roles: self.roles[start..].to_vec(),
        }
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }
}

/// Inclusive integer pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub const fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// `min <= max` on both axes.
    pub fn is_valid(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.is_valid() && self.x_max < width && self.y_max < height
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [u32; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// What the decoder is trained to emit and how rewards are grouped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Box target, one IoU reward group over all coordinate values.
    #[serde(rename = "bbox")]
    BBox,
    /// Center-point target, point-distance reward.
    #[serde(rename = "centerpoint")]
    CenterPoint,
    /// Box target, two point-distance groups (top-left and bottom-right).
    Vertices,
    /// Box target, IoU reward on every decoded position.
    #[serde(rename = "alltokens")]
    AllTokens,
}

impl Variant {
    pub fn format(self) -> TargetFormat {
        match self {
            Variant::CenterPoint => TargetFormat::Point,
            _ => TargetFormat::Box,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::BBox => "bbox",
            Variant::CenterPoint => "centerpoint",
            Variant::Vertices => "vertices",
            Variant::AllTokens => "alltokens",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bbox" | "b-box" => Ok(Variant::BBox),
            "centerpoint" | "center" => Ok(Variant::CenterPoint),
            "vertices" => Ok(Variant::Vertices),
            "alltokens" | "all-tokens" => Ok(Variant::AllTokens),
            other => Err(format!(
                "unknown variant `{other}` (expected bbox, centerpoint, vertices, alltokens)"
            )),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetFormat {
    Box,
    Point,
}

impl TargetFormat {
    fn field_opens(self) -> &'static [TokenId] {
        match self {
            TargetFormat::Box => &[X_MIN_OPEN, Y_MIN_OPEN, X_MAX_OPEN, Y_MAX_OPEN],
            TargetFormat::Point => &[X_CTR_OPEN, Y_CTR_OPEN],
        }
    }

    pub fn fields(self) -> usize {
        self.field_opens().len()
    }

    /// Number of target tokens after the instruction segment.
    pub fn target_len(self, digits: usize) -> usize {
        self.fields() * (digits + 2) + 3
    }
}

/// One position of a target template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Fixed(TokenId, Role),
    /// Digit `digit` (most significant first) of coordinate field `field`.
    Value {
        field: usize,
        digit: usize,
    },
}

/// Target layout for `format` at `digits` digits per coordinate.
pub fn template(format: TargetFormat, digits: usize) -> Vec<Slot> {
    let mut slots = vec![Slot::Fixed(BBOX_OPEN, Role::TaskPrompt)];
    for (field, &open) in format.field_opens().iter().enumerate() {
        slots.push(Slot::Fixed(open, Role::CoordPrompt));
        slots.extend((0..digits).map(|digit| Slot::Value { field, digit }));
        slots.push(Slot::Fixed(open + 1, Role::CoordPrompt));
    }
    slots.push(Slot::Fixed(BBOX_CLOSE, Role::TaskPrompt));
    slots.push(Slot::Fixed(EOS, Role::Eos));
    slots
}

/// Smallest digit width that can represent every pixel coordinate of a `width x height` image.
pub fn digits_for(width: u32, height: u32) -> usize {
    let m = width.max(height) as u64;
    let mut d = 1;
    let mut cap = 10u64;
    while cap < m {
        d += 1;
        cap *= 10;
    }
    d
}

fn serialize_values(
    format: TargetFormat,
    values: &[u32],
    digits: usize,
) -> Result<TokenSequence, CodecError> {
    if digits == 0 {
        return Err(CodecError::ZeroDigits);
    }
    let limit = 10u64.checked_pow(digits as u32).unwrap_or(u64::MAX);
    if let Some(&v) = values.iter().find(|&&v| v as u64 >= limit) {
        return Err(CodecError::Overflow { value: v, digits });
    }
    let mut ids = Vec::new();
    let mut roles = Vec::new();
    for slot in template(format, digits) {
        match slot {
            Slot::Fixed(id, role) => {
                ids.push(id);
                roles.push(role);
            }
            Slot::Value { field, digit } => {
                let place = 10u64.pow((digits - 1 - digit) as u32);
                ids.push(DIGIT_0 + ((values[field] as u64 / place) % 10) as usize);
                roles.push(Role::CoordValue);
            }
        }
    }
    TokenSequence::new(ids, roles)
}

pub fn serialize_box(b: &BBox, digits: usize) -> Result<TokenSequence, CodecError> {
    serialize_values(TargetFormat::Box, &b.as_array(), digits)
}

pub fn serialize_point(x: u32, y: u32, digits: usize) -> Result<TokenSequence, CodecError> {
    serialize_values(TargetFormat::Point, &[x, y], digits)
}

fn parse_values(
    format: TargetFormat,
    ids: &[TokenId],
    digits: usize,
) -> Result<Vec<u32>, CodecError> {
    if digits == 0 {
        return Err(CodecError::ZeroDigits);
    }
    let slots = template(format, digits);
    if ids.len() != slots.len() {
        return Err(CodecError::Malformed(format!(
            "expected {} tokens, found {}",
            slots.len(),
            ids.len()
        )));
    }
    let mut values = vec![0u64; format.fields()];
    for (pos, (slot, &id)) in slots.iter().zip(ids).enumerate() {
        match *slot {
            Slot::Fixed(want, _) if want != id => {
                return Err(CodecError::Malformed(format!(
                    "position {pos}: expected token {want}, found {id}"
                )))
            }
            Slot::Fixed(..) => {}
            Slot::Value { field, .. } => {
                if !is_digit(id) {
                    return Err(CodecError::Malformed(format!(
                        "position {pos}: non-digit token {id} in a value field"
                    )));
                }
                values[field] = values[field] * 10 + (id - DIGIT_0) as u64;
            }
        }
    }
    values
        .into_iter()
        .map(|v| u32::try_from(v).map_err(|_| CodecError::Malformed("coordinate overflow".into())))
        .collect()
}

/// Inverse of [`serialize_box`]; accepts the exact template only. The box is
/// not checked against image bounds or for `min <= max`.
pub fn parse_box(ids: &[TokenId], digits: usize) -> Result<BBox, CodecError> {
    let v = parse_values(TargetFormat::Box, ids, digits)?;
    Ok(BBox::new(v[0], v[1], v[2], v[3]))
}

pub fn parse_point(ids: &[TokenId], digits: usize) -> Result<(u32, u32), CodecError> {
    let v = parse_values(TargetFormat::Point, ids, digits)?;
    Ok((v[0], v[1]))
}

/// `<instruction> words.. </instruction>`, all with role instruction.
pub fn instruction_segment(words: &[TokenId]) -> Result<TokenSequence, CodecError> {
    let mut ids = Vec::with_capacity(words.len() + 2);
    ids.push(INSTR_OPEN);
    ids.extend_from_slice(words);
    ids.push(INSTR_CLOSE);
    let roles = vec![Role::Instruction; ids.len()];
    TokenSequence::new(ids, roles)
}

/// Box midpoint with floor division on each axis.
pub fn midpoint(b: &BBox) -> (u32, u32) {
    (
        ((b.x_min as u64 + b.x_max as u64) / 2) as u32,
        ((b.y_min as u64 + b.y_max as u64) / 2) as u32,
    )
}

/// Encodes the target part (everything after the instruction) for `variant`.
pub fn target_segment(
    gt: &BBox,
    variant: Variant,
    digits: usize,
) -> Result<TokenSequence, CodecError> {
    match variant.format() {
        TargetFormat::Box => serialize_box(gt, digits),
        TargetFormat::Point => {
            let (x, y) = midpoint(gt);
            serialize_point(x, y, digits)
        }
    }
}

/// Full teacher-forcing sequence: instruction segment followed by the target.
pub fn build_target_sequence(
    instruction: &[TokenId],
    gt: &BBox,
    variant: Variant,
    digits: usize,
) -> Result<TokenSequence, CodecError> {
    if let Some(&bad) = instruction.iter().find(|&&id| id < FIRST_WORD) {
        return Err(CodecError::Malformed(format!(
            "instruction contains non-word token {bad}"
        )));
    }
    let target = target_segment(gt, variant, digits)?;
    let total = instruction.len() + 2 + target.len();
    if total > MAX_SEQ_LEN {
        return Err(CodecError::TooLong(total));
    }
    instruction_segment(instruction)?.concat(&target)
}

/// Roles for an arbitrary generated target segment: the template roles when
/// it matches `format`, otherwise a per-token guess.
pub fn infer_roles(ids: &[TokenId], format: TargetFormat, digits: usize) -> Vec<Role> {
    if parse_values(format, ids, digits).is_ok() {
        return template(format, digits)
            .into_iter()
            .map(|s| match s {
                Slot::Fixed(_, r) => r,
                Slot::Value { .. } => Role::CoordValue,
            })
            .collect();
    }
    ids.iter()
        .map(|&id| match id {
            PAD => Role::Pad,
            EOS => Role::Eos,
            BBOX_OPEN | BBOX_CLOSE => Role::TaskPrompt,
            id if is_digit(id) => Role::CoordValue,
            id if id < DIGIT_0 => Role::CoordPrompt,
            _ => Role::TaskPrompt,
        })
        .collect()
}
