//! Reinforced pixel-to-sequence UI instruction grounding.
//!
//! A tiny vision-encoder / language-decoder transformer reads a rendered
//! screenshot and a text instruction and decodes the target element's
//! bounding box as tokens. Training combines teacher-forced token
//! cross-entropy with an IoU-rewarded policy-gradient term restricted to the
//! coordinate-value tokens.

pub mod app;
pub mod codec;
pub mod geometry;
pub mod kv;
pub mod model;
pub mod objectives;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
