//! Behavior records, embeddings, and fixed-length standardized sequences.

mod embed;
mod io;
mod split;
mod synth;

pub use embed::{default_hash_embedder, embed_behavior, embed_user, EmbeddingProvider, HashEmbedder};
pub use io::{load_dataset, parse_dataset, write_dataset, EmbeddingCache, CACHE_MAGIC};
pub use split::{split_dataset, DatasetSplit};
pub use synth::{synth_generate, SynthParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Width of one text or image embedding.
pub const EMBED_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal = 0,
    Spammer = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Normal
        } else {
            Label::Spammer
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Behavior {
    pub text: Vec<u8>,
    pub image: Option<Vec<u8>>,
    pub timestamp: Option<i64>,
}

impl Behavior {
    pub fn new(text: impl Into<Vec<u8>>, image: Option<Vec<u8>>, timestamp: Option<i64>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() && image.is_none() {
            return Err(Error::invalid("behavior needs text or an image"));
        }
        Ok(Behavior { text, image, timestamp })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub label: Label,
    pub behaviors: Vec<Behavior>,
}

impl UserRecord {
    /// Validates non-emptiness and orders behaviors by timestamp when every
    /// behavior carries one (stable, so ties keep file order).
    pub fn new(user_id: impl Into<String>, label: Label, mut behaviors: Vec<Behavior>) -> Result<Self> {
        let user_id = user_id.into();
        if behaviors.is_empty() {
            return Err(Error::invalid(format!("user {user_id} has no behaviors")));
        }
        if behaviors.iter().all(|b| b.timestamp.is_some()) {
            behaviors.sort_by_key(|b| b.timestamp);
        }
        Ok(UserRecord {
            user_id,
            label,
            behaviors,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedBehavior {
    pub t_vec: Vec<f32>,
    pub i_vec: Vec<f32>,
    pub is_padding: bool,
}

impl EmbeddedBehavior {
    pub fn padding(dim: usize) -> Self {
        EmbeddedBehavior {
            t_vec: vec![0.0; dim],
            i_vec: vec![0.0; dim],
            is_padding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedUser {
    pub user_id: String,
    pub label: Label,
    pub behaviors: Vec<EmbeddedBehavior>,
}

/// One user's sequence in canonical `l × 2 × dim` form.
///
/// Real behaviors occupy the leading rows (oldest first); the tail is
/// zero padding with `mask = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardSequence<T> {
    pub s: Tensor<T>,
    pub mask: Vec<bool>,
    pub label: Label,
}

impl<T: Scalar> StandardSequence<T> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.s.cols()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn text_row(&self, i: usize) -> &[T] {
        self.s.row(2 * i)
    }

    pub fn image_row(&self, i: usize) -> &[T] {
        self.s.row(2 * i + 1)
    }

    /// Mutable view of a row pair; lets tests plant garbage in padding.
    pub fn rows_mut(&mut self, i: usize) -> &mut [T] {
        let d = self.dim();
        &mut self.s.data_mut()[2 * i * d..2 * (i + 1) * d]
    }
}

/// Truncates to the most recent `l` behaviors, or pads the tail.
pub fn standardize_embedded<T: Scalar>(user: &EmbeddedUser, l: usize) -> Result<StandardSequence<T>> {
    if l == 0 {
        return Err(Error::invalid("sequence length l must be ≥ 1"));
    }
    if user.behaviors.is_empty() {
        return Err(Error::invalid(format!("user {} has no behaviors", user.user_id)));
    }
    let dim = user.behaviors[0].t_vec.len();
    let keep = &user.behaviors[user.behaviors.len().saturating_sub(l)..];
    let mut data = vec![T::zero(); l * 2 * dim];
    let mut mask = vec![false; l];
    for (i, b) in keep.iter().enumerate() {
        if b.t_vec.len() != dim || b.i_vec.len() != dim {
            return Err(Error::invalid(format!(
                "user {}: behavior {i} has embedding widths {}/{}, expected {dim}",
                user.user_id,
                b.t_vec.len(),
                b.i_vec.len()
            )));
        }
        let row = &mut data[2 * i * dim..2 * (i + 1) * dim];
        for (dst, &v) in row.iter_mut().zip(b.t_vec.iter().chain(&b.i_vec)) {
            *dst = T::lit(v as f64);
        }
        mask[i] = true;
    }
    Ok(StandardSequence {
        s: Tensor::from_vec(&[l, 2, dim], data),
        mask,
        label: user.label,
    })
}

/// Embeds the retained behaviors of `u` and standardizes to length `l`.
pub fn standardize_sequence<T: Scalar>(
    u: &UserRecord,
    l: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<StandardSequence<T>> {
    if u.behaviors.is_empty() {
        return Err(Error::invalid(format!("user {} has no behaviors", u.user_id)));
    }
    let skip = u.behaviors.len().saturating_sub(l);
    let behaviors = u.behaviors[skip..]
        .iter()
        .enumerate()
        .map(|(i, b)| embed_behavior(b, provider, skip + i))
        .collect::<Result<Vec<_>>>()?;
    let user = EmbeddedUser {
        user_id: u.user_id.clone(),
        label: u.label,
        behaviors,
    };
    standardize_embedded(&user, l)
}
