use sha2::{Digest, Sha256};

use super::{Behavior, EmbeddedBehavior, EmbeddedUser, UserRecord};
use crate::error::{Error, Result};
use crate::rng;

/// Stand-in for the pre-trained text and image encoders.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, bytes: &[u8]) -> std::result::Result<Vec<f32>, String>;

    fn embed_image(&self, bytes: &[u8]) -> std::result::Result<Vec<f32>, String>;
}

/// Content-hash embedder: deterministic, content-sensitive, unit RMS.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(super::EMBED_DIM)
    }
}

const IMAGE_DOMAIN: u64 = 0x696d_6167_655f_7631;

fn content_seed(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn hash_embed(seed: u64, dim: usize) -> Vec<f32> {
    let mut r = rng::seeded(seed);
    let raw: Vec<f64> = (0..dim).map(|_| rng::normal::<f64>(&mut r)).collect();
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / dim as f64).sqrt();
    raw.iter().map(|v| (v / rms) as f32).collect()
}

/// Seeds a ChaCha stream with the first 8 bytes (LE) of SHA-256(bytes) and
/// emits `dim` standard-normal draws rescaled to unit RMS.
pub fn default_hash_embedder(bytes: &[u8], dim: usize) -> Vec<f32> {
    hash_embed(content_seed(bytes), dim)
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, bytes: &[u8]) -> std::result::Result<Vec<f32>, String> {
        Ok(default_hash_embedder(bytes, self.dim))
    }

    fn embed_image(&self, bytes: &[u8]) -> std::result::Result<Vec<f32>, String> {
        Ok(hash_embed(content_seed(bytes) ^ IMAGE_DOMAIN, self.dim))
    }
}

/// Missing images embed as the zero vector.
pub fn embed_behavior(b: &Behavior, provider: &dyn EmbeddingProvider, index: usize) -> Result<EmbeddedBehavior> {
    let fail = |reason: String| Error::Embedding { index, reason };
    let dim = provider.dim();
    let t_vec = provider.embed_text(&b.text).map_err(fail)?;
    let i_vec = match &b.image {
        Some(img) => provider.embed_image(img).map_err(fail)?,
        None => vec![0.0; dim],
    };
    if t_vec.len() != dim || i_vec.len() != dim {
        return Err(fail(format!(
            "provider returned widths {}/{}, expected {dim}",
            t_vec.len(),
            i_vec.len()
        )));
    }
    Ok(EmbeddedBehavior {
        t_vec,
        i_vec,
        is_padding: false,
    })
}

pub fn embed_user(u: &UserRecord, provider: &dyn EmbeddingProvider) -> Result<EmbeddedUser> {
    Ok(EmbeddedUser {
        user_id: u.user_id.clone(),
        label: u.label,
        behaviors: u
            .behaviors
            .iter()
            .enumerate()
            .map(|(i, b)| embed_behavior(b, provider, i))
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn deterministic_per_bytes() {
        let p = HashEmbedder::default();
        let b = Behavior::new("hello", Some(b"png".to_vec()), None).unwrap();
        assert_eq!(embed_behavior(&b, &p, 0).unwrap(), embed_behavior(&b, &p, 0).unwrap());
    }

    #[test]
    fn missing_image_is_zero() {
        let b = Behavior::new("x", None, None).unwrap();
        let e = embed_behavior(&b, &HashEmbedder::default(), 0).unwrap();
        assert_eq!(e.i_vec, vec![0.0; 768]);
        assert!(!e.is_padding);
    }

    #[test]
    fn empty_input_vector_is_pinned() {
        // regression pin for the SHA-256 + ChaCha8 + Ziggurat path
        let v = default_hash_embedder(b"", 768);
        assert_eq!(content_seed(b""), 0x141c_fc98_42c4_b0e3);
        let head: Vec<String> = v[..4].iter().map(|x| format!("{x:.6}")).collect();
        assert_eq!(head, EMPTY_HEAD);
    }

    const EMPTY_HEAD: [&str; 4] = ["0.632758", "-0.814833", "-0.356696", "-2.439306"];

    #[test]
    fn rms_near_one() {
        for i in 0..1000u32 {
            let v = default_hash_embedder(&i.to_le_bytes(), 768);
            let rms = (v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / 768.0).sqrt();
            assert!((0.9..=1.1).contains(&rms), "{rms}");
        }
    }

    #[test]
    fn distinct_texts_never_collide() {
        let vs: Vec<Vec<f32>> = (0..1000)
            .map(|i| default_hash_embedder(format!("text {i}").as_bytes(), 768))
            .collect();
        let mut keys: Vec<Vec<u32>> = vs.iter().map(|v| v.iter().map(|x| x.to_bits()).collect()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 1000);
    }

    #[test]
    fn one_bit_flip_decorrelates() {
        let mut r = rng::seeded(21);
        let mut low = 0;
        for _ in 0..1000 {
            let bytes: Vec<u8> = (0..16).map(|_| (rng::uniform(&mut r) * 256.0) as u8).collect();
            let mut flipped = bytes.clone();
            let bit = (rng::uniform(&mut r) * 128.0) as usize;
            flipped[bit / 8] ^= 1 << (bit % 8);
            let c = cosine(
                &default_hash_embedder(&bytes, 768),
                &default_hash_embedder(&flipped, 768),
            );
            if c < 0.3 {
                low += 1;
            }
        }
        assert!(low >= 990, "{low}");
    }

    struct Failing;

    impl EmbeddingProvider for Failing {
        fn dim(&self) -> usize {
            4
        }
        fn embed_text(&self, _: &[u8]) -> std::result::Result<Vec<f32>, String> {
            Err("encoder offline".into())
        }
        fn embed_image(&self, _: &[u8]) -> std::result::Result<Vec<f32>, String> {
            Ok(vec![0.0; 4])
        }
    }

    #[test]
    fn provider_failure_names_index() {
        let b = Behavior::new("x", None, None).unwrap();
        match embed_behavior(&b, &Failing, 7) {
            Err(Error::Embedding { index: 7, reason }) => assert!(reason.contains("offline")),
            other => panic!("{other:?}"),
        }
    }
}
