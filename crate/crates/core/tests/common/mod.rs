#![allow(dead_code)]

use msd_core::config::ModelConfig;
use msd_core::data::{
    split_dataset, standardize_sequence, synth_generate, HashEmbedder, Label, StandardSequence, SynthParams,
};
use msd_core::rng;
use msd_core::{ParamStore, Scalar, Tensor};

/// Small enough for finite differences: D=2, 2 heads, embed 6, hidden 4, l=8.
pub fn tiny_cfg() -> ModelConfig {
    let mut c = ModelConfig::custom(8, 8, [(4, 2, 1), (2, 2, 1)]).unwrap();
    c.latent = 2;
    c.n_heads = 2;
    c.embed_dim = 6;
    c.mvae_hidden = 4;
    c.dropout = 0.0;
    c.validate().unwrap();
    c
}

/// Random embeddings with the first `real` rows marked valid.
pub fn random_seq<T: Scalar>(l: usize, real: usize, dim: usize, label: Label, seed: u64) -> StandardSequence<T> {
    let mut s = Tensor::randn(&[l, 2, dim], 1.0, &mut rng::seeded(seed));
    for i in real..l {
        s.data_mut()[i * 2 * dim..(i + 1) * 2 * dim]
            .iter_mut()
            .for_each(|v| *v = T::zero());
    }
    StandardSequence {
        s,
        mask: (0..l).map(|i| i < real).collect(),
        label,
    }
}

pub fn spread_attention(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::seeded(seed);
    for id in store.ids().collect::<Vec<_>>() {
        if store.entry(id).name.contains(".att.w") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut r);
        }
    }
}

pub struct Corpus<T> {
    pub train: Vec<StandardSequence<T>>,
    pub val: Vec<StandardSequence<T>>,
    pub test: Vec<StandardSequence<T>>,
}

/// Synthetic users, hash-embedded at `dim`, split 7/2/1 and standardized to `l`.
pub fn corpus<T: Scalar>(n_users: usize, l_mean: usize, l: usize, dim: usize, seed: u64) -> Corpus<T> {
    let recs = synth_generate(&SynthParams::new(n_users, l_mean, seed)).unwrap();
    let split = split_dataset(&recs, (0.7, 0.2, 0.1), seed).unwrap();
    let p = HashEmbedder::new(dim);
    let conv = |v: &[msd_core::data::UserRecord]| v.iter().map(|u| standardize_sequence(u, l, &p).unwrap()).collect();
    Corpus {
        train: conv(&split.train),
        val: conv(&split.validation),
        test: conv(&split.test),
    }
}

/// Full-batch gradient-descent logistic regression with a small ridge term;
/// returns `(train accuracy, held-out accuracy)`.
pub fn logistic_probe(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> (f64, f64) {
    let d = train[0].0.len();
    let mut w = vec![0.0; d + 1];
    let score = |w: &[f64], x: &[f64]| w[d] + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..2000 {
        let mut g = vec![0.0; d + 1];
        for (x, y) in train {
            let e = 1.0 / (1.0 + (-score(&w, x)).exp()) - *y as f64;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += e * xj;
            }
            g[d] += e;
        }
        for j in 0..=d {
            let ridge = if j < d { 1e-3 * w[j] } else { 0.0 };
            w[j] -= 0.5 * g[j] / train.len() as f64 + ridge;
        }
    }
    let acc = |v: &[(Vec<f64>, usize)]| {
        v.iter().filter(|(x, y)| usize::from(score(&w, x) > 0.0) == *y).count() as f64 / v.len() as f64
    };
    (acc(train), acc(test))
}
