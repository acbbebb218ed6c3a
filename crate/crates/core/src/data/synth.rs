//! Synthetic labelled behavior histories.
//!
//! Normal users post i.i.d. one-off content. Spammers post the same mix but
//! are interleaved with bursts of near-duplicate posts drawn from a small
//! global pool of campaign messages, and they re-post an early "template"
//! campaign message again near the end of their history. Because campaign
//! texts are exact repeats, their embeddings are shared across spammers,
//! which makes the classes separable from the mean text embedding alone.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Behavior, Label, UserRecord};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_users: usize,
    pub l_mean: usize,
    pub seed: u64,
    pub campaigns: usize,
    /// Per-step probability of opening a burst outside of one.
    pub burst_rate: f64,
    pub image_rate: f64,
}

impl SynthParams {
    pub fn new(n_users: usize, l_mean: usize, seed: u64) -> Self {
        SynthParams {
            n_users,
            l_mean,
            seed,
            campaigns: 16,
            burst_rate: 0.12,
            image_rate: 0.4,
        }
    }
}

fn below(r: &mut Rng, n: usize) -> usize {
    ((rng::uniform(r) * n as f64) as usize).min(n - 1)
}

fn nonce(r: &mut Rng) -> u64 {
    (rng::uniform(r) * 2f64.powi(53)) as u64
}

fn campaign_text(c: usize) -> String {
    format!("campaign {c:02}: limited offer inside, follow and repost to win")
}

fn ordinary(uid: &str, i: usize, ts: i64, p: &SynthParams, r: &mut Rng) -> Behavior {
    let n = nonce(r);
    let topic = below(r, 50);
    let text = format!("{uid} post {i} on topic {topic} #{n:014x}");
    let image = (rng::uniform(r) < p.image_rate).then(|| format!("photo-{n:014x}").into_bytes());
    Behavior::new(text, image, Some(ts)).unwrap()
}

fn campaign(c: usize, ts: i64, r: &mut Rng) -> Behavior {
    // same text, one of a few re-encoded copies of the campaign image
    let image = (rng::uniform(r) < 0.7).then(|| format!("campaign-image-{c:02}-v{}", below(r, 3)).into_bytes());
    Behavior::new(campaign_text(c), image, Some(ts)).unwrap()
}

fn user_length(p: &SynthParams, r: &mut Rng) -> usize {
    let z: f64 = rng::normal(r);
    let raw = (p.l_mean as f64 * (0.5 * z).exp()).round() as usize;
    raw.clamp(4, 8 * p.l_mean.max(1))
}

fn spammer(uid: &str, len: usize, p: &SynthParams, r: &mut Rng) -> Vec<Behavior> {
    let template = below(r, p.campaigns);
    let pool = [template, below(r, p.campaigns), below(r, p.campaigns)];
    let template_at = below(r, len.min(4));
    let reuse_at = len - 1 - below(r, (len / 5).max(1));
    let mut ts = 1_600_000_000 + below(r, 10_000_000) as i64;
    let mut burst = 0usize;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        if i == template_at || (i == reuse_at && i > template_at) {
            ts += 600 + below(r, 86_400) as i64;
            out.push(campaign(template, ts, r));
            continue;
        }
        if burst == 0 && rng::uniform(r) < p.burst_rate {
            burst = 3 + below(r, 4);
        }
        if burst > 0 {
            burst -= 1;
            ts += 5 + below(r, 120) as i64;
            out.push(campaign(pool[below(r, pool.len())], ts, r));
        } else {
            ts += 600 + below(r, 86_400) as i64;
            out.push(ordinary(uid, i, ts, p, r));
        }
    }
    out
}

fn normal(uid: &str, len: usize, p: &SynthParams, r: &mut Rng) -> Vec<Behavior> {
    let mut ts = 1_600_000_000 + below(r, 10_000_000) as i64;
    (0..len)
        .map(|i| {
            ts += 600 + below(r, 86_400) as i64;
            ordinary(uid, i, ts, p, r)
        })
        .collect()
}

pub fn synth_generate(p: &SynthParams) -> Result<Vec<UserRecord>> {
    if p.n_users < 2 {
        return Err(Error::invalid("synthetic dataset needs at least 2 users"));
    }
    if p.l_mean == 0 || p.campaigns == 0 {
        return Err(Error::invalid("l_mean and campaigns must be positive"));
    }
    let mut r = rng::seeded(p.seed);
    let spammers = p.n_users / 2;
    let mut labels: Vec<Label> = (0..p.n_users)
        .map(|i| if i < spammers { Label::Spammer } else { Label::Normal })
        .collect();
    labels.shuffle(&mut r);
    labels
        .into_iter()
        .enumerate()
        .map(|(u, label)| {
            let uid = format!("user{u:05}");
            let len = user_length(p, &mut r);
            let behaviors = match label {
                Label::Spammer => spammer(&uid, len, p, &mut r),
                Label::Normal => normal(&uid, len, p, &mut r),
            };
            UserRecord::new(uid, label, behaviors)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let a = synth_generate(&SynthParams::new(20, 16, 5)).unwrap();
        let b = synth_generate(&SynthParams::new(20, 16, 5)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthParams::new(20, 16, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_labels() {
        for n in [2, 7, 10, 201] {
            let recs = synth_generate(&SynthParams::new(n, 8, 1)).unwrap();
            let s = recs.iter().filter(|r| r.label == Label::Spammer).count();
            assert!((n - s).abs_diff(s) <= 1);
        }
    }

    #[test]
    fn spammers_repeat_templates() {
        let recs = synth_generate(&SynthParams::new(40, 64, 2)).unwrap();
        for r in &recs {
            let campaign_posts = r.behaviors.iter().filter(|b| b.text.starts_with(b"campaign")).count();
            match r.label {
                Label::Normal => assert_eq!(campaign_posts, 0),
                Label::Spammer => assert!(campaign_posts >= 2, "{}", r.user_id),
            }
        }
    }

    #[test]
    fn rejects_single_user() {
        assert!(synth_generate(&SynthParams::new(1, 8, 0)).is_err());
    }
}
