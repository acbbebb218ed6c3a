use rand::seq::SliceRandom;

use super::{Label, UserRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<UserRecord>,
    pub validation: Vec<UserRecord>,
    pub test: Vec<UserRecord>,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

/// Stratified seeded split.
///
/// Each class is shuffled on its own, the classes are interleaved evenly,
/// and the interleaved order is cut contiguously. Every split gets at least
/// one record.
pub fn split_dataset(records: &[UserRecord], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (a, b, c) = ratios;
    if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be ≥ 0 and sum to 1"
        )));
    }
    let n = records.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 records to split, got {n}")));
    }
    let mut r = rng::seeded(seed);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for label in [Label::Normal, Label::Spammer] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| records[i].label == label).collect();
        idx.shuffle(&mut r);
        let len = idx.len() as f64;
        for (rank, i) in idx.into_iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / len, label.index(), i));
        }
    }
    keyed.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

    let n_val = ((b * n as f64).round() as usize).max(1);
    let n_test = ((c * n as f64).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::invalid(format!("{n} records leave no training set")));
    }
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit {
        train: take(0..n_train),
        validation: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
        ratios,
        seed,
    })
}
