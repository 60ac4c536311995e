//! Mini-batch plumbing shared by the training loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Source,
    Adapt,
    /// Plain cross-entropy on pseudo-labels.
    Erm,
    /// Negative learning on every pseudo-labeled sample.
    Nl,
    /// Negative learning on samples above the confidence floor.
    SelNl,
    /// Positive learning on confident samples.
    SelPl,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Source => "source",
            Phase::Adapt => "adapt",
            Phase::Erm => "erm",
            Phase::Nl => "nl",
            Phase::SelNl => "selnl",
            Phase::SelPl => "selpl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
}

/// A fresh permutation of `0..n` cut into batches of `batch_size`
/// (the last one may be shorter).
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let batches = shuffled_batches(130, 64, &mut crate::rng::from_seed(1));
        assert_eq!(
            batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![64, 64, 2]
        );
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }
}
