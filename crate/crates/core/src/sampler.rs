//! Reference-image selection from categories adjacent to the main label.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{OrdinalDataset, OrdinalSample};
use crate::error::{CigError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Equal,
    /// Weights each neighbour by the other neighbour's share, favouring the
    /// smaller adjacent category.
    #[default]
    InverseRatio,
}

impl std::str::FromStr for SamplerKind {
    type Err = CigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(SamplerKind::Equal),
            "inverse_ratio" => Ok(SamplerKind::InverseRatio),
            other => Err(CigError::invalid("sampler.kind", format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjacencyProbabilities {
    /// Probability of drawing from category `m - 1`.
    pub p_left: f64,
    /// Probability of drawing from category `m + 1`.
    pub p_right: f64,
}

/// `counts[c - 1]` is the size of category `c`.
pub fn adjacency_probabilities(
    kind: SamplerKind,
    counts: &[usize],
    m: u32,
    k: usize,
) -> Result<AdjacencyProbabilities> {
    if m == 0 || m as usize > k || counts.len() != k {
        return Err(CigError::LabelOutOfRange { label: m, k });
    }
    let n_left = if m > 1 { counts[m as usize - 2] } else { 0 };
    let n_right = if (m as usize) < k { counts[m as usize] } else { 0 };
    let probs = match (n_left, n_right) {
        (0, 0) => return Err(CigError::NoReferenceAvailable(m)),
        (0, _) => AdjacencyProbabilities {
            p_left: 0.0,
            p_right: 1.0,
        },
        (_, 0) => AdjacencyProbabilities {
            p_left: 1.0,
            p_right: 0.0,
        },
        (l, r) => match kind {
            SamplerKind::Equal => AdjacencyProbabilities {
                p_left: 0.5,
                p_right: 0.5,
            },
            SamplerKind::InverseRatio => {
                let n_adj = (l + r) as f64;
                AdjacencyProbabilities {
                    p_left: r as f64 / n_adj,
                    p_right: l as f64 / n_adj,
                }
            }
        },
    };
    Ok(probs)
}

fn choose_side<R: Rng + ?Sized>(probs: AdjacencyProbabilities, m: u32, rng: &mut R) -> u32 {
    // Always consume one draw so rng streams stay aligned across kinds.
    let u: f64 = rng.random();
    if u < probs.p_left {
        m - 1
    } else {
        m + 1
    }
}

/// Draws a reference sample uniformly (with replacement) from a category adjacent to `m`.
pub fn sample_reference<'a, R: Rng + ?Sized>(
    kind: SamplerKind,
    ds: &'a OrdinalDataset,
    m: u32,
    rng: &mut R,
) -> Result<&'a OrdinalSample> {
    let probs = adjacency_probabilities(kind, ds.counts(), m, ds.k())?;
    let r = choose_side(probs, m, rng);
    let pick = rng.random_range(0..ds.count(r));
    let idx = ds
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == r)
        .nth(pick)
        .map(|(i, _)| i)
        .expect("category count matches members");
    Ok(ds.sample(idx))
}

/// Stateful reference sampler used during training.
///
/// Within a category, references are drawn without replacement from a
/// shuffled deck that is refilled when exhausted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSampler {
    kind: SamplerKind,
    counts: Vec<usize>,
    members: Vec<Vec<usize>>,
    decks: Vec<Vec<usize>>,
}

impl ReferenceSampler {
    /// `pool` restricts which dataset indices may be used as references
    /// (normally the training part of a fold).
    pub fn new(kind: SamplerKind, ds: &OrdinalDataset, pool: &[usize]) -> Self {
        let mut members = vec![Vec::new(); ds.k()];
        for &i in pool {
            members[ds.sample(i).label as usize - 1].push(i);
        }
        let counts = members.iter().map(Vec::len).collect();
        ReferenceSampler {
            kind,
            counts,
            members,
            decks: vec![Vec::new(); ds.k()],
        }
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn probabilities(&self, m: u32) -> Result<AdjacencyProbabilities> {
        adjacency_probabilities(self.kind, &self.counts, m, self.counts.len())
    }

    /// Returns the dataset index of a reference for main label `m`.
    pub fn draw<R: Rng + ?Sized>(&mut self, m: u32, rng: &mut R) -> Result<usize> {
        let probs = self.probabilities(m)?;
        let r = choose_side(probs, m, rng) as usize - 1;
        if self.decks[r].is_empty() {
            let mut deck = self.members[r].clone();
            deck.shuffle(rng);
            self.decks[r] = deck;
        }
        Ok(self.decks[r].pop().expect("non-empty neighbour has a deck"))
    }
}
