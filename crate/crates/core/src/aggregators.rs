//! Vote aggregation: building (possibly weighted) vote-count vectors from
//! raw teacher votes, the noisy-argmax answer mechanism, and the consensus
//! gate that decides whether a query is answered at all.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Error, Result};

/// Which aggregation mechanism a run uses.
///
/// `Plain` answers every query (no gate); `Confident` adds the consensus
/// gate; the remaining three are the per-point-budget variants, all gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Confident,
    Upsampling,
    Vanishing,
    Weighting,
}

impl Variant {
    pub fn is_personalized(self) -> bool {
        matches!(
            self,
            Variant::Upsampling | Variant::Vanishing | Variant::Weighting
        )
    }

    pub fn has_gate(self) -> bool {
        self != Variant::Plain
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Confident => "confident",
            Variant::Upsampling => "upsampling",
            Variant::Vanishing => "vanishing",
            Variant::Weighting => "weighting",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "confident" => Ok(Variant::Confident),
            "upsampling" => Ok(Variant::Upsampling),
            "vanishing" => Ok(Variant::Vanishing),
            "weighting" => Ok(Variant::Weighting),
            other => Err(invalid_param(
                "variant",
                format!("unknown variant `{other}`"),
            )),
        }
    }
}

/// Maps one teacher to its budget group together with the vote weight and
/// participation frequency the plan assigned to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherAssignment {
    pub teacher: u32,
    pub group: u32,
    pub weight: f64,
    pub participation: f64,
}

/// Per-class vote counts for one query. Counts are reals because votes may
/// be weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteVector {
    counts: Vec<f64>,
}

impl VoteVector {
    pub fn new(counts: Vec<f64>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(invalid_param("counts", "need at least two classes"));
        }
        if let Some(bad) = counts.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(invalid_param(
                "counts",
                format!("counts must be finite and nonnegative, got {bad}"),
            ));
        }
        Ok(VoteVector { counts })
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Index of the plurality class; ties break toward the smaller index.
    pub fn plurality(&self) -> usize {
        let mut best = 0;
        for (j, &c) in self.counts.iter().enumerate().skip(1) {
            if c > self.counts[best] {
                best = j;
            }
        }
        best
    }

    pub fn max_count(&self) -> f64 {
        self.counts[self.plurality()]
    }
}

/// Aggregates one query's raw votes into a per-class count vector.
///
/// `raw[t]` is teacher `t`'s vote (`None` = abstained). `weights` supplies
/// per-teacher vote weights (weighting variant), `active` per-teacher
/// participation flags (vanishing variant); both default to "all teachers,
/// weight 1".
pub fn build_vote_vector(
    raw: &[Option<u16>],
    num_classes: usize,
    weights: Option<&[f64]>,
    active: Option<&[bool]>,
) -> Result<VoteVector> {
    if num_classes < 2 {
        return Err(invalid_param("num_classes", "need at least two classes"));
    }
    if let Some(w) = weights {
        if w.len() != raw.len() {
            return Err(Error::DimensionMismatch {
                context: "build_vote_vector weights",
                expected: raw.len(),
                found: w.len(),
            });
        }
    }
    if let Some(a) = active {
        if a.len() != raw.len() {
            return Err(Error::DimensionMismatch {
                context: "build_vote_vector active flags",
                expected: raw.len(),
                found: a.len(),
            });
        }
    }
    let mut counts = vec![0.0f64; num_classes];
    for (t, vote) in raw.iter().enumerate() {
        if let Some(a) = active {
            if !a[t] {
                continue;
            }
        }
        let Some(class) = vote else { continue };
        let class = *class as usize;
        if class >= num_classes {
            return Err(Error::InvalidVote {
                teacher: t,
                class: class as u32,
                num_classes: num_classes as u32,
            });
        }
        counts[class] += weights.map_or(1.0, |w| w[t]);
    }
    VoteVector::new(counts)
}

/// Noisy-argmax release: adds independent `N(0, sigma2^2)` noise to every
/// class count and returns the argmax (ties toward the smaller index).
pub fn gnmax<R: Rng + ?Sized>(votes: &VoteVector, sigma2: f64, rng: &mut R) -> Result<usize> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(invalid_param("sigma2", format!("must be positive, got {sigma2}")));
    }
    let mut best = 0usize;
    let mut best_value = f64::NEG_INFINITY;
    for (j, &c) in votes.counts().iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let noisy = c + sigma2 * z;
        if noisy > best_value {
            best = j;
            best_value = noisy;
        }
    }
    Ok(best)
}

/// Consensus gate: passes iff `max_count + N(0, sigma1^2) >= threshold`.
/// The comparison is inclusive.
pub fn confident_gate<R: Rng + ?Sized>(
    votes: &VoteVector,
    threshold: f64,
    sigma1: f64,
    rng: &mut R,
) -> Result<bool> {
    if !(sigma1 > 0.0) || !sigma1.is_finite() {
        return Err(invalid_param("sigma1", format!("must be positive, got {sigma1}")));
    }
    if !threshold.is_finite() {
        return Err(invalid_param("threshold", "must be finite"));
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(votes.max_count() + sigma1 * z >= threshold)
}
