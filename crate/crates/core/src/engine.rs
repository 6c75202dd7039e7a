//! The labeling loop: per-query consensus gate, noisy aggregation, per-group
//! cost accumulation, best-α conversion, and budget-exhaustion tracking.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregators::{build_vote_vector, confident_gate, gnmax, Variant};
use crate::error::{invalid_param, Error, Result};
use crate::history::{CostHistory, Exhaustion, GroupCost, QueryRecord};
use crate::planner::{schedule_vanishing, Plan};
use crate::rdp::{loose_bound_curve, per_query_cost, rdp_to_dp, RdpCurve, Sensitivity};
use crate::rng::{derive_seed, stream_rng, Purpose};
use crate::simulator::{random_ground_truth, SyntheticEnsemble, VoteMatrix};

/// Ensemble and mechanism parameters shared by every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VotingConfig {
    /// Number of teachers `k`.
    pub teachers: u32,
    /// Number of classes `m`.
    pub num_classes: u32,
    /// Noise scale of the consensus gate.
    pub sigma1: f64,
    /// Noise scale of the argmax answer.
    pub sigma2: f64,
    /// Consensus threshold `T` (gate passes when noisy max count >= T).
    pub threshold: f64,
    /// The δ used when converting accumulated RDP to (ε, δ)-DP.
    pub delta: f64,
    /// Voting stops after this many produced labels.
    pub label_cap: u32,
}

impl VotingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teachers == 0 {
            return Err(invalid_param("teachers", "need at least one teacher"));
        }
        if self.num_classes < 2 || self.num_classes > u32::from(u16::MAX) {
            return Err(invalid_param(
                "num_classes",
                format!("must lie in [2, 65535], got {}", self.num_classes),
            ));
        }
        for (name, v) in [("sigma1", self.sigma1), ("sigma2", self.sigma2)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(invalid_param(name, format!("must be positive, got {v}")));
            }
        }
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(invalid_param(
                "threshold",
                format!("must be nonnegative, got {}", self.threshold),
            ));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 || self.delta >= 1.0 {
            return Err(invalid_param(
                "delta",
                format!("must lie in (0, 1), got {}", self.delta),
            ));
        }
        if self.label_cap == 0 {
            return Err(invalid_param("label_cap", "must be positive"));
        }
        Ok(())
    }

    /// Rescales the ensemble by the upsampling gain `s`: teacher count
    /// (rounded), both noise scales, and the threshold all grow by `s`.
    pub fn scaled(&self, s: f64) -> Result<VotingConfig> {
        if !s.is_finite() || s <= 0.0 {
            return Err(invalid_param("gain", format!("must be positive, got {s}")));
        }
        let mut out = self.clone();
        out.teachers = (f64::from(self.teachers) * s).round() as u32;
        out.sigma1 = self.sigma1 * s;
        out.sigma2 = self.sigma2 * s;
        out.threshold = self.threshold * s;
        out.validate()?;
        Ok(out)
    }
}

/// Where the vote matrices of a repeated experiment come from.
#[derive(Debug, Clone, PartialEq)]
pub enum VoteSource {
    /// Fresh synthetic ensembles, one per ensemble repetition.
    Synthetic {
        accuracy: f64,
        hard_query_fraction: f64,
        num_queries: usize,
    },
    /// One externally supplied matrix, replayed in every repetition.
    Matrix(VoteMatrix),
}

/// A complete repeated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub plan: Plan,
    pub source: VoteSource,
    /// Rényi order grid for the accounting.
    pub orders: Vec<f64>,
    /// Outer repetitions: independently sampled teacher ensembles.
    pub ensembles: u32,
    /// Inner repetitions: voting processes per ensemble.
    pub votings: u32,
    /// Master seed of ensembles and ground truth.
    pub data_seed: u64,
    /// Master seed of gate/answer noise and schedules.
    pub voting_seed: u64,
    /// Skip the gate's privacy charge (ablation only; the released
    /// threshold comparison is then unaccounted, weaker than the stated
    /// analysis).
    pub free_gate: bool,
}

/// Label-count statistics over the repetitions of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub repetitions: u32,
    /// Labels until exhaustion, per repetition.
    pub label_counts: Vec<u32>,
    pub mean_labels: f64,
    /// Sample standard deviation (0 for a single repetition).
    pub std_labels: f64,
    /// How many repetitions actually hit their budget within the cap.
    pub exhausted: u32,
}

/// Histories of all repetitions plus their summary, in repetition order
/// (ensembles outer, voting processes inner).
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub histories: Vec<CostHistory>,
    pub summary: RunSummary,
}

/// Runs one voting process over a fixed vote matrix.
///
/// Per query: build the variant's vote vector; check the consensus gate
/// with σ₁ (personalized variants); if it passes, release a noisy-argmax
/// label with σ₂. The gate is always charged at the data-independent loose
/// bound, an answer additionally via the data-dependent bound, each at the
/// group's own sensitivity; vanishing teachers that sat out a query are
/// charged nothing for it. After every query each group's accumulated curve
/// is converted at its δ, and the first query whose converted spend exceeds
/// any budget (smallest group id on ties) is marked as the exhaustion
/// point. Recording continues to the label cap regardless, so histories of
/// different runs remain comparable; the usable output is the labels
/// strictly before exhaustion.
pub fn run_voting(
    votes: &VoteMatrix,
    plan: &Plan,
    orders: &[f64],
    voting_seed: u64,
    free_gate: bool,
) -> Result<CostHistory> {
    let cfg = &plan.config;
    cfg.validate()?;
    if votes.teachers() != cfg.teachers {
        return Err(Error::DimensionMismatch {
            context: "vote-matrix teachers",
            expected: cfg.teachers as usize,
            found: votes.teachers() as usize,
        });
    }
    if votes.num_classes() != cfg.num_classes {
        return Err(Error::DimensionMismatch {
            context: "vote-matrix classes",
            expected: cfg.num_classes as usize,
            found: votes.num_classes() as usize,
        });
    }
    if plan.assignments.len() != cfg.teachers as usize {
        return Err(Error::DimensionMismatch {
            context: "plan assignments",
            expected: cfg.teachers as usize,
            found: plan.assignments.len(),
        });
    }
    for (i, g) in plan.groups.iter().enumerate() {
        if g.id != i as u32 {
            return Err(invalid_param("groups", "group ids must be contiguous from 0"));
        }
    }

    let m = cfg.num_classes as usize;
    let teachers = cfg.teachers as usize;
    let vanishing = plan.variant == Variant::Vanishing;
    let schedule = if vanishing {
        Some(schedule_vanishing(
            &plan.teacher_frequencies(),
            votes.num_queries(),
            plan.reshuffle_period,
            voting_seed,
        )?)
    } else {
        None
    };
    let weights = if plan.variant == Variant::Weighting {
        Some(plan.teacher_weights())
    } else {
        None
    };
    let teacher_group: Vec<usize> = plan.assignments.iter().map(|a| a.group as usize).collect();
    let group_members: Vec<Vec<usize>> = (0..plan.groups.len())
        .map(|g| (0..teachers).filter(|&t| teacher_group[t] == g).collect())
        .collect();

    // one charge per distinct sensitivity per query, shared across groups
    let mut sens_values: Vec<f64> = Vec::new();
    let mut sens_index: HashMap<u64, usize> = HashMap::new();
    let group_sens: Vec<usize> = plan
        .groups
        .iter()
        .map(|g| {
            *sens_index.entry(g.sensitivity.to_bits()).or_insert_with(|| {
                sens_values.push(g.sensitivity);
                sens_values.len() - 1
            })
        })
        .collect();
    let sens: Vec<Sensitivity> = sens_values
        .iter()
        .map(|&s| Sensitivity::new(s))
        .collect::<Result<_>>()?;
    let gate_charges: Vec<RdpCurve> = sens
        .iter()
        .map(|&s| loose_bound_curve(s, cfg.sigma1, orders))
        .collect::<Result<_>>()?;

    // vanishing accounts per teacher (shifted schedules give teachers of
    // one group different spends; a group reports its worst member), the
    // other variants directly per group
    let track_count = if vanishing { teachers } else { plan.groups.len() };
    let mut tracks = vec![RdpCurve::zero(orders)?; track_count];

    let mut records = Vec::with_capacity(votes.num_queries());
    let mut labels = 0u32;
    let mut exhaustion: Option<Exhaustion> = None;

    for q in 0..votes.num_queries() {
        if labels >= cfg.label_cap {
            break;
        }
        let active = schedule.as_ref().map(|s| s.active(q));
        let vv = build_vote_vector(votes.row(q), m, weights.as_deref(), active)?;

        let passed = if plan.variant.has_gate() {
            let mut rng = stream_rng(voting_seed, q as u64, Purpose::Gate);
            confident_gate(&vv, cfg.threshold, cfg.sigma1, &mut rng)?
        } else {
            true
        };

        let mut label = None;
        if passed {
            let mut rng = stream_rng(voting_seed, q as u64, Purpose::Answer);
            let class = gnmax(&vv, cfg.sigma2, &mut rng)?;
            labels += 1;
            label = Some(class as u16);
        }

        let answer_charges: Option<Vec<RdpCurve>> = if passed {
            Some(
                sens.iter()
                    .map(|&s| per_query_cost(&vv, s, cfg.sigma2, orders))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let charge_gate = plan.variant.has_gate() && !free_gate;
        if vanishing {
            let active = active.expect("vanishing runs always carry a schedule");
            for (t, track) in tracks.iter_mut().enumerate() {
                if !active[t] {
                    continue; // sitting out costs nothing
                }
                let si = group_sens[teacher_group[t]];
                if charge_gate {
                    track.accumulate(&gate_charges[si])?;
                }
                if let Some(answer) = &answer_charges {
                    track.accumulate(&answer[si])?;
                }
            }
        } else {
            for (g, track) in tracks.iter_mut().enumerate() {
                let si = group_sens[g];
                if charge_gate {
                    track.accumulate(&gate_charges[si])?;
                }
                if let Some(answer) = &answer_charges {
                    track.accumulate(&answer[si])?;
                }
            }
        }

        let groups: Vec<GroupCost> = if vanishing {
            group_members
                .iter()
                .map(|members| {
                    let mut worst = GroupCost {
                        epsilon: f64::NEG_INFINITY,
                        best_alpha: 0.0,
                        rdp_at_best: 0.0,
                    };
                    for &t in members {
                        let (epsilon, best_alpha) = rdp_to_dp(&tracks[t], cfg.delta)?;
                        if epsilon > worst.epsilon {
                            let i = orders.iter().position(|&a| a == best_alpha).unwrap();
                            worst = GroupCost {
                                epsilon,
                                best_alpha,
                                rdp_at_best: tracks[t].costs()[i],
                            };
                        }
                    }
                    Ok(worst)
                })
                .collect::<Result<_>>()?
        } else {
            tracks
                .iter()
                .map(|track| {
                    let (epsilon, best_alpha) = rdp_to_dp(track, cfg.delta)?;
                    let i = orders.iter().position(|&a| a == best_alpha).unwrap();
                    Ok(GroupCost { epsilon, best_alpha, rdp_at_best: track.costs()[i] })
                })
                .collect::<Result<_>>()?
        };

        if exhaustion.is_none() {
            for (g, spec) in plan.groups.iter().enumerate() {
                if groups[g].epsilon > spec.budget.epsilon {
                    exhaustion = Some(Exhaustion { query: q as u32, group: g as u32 });
                    break;
                }
            }
        }

        records.push(QueryRecord {
            query: q as u32,
            answered: passed,
            label,
            labels_so_far: labels,
            groups,
        });
    }

    Ok(CostHistory {
        budgets: plan.groups.iter().map(|g| g.budget).collect(),
        records,
        exhaustion,
        produced_labels: labels,
    })
}

fn make_votes(plan: &Plan, source: &VoteSource, data_seed: u64, ensemble: u32) -> Result<VoteMatrix> {
    match source {
        VoteSource::Matrix(votes) => Ok(votes.clone()),
        VoteSource::Synthetic { accuracy, hard_query_fraction, num_queries } => {
            let seed = derive_seed(data_seed, u64::from(ensemble));
            let teachers = SyntheticEnsemble::uniform(
                plan.config.teachers,
                *accuracy,
                plan.config.num_classes,
                *hard_query_fraction,
            )?;
            let truth = random_ground_truth(*num_queries, plan.config.num_classes, seed);
            teachers.sample_votes(&truth, seed)
        }
    }
}

/// Runs `ensembles × votings` independent repetitions (in parallel) and
/// summarizes their label counts. Every repetition derives its own seeds
/// from the two master seeds, so the whole experiment is reproducible.
pub fn repeat_and_aggregate(config: &RunConfig) -> Result<RunOutput> {
    if config.ensembles == 0 || config.votings == 0 {
        return Err(invalid_param("repetitions", "need at least one ensemble and voting"));
    }
    let per_ensemble: Vec<Vec<CostHistory>> = (0..config.ensembles)
        .into_par_iter()
        .map(|e| -> Result<Vec<CostHistory>> {
            let votes = make_votes(&config.plan, &config.source, config.data_seed, e)?;
            (0..config.votings)
                .map(|v| {
                    let rep = u64::from(e) * u64::from(config.votings) + u64::from(v);
                    let seed = derive_seed(config.voting_seed, rep);
                    run_voting(&votes, &config.plan, &config.orders, seed, config.free_gate)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let histories: Vec<CostHistory> = per_ensemble.into_iter().flatten().collect();

    let label_counts: Vec<u32> = histories.iter().map(|h| h.labels_until_exhaustion()).collect();
    let n = label_counts.len() as f64;
    let mean = label_counts.iter().map(|&c| f64::from(c)).sum::<f64>() / n;
    let std = if label_counts.len() > 1 {
        (label_counts
            .iter()
            .map(|&c| (f64::from(c) - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        0.0
    };
    let exhausted = histories.iter().filter(|h| h.exhaustion.is_some()).count() as u32;
    Ok(RunOutput {
        summary: RunSummary {
            repetitions: label_counts.len() as u32,
            label_counts,
            mean_labels: mean,
            std_labels: std,
            exhausted,
        },
        histories,
    })
}
