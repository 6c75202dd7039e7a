//! Experiment configuration: a single TOML document covering the variant,
//! mechanism parameters, budget distribution, data source, seeds, and
//! output locations, with per-field command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use ppate_core::aggregators::Variant;
use ppate_core::engine::{RunConfig, VoteSource, VotingConfig};
use ppate_core::planner::{self, BudgetShare, Plan, PlanOptions};
use ppate_core::rdp::default_order_grid;
use ppate_core::simulator::VoteMatrix;
use ppate_core::{Error, Result};

fn invalid(name: &'static str, message: impl Into<String>) -> Error {
    Error::InvalidParameter { name, message: message.into() }
}

/// One entry of the budget distribution: a privacy budget and the fraction
/// of data points that carry it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetEntry {
    pub epsilon: f64,
    pub ratio: f64,
}

impl BudgetEntry {
    fn to_share(self) -> BudgetShare {
        BudgetShare { epsilon: self.epsilon, fraction: self.ratio }
    }
}

impl FromStr for BudgetEntry {
    type Err = String;

    /// Parses the `--budget EPS:RATIO` flag form, e.g. `0.6931:0.5`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (eps, ratio) = s
            .split_once(':')
            .ok_or_else(|| format!("expected EPS:RATIO, got {s:?}"))?;
        let epsilon: f64 = eps.trim().parse().map_err(|_| format!("bad epsilon {eps:?}"))?;
        let ratio: f64 = ratio.trim().parse().map_err(|_| format!("bad ratio {ratio:?}"))?;
        Ok(BudgetEntry { epsilon, ratio })
    }
}

/// Comma-separated Rényi order grid for the `--orders` flag.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderList(pub Vec<f64>);

impl FromStr for OrderList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("bad order {p:?}")))
            .collect::<std::result::Result<Vec<f64>, String>>()
            .map(OrderList)
    }
}

/// Where the votes come from: an explicit matrix file, or a synthetic
/// ensemble described by its accuracy profile. A set `vote_matrix` wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Private data points across all groups (teachers are planned from
    /// this via the budget ratios).
    pub total_points: u64,
    /// Queries per synthetic matrix.
    pub num_queries: usize,
    /// Per-teacher accuracy of synthetic ensembles.
    pub accuracy: f64,
    /// Fraction of queries on which synthetic teachers guess uniformly.
    pub hard_query_fraction: f64,
    /// Path to a stored vote matrix; overrides the synthetic fields.
    pub vote_matrix: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        // accuracy 0.9 with ~2.4% hard queries puts the ensemble's
        // plurality accuracy near 97.7% at the 250-teacher reference scale
        DataConfig {
            total_points: 60_000,
            num_queries: 9_000,
            accuracy: 0.9,
            hard_query_fraction: 0.0237,
            vote_matrix: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Master seed of ensembles and ground truth.
    pub data: u64,
    /// Master seed of gate/answer noise and schedules.
    pub voting: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 1, voting: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Repetitions {
    /// Independently sampled teacher ensembles.
    pub ensembles: u32,
    /// Voting processes per ensemble.
    pub votings: u32,
}

impl Default for Repetitions {
    fn default() -> Self {
        Repetitions { ensembles: 1, votings: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Accounting {
    /// Rényi order grid; omitted means the integers 2..=50.
    pub orders: Option<Vec<f64>>,
    /// Skip the gate's privacy charge (ablation only — the released
    /// threshold comparison is then unaccounted).
    pub free_gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory for plan, history, and summary files.
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: PathBuf::from("out") }
    }
}

/// The complete experiment description. Defaults reproduce the reference
/// MNIST-scale setup: 250 teachers, 10 classes, σ₁ = 150, σ₂ = 40, T = 200,
/// δ = 1e-5, one log-2 budget for everyone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub voting: VotingConfig,
    pub budgets: Vec<BudgetEntry>,
    pub data: DataConfig,
    pub seeds: Seeds,
    pub repetitions: Repetitions,
    pub accounting: Accounting,
    pub plan: PlanOptions,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::Confident,
            voting: VotingConfig {
                teachers: 250,
                num_classes: 10,
                sigma1: 150.0,
                sigma2: 40.0,
                threshold: 200.0,
                delta: 1e-5,
                label_cap: 2000,
            },
            budgets: vec![BudgetEntry { epsilon: std::f64::consts::LN_2, ratio: 1.0 }],
            data: DataConfig::default(),
            seeds: Seeds::default(),
            repetitions: Repetitions::default(),
            accounting: Accounting::default(),
            plan: PlanOptions::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| invalid("config", format!("cannot serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.voting.validate()?;
        if self.budgets.is_empty() {
            return Err(invalid("budgets", "need at least one budget entry"));
        }
        let mut ratio_sum = 0.0;
        for b in &self.budgets {
            if !b.epsilon.is_finite() || b.epsilon <= 0.0 {
                return Err(invalid("budgets", format!("epsilon must be positive, got {}", b.epsilon)));
            }
            if !b.ratio.is_finite() || b.ratio <= 0.0 || b.ratio > 1.0 {
                return Err(invalid("budgets", format!("ratio must lie in (0, 1], got {}", b.ratio)));
            }
            ratio_sum += b.ratio;
        }
        if (ratio_sum - 1.0).abs() > 1e-9 {
            return Err(invalid("budgets", format!("ratios must sum to 1, got {ratio_sum}")));
        }
        if self.data.vote_matrix.is_none() && self.data.num_queries == 0 {
            return Err(invalid("data.num_queries", "synthetic runs need at least one query"));
        }
        if let Some(orders) = &self.accounting.orders {
            if orders.is_empty() {
                return Err(invalid("accounting.orders", "order grid cannot be empty"));
            }
        }
        Ok(())
    }

    pub fn budget_shares(&self) -> Vec<BudgetShare> {
        self.budgets.iter().map(|b| b.to_share()).collect()
    }

    pub fn order_grid(&self) -> Vec<f64> {
        self.accounting.orders.clone().unwrap_or_else(default_order_grid)
    }

    pub fn build_plan(&self) -> Result<Plan> {
        planner::plan(
            self.variant,
            &self.budget_shares(),
            self.data.total_points,
            &self.voting,
            &self.plan,
        )
    }

    /// Resolves the config into an executable run: plan, vote source, grid,
    /// repetition counts, and seeds.
    pub fn to_run_config(&self) -> Result<RunConfig> {
        let plan = self.build_plan()?;
        let source = match &self.data.vote_matrix {
            Some(path) => VoteSource::Matrix(VoteMatrix::load(path)?),
            None => VoteSource::Synthetic {
                accuracy: self.data.accuracy,
                hard_query_fraction: self.data.hard_query_fraction,
                num_queries: self.data.num_queries,
            },
        };
        Ok(RunConfig {
            plan,
            source,
            orders: self.order_grid(),
            ensembles: self.repetitions.ensembles,
            votings: self.repetitions.votings,
            data_seed: self.seeds.data,
            voting_seed: self.seeds.voting,
            free_gate: self.accounting.free_gate,
        })
    }
}

/// Maps a TOML error to a line-numbered parse error.
fn toml_error(text: &str, error: &toml::de::Error) -> Error {
    let line = error
        .span()
        .map(|span| text[..span.start.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1)
        .unwrap_or(1);
    Error::Parse { line, message: error.message().to_string() }
}

/// Per-field command-line overrides; every config field has one.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Aggregation variant: plain, confident, upsampling, vanishing, weighting.
    #[arg(long)]
    pub variant: Option<Variant>,

    /// Number of teachers before any upsampling rescale.
    #[arg(long)]
    pub teachers: Option<u32>,

    /// Number of classes.
    #[arg(long)]
    pub num_classes: Option<u32>,

    /// Consensus-gate noise scale σ₁.
    #[arg(long)]
    pub sigma1: Option<f64>,

    /// Answer noise scale σ₂.
    #[arg(long)]
    pub sigma2: Option<f64>,

    /// Consensus threshold T.
    #[arg(long)]
    pub threshold: Option<f64>,

    /// δ for the RDP → DP conversion.
    #[arg(long)]
    pub delta: Option<f64>,

    /// Stop after this many produced labels.
    #[arg(long)]
    pub label_cap: Option<u32>,

    /// Budget share as EPS:RATIO; repeat per group (replaces the config's
    /// whole list).
    #[arg(long = "budget")]
    pub budget: Vec<BudgetEntry>,

    /// Total private data points.
    #[arg(long)]
    pub total_points: Option<u64>,

    /// Queries per synthetic matrix.
    #[arg(long)]
    pub num_queries: Option<usize>,

    /// Per-teacher accuracy of synthetic ensembles.
    #[arg(long)]
    pub accuracy: Option<f64>,

    /// Fraction of queries where synthetic teachers guess uniformly.
    #[arg(long)]
    pub hard_query_fraction: Option<f64>,

    /// Use a stored vote matrix instead of synthesizing one.
    #[arg(long)]
    pub vote_matrix: Option<PathBuf>,

    /// Drop a configured vote-matrix path and synthesize votes.
    #[arg(long)]
    pub synthetic: bool,

    /// Master seed of ensembles and ground truth.
    #[arg(long)]
    pub data_seed: Option<u64>,

    /// Master seed of gate/answer noise and schedules.
    #[arg(long)]
    pub voting_seed: Option<u64>,

    /// Independently sampled teacher ensembles.
    #[arg(long)]
    pub ensembles: Option<u32>,

    /// Voting processes per ensemble.
    #[arg(long)]
    pub votings: Option<u32>,

    /// Rényi order grid as a comma-separated list.
    #[arg(long)]
    pub orders: Option<OrderList>,

    /// Skip the gate's privacy charge (ablation only).
    #[arg(long)]
    pub free_gate: bool,

    /// Relative error allowed when snapping budget ratios to duplicates.
    #[arg(long)]
    pub upsampling_precision: Option<f64>,

    /// Hard cap on upsampling duplicate counts.
    #[arg(long)]
    pub duplicate_cap: Option<u32>,

    /// Exponent of the vanishing frequency rule.
    #[arg(long)]
    pub vanishing_exponent: Option<f64>,

    /// Explicit answer noise for vanishing runs (overrides the heuristic).
    #[arg(long)]
    pub vanishing_sigma2: Option<f64>,

    /// Vanishing schedules reshuffle every this many queries.
    #[arg(long)]
    pub reshuffle_period: Option<u32>,

    /// Output directory for plan, history, and summary files.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    /// Applies every set flag on top of `config`, then revalidates.
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = &$value {
                    $field = v.clone();
                }
            };
        }
        set!(config.variant, self.variant);
        set!(config.voting.teachers, self.teachers);
        set!(config.voting.num_classes, self.num_classes);
        set!(config.voting.sigma1, self.sigma1);
        set!(config.voting.sigma2, self.sigma2);
        set!(config.voting.threshold, self.threshold);
        set!(config.voting.delta, self.delta);
        set!(config.voting.label_cap, self.label_cap);
        if !self.budget.is_empty() {
            config.budgets = self.budget.clone();
        }
        set!(config.data.total_points, self.total_points);
        set!(config.data.num_queries, self.num_queries);
        set!(config.data.accuracy, self.accuracy);
        set!(config.data.hard_query_fraction, self.hard_query_fraction);
        if let Some(path) = &self.vote_matrix {
            config.data.vote_matrix = Some(path.clone());
        }
        if self.synthetic {
            config.data.vote_matrix = None;
        }
        set!(config.seeds.data, self.data_seed);
        set!(config.seeds.voting, self.voting_seed);
        set!(config.repetitions.ensembles, self.ensembles);
        set!(config.repetitions.votings, self.votings);
        if let Some(OrderList(orders)) = &self.orders {
            config.accounting.orders = Some(orders.clone());
        }
        if self.free_gate {
            config.accounting.free_gate = true;
        }
        set!(config.plan.upsampling_precision, self.upsampling_precision);
        set!(config.plan.duplicate_cap, self.duplicate_cap);
        set!(config.plan.vanishing_exponent, self.vanishing_exponent);
        if let Some(v) = self.vanishing_sigma2 {
            config.plan.vanishing_sigma2 = Some(v);
        }
        set!(config.plan.reshuffle_period, self.reshuffle_period);
        set!(config.output.directory, self.output_dir);
        config.validate()
    }
}

impl fmt::Display for BudgetEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.epsilon, self.ratio)
    }
}
