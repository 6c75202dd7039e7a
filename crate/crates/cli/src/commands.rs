//! The four subcommand bodies. Each writes its files atomically (temporary
//! sibling + rename) so interrupted runs never leave half-written output,
//! and everything is a pure function of the config for byte-identical
//! replays.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ppate_core::engine::{repeat_and_aggregate, RunOutput, RunSummary};
use ppate_core::history::CostHistory;
use ppate_core::planner::Plan;
use ppate_core::rng::derive_seed;
use ppate_core::simulator::{random_ground_truth, SyntheticEnsemble, VoteMatrix};
use ppate_core::Result;

use crate::config::ExperimentConfig;

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Resolves the config into a plan and stores it as JSON.
pub fn cmd_plan(config: &ExperimentConfig, out: &Path) -> Result<Plan> {
    let plan = config.build_plan()?;
    let mut json = serde_json::to_string_pretty(&plan)?;
    json.push('\n');
    write_atomic(out, json.as_bytes())?;
    Ok(plan)
}

/// Synthesizes one vote matrix (with ground truth) at the plan's scale and
/// stores it. Uses the ensemble-0 seed, so a run pointed at the file sees
/// the same votes the synthetic source would have drawn first.
pub fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<VoteMatrix> {
    let plan = config.build_plan()?;
    let seed = derive_seed(config.seeds.data, 0);
    let ensemble = SyntheticEnsemble::uniform(
        plan.config.teachers,
        config.data.accuracy,
        plan.config.num_classes,
        config.data.hard_query_fraction,
    )?;
    let truth = random_ground_truth(config.data.num_queries, plan.config.num_classes, seed);
    let votes = ensemble.sample_votes(&truth, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    votes.save(out)?;
    Ok(votes)
}

/// Runs the full experiment and writes everything into the output
/// directory: `plan.json`, one `history_NNN.csv` per repetition, and
/// `summary.json`.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutput> {
    let run_config = config.to_run_config()?;
    let output = repeat_and_aggregate(&run_config)?;
    let dir = &config.output.directory;
    std::fs::create_dir_all(dir)?;
    let mut plan_json = serde_json::to_string_pretty(&run_config.plan)?;
    plan_json.push('\n');
    write_atomic(&dir.join("plan.json"), plan_json.as_bytes())?;
    for (i, history) in output.histories.iter().enumerate() {
        history.save(&dir.join(format!("history_{i:03}.csv")))?;
    }
    let mut summary_json = serde_json::to_string_pretty(&output.summary)?;
    summary_json.push('\n');
    write_atomic(&dir.join("summary.json"), summary_json.as_bytes())?;
    Ok(output)
}

/// Flattens stored histories into one plot-ready long-format CSV. The
/// leading `run` column is the position of the file in the argument list.
pub fn cmd_report(histories: &[PathBuf]) -> Result<String> {
    let mut csv = String::from("run,query_index,group_id,epsilon_spent,labels_so_far,answered\n");
    for (run, path) in histories.iter().enumerate() {
        let history = CostHistory::load(path)?;
        for record in &history.records {
            for (group, cost) in record.groups.iter().enumerate() {
                writeln!(
                    csv,
                    "{run},{},{group},{},{},{}",
                    record.query,
                    cost.epsilon,
                    record.labels_so_far,
                    u8::from(record.answered)
                )
                .expect("writing to a string cannot fail");
            }
        }
    }
    Ok(csv)
}

/// Renders the aggregate of a run as a small aligned table.
pub fn summary_table(variant: &str, summary: &RunSummary) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:>11} {:>11} {:>10} {:>9}",
        "variant", "repetitions", "mean_labels", "std_labels", "exhausted"
    )
    .unwrap();
    writeln!(
        out,
        "{:<12} {:>11} {:>11.2} {:>10.2} {:>9}",
        variant, summary.repetitions, summary.mean_labels, summary.std_labels, summary.exhausted
    )
    .unwrap();
    out
}
