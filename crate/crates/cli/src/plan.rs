//! Plan execution: each step is parsed and dispatched like a command line.

use std::path::PathBuf;

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use percsim_core::io::{run_plan, ExperimentPlan, PlanStep, SUMMARY_FILE};
use percsim_core::{Error, Result};

use crate::args::{Cli, Command, GlobalArgs};
use crate::commands;

/// Inputs of the canned cross-quality study.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrossQuality {
    /// Lowest-quality checkpoint.
    low: PathBuf,
    /// Highest-quality checkpoint.
    high: PathBuf,
    manifest: PathBuf,
    #[serde(default = "default_kind")]
    kind: String,
    output_dir: PathBuf,
}

fn default_kind() -> String {
    "twoafc_csv".into()
}

fn cross_quality(g: &GlobalArgs) -> Result<ExperimentPlan> {
    let path = g.config.as_ref().ok_or_else(|| Error::Config("the cross-quality plan reads its inputs from --config".into()))?;
    let c: CrossQuality = serde_json::from_slice(&std::fs::read(path)?)?;
    let step = |label: &str, model: &PathBuf| PlanStep {
        command: "eval-2afc".into(),
        config: None,
        args: vec![
            "--model".into(),
            model.display().to_string(),
            "--manifest".into(),
            c.manifest.display().to_string(),
            "--kind".into(),
            c.kind.clone(),
            "--out".into(),
            format!("{{out}}/{label}.json"),
        ],
    };
    Ok(ExperimentPlan {
        name: "cross-quality".into(),
        steps: vec![step("low", &c.low), step("high", &c.high)],
        output_dir: c.output_dir,
    })
}

fn step_argv(step: &PlanStep, plan: &ExperimentPlan, g: &GlobalArgs) -> Vec<String> {
    let out = plan.output_dir.display().to_string();
    let mut argv = vec!["percsim".to_string(), step.command.clone()];
    if let Some(c) = &step.config {
        argv.push("--config".into());
        argv.push(c.display().to_string());
    }
    if let Some(d) = &g.data_dir {
        argv.push("--data-dir".into());
        argv.push(d.display().to_string());
    }
    if let Some(s) = g.seed {
        argv.push("--seed".into());
        argv.push(s.to_string());
    }
    argv.extend(step.args.iter().map(|a| a.replace("{out}", &out)));
    argv
}

fn exec(step: &PlanStep, plan: &ExperimentPlan, g: &GlobalArgs) -> Result<Option<Value>> {
    let argv = step_argv(step, plan, g);
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(format!("step `{}`: {}", step.command, e.to_string().trim())))?;
    if matches!(cli.command, Command::RunPlan(_)) {
        return Err(Error::Config("plans cannot nest run-plan steps".into()));
    }
    commands::dispatch(&cli).map(Some)
}

pub fn run(g: &GlobalArgs, plan: &str) -> Result<Value> {
    let plan = match plan {
        "cross-quality" => cross_quality(g)?,
        file => ExperimentPlan::load(commands::resolve(g, file.as_ref()))?,
    };
    let summary = run_plan(&plan, |step| exec(step, &plan, g))?;
    let mut out = serde_json::to_value(&summary)?;
    out["summary"] = json!(plan.output_dir.join(SUMMARY_FILE));
    if plan.name == "cross-quality" && summary.ok {
        let score = |i: usize| summary.steps[i].result.as_ref().and_then(|r| r["scores"][0]["score"].as_f64());
        if let (Some(lo), Some(hi)) = (score(0), score(1)) {
            out["low"] = json!(lo);
            out["high"] = json!(hi);
            out["gap"] = json!((hi - lo).abs());
        }
    }
    if !summary.ok {
        let failed = summary.steps.iter().find(|s| s.error.is_some());
        let msg = failed.map(|s| format!("step `{}` failed: {}", s.command, s.error.as_deref().unwrap_or(""))).unwrap_or_default();
        return Err(Error::Partial { item: plan.name.clone(), source: Box::new(Error::Precondition(msg)) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_arguments_substitute_the_output_dir() {
        let plan = ExperimentPlan { name: "p".into(), steps: vec![], output_dir: "/tmp/run".into() };
        let step = PlanStep { command: "train".into(), config: Some("c.json".into()), args: vec!["--out".into(), "{out}/ck".into()] };
        let g = GlobalArgs { seed: Some(3), config: None, out: None, json_errors: false, data_dir: None };
        assert_eq!(
            step_argv(&step, &plan, &g),
            ["percsim", "train", "--config", "c.json", "--seed", "3", "--out", "/tmp/run/ck"]
        );
    }
}
