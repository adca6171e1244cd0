//! Experiment plans: ordered command steps with a JSON summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub command: String,
    #[serde(default)]
    pub config: Option<PathBuf>,
    /// Extra command-line arguments.
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    #[serde(default)]
    pub steps: Vec<PlanStep>,
    pub output_dir: PathBuf,
}

impl ExperimentPlan {
    /// Relative config paths resolve against `base`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut plan: Self = serde_json::from_slice(&fs::read(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for s in &mut plan.steps {
            if let Some(c) = &s.config {
                if c.is_relative() {
                    s.config = Some(base.join(c));
                }
            }
        }
        if plan.output_dir.is_relative() {
            plan.output_dir = base.join(&plan.output_dir);
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            if let Some(c) = &s.config {
                if !c.is_file() {
                    return Err(Error::Config(format!("step {} (`{}`): config {} does not exist", i + 1, s.command, c.display())));
                }
            }
        }
        fs::create_dir_all(&self.output_dir)?;
        let probe = self.output_dir.join(".write-test");
        fs::write(&probe, b"")?;
        fs::remove_file(probe)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepState {
    Ok,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStatus {
    pub command: String,
    pub status: StepState,
    pub seconds: f64,
    #[serde(default)]
    pub error: Option<String>,
    /// Numbers reported by the step.
    #[serde(default)]
    pub result: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub name: String,
    pub ok: bool,
    pub steps: Vec<StepStatus>,
}

pub const SUMMARY_FILE: &str = "summary.json";

/// Run steps in order through `exec`. The first failure marks the remaining
/// steps skipped; earlier artifacts stay on disk. The summary is written to
/// `summary.json` in the output directory either way.
pub fn run_plan(
    plan: &ExperimentPlan,
    mut exec: impl FnMut(&PlanStep) -> Result<Option<serde_json::Value>>,
) -> Result<PlanSummary> {
    plan.validate()?;
    let mut steps = Vec::with_capacity(plan.steps.len());
    let mut failed = false;
    for step in &plan.steps {
        if failed {
            steps.push(StepStatus { command: step.command.clone(), status: StepState::Skipped, seconds: 0.0, error: None, result: None });
            continue;
        }
        let start = Instant::now();
        let outcome = exec(step);
        let seconds = start.elapsed().as_secs_f64();
        let status = match outcome {
            Ok(result) => StepStatus { command: step.command.clone(), status: StepState::Ok, seconds, error: None, result },
            Err(e) => {
                failed = true;
                log::error!("plan `{}` step `{}` failed: {e}", plan.name, step.command);
                StepStatus { command: step.command.clone(), status: StepState::Failed, seconds, error: Some(e.to_string()), result: None }
            }
        };
        steps.push(status);
    }
    let summary = PlanSummary { name: plan.name.clone(), ok: !failed, steps };
    fs::write(plan.output_dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}
