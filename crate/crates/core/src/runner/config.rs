//! Experiment configuration files. Every struct rejects unknown keys and
//! fills omitted fields with the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::sinelab::{PhasePlan, SineTarget};
use crate::stability::SharedMatrix;
use crate::subnet::{LengthMode, ScheduleSpec, StageSize};
use crate::trainers::{FinalDecay, GateScaling, GrowthOp, LrSchedule, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentConfig {
    BoolpolyTrain(BoolpolyTrainConfig),
    StabilitySweep(StabilitySweepConfig),
    Sinelab(SinelabConfig),
    SharedbaseCheck(SharedbaseConfig),
    ScheduleReport(ScheduleReportConfig),
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::BoolpolyTrain(_) => "boolpoly_train",
            ExperimentConfig::StabilitySweep(_) => "stability_sweep",
            ExperimentConfig::Sinelab(_) => "sinelab",
            ExperimentConfig::SharedbaseCheck(_) => "sharedbase_check",
            ExperimentConfig::ScheduleReport(_) => "schedule_report",
        }
    }

    pub fn output_dir(&self) -> &Path {
        match self {
            ExperimentConfig::BoolpolyTrain(c) => &c.output_dir,
            ExperimentConfig::StabilitySweep(c) => &c.output_dir,
            ExperimentConfig::Sinelab(c) => &c.output_dir,
            ExperimentConfig::SharedbaseCheck(c) => &c.output_dir,
            ExperimentConfig::ScheduleReport(c) => &c.output_dir,
        }
    }

    pub fn set_output_dir(&mut self, dir: PathBuf) {
        match self {
            ExperimentConfig::BoolpolyTrain(c) => c.output_dir = dir,
            ExperimentConfig::StabilitySweep(c) => c.output_dir = dir,
            ExperimentConfig::Sinelab(c) => c.output_dir = dir,
            ExperimentConfig::SharedbaseCheck(c) => c.output_dir = dir,
            ExperimentConfig::ScheduleReport(c) => c.output_dir = dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        match self {
            ExperimentConfig::BoolpolyTrain(c) => {
                if c.replicas == 0 || c.steps == 0 || c.batch_size == 0 || c.eval_every == 0 || c.probe_every == 0 {
                    return bad("replicas, steps, batch_size, eval_every and probe_every must be positive".into());
                }
                if c.task.k > c.task.d || c.task.k == 0 {
                    return bad(format!("max degree {} must lie in 1..=d ({})", c.task.k, c.task.d));
                }
                if c.model.depth == 0 {
                    return bad("depth must be positive".into());
                }
                c.lr.validate().map_err(|e| LabError::Config(e.to_string()))?;
                if c.method == Method::Raptr {
                    c.schedule.build(c.model.depth, c.steps).map_err(schedule_error)?;
                }
                Ok(())
            }
            ExperimentConfig::StabilitySweep(c) => {
                if c.depths.is_empty() || c.taus.is_empty() || c.variants.is_empty() || c.probes == 0 || c.d == 0 {
                    return bad("depths, taus, variants, probes and d must be nonempty".into());
                }
                Ok(())
            }
            ExperimentConfig::Sinelab(c) => c.plan.validate().map_err(|e| LabError::Config(e.to_string())),
            ExperimentConfig::SharedbaseCheck(c) => {
                if c.cases == 0 || c.min_depth == 0 || c.max_depth < c.min_depth {
                    return bad("need cases > 0 and 1 <= min_depth <= max_depth".into());
                }
                Ok(())
            }
            ExperimentConfig::ScheduleReport(c) => {
                if c.depth == 0 || c.total_steps == 0 {
                    return bad("depth and total_steps must be positive".into());
                }
                c.schedule.build(c.depth, c.total_steps).map_err(schedule_error)?;
                Ok(())
            }
        }
    }
}

/// Infeasible schedules keep their own error kind; anything else the
/// builder rejects is a config error.
fn schedule_error(e: LabError) -> LabError {
    match e {
        LabError::InfeasibleSchedule(_) => e,
        other => LabError::Config(other.to_string()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Raptr,
    Pld,
    Stacking,
    Baseline,
    WidthRaptr,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Raptr => "raptr",
            Method::Pld => "pld",
            Method::Stacking => "stacking",
            Method::Baseline => "baseline",
            Method::WidthRaptr => "width_raptr",
        }
    }
}

/// Planted sparse polynomial: `per_degree` monomials of each degree
/// `1..=k` over `support` of the `d` variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub d: usize,
    pub k: usize,
    pub per_degree: usize,
    pub support: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            d: 30,
            k: 5,
            per_degree: 10,
            support: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    /// Hidden width of each block; `4·d` when absent.
    pub hidden: Option<usize>,
    pub prenorm: bool,
    /// Std of the readout vector; `0.1/√d` when absent.
    pub readout_std: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            hidden: None,
            prenorm: true,
            readout_std: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PldSettings {
    pub keep_floor: f64,
    pub gamma_f: f64,
}

impl Default for PldSettings {
    fn default() -> Self {
        Self {
            keep_floor: 0.6,
            gamma_f: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackingSettings {
    pub sizes: Vec<usize>,
    pub op: GrowthOp,
    pub mode: LengthMode,
}

impl Default for StackingSettings {
    fn default() -> Self {
        Self {
            sizes: vec![6, 8, 10, 12],
            op: GrowthOp::Topstack,
            mode: LengthMode::Proportional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WidthSettings {
    pub groups: usize,
    pub kept: Vec<usize>,
    pub mode: LengthMode,
}

impl Default for WidthSettings {
    fn default() -> Self {
        Self {
            groups: 4,
            kept: vec![2, 3, 4],
            mode: LengthMode::Proportional,
        }
    }
}

pub fn default_raptr_schedule() -> ScheduleSpec {
    ScheduleSpec {
        stages: [6.0, 8.0, 10.0, 12.0].iter().map(|&s| StageSize::new(s, &[])).collect(),
        mode: LengthMode::Proportional,
        target_avg: Some(9.6),
        warmup_steps: 0,
        quantum: 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoolpolyTrainConfig {
    pub method: Method,
    pub seed: u64,
    /// Seeds `seed, seed+1, …` run as independent replicas.
    pub replicas: usize,
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr: LrSchedule,
    /// Component errors are probed every `probe_every` steps on a fixed
    /// sample of `probe_samples` points, and at the end on
    /// `final_probe_samples` points.
    pub probe_every: usize,
    pub probe_samples: usize,
    pub final_probe_samples: usize,
    pub scaling: GateScaling,
    pub schedule: ScheduleSpec,
    pub pld: PldSettings,
    pub stacking: StackingSettings,
    pub width: WidthSettings,
    /// Also evaluate every drop-one subnetwork at the end.
    pub dropone_eval: bool,
}

impl Default for BoolpolyTrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Raptr,
            seed: 1,
            replicas: 1,
            output_dir: PathBuf::from("runs/boolpoly"),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            steps: 20_000,
            batch_size: 64,
            eval_every: 500,
            eval_size: 4096,
            optimizer: OptimizerConfig::adam(),
            lr: LrSchedule {
                peak_lr: 1e-3,
                warmup_steps: 0,
                final_decay: FinalDecay::Cosine,
            },
            probe_every: 1000,
            probe_samples: 8192,
            final_probe_samples: 100_000,
            scaling: GateScaling::Sqrt,
            schedule: default_raptr_schedule(),
            pld: PldSettings::default(),
            stacking: StackingSettings::default(),
            width: WidthSettings::default(),
            dropone_eval: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepVariant {
    pub name: String,
    pub residual: bool,
    pub layernorm: bool,
    pub shared: SharedMatrix,
    pub random_std: Option<f64>,
}

impl Default for SweepVariant {
    fn default() -> Self {
        Self {
            name: "residual_ln".into(),
            residual: true,
            layernorm: true,
            shared: SharedMatrix::Skew,
            random_std: None,
        }
    }
}

/// Linear networks over every variant × depth × tau.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySweepConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub d: usize,
    pub probes: usize,
    pub depths: Vec<usize>,
    pub taus: Vec<f64>,
    pub variants: Vec<SweepVariant>,
}

impl Default for StabilitySweepConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/stability"),
            d: 100,
            probes: 100,
            depths: vec![8, 16, 32, 64, 128],
            taus: vec![0.0, 0.25, 0.5, 0.75],
            variants: vec![SweepVariant::default()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BestFitSettings {
    pub restarts: usize,
    pub steps: usize,
}

impl Default for BestFitSettings {
    fn default() -> Self {
        Self { restarts: 64, steps: 3000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinelabConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub d: usize,
    pub plan: PhasePlan,
    pub target: SineTarget,
    /// Add `p0` inside the second sine as well.
    pub extra_p0: bool,
    pub best_fit: BestFitSettings,
}

impl Default for SinelabConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/sinelab"),
            d: 5,
            plan: PhasePlan::default(),
            target: SineTarget::standard(),
            extra_p0: false,
            best_fit: BestFitSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharedbaseConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cases: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    pub d: usize,
    pub hidden: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for SharedbaseConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/sharedbase"),
            cases: 100,
            min_depth: 2,
            max_depth: 8,
            d: 6,
            hidden: 12,
            batch: 4,
            lr: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleReportConfig {
    pub output_dir: PathBuf,
    pub depth: usize,
    pub total_steps: usize,
    pub schedule: ScheduleSpec,
}

impl Default for ScheduleReportConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/schedule"),
            depth: 24,
            total_steps: 400_000,
            schedule: ScheduleSpec {
                stages: [6.0, 12.0, 18.0, 24.0].iter().map(|&s| StageSize::new(s, &[])).collect(),
                mode: LengthMode::Proportional,
                target_avg: Some(20.0),
                warmup_steps: 0,
                quantum: 1000,
            },
        }
    }
}
