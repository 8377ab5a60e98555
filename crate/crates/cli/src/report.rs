//! JSON report of each command. The structs are the schema: they reject
//! unknown fields, so a report that deserializes is schema-valid.

use std::path::PathBuf;

use armature::fitting::{FitMetrics, TermBreakdown};
use armature::skinning::BenchReport;
use armature::training::{EvalReport, LossTerms, OracleConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Report {
    MakeRig(RigSummary),
    Validate(ValidateReport),
    Synth(SynthReport),
    SynthObs(SynthObsReport),
    Train(TrainReport),
    Fit(FitReport),
    Pose(PoseReport),
    Bench(BenchSummary),
    Sample(SampleReport),
    Export(ExportReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSummary {
    pub rig_id: String,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "N_k")]
    pub n_k: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateReport {
    pub input: PathBuf,
    pub valid: bool,
    pub kind: String,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthReport {
    pub registrations: usize,
    pub subjects: usize,
    pub poses: usize,
    pub seed: u64,
    pub oracle: OracleConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthObsReport {
    pub keypoints3d: usize,
    pub keypoints2d: usize,
    pub vertices: bool,
    pub out: PathBuf,
}

/// One training epoch without wall-clock time, so logs are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub terms: LossTerms,
    pub active_gates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub registrations: usize,
    pub epochs: usize,
    pub initial_active_gates: usize,
    pub final_active_gates: usize,
    pub final_epoch: Option<EpochRecord>,
    pub evaluation: EvalReport,
    pub evaluated_on: String,
    pub pose_prior: bool,
    pub hand_components: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSummary {
    pub name: String,
    pub skipped: Option<String>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub objective: f64,
    pub terms: TermBreakdown,
    pub metrics: FitMetrics,
    pub stages: Vec<StageSummary>,
    pub warnings: Vec<String>,
    pub out: PathBuf,
    pub obj: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseReport {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "F")]
    pub f: usize,
    pub correctives: bool,
    /// Skeletal attributes used, by name.
    pub attributes: Vec<(String, f64)>,
    pub joints: Vec<[f64; 3]>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSummary {
    pub base: BenchReport,
    pub subdivided: Option<BenchReport>,
    /// Per-vertex time of the subdivided rig over the base rig.
    pub per_vertex_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleReport {
    pub seed: u64,
    pub scale: f64,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub obj: PathBuf,
    pub params: armature::model::ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportReport {
    pub files: Vec<PathBuf>,
}
