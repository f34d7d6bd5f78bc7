//! Run configuration: one JSON document covering every stage, with full
//! defaults so `{}` is a valid config. Unknown keys are rejected.

use m2slt_core::prototype::{DbscanConfig, WindowConfig};
use m2slt_core::segment::SegmentConfig;
use m2slt_core::synth::SynthSpec;
use m2slt_core::translate::ModelConfig;
use serde::{Deserialize, Serialize};

/// Optimizer settings for `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSection {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
}

impl Default for SgdSection {
    fn default() -> Self {
        SgdSection {
            lr0: 0.01,
            momentum: 0.0,
            epochs: 60,
        }
    }
}

/// How evaluation feeds frames to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFusion {
    /// RGB and event stacks go to their own branches (the trained pipeline).
    Separate,
    /// Both branches receive `0.5*rgb + 0.5*evt` (unimodal-baseline probe).
    Weighted,
}

/// Evaluation settings for `eval` and `translate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Greedy decode length cap.
    pub max_len: usize,
    /// Add-1 BLEU smoothing; disable for sensitivity checks.
    pub bleu_smoothing: bool,
    /// Frame handling at evaluation time.
    pub frame_fusion: FrameFusion,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_len: 16,
            bleu_smoothing: true,
            frame_fusion: FrameFusion::Separate,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every seeded stage (generation, init, shuffling).
    pub seed: u64,
    /// Sample count for `synth`.
    pub n_samples: usize,
    /// Write EVT-BIN instead of EVT-TXT event files.
    pub binary_events: bool,
    /// Hidden width of the frozen window encoder used by `cluster`.
    pub video_hidden: usize,
    pub synth: SynthSpec,
    pub segment: SegmentConfig,
    pub window: WindowConfig,
    pub dbscan: DbscanConfig,
    pub model: ModelConfig,
    pub sgd: SgdSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            n_samples: 8,
            binary_events: false,
            video_hidden: 32,
            synth: SynthSpec::default(),
            segment: SegmentConfig::default(),
            window: WindowConfig::default(),
            dbscan: DbscanConfig::default(),
            model: ModelConfig::default(),
            sgd: SgdSection::default(),
            eval: EvalSection::default(),
        }
    }
}
