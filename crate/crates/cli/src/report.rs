//! Evaluation report schema shared by `eval` and `baseline` so comparisons
//! are tabular. Every report echoes the config snapshot.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Report {
    pub task: String,
    /// "policy" for eval runs; the baseline method name otherwise.
    pub method: String,
    pub n_samples: usize,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv: Option<f64>,
    /// Probability mass the sampler puts outside the target support.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub off_support_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_valid_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal_entropy: Option<f64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_overall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_by_operands: Option<BTreeMap<usize, f64>>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_tv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_joint_log_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_joint_log_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_margin: Option<f64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_log_likelihood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_edit_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distinct_fraction: Option<f64>,

    /// Config snapshot so no number is unattributable.
    pub config: String,
}

impl Report {
    pub fn new(task: &str, method: &str, n_samples: usize, config: String) -> Self {
        Self {
            task: task.to_string(),
            method: method.to_string(),
            n_samples,
            config,
            ..Self::default()
        }
    }
}
