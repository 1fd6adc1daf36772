//! Versioned JSON container for trained encoders and heads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{BcHead, EncoderParams, TrainConfig};
use crate::error::EncoderError;
use crate::flow::{FlowMlp, FlowModel, FlowTrainConfig};

pub const CHECKPOINT_FORMAT: &str = "crl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Name and shape of one tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorLayout {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSection {
    pub model: FlowMlp,
    pub config: FlowTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Order of the encoder tensors inside `encoder_flat`.
    pub layout: Vec<TensorLayout>,
    pub encoder_flat: Vec<f64>,
    /// Encoder structure; its tensors are replaced by `encoder_flat` on load.
    pub encoder: EncoderParams,
    pub bc_head: BcHead,
    #[serde(default)]
    pub flow: Option<FlowSection>,
    pub train_config: TrainConfig,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub config_echo: serde_json::Value,
}

fn layout(params: &EncoderParams) -> Vec<TensorLayout> {
    let t = |name: &str, shape: &[usize]| TensorLayout {
        name: name.to_owned(),
        shape: shape.to_vec(),
    };
    let net = &params.sa_net;
    vec![
        t("sa_net.w1", net.w1.shape()),
        t("sa_net.b1", net.b1.shape()),
        t("sa_net.w2", net.w2.shape()),
        t("sa_net.b2", net.b2.shape()),
        t("goal_table", params.goal_table.shape()),
        t("log_temperature", &[]),
    ]
}

impl Checkpoint {
    pub fn new(
        encoder: EncoderParams,
        bc_head: BcHead,
        flow: Option<FlowSection>,
        train_config: TrainConfig,
        config_echo: serde_json::Value,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            layout: layout(&encoder),
            encoder_flat: encoder.to_flat(),
            encoder,
            bc_head,
            flow,
            train_config,
            config_echo,
        }
    }

    pub fn to_json(&self) -> Result<String, EncoderError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EncoderError> {
        let mut ck: Checkpoint = serde_json::from_str(text)?;
        ck.validate()?;
        let flat = ck.encoder_flat.clone();
        ck.encoder.assign_flat(&flat)?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Checkpoint(m));
        if self.format != CHECKPOINT_FORMAT {
            return bad(format!("unknown format '{}'", self.format));
        }
        if self.version != CHECKPOINT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.layout != layout(&self.encoder) {
            return bad("tensor layout does not match encoder structure".into());
        }
        let expected: usize = self.layout.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if self.encoder_flat.len() != expected {
            return bad(format!(
                "flat parameters hold {} values, layout needs {expected}",
                self.encoder_flat.len()
            ));
        }
        if self.encoder.goal_table.nrows() != self.encoder.goal_ids.len() {
            return bad("goal table rows differ from goal ids".into());
        }
        if self.encoder_flat.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if let Some(flow) = &self.flow {
            if flow.model.to_flat().iter().any(|v| !v.is_finite()) {
                return bad("non-finite flow parameter".into());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
