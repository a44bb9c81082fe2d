//! Prompt assets and the renderers that turn them into backend-ready bundles.
//!
//! The system prompts live as UTF-8 text under `assets/prompts/v1/`. They are
//! compiled in and verified against pinned SHA-256 digests the first time any
//! of them is used, so an edited asset fails loudly instead of drifting.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parse::{format_label_list, RemovalPlan};
use crate::pipeline::SceneDescription;
use crate::raster::hex;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("removal plan has no labels")]
    EmptyPlan,
    #[error("scene description is empty")]
    EmptyDescription,
    #[error("unknown chain step {0:?}")]
    UnknownStep(String),
    #[error("prompt asset {name} checksum mismatch: expected {expected}, found {actual}")]
    Checksum {
        name: &'static str,
        expected: &'static str,
        actual: String,
    },
}

/// A system/user prompt pair ready to send to a reasoner.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub attach_image: bool,
}

/// The four sub-steps of prompt-chained analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStep {
    IdentifyTarget,
    EnumerateElements,
    ReasonConsistency,
    ConsolidateList,
}

impl ChainStep {
    pub const ALL: [ChainStep; 4] = [
        ChainStep::IdentifyTarget,
        ChainStep::EnumerateElements,
        ChainStep::ReasonConsistency,
        ChainStep::ConsolidateList,
    ];

    /// Only element enumeration looks at the image.
    pub fn is_image_conditioned(self) -> bool {
        matches!(self, ChainStep::EnumerateElements)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChainStep::IdentifyTarget => "identify_target",
            ChainStep::EnumerateElements => "enumerate_elements",
            ChainStep::ReasonConsistency => "reason_consistency",
            ChainStep::ConsolidateList => "consolidate_list",
        }
    }
}

impl fmt::Display for ChainStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChainStep {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        ChainStep::ALL
            .into_iter()
            .find(|step| step.as_str().replace('_', "") == key)
            .ok_or_else(|| PromptError::UnknownStep(s.to_string()))
    }
}

/// Identifies which system prompt a bundle carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Analyzer,
    Simulator,
    Examiner,
    Chain(ChainStep),
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::Analyzer,
        PromptKind::Simulator,
        PromptKind::Examiner,
        PromptKind::Chain(ChainStep::IdentifyTarget),
        PromptKind::Chain(ChainStep::EnumerateElements),
        PromptKind::Chain(ChainStep::ReasonConsistency),
        PromptKind::Chain(ChainStep::ConsolidateList),
    ];

    /// Recovers the kind from a bundle's system text.
    pub fn of(bundle: &PromptBundle) -> Option<PromptKind> {
        PromptKind::ALL
            .into_iter()
            .find(|k| asset(*k).text == bundle.system_text)
    }
}

pub struct PromptAsset {
    pub name: &'static str,
    pub text: &'static str,
    pub sha256: &'static str,
}

static ASSETS: [PromptAsset; 7] = [
    PromptAsset {
        name: "analyzer.txt",
        text: include_str!("../assets/prompts/v1/analyzer.txt"),
        sha256: "faeac02f79acad2a98a8d211b654d14499d9ecaa3c4b11b0981acb4cbf7853ec",
    },
    PromptAsset {
        name: "simulator.txt",
        text: include_str!("../assets/prompts/v1/simulator.txt"),
        sha256: "393e80db0b826fd708831dcd44074d79fe899ecfd6e820bf18781bec1cd66b80",
    },
    PromptAsset {
        name: "examiner.txt",
        text: include_str!("../assets/prompts/v1/examiner.txt"),
        sha256: "b871fa125ea7aeb2e2f4597bd0a19cf5537bc7ed6a6f8271fad57a735bb8e44d",
    },
    PromptAsset {
        name: "chain_identify_target.txt",
        text: include_str!("../assets/prompts/v1/chain_identify_target.txt"),
        sha256: "cc056dc5505957c4a174d877686657568f562f0f5d692e776ea66813972b43fa",
    },
    PromptAsset {
        name: "chain_enumerate_elements.txt",
        text: include_str!("../assets/prompts/v1/chain_enumerate_elements.txt"),
        sha256: "44d466fdd121b42869e639b157c041bb15ff9767cb363f646f73421487da25fe",
    },
    PromptAsset {
        name: "chain_reason_consistency.txt",
        text: include_str!("../assets/prompts/v1/chain_reason_consistency.txt"),
        sha256: "0f91b589853615d18d81f3dd37d9167b03b80f4220f4c25e95e08e54d0a87fe9",
    },
    PromptAsset {
        name: "chain_consolidate_list.txt",
        text: include_str!("../assets/prompts/v1/chain_consolidate_list.txt"),
        sha256: "d3c4cc235e1ffbc56d2c2cad95df985de1152ef273044c00b21ffcfd6df023f0",
    },
];

pub fn asset(kind: PromptKind) -> &'static PromptAsset {
    let idx = match kind {
        PromptKind::Analyzer => 0,
        PromptKind::Simulator => 1,
        PromptKind::Examiner => 2,
        PromptKind::Chain(ChainStep::IdentifyTarget) => 3,
        PromptKind::Chain(ChainStep::EnumerateElements) => 4,
        PromptKind::Chain(ChainStep::ReasonConsistency) => 5,
        PromptKind::Chain(ChainStep::ConsolidateList) => 6,
    };
    &ASSETS[idx]
}

/// Checks every asset against its pinned digest. Cached after the first call.
pub fn verify_assets() -> Result<(), PromptError> {
    static VERIFIED: OnceLock<Result<(), PromptError>> = OnceLock::new();
    VERIFIED
        .get_or_init(|| {
            for a in &ASSETS {
                let actual = hex(&Sha256::digest(a.text.as_bytes()));
                if actual != a.sha256 {
                    return Err(PromptError::Checksum {
                        name: a.name,
                        expected: a.sha256,
                        actual,
                    });
                }
            }
            Ok(())
        })
        .clone()
}

fn system_text(kind: PromptKind) -> Result<String, PromptError> {
    verify_assets()?;
    Ok(asset(kind).text.to_string())
}

pub fn render_analyzer(instruction: &str) -> Result<PromptBundle, PromptError> {
    if instruction.trim().is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    Ok(PromptBundle {
        system_text: system_text(PromptKind::Analyzer)?,
        user_text: instruction.to_string(),
        attach_image: true,
    })
}

/// User text prefix for the simulator's removal request.
pub const REMOVAL_REQUEST_PREFIX: &str = "Remove the following objects:";

pub fn render_simulator(plan: &RemovalPlan) -> Result<PromptBundle, PromptError> {
    if plan.labels.is_empty() {
        return Err(PromptError::EmptyPlan);
    }
    Ok(PromptBundle {
        system_text: system_text(PromptKind::Simulator)?,
        user_text: format!(
            "{REMOVAL_REQUEST_PREFIX} {}",
            format_label_list(&plan.labels)
        ),
        attach_image: true,
    })
}

pub fn render_examiner(description: &SceneDescription) -> Result<PromptBundle, PromptError> {
    if description.text.trim().is_empty() {
        return Err(PromptError::EmptyDescription);
    }
    Ok(PromptBundle {
        system_text: system_text(PromptKind::Examiner)?,
        user_text: description.text.clone(),
        attach_image: true,
    })
}

pub fn render_chain_step(step: ChainStep, context: &str) -> Result<PromptBundle, PromptError> {
    if step == ChainStep::IdentifyTarget && context.trim().is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    Ok(PromptBundle {
        system_text: system_text(PromptKind::Chain(step))?,
        user_text: context.to_string(),
        attach_image: step.is_image_conditioned(),
    })
}
