//! Prompt template registry and chained prompt assembly.
//!
//! Templates live under `templates/` as plain text, one file per step and
//! technique, plus `system_role.txt`. `templates/MANIFEST` pins a SHA-256 per file.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptTechnique {
    #[serde(rename = "ND")]
    Nd,
    #[serde(rename = "ZS")]
    Zs,
    #[serde(rename = "CoT")]
    Cot,
    #[serde(rename = "SR")]
    Sr,
    #[serde(rename = "PD")]
    Pd,
    #[serde(rename = "MoRE")]
    More,
}

impl PromptTechnique {
    /// Registry order, also the selection tie-break order.
    pub const ALL: [PromptTechnique; 6] = [
        PromptTechnique::Nd,
        PromptTechnique::Zs,
        PromptTechnique::Cot,
        PromptTechnique::Sr,
        PromptTechnique::Pd,
        PromptTechnique::More,
    ];

    pub fn code(self) -> &'static str {
        match self {
            PromptTechnique::Nd => "ND",
            PromptTechnique::Zs => "ZS",
            PromptTechnique::Cot => "CoT",
            PromptTechnique::Sr => "SR",
            PromptTechnique::Pd => "PD",
            PromptTechnique::More => "MoRE",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            PromptTechnique::Nd => "nd",
            PromptTechnique::Zs => "zs",
            PromptTechnique::Cot => "cot",
            PromptTechnique::Sr => "sr",
            PromptTechnique::Pd => "pd",
            PromptTechnique::More => "more",
        }
    }

    pub fn registry_rank(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PromptTechnique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for PromptTechnique {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptTechnique::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown prompting technique `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StepId {
    Step1,
    Step2,
    Step3,
    Step4,
}

impl StepId {
    pub const ALL: [StepId; 4] = [StepId::Step1, StepId::Step2, StepId::Step3, StepId::Step4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn slug(self) -> &'static str {
        match self {
            StepId::Step1 => "step1",
            StepId::Step2 => "step2",
            StepId::Step3 => "step3",
            StepId::Step4 => "step4",
        }
    }

    /// Techniques admitted for this step, in registry order.
    pub fn techniques(self) -> &'static [PromptTechnique] {
        use PromptTechnique::*;
        match self {
            StepId::Step1 => &[Nd, Zs, Cot],
            _ => &[Cot, Sr, Pd, More],
        }
    }

    pub fn admits(self, tech: PromptTechnique) -> bool {
        self.techniques().contains(&tech)
    }

    pub fn predecessors(self) -> &'static [StepId] {
        &StepId::ALL[..self.index()]
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for StepId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StepId::ALL
            .into_iter()
            .find(|st| st.slug().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown step `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("technique {1} is not admitted for {0}")]
    UnsupportedPairing(StepId, PromptTechnique),
    #[error("missing prior output for {0}")]
    MissingContext(StepId),
    #[error("prior outputs for {0} are out of order or include later steps")]
    ContextOutOfOrder(StepId),
    #[error("template `{file}` checksum drifted: manifest {expected}, actual {actual}")]
    ChecksumDrift {
        file: String,
        expected: String,
        actual: String,
    },
}

pub const SYSTEM_ROLE: &str = include_str!("../templates/system_role.txt");
const MANIFEST: &str = include_str!("../templates/MANIFEST");

const TEMPLATES: &[(&str, &str)] = &[
    ("step1_nd.txt", include_str!("../templates/step1_nd.txt")),
    ("step1_zs.txt", include_str!("../templates/step1_zs.txt")),
    ("step1_cot.txt", include_str!("../templates/step1_cot.txt")),
    ("step2_cot.txt", include_str!("../templates/step2_cot.txt")),
    ("step2_sr.txt", include_str!("../templates/step2_sr.txt")),
    ("step2_pd.txt", include_str!("../templates/step2_pd.txt")),
    (
        "step2_more.txt",
        include_str!("../templates/step2_more.txt"),
    ),
    ("step3_cot.txt", include_str!("../templates/step3_cot.txt")),
    ("step3_sr.txt", include_str!("../templates/step3_sr.txt")),
    ("step3_pd.txt", include_str!("../templates/step3_pd.txt")),
    (
        "step3_more.txt",
        include_str!("../templates/step3_more.txt"),
    ),
    ("step4_cot.txt", include_str!("../templates/step4_cot.txt")),
    ("step4_sr.txt", include_str!("../templates/step4_sr.txt")),
    ("step4_pd.txt", include_str!("../templates/step4_pd.txt")),
    (
        "step4_more.txt",
        include_str!("../templates/step4_more.txt"),
    ),
    ("system_role.txt", SYSTEM_ROLE),
];

pub fn template_file_name(step: StepId, tech: PromptTechnique) -> String {
    format!("{}_{}.txt", step.slug(), tech.slug())
}

pub fn get_template(step: StepId, tech: PromptTechnique) -> Result<&'static str, PromptError> {
    if !step.admits(tech) {
        return Err(PromptError::UnsupportedPairing(step, tech));
    }
    let name = template_file_name(step, tech);
    Ok(TEMPLATES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, body)| *body)
        .expect("every admitted pairing has a registered template"))
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// `(file name, pinned checksum)` pairs from the template manifest.
pub fn manifest() -> Vec<(&'static str, &'static str)> {
    MANIFEST
        .lines()
        .filter_map(|l| {
            let (sum, name) = l.split_once(char::is_whitespace)?;
            Some((name.trim(), sum.trim()))
        })
        .collect()
}

/// Check every registered template against its pinned checksum.
pub fn verify_templates() -> Result<(), PromptError> {
    let pins = manifest();
    for (name, body) in TEMPLATES {
        let expected = pins
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.to_string())
            .unwrap_or_default();
        let actual = sha256_hex(body);
        if actual != expected {
            return Err(PromptError::ChecksumDrift {
                file: name.to_string(),
                expected,
                actual,
            });
        }
    }
    Ok(())
}

/// Rendered transcript plus the selected outputs of earlier steps, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChainContext {
    pub transcript_text: String,
    pub prior_outputs: Vec<(StepId, String)>,
}

impl ChainContext {
    pub fn new(transcript_text: impl Into<String>) -> Self {
        ChainContext {
            transcript_text: transcript_text.into(),
            prior_outputs: Vec::new(),
        }
    }

    pub fn push(&mut self, step: StepId, rendered: impl Into<String>) {
        self.prior_outputs.push((step, rendered.into()));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Replaces "in Japanese" in reasoning instructions. Recorded as a template
    /// deviation in provenance.
    pub reasoning_language: Option<String>,
}

pub const INPUT_HEADING: &str = "Conversation Text Data (Input):";
pub const PRIOR_HEADING: &str = "Results from previous steps:";
pub const REPAIR_INSTRUCTION: &str = "Your previous answer could not be read. Reply again with only the final output block(s), exactly in the required output format, and nothing else.";

pub fn build_prompt(
    step: StepId,
    tech: PromptTechnique,
    ctx: &ChainContext,
) -> Result<PromptBundle, PromptError> {
    build_prompt_with(step, tech, ctx, &PromptOptions::default()).map(|(b, _)| b)
}

/// Like [`build_prompt`]; the flag reports whether the template text was localized.
pub fn build_prompt_with(
    step: StepId,
    tech: PromptTechnique,
    ctx: &ChainContext,
    opts: &PromptOptions,
) -> Result<(PromptBundle, bool), PromptError> {
    let template = get_template(step, tech)?;
    let expected = step.predecessors();
    for (i, want) in expected.iter().enumerate() {
        match ctx.prior_outputs.get(i) {
            Some((got, _)) if got == want => {}
            Some(_) => return Err(PromptError::ContextOutOfOrder(step)),
            None => return Err(PromptError::MissingContext(step)),
        }
    }
    if ctx.prior_outputs.len() > expected.len() {
        return Err(PromptError::ContextOutOfOrder(step));
    }

    let mut localized = false;
    let template = match opts.reasoning_language.as_deref() {
        Some(lang) if template.contains("concisely in Japanese") => {
            localized = true;
            template.replace("concisely in Japanese", &format!("concisely in {lang}"))
        }
        _ => template.to_string(),
    };

    let mut user = String::with_capacity(template.len() + ctx.transcript_text.len() + 256);
    user.push_str(template.trim_end());
    user.push_str("\n\n");
    user.push_str(INPUT_HEADING);
    user.push('\n');
    user.push_str(ctx.transcript_text.trim_end());
    user.push('\n');
    if !ctx.prior_outputs.is_empty() {
        user.push('\n');
        user.push_str(PRIOR_HEADING);
        user.push('\n');
        for (_, text) in &ctx.prior_outputs {
            user.push('\n');
            user.push_str(text.trim_end());
            user.push('\n');
        }
    }
    Ok((
        PromptBundle {
            system: SYSTEM_ROLE.to_string(),
            user,
        },
        localized,
    ))
}

/// Same prompt with an appended instruction to emit only the output block.
pub fn repair_prompt(bundle: &PromptBundle) -> PromptBundle {
    PromptBundle {
        system: bundle.system.clone(),
        user: format!("{}\n{}\n", bundle.user, REPAIR_INSTRUCTION),
    }
}
