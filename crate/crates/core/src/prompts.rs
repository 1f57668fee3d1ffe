//! Versioned prompt templates. Placeholders are written `{name}`.

use crate::text::fill_template;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub version: u32,
    pub text: &'static str,
}

impl PromptTemplate {
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        fill_template(self.text, vars)
    }

    /// `name@v<version>`, recorded next to every model call.
    pub fn tag(&self) -> String {
        format!("{}@v{}", self.name, self.version)
    }
}

macro_rules! template {
    ($ident:ident, $name:literal, $version:literal) => {
        pub const $ident: PromptTemplate = PromptTemplate {
            name: $name,
            version: $version,
            text: include_str!(concat!("../assets/prompts/", $name, ".v", $version, ".txt")),
        };
    };
}

template!(DIRECTOR_SYSTEM, "director_system", 1);
template!(REPAIR, "repair", 1);
template!(EXTRACT_CLINICAL_INFO, "extract_clinical_info", 1);
template!(REWRITE_CHIEF_COMPLAINT, "rewrite_chief_complaint", 1);
template!(REPHRASE_QUESTION, "rephrase_question", 1);
template!(STEPWISE_CONVERSION, "stepwise_conversion", 1);
template!(DEEP_THINKING, "deep_thinking", 1);
template!(ORACLE_EXTRACTION, "oracle_extraction", 1);
template!(JUDGE_ACCURACY, "judge_accuracy", 1);
template!(OPERATION_USEFULNESS, "operation_usefulness", 1);
template!(DOUBLE_BLIND_SCORE, "double_blind_score", 1);
template!(ATTRIBUTE_MISDIAGNOSIS, "attribute_misdiagnosis", 1);
template!(PERTURB_REWRITE, "perturb_rewrite", 1);
