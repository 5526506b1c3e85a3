//! The three prompt templates: attribute mask-prediction, attribute-prefixed
//! adversarial inputs, and the yes/no recommendation instruction. Template
//! text is plain strings with `{placeholder}` slots so experiments can pin
//! exact wording in a versioned file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tokenizer::{self, Tokenizer};
use super::PromptError;

pub const ATTRIBUTE_HISTORY_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Attribute,
    Gan,
    Recommendation,
}

/// Guidance passed to the recommendation template: the collaborative
/// model's verdict as a single reserved token, or absent for the ablation
/// path without collaborative signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guidance {
    Yes,
    No,
    Absent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Templates {
    pub attribute: String,
    pub gan: String,
    pub rec_instruction: String,
    pub rec_input: String,
    pub history_separator: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            attribute: "a user in the {domain} category interacted with : {history} . \
                        these items share the attribute <mask> ."
                .into(),
            gan: "attribute {attribute} : {history}".into(),
            rec_instruction: "decide whether the user will interact with the target item . \
                              answer <yes> or <no> ."
                .into(),
            // the id placeholders sit together just before the answer slot
            // so the injected collaborative vectors reach the readout with
            // minimal decay
            rec_input: "history : {history} . target : {target} . hint : {guidance} . \
                        user <userid> item <targetid> answer :"
                .into(),
            history_separator: " ; ".into(),
        }
    }
}

/// A rendered prompt: token ids plus the spans each placeholder filled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptInstance {
    pub kind: TemplateKind,
    pub tokens: Vec<usize>,
    /// placeholder name -> (start, length); explicitly-empty slots have
    /// length zero
    pub slots: BTreeMap<String, (usize, usize)>,
    pub label: Option<bool>,
}

impl PromptInstance {
    fn positions_of(&self, id: usize) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn mask_positions(&self) -> Vec<usize> {
        self.positions_of(tokenizer::MASK)
    }

    pub fn userid_positions(&self) -> Vec<usize> {
        self.positions_of(tokenizer::USERID)
    }

    pub fn targetid_positions(&self) -> Vec<usize> {
        self.positions_of(tokenizer::TARGETID)
    }

    /// Recommendation prompts end in the answer slot: the yes/no logits are
    /// read from the hidden state after the final token.
    pub fn answer_pos(&self) -> usize {
        self.tokens.len()
    }
}

/// Fill a template's placeholders with pre-tokenized content, recording the
/// span of each slot.
fn render(
    tokenizer: &Tokenizer,
    kind: TemplateKind,
    template: &str,
    fill: &BTreeMap<&str, Vec<usize>>,
) -> Result<PromptInstance, PromptError> {
    let mut tokens = Vec::new();
    let mut slots = BTreeMap::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let (literal, tail) = rest.split_at(open);
        tokens.extend(tokenizer.encode(literal));
        let close = tail.find('}').ok_or_else(|| {
            PromptError::Template(format!("unclosed placeholder in template: {tail}"))
        })?;
        let name = &tail[1..close];
        let content = fill.get(name).ok_or_else(|| {
            PromptError::Template(format!("no content for placeholder '{name}'"))
        })?;
        slots.insert(name.to_string(), (tokens.len(), content.len()));
        tokens.extend_from_slice(content);
        rest = &tail[close + 1..];
    }
    tokens.extend(tokenizer.encode(rest));
    Ok(PromptInstance {
        kind,
        tokens,
        slots,
        label: None,
    })
}

fn join_titles(tokenizer: &Tokenizer, titles: &[String], sep: &str) -> Vec<usize> {
    tokenizer.encode(&titles.join(sep))
}

/// Mask-prediction prompt over a user's history; keeps the most recent 20
/// titles.
pub fn render_attribute_prompt(
    tokenizer: &Tokenizer,
    templates: &Templates,
    history_titles: &[String],
    domain: &str,
) -> Result<PromptInstance, PromptError> {
    if history_titles.is_empty() {
        return Err(PromptError::Template(
            "attribute prompt needs a non-empty history".into(),
        ));
    }
    let start = history_titles.len().saturating_sub(ATTRIBUTE_HISTORY_CAP);
    let titles = &history_titles[start..];
    let mut fill = BTreeMap::new();
    fill.insert("domain", tokenizer.encode(domain));
    fill.insert(
        "history",
        join_titles(tokenizer, titles, &templates.history_separator),
    );
    let inst = render(tokenizer, TemplateKind::Attribute, &templates.attribute, &fill)?;
    if inst.mask_positions().len() != 1 {
        return Err(PromptError::Template(
            "attribute template must contain exactly one <mask>".into(),
        ));
    }
    Ok(inst)
}

/// Adversarial-input prompt: attribute text prefixed to the history. With
/// no label the output is exactly the raw concatenated history sequence.
pub fn render_gan_prompt(
    tokenizer: &Tokenizer,
    templates: &Templates,
    attribute_label: Option<&str>,
    allowed_labels: &[String],
    history_titles: &[String],
) -> Result<PromptInstance, PromptError> {
    if history_titles.is_empty() {
        return Err(PromptError::Template(
            "gan prompt needs a non-empty history".into(),
        ));
    }
    let history = join_titles(tokenizer, history_titles, &templates.history_separator);
    match attribute_label {
        None => Ok(PromptInstance {
            kind: TemplateKind::Gan,
            tokens: history.clone(),
            slots: BTreeMap::from([("history".to_string(), (0, history.len()))]),
            label: None,
        }),
        Some(label) => {
            if !allowed_labels.iter().any(|l| l == label) {
                return Err(PromptError::Template(format!(
                    "unknown attribute label '{label}'"
                )));
            }
            let mut fill = BTreeMap::new();
            fill.insert("attribute", tokenizer.encode(label));
            fill.insert("history", history);
            render(tokenizer, TemplateKind::Gan, &templates.gan, &fill)
        }
    }
}

/// Instruction+input prompt for the yes/no recommendation task. The
/// `<userid>` / `<targetid>` placeholder tokens mark where mapped
/// collaborative vectors are injected; the guidance slot carries the
/// collaborative verdict and renders empty when absent.
pub fn render_rec_prompt(
    tokenizer: &Tokenizer,
    templates: &Templates,
    history_titles: &[String],
    target_title: &str,
    guidance: Guidance,
    history_cap: usize,
) -> Result<PromptInstance, PromptError> {
    if target_title.trim().is_empty() {
        return Err(PromptError::Template("missing target title".into()));
    }
    let start = history_titles.len().saturating_sub(history_cap.max(1));
    let titles = &history_titles[start..];
    let guidance_tokens = match guidance {
        Guidance::Yes => vec![tokenizer::GUIDE, tokenizer::YES],
        Guidance::No => vec![tokenizer::GUIDE, tokenizer::NO],
        Guidance::Absent => vec![],
    };
    let mut fill = BTreeMap::new();
    fill.insert(
        "history",
        join_titles(tokenizer, titles, &templates.history_separator),
    );
    fill.insert("target", tokenizer.encode(target_title));
    fill.insert("guidance", guidance_tokens);

    let text = format!("{} {}", templates.rec_instruction, templates.rec_input);
    let inst = render(tokenizer, TemplateKind::Recommendation, &text, &fill)?;
    if inst.userid_positions().len() != 1 || inst.targetid_positions().len() != 1 {
        return Err(PromptError::Template(
            "recommendation template must contain exactly one <userid> and one <targetid>".into(),
        ));
    }
    Ok(inst)
}

/// Every distinct piece of template text, used when building the shared
/// vocabulary so template literals never fall out of vocab.
pub fn template_corpus(templates: &Templates) -> Vec<String> {
    vec![
        templates.attribute.clone(),
        templates.gan.clone(),
        templates.rec_instruction.clone(),
        templates.rec_input.clone(),
        templates.history_separator.clone(),
    ]
}
