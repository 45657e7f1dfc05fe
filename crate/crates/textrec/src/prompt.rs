//! Instruction/input/output formatting of (history, target) pairs.
//!
//! Each training example is one text triple: a natural-language task
//! directive, the comma-joined history titles in chronological order, and the
//! target title. Rendering uses a fixed three-header layout so the byte
//! offset of the output region is deterministic; the tokenizer guarantees the
//! offset lands on a token boundary because the header ends in a newline and
//! no merge crosses a newline.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Catalog, SplitExample};
use crate::tokenizer::TokenizerModel;

/// A complete natural-language directive; no placeholder tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: u32,
    pub instruction_text: String,
}

/// The instruction/input/output text triple for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub user_id: String,
    pub template_id: u32,
}

/// Joiner between history titles.
pub const TITLE_JOINER: &str = ", ";

const INSTRUCTION_HEADER: &str = "### Instruction:\n";
const INPUT_HEADER: &str = "\n### Input:\n";
const RESPONSE_HEADER: &str = "\n### Response:\n";

/// Template 0 is the canonical movie-domain instruction used for every
/// evaluation prompt; the rest are alternative phrasings of this toolkit,
/// including domain-neutral ones for non-movie catalogs.
pub fn default_template_bank() -> Vec<PromptTemplate> {
    let texts = [
        "Given the movie viewing habits, what is the most probable movie they will choose to watch next?",
        "Considering the items this user has interacted with in order, which item are they most likely to choose next?",
        "Below is a user's chronological interaction history. Predict the single item they will pick next.",
        "Based on the sequence of items the user has engaged with, recommend the next item for them.",
        "Here is what the user has consumed so far, oldest first. Name the item they will most likely interact with next.",
    ];
    texts
        .iter()
        .enumerate()
        .map(|(id, text)| PromptTemplate {
            template_id: id as u32,
            instruction_text: text.to_string(),
        })
        .collect()
}

fn title_of<'a>(catalog: &'a Catalog, item_id: &str) -> Result<&'a str> {
    catalog
        .get(item_id)
        .ok_or_else(|| Error::data(format!("unknown item id '{item_id}'")))
}

/// Build the text triple for one (history, target) pair.
pub fn format_example(
    history: &[String],
    target: &str,
    catalog: &Catalog,
    template: &PromptTemplate,
    user_id: &str,
) -> Result<FormattedExample> {
    if history.is_empty() {
        return Err(Error::data(format!(
            "cannot format an empty history for user '{user_id}'"
        )));
    }
    let titles: Vec<&str> = history
        .iter()
        .map(|id| title_of(catalog, id))
        .collect::<Result<_>>()?;
    Ok(FormattedExample {
        instruction: template.instruction_text.clone(),
        input: titles.join(TITLE_JOINER),
        output: title_of(catalog, target)?.to_string(),
        user_id: user_id.to_string(),
        template_id: template.template_id,
    })
}

/// Render the triple into the single model-visible string. Returns the text
/// and the byte offset where the output region begins; the end-of-sequence
/// marker is appended as a token when the text is encoded.
pub fn render_for_training(example: &FormattedExample) -> (String, usize) {
    let prefix = render_prompt(&example.instruction, &example.input);
    let offset = prefix.len();
    (format!("{prefix}{}", example.output), offset)
}

/// Render only the prompt part (through the response header) for generation.
pub fn render_for_inference(example: &FormattedExample) -> String {
    render_prompt(&example.instruction, &example.input)
}

fn render_prompt(instruction: &str, input: &str) -> String {
    format!("{INSTRUCTION_HEADER}{instruction}{INPUT_HEADER}{input}{RESPONSE_HEADER}")
}

/// Format a batch of split examples, drawing each one's template from the
/// bank with a seeded deterministic pseudo-random draw.
pub fn assign_templates(
    examples: &[SplitExample],
    catalog: &Catalog,
    bank: &[PromptTemplate],
    seed: u64,
) -> Result<Vec<FormattedExample>> {
    if bank.is_empty() {
        return Err(Error::config("assign_templates: empty template bank"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    examples
        .iter()
        .map(|example| {
            let template = &bank[rng.random_range(0..bank.len())];
            format_example(
                &example.history,
                &example.target,
                catalog,
                template,
                &example.user_id,
            )
        })
        .collect()
}

/// Drop oldest history items until the rendered training text fits within
/// `max_tokens` (counting BOS/EOS and `reserve` extra tokens). Recency
/// matters most in next-item prediction, so truncation is front-first.
///
/// Returns the suffix of `history` that fits. Errors if even a single-item
/// history cannot fit.
pub fn fit_history<'a>(
    history: &'a [String],
    target: &str,
    catalog: &Catalog,
    template: &PromptTemplate,
    tokenizer: &TokenizerModel,
    max_tokens: usize,
    reserve: usize,
) -> Result<&'a [String]> {
    for start in 0..history.len() {
        let kept = &history[start..];
        let example = format_example(kept, target, catalog, template, "")?;
        let (text, _) = render_for_training(&example);
        let tokens = tokenizer.encode(&text, true, true)?;
        if tokens.len() + reserve <= max_tokens {
            return Ok(kept);
        }
    }
    Err(Error::data(format!(
        "prompt does not fit in {max_tokens} tokens even with a single history item"
    )))
}
