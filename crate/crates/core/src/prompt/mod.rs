//! Prompt templates and the whitespace/punctuation tokenizer shared by
//! every model in the stack.

mod template;
mod tokenizer;

pub use template::{
    render_attribute_prompt, render_gan_prompt, render_rec_prompt, template_corpus, Guidance,
    PromptInstance, TemplateKind, Templates,
};
pub use tokenizer::{
    split_text as tokenizer_split, Tokenizer, TokenizerConfig, BOS, EOS, GUIDE, MASK, NO, PAD,
    TARGETID, UNK, USERID, YES,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template error: {0}")]
    Template(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
