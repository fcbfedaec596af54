use indexmap::IndexMap;

use super::Example;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "[SEP]"];
pub const UNK_TOKEN: &str = "<unk>";
pub const NEWLINE_TOKEN: &str = "\n";

/// Word-level tokenizer. Words are whitespace-separated; `"\n"` is a token of
/// its own. Unknown words fall back to their characters, and characters
/// outside the vocabulary map to `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: IndexMap<String, usize>,
}

/// Model inputs for one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    /// `mask[i]` is true when `ids[i]` is a supervised answer token.
    pub mask: Vec<bool>,
}

impl Encoded {
    /// Number of leading ids forming the prompt (BOS + input + SEP).
    pub fn prompt_len(&self) -> usize {
        self.mask.iter().position(|&m| m).unwrap_or(self.ids.len())
    }

    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl Tokenizer {
    /// Specials at ids 0..=3, then `<unk>`, `"\n"`, then `words` in first-seen order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = IndexMap::new();
        for w in SPECIALS.into_iter().chain([UNK_TOKEN, NEWLINE_TOKEN]).chain(words) {
            let next = vocab.len();
            vocab.entry(w.to_string()).or_insert(next);
        }
        Self { vocab }
    }

    /// Tokenizer covering every bundled corpus.
    pub fn bundled() -> Self {
        Self::from_words(super::corpora::vocabulary())
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get_index(id).map(|(t, _)| t.as_str())
    }

    fn unk(&self) -> usize {
        self.vocab[UNK_TOKEN]
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                ids.push(self.vocab[NEWLINE_TOKEN]);
            }
            for word in line.split_whitespace() {
                match self.id(word) {
                    Some(id) => ids.push(id),
                    None => {
                        let mut buf = [0u8; 4];
                        ids.extend(
                            word.chars()
                                .map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or_else(|| self.unk())),
                        );
                    }
                }
            }
        }
        ids
    }

    /// Joins tokens with single spaces; no space is placed around `"\n"`.
    /// Structural specials (PAD, BOS, EOS) are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut at_line_start = true;
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK_TOKEN);
            if tok == NEWLINE_TOKEN {
                out.push('\n');
                at_line_start = true;
                continue;
            }
            if !at_line_start {
                out.push(' ');
            }
            out.push_str(tok);
            at_line_start = false;
        }
        out
    }

    /// `BOS + input + SEP + output + EOS`; only output tokens and EOS are supervised.
    /// `budget` is the number of positions left for real tokens.
    pub fn encode(&self, example: &Example, budget: usize) -> Result<Encoded> {
        let input = self.tokenize(&example.input);
        let output = self.tokenize(&example.output);
        if output.is_empty() {
            return Err(Error::Data(format!("example has empty output: {:?}", example.input)));
        }
        let mut ids = Vec::with_capacity(input.len() + output.len() + 3);
        ids.push(BOS);
        ids.extend(&input);
        ids.push(SEP);
        let prompt = ids.len();
        ids.extend(&output);
        ids.push(EOS);
        if ids.len() > budget {
            return Err(Error::Length(format!(
                "example {{input: {:?}, output: {:?}}} encodes to {} tokens, budget is {budget}",
                example.input,
                example.output,
                ids.len()
            )));
        }
        let mask = (0..ids.len()).map(|i| i >= prompt).collect();
        Ok(Encoded { ids, mask })
    }

    /// Prompt-only encoding used for generation.
    pub fn encode_prompt(&self, input: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(input));
        ids.push(SEP);
        ids
    }
}
