use super::scene::{SceneSpec, PALETTE};
use super::EnvError;

pub const UNKNOWN_TOKEN: &str = "<unk>";
const TEMPLATE_WORDS: [&str; 3] = ["reach", "the", "block"];

/// Whitespace word vocabulary built from the instruction template. Id 0 is
/// reserved for unknown words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = std::iter::once(UNKNOWN_TOKEN)
            .chain(TEMPLATE_WORDS)
            .chain(PALETTE.iter().map(|(name, _)| *name))
            .map(str::to_string)
            .collect();
        Self { words }
    }
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.words.iter().position(|w| w == word).unwrap_or(0) as u32
    }

    pub fn tokenize(&self, text: &str) -> Instruction {
        Instruction {
            token_ids: text.split_whitespace().map(|w| self.id(w)).collect(),
            vocab_size: self.size(),
        }
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i as usize).map_or(UNKNOWN_TOKEN, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub token_ids: Vec<u32>,
    pub vocab_size: usize,
}

impl Instruction {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.token_ids.is_empty() {
            return Err(EnvError::Format("empty instruction".into()));
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(EnvError::Format(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// `"reach the <color> block"` for the scene's target.
pub fn instruction_for(scene: &SceneSpec, vocab: &Vocab) -> Instruction {
    vocab.tokenize(&format!("reach the {} block", scene.target_color_name()))
}
