//! Word-level tokenizer, special tokens and the fixed prompt/response templates.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const IMG: usize = 4;
pub const SEG: usize = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<img>", "[SEG]"];
pub const SEG_TEXT: &str = "[SEG]";
pub const MAX_VOCAB: usize = 512;

/// The query prompts; index 0 is the default one used for training.
pub const PROMPTS: [&str; 4] = [
    "Can you segment the edited region and give the instruction used to edit this image.",
    "Could you segment the modified regions and provide a detailed explanation of the editing process?",
    "Please analyze this image for any signs of editing. If the image has been edited, identify and segment the edited portions, and outline the steps taken to achieve the edits.",
    "Can you determine if this image has been manipulated? If so, please highlight the altered areas and describe the techniques used to modify the image.",
];

const RESPONSE_PREFIX: &str = "The edited region is [SEG], and the edit instruction used is";

/// Words that can appear in any rendered instruction regardless of corpus.
const INSTRUCTION_GLUE: [&str; 5] = ["to", "with", "a", "an", "background"];

/// Prompt `id` in `1..=4`.
pub fn render_prompt_id(id: usize) -> Result<&'static str> {
    PROMPTS
        .get(id.wrapping_sub(1))
        .copied()
        .ok_or_else(|| invalid!("prompt id {id} not in 1..=4"))
}

pub fn render_prompt() -> &'static str {
    PROMPTS[0]
}

pub fn render_response(instruction: &str) -> Result<String> {
    if instruction.trim().is_empty() {
        return Err(invalid!("empty instruction"));
    }
    Ok(format!("{RESPONSE_PREFIX} {instruction}"))
}

/// Lowercased words with punctuation stripped; `[SEG]` survives as-is.
pub fn normalize_words(text: &str) -> Vec<String> {
    let spaced = replace_seg_markers(text);
    spaced
        .split_whitespace()
        .filter_map(|w| {
            if w == SEG_TEXT {
                return Some(SEG_TEXT.to_string());
            }
            let clean: String = w
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            (!clean.is_empty()).then_some(clean)
        })
        .collect()
}

fn replace_seg_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    let lower = text.to_ascii_lowercase();
    let mut i = 0;
    while i < text.len() {
        if lower[i..].starts_with("[seg]") {
            out.push(' ');
            out.push_str(SEG_TEXT);
            out.push(' ');
            i += SEG_TEXT.len();
        } else {
            let ch = text[i..].chars().next().expect("char boundary");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Prompt,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, segment: Segment) -> Self {
        let segments = vec![segment; ids.len()];
        Self { ids, segments }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: usize, segment: Segment) {
        self.ids.push(id);
        self.segments.push(segment);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SpecialIds {
    pad: usize,
    bos: usize,
    eos: usize,
    unk: usize,
    img: usize,
    seg: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: SpecialIds,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every other word in lexicographic order.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for w in words {
            for n in normalize_words(w.as_ref()) {
                if !SPECIAL_TOKENS.contains(&n.as_str()) {
                    set.insert(n);
                }
            }
        }
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        if tokens.len() > MAX_VOCAB {
            return Err(invalid!("vocabulary of {} exceeds {MAX_VOCAB}", tokens.len()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    /// Vocabulary covering the instructions plus every prompt and template word.
    pub fn build<I, S>(instructions: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let instructions: Vec<String> = instructions.into_iter().map(|s| s.as_ref().to_string()).collect();
        if instructions.is_empty() {
            return Err(invalid!("cannot build a vocabulary from an empty corpus"));
        }
        let fixed = PROMPTS
            .iter()
            .copied()
            .chain(std::iter::once(RESPONSE_PREFIX))
            .chain(INSTRUCTION_GLUE.iter().copied())
            .map(str::to_string);
        Self::from_words(instructions.into_iter().chain(fixed))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str, segment: Segment) -> TokenSequence {
        let ids = normalize_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        TokenSequence::new(ids, segment)
    }

    /// Prompt text never carries a [SEG] id; literal markers become UNK.
    pub fn encode_prompt(&self, text: &str) -> TokenSequence {
        let mut seq = self.encode(text, Segment::Prompt);
        for id in &mut seq.ids {
            if *id == SEG {
                *id = UNK;
            }
        }
        seq
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            version: 1,
            specials: SpecialIds {
                pad: PAD,
                bos: BOS,
                eos: EOS,
                unk: UNK,
                img: IMG,
                seg: SEG,
            },
            tokens: self.tokens.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let expected = SpecialIds {
            pad: PAD,
            bos: BOS,
            eos: EOS,
            unk: UNK,
            img: IMG,
            seg: SEG,
        };
        if file.specials != expected {
            return Err(Error::Config("vocabulary special ids differ from the reserved block".into()));
        }
        if file.tokens.len() < SPECIAL_TOKENS.len()
            || file.tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS.map(String::from)
        {
            return Err(Error::Config("vocabulary does not start with the special tokens".into()));
        }
        let index: HashMap<String, usize> =
            file.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != file.tokens.len() {
            return Err(Error::Config("duplicate token in vocabulary".into()));
        }
        Ok(Self {
            tokens: file.tokens,
            index,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub seg_position: usize,
    pub instruction: String,
    pub instruction_ids: Vec<usize>,
    /// More than one [SEG] id was present; the first one was used.
    pub multiple_seg: bool,
}

/// Locates the first [SEG] id and reads the instruction after the following
/// `is`, stopping at EOS.
pub fn parse_response(ids: &[usize], vocab: &Vocabulary) -> Result<ParsedResponse> {
    let end = ids.iter().position(|&i| i == EOS).unwrap_or(ids.len());
    let ids = &ids[..end];
    let seg_position = ids.iter().position(|&i| i == SEG).ok_or(Error::SegMissing)?;
    let multiple_seg = ids.iter().filter(|&&i| i == SEG).count() > 1;
    let is_id = vocab.id("is");
    let start = ids[seg_position..]
        .iter()
        .position(|&i| Some(i) == is_id)
        .map(|p| seg_position + p + 1)
        .unwrap_or(ids.len());
    let instruction_ids = ids[start..].to_vec();
    Ok(ParsedResponse {
        seg_position,
        instruction: vocab.decode(&instruction_ids),
        instruction_ids,
        multiple_seg,
    })
}
