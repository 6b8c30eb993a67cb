//! Prompt templates for healthy and tumorous slices and the fixed-vocabulary
//! tokenizer used by the desk text encoder.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Modality;
use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 77;

pub const HEALTHY_TEMPLATES: [&str; 3] = [
    "{modality} of a {age_desc} healthy individual.",
    "A {age_desc} healthy person undergoing {modality}.",
    "{modality} image of a healthy brain (age: {age_desc}).",
];

pub const TUMOR_TEMPLATES: [&str; 3] = [
    "{modality} of a {age_desc} patient with a {size_desc} tumor.",
    "A {age_desc} patient's {modality} scan showing a {size_desc} tumor.",
    "{modality} image showing a {size_desc} brain tumor in a {age_desc} patient.",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    NonTumorous,
    Tumorous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeDesc {
    Small,
    Mild,
    Medium,
    Moderate,
    Large,
}

impl SizeDesc {
    pub const ALL: [SizeDesc; 5] = [SizeDesc::Small, SizeDesc::Mild, SizeDesc::Medium, SizeDesc::Moderate, SizeDesc::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeDesc::Small => "small",
            SizeDesc::Mild => "mild",
            SizeDesc::Medium => "medium",
            SizeDesc::Moderate => "moderate",
            SizeDesc::Large => "large",
        }
    }
}

impl fmt::Display for SizeDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Upper (inclusive) edges of the size bins. The first bin starts at 1000,
/// the last ends at 3000.
pub const SIZE_BIN_EDGES: [usize; 4] = [1400, 1850, 2150, 2650];

pub fn size_category(tumor_pixel_count: usize) -> Result<SizeDesc> {
    if !(1000..=3000).contains(&tumor_pixel_count) {
        return Err(Error::Range(format!("tumor pixel count {tumor_pixel_count} outside [1000, 3000]")));
    }
    let bin = SIZE_BIN_EDGES.iter().take_while(|&&e| tumor_pixel_count > e).count();
    Ok(SizeDesc::ALL[bin])
}

pub fn age_desc(age: Option<f64>) -> String {
    match age {
        Some(a) if a.is_finite() => format!("{}-year-old", a.round() as i64),
        _ => "unknown age".to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub case_kind: CaseKind,
    pub modality: String,
    pub age_desc: String,
    pub size_desc: Option<SizeDesc>,
    pub template_index: usize,
    pub text: String,
}

/// Fills template `template_index` (1-based) of the set for `case_kind`.
pub fn render_template(
    case_kind: CaseKind,
    modality: Modality,
    age: Option<f64>,
    size_desc: Option<SizeDesc>,
    template_index: usize,
) -> Result<PromptSpec> {
    if !(1..=3).contains(&template_index) {
        return Err(Error::InvalidArgument(format!("template index {template_index} not in 1..=3")));
    }
    let (template, size) = match (case_kind, size_desc) {
        (CaseKind::Tumorous, Some(s)) => (TUMOR_TEMPLATES[template_index - 1], Some(s)),
        (CaseKind::Tumorous, None) => {
            return Err(Error::InvalidArgument("tumorous prompt needs a size description".into()))
        }
        (CaseKind::NonTumorous, Some(_)) => {
            return Err(Error::InvalidArgument("non-tumorous prompt cannot carry a tumor size".into()))
        }
        (CaseKind::NonTumorous, None) => (HEALTHY_TEMPLATES[template_index - 1], None),
    };
    let age_desc = age_desc(age);
    let mut text = template.replace("{modality}", modality.prompt_text()).replace("{age_desc}", &age_desc);
    if let Some(s) = size {
        text = text.replace("{size_desc}", &format!("{s}-sized"));
    }
    Ok(PromptSpec {
        case_kind,
        modality: modality.prompt_text().to_string(),
        age_desc,
        size_desc: size,
        template_index,
        text,
    })
}

/// Picks one of the three templates uniformly with `rng`.
pub fn render_prompt<R: Rng + ?Sized>(
    case_kind: CaseKind,
    modality: Modality,
    age: Option<f64>,
    size_desc: Option<SizeDesc>,
    rng: &mut R,
) -> Result<PromptSpec> {
    let idx = rng.random_range(1..=3);
    render_template(case_kind, modality, age, size_desc, idx)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub pad_id: u32,
}

pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn pad_id(&self) -> u32;
    fn tokenize(&self, text: &str) -> Result<TokenSequence>;
}

/// Word-level tokenizer over the words that can appear in a rendered prompt.
/// Punctuation marks and digits are tokens of their own; anything else maps
/// to `<unk>`.
#[derive(Clone, Debug)]
pub struct DeskTokenizer {
    vocab: BTreeMap<String, u32>,
}

const PAD: u32 = 0;
const BOS: u32 = 1;
const EOS: u32 = 2;
const UNK: u32 = 3;
const PUNCT: &[char] = &['.', ',', ':', '(', ')', '\'', '-'];

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            flush(&mut word, &mut out);
        } else if PUNCT.contains(&ch) || ch.is_ascii_digit() {
            flush(&mut word, &mut out);
            out.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

impl DeskTokenizer {
    pub fn new() -> Self {
        let mut words: Vec<String> = HEALTHY_TEMPLATES
            .iter()
            .chain(TUMOR_TEMPLATES.iter())
            .flat_map(|t| split_words(&t.replace(['{', '}'], " ")))
            .filter(|w| !matches!(w.as_str(), "modality" | "age_desc" | "size_desc"))
            .collect();
        words.extend(split_words(Modality::T1ce.prompt_text()));
        words.extend(split_words("unknown age year old sized"));
        words.extend(SizeDesc::ALL.iter().map(|s| s.as_str().to_string()));
        words.extend((0..10).map(|d| d.to_string()));
        words.extend(PUNCT.iter().map(|c| c.to_string()));
        words.sort();
        words.dedup();
        let vocab = words.into_iter().zip(4u32..).collect();
        Self { vocab }
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.vocab.get(word).copied()
    }
}

impl Default for DeskTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer for DeskTokenizer {
    fn vocab_size(&self) -> usize {
        self.vocab.len() + 4
    }

    fn pad_id(&self) -> u32 {
        PAD
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(Error::Empty("prompt text".into()));
        }
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.word_id(w).unwrap_or(UNK)));
        ids.push(EOS);
        ids.truncate(MAX_TOKENS);
        ids.resize(MAX_TOKENS, PAD);
        Ok(TokenSequence { ids, pad_id: PAD })
    }
}
