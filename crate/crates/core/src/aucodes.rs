//! Action-unit vocabulary, prompt construction, the stand-in tokenizer, and
//! the frozen hash-expansion text embedder.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngs::{self, fnv1a32, Rng};

pub const MAX_TOKENS: usize = 77;
pub const DEFAULT_TEMPLATE_COUNT: usize = 7;
pub const SLOT: &str = "{}";

const AU_TABLE: &str = include_str!("../data/au_table.tsv");
const TEMPLATES: &str = include_str!("../data/templates.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuCode {
    pub id: u8,
    pub facs_name: String,
    pub description: String,
}

/// The AU vocabulary, ordered by id.
#[derive(Clone, Debug)]
pub struct AuTable {
    codes: BTreeMap<u8, AuCode>,
}

impl AuTable {
    /// Parses `id<TAB>facs_name<TAB>description` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut codes = BTreeMap::new();
        for (lineno, line) in data_lines(text) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, facs, desc] = fields[..] else {
                return Err(Error::contract(format!(
                    "AU table line {lineno}: expected 3 fields"
                )));
            };
            let id: u8 = id
                .parse()
                .map_err(|_| Error::contract(format!("AU table line {lineno}: bad id {id:?}")))?;
            let code = AuCode {
                id,
                facs_name: facs.to_string(),
                description: desc.to_string(),
            };
            if codes.insert(id, code).is_some() {
                return Err(Error::contract(format!("AU table: duplicate id {id}")));
            }
        }
        Ok(AuTable { codes })
    }

    pub fn builtin() -> &'static AuTable {
        static TABLE: OnceLock<AuTable> = OnceLock::new();
        TABLE.get_or_init(|| AuTable::parse(AU_TABLE).expect("bundled AU table is valid"))
    }

    pub fn get(&self, id: u8) -> Option<&AuCode> {
        self.codes.get(&id)
    }

    pub fn ids(&self) -> Vec<u8> {
        self.codes.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AuCode> {
        self.codes.values()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn unknown(&self, id: u32) -> Error {
        let valid: Vec<String> = self.codes.keys().map(|k| k.to_string()).collect();
        Error::contract(format!(
            "unknown AU id {id}; valid ids: {}",
            valid.join(", ")
        ))
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// AU codes active in one sample, strictly ascending.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct AuAnnotation(Vec<u8>);

impl AuAnnotation {
    /// Sorts `ids` into canonical order; rejects empty input, duplicates,
    /// and ids missing from the built-in table.
    pub fn new(ids: &[u32]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::contract("AU annotation must not be empty"));
        }
        let table = AuTable::builtin();
        let mut codes = Vec::with_capacity(ids.len());
        for &id in ids {
            match u8::try_from(id).ok().filter(|i| table.get(*i).is_some()) {
                Some(i) => codes.push(i),
                None => return Err(table.unknown(id)),
            }
        }
        codes.sort_unstable();
        if codes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract(format!("duplicate AU id in {ids:?}")));
        }
        Ok(AuAnnotation(codes))
    }

    pub fn codes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<u8>> for AuAnnotation {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        AuAnnotation::new(&v.iter().map(|&x| x as u32).collect::<Vec<_>>())
    }
}

impl From<AuAnnotation> for Vec<u8> {
    fn from(a: AuAnnotation) -> Self {
        a.0
    }
}

impl std::fmt::Display for AuAnnotation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| format!("AU{c}")).collect();
        f.write_str(&parts.join("+"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Action-oriented phrases ("raising the cheeks").
    #[default]
    Action,
    /// FACS names ("Cheek Raiser").
    Facs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuOrder {
    #[default]
    Fixed,
    Shuffled,
}

/// Movement description in canonical (ascending) order with action phrases.
pub fn describe(annotation: &AuAnnotation) -> Result<String> {
    describe_with(annotation, PromptStyle::Action, None)
}

/// Movement description with a chosen phrase style. When `shuffle` is given
/// the AU order is permuted by that rng; otherwise ascending order is used.
pub fn describe_with(
    annotation: &AuAnnotation,
    style: PromptStyle,
    shuffle: Option<&mut Rng>,
) -> Result<String> {
    if annotation.is_empty() {
        return Err(Error::contract("cannot describe an empty AU annotation"));
    }
    let table = AuTable::builtin();
    let mut phrases: Vec<&str> = annotation
        .codes()
        .iter()
        .map(|&id| {
            let code = table.get(id).expect("annotation ids are validated");
            match style {
                PromptStyle::Action => code.description.as_str(),
                PromptStyle::Facs => code.facs_name.as_str(),
            }
        })
        .collect();
    if let Some(rng) = shuffle {
        phrases.shuffle(rng);
    }
    Ok(join_phrases(&phrases))
}

fn join_phrases(phrases: &[&str]) -> String {
    match phrases {
        [one] => (*one).to_string(),
        [a, b] => format!("a combination of {a} and {b}"),
        [init @ .., last] => format!("a combination of {}, and {last}", init.join(", ")),
        [] => String::new(),
    }
}

/// Ordered prompt templates, each with a single `{}` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateBank {
    templates: Vec<String>,
}

impl TemplateBank {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::contract("template bank must not be empty"));
        }
        for t in &templates {
            if t.matches(SLOT).count() != 1 {
                return Err(Error::contract(format!(
                    "template must contain exactly one {SLOT} slot: {t:?}"
                )));
            }
        }
        Ok(TemplateBank { templates })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (lineno, line) in data_lines(text) {
            let Some((no, tpl)) = line.split_once('\t') else {
                return Err(Error::contract(format!(
                    "template line {lineno}: expected 2 fields"
                )));
            };
            let no: usize = no
                .parse()
                .map_err(|_| Error::contract(format!("template line {lineno}: bad number")))?;
            if no != out.len() + 1 {
                return Err(Error::contract(format!(
                    "template line {lineno}: out of sequence"
                )));
            }
            out.push(tpl.to_string());
        }
        TemplateBank::new(out)
    }

    /// All ten bundled templates.
    pub fn full() -> TemplateBank {
        TemplateBank::parse(TEMPLATES).expect("bundled templates are valid")
    }

    /// The first `n` bundled templates.
    pub fn first(n: usize) -> Result<TemplateBank> {
        let all = Self::full();
        if n == 0 || n > all.len() {
            return Err(Error::config(format!(
                "template count must be in 1..={}, got {n}",
                all.len()
            )));
        }
        TemplateBank::new(all.templates[..n].to_vec())
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Fills template `index` (0-based) with `description`.
    pub fn render(&self, index: usize, description: &str) -> Result<PromptText> {
        let tpl = self.templates.get(index).ok_or_else(|| {
            Error::contract(format!(
                "template index {index} out of range (bank has {})",
                self.templates.len()
            ))
        })?;
        if description.trim().is_empty() {
            return Err(Error::contract("prompt description must not be empty"));
        }
        Ok(PromptText::new(tpl.replacen(SLOT, description, 1)))
    }

    /// Fills a uniformly drawn template.
    pub fn render_random(&self, rng: &mut Rng, description: &str) -> Result<PromptText> {
        let i = rng.random_range(0..self.templates.len());
        self.render(i, description)
    }
}

impl Default for TemplateBank {
    fn default() -> Self {
        TemplateBank::first(DEFAULT_TEMPLATE_COUNT).expect("default count is in range")
    }
}

/// Prompt for the emotion-label ablation.
pub fn emotion_prompt(emotion: &str) -> PromptText {
    PromptText::new(format!("This micro-expression expresses {emotion}."))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
    pub token_ids: Vec<u32>,
}

impl PromptText {
    pub fn new(text: String) -> Self {
        let token_ids = tokenize(&text);
        PromptText { text, token_ids }
    }
}

/// Lowercases, splits into alphanumeric runs and single punctuation marks,
/// hashes each token with 32-bit FNV-1a, and keeps at most 77 ids.
pub fn tokenize(text: &str) -> Vec<u32> {
    let lower = text.to_lowercase();
    let mut ids = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, ids: &mut Vec<u32>| {
        if !word.is_empty() {
            ids.push(fnv1a32(word.as_bytes()));
            word.clear();
        }
    };
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            flush(&mut word, &mut ids);
            if !ch.is_whitespace() {
                let mut buf = [0u8; 4];
                ids.push(fnv1a32(ch.encode_utf8(&mut buf).as_bytes()));
            }
        }
    }
    flush(&mut word, &mut ids);
    ids.truncate(MAX_TOKENS);
    ids
}

/// Frozen text-encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
}

fn token_vector(token: u32, seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = rngs::stream(seed, "token", token as u64);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Mean of per-token unit vectors (each a pure function of
/// `(seed, token id)`), L2-normalised.
pub fn embed_frozen(token_ids: &[u32], seed: u64, dim: usize) -> Result<TextEmbedding> {
    if token_ids.is_empty() {
        return Err(Error::contract("cannot embed an empty token list"));
    }
    if dim == 0 {
        return Err(Error::config("text embedding width must be positive"));
    }
    let mut acc = vec![0.0; dim];
    for &t in token_ids {
        for (a, x) in acc.iter_mut().zip(token_vector(t, seed, dim)) {
            *a += x;
        }
    }
    let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return Err(Error::numeric(
            "embed_frozen",
            "pooled token vector has zero norm",
        ));
    }
    acc.iter_mut().for_each(|x| *x /= n);
    Ok(TextEmbedding { vector: acc })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(ids: &[u32]) -> AuAnnotation {
        AuAnnotation::new(ids).unwrap()
    }

    #[test]
    fn single_and_pair_descriptions() {
        assert_eq!(
            describe(&ann(&[1])).unwrap(),
            "raising the inner part of the brows"
        );
        assert_eq!(
            describe(&ann(&[6, 12])).unwrap(),
            "a combination of raising the cheeks and pulling the corners of the lips"
        );
    }

    #[test]
    fn three_way_uses_serial_comma() {
        assert_eq!(
            describe(&ann(&[4, 7, 9])).unwrap(),
            "a combination of lowering the brows, tightening the lids, and wrinkling the nose"
        );
    }

    #[test]
    fn describe_is_order_normalising() {
        assert_eq!(
            describe(&ann(&[12, 6])).unwrap(),
            describe(&ann(&[6, 12])).unwrap()
        );
        assert_eq!(
            describe(&ann(&[9, 4, 7])).unwrap(),
            describe(&ann(&[4, 7, 9])).unwrap()
        );
    }

    #[test]
    fn facs_style() {
        assert_eq!(
            describe_with(&ann(&[6, 12]), PromptStyle::Facs, None).unwrap(),
            "a combination of Cheek Raiser and Lip Corner Puller"
        );
    }

    #[test]
    fn annotation_validation() {
        assert!(AuAnnotation::new(&[]).is_err());
        assert!(AuAnnotation::new(&[6, 6]).is_err());
        let err = AuAnnotation::new(&[99]).unwrap_err().to_string();
        assert!(err.contains("99") && err.contains("1, 2, 4, 5"), "{err}");
        assert_eq!(ann(&[12, 6]).codes(), &[6, 12]);
    }

    #[test]
    fn render_templates() {
        let bank = TemplateBank::default();
        assert_eq!(bank.len(), 7);
        assert_eq!(
            bank.render(0, "raising the cheeks").unwrap().text,
            "This micro-expression involves raising the cheeks."
        );
        assert_eq!(
            bank.render(2, "d").unwrap().text,
            "This micro-expression is characterized by d."
        );
        assert!(bank.render(7, "d").is_err());
        assert!(bank.render(0, "").is_err());
        assert!(TemplateBank::new(vec!["no slot".into()]).is_err());
        assert!(TemplateBank::new(vec!["{} and {}".into()]).is_err());
    }

    #[test]
    fn tokenizer_contract() {
        assert_eq!(
            tokenize("Raising the cheeks"),
            tokenize("raising the cheeks")
        );
        let long = vec!["word"; 100].join(" ");
        assert_eq!(tokenize(&long).len(), 77);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a, b.").len(), 4);
    }

    #[test]
    fn embedding_contract() {
        let bank = TemplateBank::default();
        let p1 = bank.render(0, &describe(&ann(&[6, 12])).unwrap()).unwrap();
        let p2 = bank.render(0, &describe(&ann(&[4, 7])).unwrap()).unwrap();
        let e1 = embed_frozen(&p1.token_ids, 7, 64).unwrap();
        let e1b = embed_frozen(&p1.token_ids, 7, 64).unwrap();
        let e2 = embed_frozen(&p2.token_ids, 7, 64).unwrap();
        assert_eq!(e1, e1b);
        let norm: f64 = e1.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let cos: f64 = e1.vector.iter().zip(&e2.vector).map(|(a, b)| a * b).sum();
        assert!(cos < 0.999, "{cos}");
        assert!(embed_frozen(&[], 7, 64).is_err());
    }
}
