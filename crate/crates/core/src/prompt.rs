//! Pulls (noun, count) constraints out of a text prompt.
//!
//! Parsing is rule based: a numeral from the lexicon binds to the head noun of
//! the short run of content words that follows it (at most three tokens).
//! Indefinite articles count as one unless they sit behind a preposition
//! ("on a table" describes the scene, it is not a counted object).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Numerals above this are rejected unless configured otherwise.
pub const DEFAULT_MAX_COUNT: u32 = 8;
/// How many tokens after a numeral may hold its noun.
pub const BINDING_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("no countable noun found in prompt")]
    NoCountableNoun,
    #[error("numeral {numeral:?} at token {position} has no noun within {BINDING_WINDOW} tokens")]
    AmbiguousBinding { numeral: String, position: usize },
    #[error("noun {0:?} is counted more than once")]
    DuplicateNoun(String),
    #[error("numeral {numeral:?} means {value}, outside the supported range 1..={max}")]
    CountOutOfRange {
        numeral: String,
        value: u32,
        max: u32,
    },
    #[error("noun {0:?} does not appear in the model token list")]
    UnboundToken(String),
    #[error("malformed lexicon: {0}")]
    Lexicon(String),
}

/// Word → count mapping. Digit strings are always numerals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon {
    words: BTreeMap<String, u32>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let mut words = BTreeMap::new();
        for (i, w) in [
            "one", "two", "three", "four", "five", "six", "seven", "eight",
        ]
        .iter()
        .enumerate()
        {
            words.insert(w.to_string(), i as u32 + 1);
            words.insert((i + 1).to_string(), i as u32 + 1);
        }
        words.insert("a".into(), 1);
        words.insert("an".into(), 1);
        Self { words }
    }
}

impl Lexicon {
    pub fn from_json(json: &str) -> Result<Self, PromptError> {
        let words: BTreeMap<String, u32> =
            serde_json::from_str(json).map_err(|e| PromptError::Lexicon(e.to_string()))?;
        Ok(Self {
            words: words
                .into_iter()
                .map(|(k, v)| (k.to_lowercase(), v))
                .collect(),
        })
    }

    pub fn insert(&mut self, word: &str, value: u32) {
        self.words.insert(word.to_lowercase(), value);
    }

    fn value(&self, token: &str) -> Option<u32> {
        self.words.get(token).copied().or_else(|| {
            if !token.is_empty() && token.bytes().all(|b| b.is_ascii_digit()) {
                Some(token.parse().unwrap_or(u32::MAX))
            } else {
                None
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountEntry {
    /// Surface form as written in the prompt.
    pub noun: String,
    /// Singular form; the category name used by layouts.
    pub canonical: String,
    /// Position in the prompt's word tokens, or in the model's tokens after
    /// [`bind_to_model_tokens`].
    pub token_index: usize,
    pub k: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountSpec {
    pub entries: Vec<CountEntry>,
}

impl CountSpec {
    pub fn target(&self, canonical: &str) -> Option<u32> {
        self.entries
            .iter()
            .find(|e| e.canonical == canonical)
            .map(|e| e.k)
    }
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

const STOP_WORDS: &[&str] = &[
    "and", "or", "but", "with", "without", "while", "as", "that", "which", "who", "the", "this",
    "these", "those", "their", "its", "his", "her", "are", "is", "was", "were", "be", "been",
    "being", "has", "have", "had", "do", "does", "they", "it", "there", "here", "each", "all",
    "both", "very", "then",
];

const PREPOSITIONS: &[&str] = &[
    "on", "in", "at", "of", "to", "into", "onto", "from", "by", "near", "under", "over", "above",
    "below", "behind", "beside", "besides", "between", "across", "along", "around", "through",
    "toward", "towards", "inside", "outside", "against", "beneath", "upon", "within", "past",
    "like", "for", "off", "up", "down",
];

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("people", "person"),
    ("children", "child"),
    ("men", "man"),
    ("women", "woman"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("oxen", "ox"),
    ("sheep", "sheep"),
    ("fish", "fish"),
    ("deer", "deer"),
    ("wolves", "wolf"),
    ("leaves", "leaf"),
    ("knives", "knife"),
    ("loaves", "loaf"),
    ("shelves", "shelf"),
    ("calves", "calf"),
    ("halves", "half"),
    ("wives", "wife"),
    ("buses", "bus"),
];

fn is_stop(token: &str) -> bool {
    STOP_WORDS.contains(&token) || PREPOSITIONS.contains(&token)
}

fn is_gerund(token: &str) -> bool {
    token.len() > 4 && token.ends_with("ing")
}

fn ends_in_plain_s(token: &str) -> bool {
    token.len() > 2
        && token.ends_with('s')
        && !token.ends_with("ss")
        && !token.ends_with("us")
        && !token.ends_with("is")
}

fn looks_plural(token: &str) -> bool {
    IRREGULAR_PLURALS.iter().any(|(p, _)| *p == token) || ends_in_plain_s(token)
}

/// Maps plural and singular surface forms onto one canonical noun.
pub fn singularize(noun: &str) -> String {
    if let Some((_, s)) = IRREGULAR_PLURALS.iter().find(|(p, _)| *p == noun) {
        return s.to_string();
    }
    if !ends_in_plain_s(noun) {
        return noun.to_string();
    }
    if let Some(stem) = noun.strip_suffix("ies") {
        if stem.len() > 1 {
            return format!("{stem}y");
        }
    }
    for suffix in ["ches", "shes", "xes", "zes", "sses", "oes"] {
        if noun.ends_with(suffix) {
            return noun[..noun.len() - 2].to_string();
        }
    }
    noun[..noun.len() - 1].to_string()
}

fn head_noun(run: &[&str], k: u32) -> usize {
    if k >= 2 {
        return run
            .iter()
            .position(|t| looks_plural(t))
            .unwrap_or(run.len() - 1);
    }
    // For a single object a later word ending in -s is most likely the verb
    // ("a dog runs").
    let end = run
        .iter()
        .skip(1)
        .position(|t| ends_in_plain_s(t))
        .map_or(run.len(), |p| p + 1);
    end - 1
}

pub fn parse_count_spec(prompt: &str, lexicon: &Lexicon) -> Result<CountSpec, PromptError> {
    parse_count_spec_with(prompt, lexicon, DEFAULT_MAX_COUNT)
}

pub fn parse_count_spec_with(
    prompt: &str,
    lexicon: &Lexicon,
    max_count: u32,
) -> Result<CountSpec, PromptError> {
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(PromptError::EmptyPrompt);
    }
    let mut entries: Vec<CountEntry> = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        let Some(value) = lexicon.value(tok) else {
            continue;
        };
        let article = matches!(tok.as_str(), "a" | "an");
        if article && i > 0 && PREPOSITIONS.contains(&tokens[i - 1].as_str()) {
            continue;
        }
        let run: Vec<&str> = tokens[i + 1..tokens.len().min(i + 1 + BINDING_WINDOW)]
            .iter()
            .map(String::as_str)
            .take_while(|t| !is_stop(t) && !is_gerund(t) && lexicon.value(t).is_none())
            .collect();
        if run.is_empty() {
            if article {
                continue;
            }
            return Err(PromptError::AmbiguousBinding {
                numeral: tok.clone(),
                position: i,
            });
        }
        if value == 0 || value > max_count {
            return Err(PromptError::CountOutOfRange {
                numeral: tok.clone(),
                value,
                max: max_count,
            });
        }
        let h = head_noun(&run, value);
        let noun = run[h].to_string();
        let canonical = singularize(&noun);
        if entries.iter().any(|e| e.canonical == canonical) {
            return Err(PromptError::DuplicateNoun(canonical));
        }
        entries.push(CountEntry {
            noun,
            canonical,
            token_index: i + 1 + h,
            k: value,
        });
    }
    if entries.is_empty() {
        return Err(PromptError::NoCountableNoun);
    }
    Ok(CountSpec { entries })
}

fn normalize_model_token(token: &str) -> String {
    if token.starts_with('<') && token.ends_with('>') {
        return String::new();
    }
    let t = token
        .trim_start_matches(['\u{2581}', '\u{0120}', ' '])
        .trim_start_matches("##");
    let t = t.strip_suffix("</w>").unwrap_or(t);
    t.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Re-anchors every entry on the model tokenizer's token list.
///
/// Tokens are aligned by their alphanumeric characters, so subword splits and
/// tokenizer prefix markers (`▁`, `Ġ`, `##`, `</w>`) are tolerated. A noun that
/// spans several subwords is anchored on the first one.
pub fn bind_to_model_tokens(
    spec: &CountSpec,
    prompt: &str,
    model_tokens: &[String],
) -> Result<CountSpec, PromptError> {
    let words = tokenize(prompt);
    let mut word_start = Vec::with_capacity(words.len());
    let mut offset = 0;
    for w in &words {
        word_start.push(offset);
        offset += w.chars().count();
    }
    // char offset → owning model token
    let mut owner = Vec::new();
    let mut model_chars = Vec::new();
    for (ti, tok) in model_tokens.iter().enumerate() {
        for ch in normalize_model_token(tok).chars() {
            owner.push(ti);
            model_chars.push(ch);
        }
    }
    let prompt_chars: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();

    let mut out = spec.clone();
    for e in &mut out.entries {
        let start = *word_start
            .get(e.token_index)
            .ok_or_else(|| PromptError::UnboundToken(e.noun.clone()))?;
        let len = e.noun.chars().count();
        let matches = (start..start + len)
            .all(|p| model_chars.get(p).is_some() && model_chars.get(p) == prompt_chars.get(p));
        if !matches {
            return Err(PromptError::UnboundToken(e.noun.clone()));
        }
        e.token_index = owner[start];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(prompt: &str) -> Vec<(String, u32)> {
        parse_count_spec(prompt, &Lexicon::default())
            .unwrap()
            .entries
            .into_iter()
            .map(|e| (e.noun, e.k))
            .collect()
    }

    #[test]
    fn two_categories() {
        assert_eq!(
            pairs("three cats and two dogs playing"),
            vec![("cats".into(), 3), ("dogs".into(), 2)]
        );
    }

    #[test]
    fn article_counts_one() {
        assert_eq!(pairs("a dog runs"), vec![("dog".into(), 1)]);
        assert_eq!(pairs("An owl sits on a branch"), vec![("owl".into(), 1)]);
    }

    #[test]
    fn lexicon_words_and_digits_cover_one_to_eight() {
        let words = [
            "one", "two", "three", "four", "five", "six", "seven", "eight",
        ];
        for (i, w) in words.iter().enumerate() {
            let k = i as u32 + 1;
            let noun = if k == 1 { "apple" } else { "apples" };
            assert_eq!(
                pairs(&format!("{w} {noun} on a table")),
                vec![(noun.to_string(), k)]
            );
            assert_eq!(
                pairs(&format!("{k} {noun} on a table")),
                vec![(noun.to_string(), k)]
            );
        }
    }

    #[test]
    fn three_categories_with_adjectives() {
        let spec = parse_count_spec(
            "Two red balloons, five small birds fly and one black cat",
            &Lexicon::default(),
        )
        .unwrap();
        let got: Vec<_> = spec
            .entries
            .iter()
            .map(|e| (e.canonical.as_str(), e.k, e.token_index))
            .collect();
        assert_eq!(got, vec![("balloon", 2, 2), ("bird", 5, 5), ("cat", 1, 10)]);
    }

    #[test]
    fn case_insensitive_and_canonical() {
        let spec = parse_count_spec("FOUR Puppies chase two BOXES", &Lexicon::default()).unwrap();
        let got: Vec<_> = spec
            .entries
            .iter()
            .map(|e| (e.canonical.as_str(), e.k))
            .collect();
        assert_eq!(got, vec![("puppy", 4), ("box", 2)]);
    }

    #[test]
    fn errors() {
        let lex = Lexicon::default();
        assert_eq!(parse_count_spec("", &lex), Err(PromptError::EmptyPrompt));
        assert_eq!(
            parse_count_spec("cats playing in the garden", &lex),
            Err(PromptError::NoCountableNoun)
        );
        assert!(matches!(
            parse_count_spec("the count is three", &lex),
            Err(PromptError::AmbiguousBinding { .. })
        ));
        assert!(matches!(
            parse_count_spec("9 cats", &lex),
            Err(PromptError::CountOutOfRange {
                value: 9,
                max: 8,
                ..
            })
        ));
        assert_eq!(
            parse_count_spec("two cats and three cats", &lex),
            Err(PromptError::DuplicateNoun("cat".into()))
        );
    }

    #[test]
    fn user_lexicon_extends_range() {
        let mut lex = Lexicon::from_json(r#"{"ten": 10, "a": 1}"#).unwrap();
        assert!(parse_count_spec("ten dogs", &lex).is_err());
        assert_eq!(
            parse_count_spec_with("ten dogs", &lex, 12).unwrap().entries[0].k,
            10
        );
        lex.insert("Dozen", 12);
        assert_eq!(
            parse_count_spec_with("dozen eggs", &lex, 12)
                .unwrap()
                .entries[0]
                .k,
            12
        );
    }

    #[test]
    fn singular_forms() {
        for (p, s) in [
            ("cats", "cat"),
            ("boxes", "box"),
            ("cherries", "cherry"),
            ("children", "child"),
            ("glass", "glass"),
            ("wolves", "wolf"),
            ("peaches", "peach"),
        ] {
            assert_eq!(singularize(p), s);
        }
    }

    #[test]
    fn binds_first_subword() {
        let prompt = "three kittens and two dogs";
        let spec = parse_count_spec(prompt, &Lexicon::default()).unwrap();
        let toks: Vec<String> = [
            "<s>",
            "\u{2581}three",
            "\u{2581}kit",
            "tens",
            "\u{2581}and",
            "\u{2581}two",
            "\u{2581}dogs",
            "</s>",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let bound = bind_to_model_tokens(&spec, prompt, &toks).unwrap();
        assert_eq!(bound.entries[0].token_index, 2);
        assert_eq!(bound.entries[1].token_index, 6);
        let wrong: Vec<String> = ["<s>", "four", "cats"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert!(matches!(
            bind_to_model_tokens(&spec, prompt, &wrong),
            Err(PromptError::UnboundToken(_))
        ));
    }
}
