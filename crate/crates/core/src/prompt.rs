//! Instruction building for the text generator and counterfactual text
//! derivation by class-name substitution.

use rand::Rng;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::types::{normalize_name, CategoryId, Vocabulary, MAX_CATEGORIES};

/// Token that replaces every class-name occurrence in counterfactual text.
pub const NOTHING: &str = "nothing";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("at least one category name is required")]
    NoCategories,
    #[error("{0} categories given, at most {MAX_CATEGORIES} are allowed")]
    TooManyCategories(usize),
    #[error("example count must be at least 1")]
    ZeroCount,
    #[error("condition list is empty")]
    NoConditions,
}

/// Ordered generation conditions appended to every instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionSet(Vec<String>);

impl Default for ConditionSet {
    fn default() -> Self {
        ConditionSet(vec![
            "Describe the background in sufficient detail while keeping the target category as the main subject of the image.".into(),
            "Make the scenes as diverse as possible and give each one a certain level of detail.".into(),
            "Diversify the attributes of the target category, such as its color, size, material, age and pose.".into(),
        ])
    }
}

impl ConditionSet {
    pub fn new(conditions: Vec<String>) -> Result<Self, PromptError> {
        if conditions.iter().all(|c| c.trim().is_empty()) {
            return Err(PromptError::NoConditions);
        }
        Ok(ConditionSet(conditions))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

fn check_categories(categories: &[&str]) -> Result<(), PromptError> {
    match categories.len() {
        0 => Err(PromptError::NoCategories),
        n if n > MAX_CATEGORIES => Err(PromptError::TooManyCategories(n)),
        _ => Ok(()),
    }
}

/// Builds the instruction sent to a text-generation backend.
pub fn build_instruction(
    categories: &[&str],
    conditions: &ConditionSet,
    count: usize,
) -> Result<String, PromptError> {
    check_categories(categories)?;
    if count == 0 {
        return Err(PromptError::ZeroCount);
    }
    let quoted: Vec<String> = categories.iter().map(|c| format!("\"{c}\"")).collect();
    let mut s = format!(
        "Write {count} different one-paragraph image descriptions for a text-to-image model. \
         Every description must mention {} by name.\nConditions:\n",
        quoted.join(" and ")
    );
    for (i, c) in conditions.as_slice().iter().enumerate() {
        s.push_str(&format!("{}. {}\n", i + 1, c.trim()));
    }
    s.push_str(&format!("Return exactly {count} descriptions, one per line."));
    Ok(s)
}

fn name_pattern(name: &str) -> String {
    let words: Vec<String> = normalize_name(name).split(' ').map(regex::escape).collect();
    format!(r"\b{}(?:es|s)?\b", words.join(r"[\s_\-]+"))
}

fn names_regex(names: &[&str]) -> Option<Regex> {
    names_regex_sized(names, 10 << 20)
}

fn names_regex_sized(names: &[&str], size_limit: usize) -> Option<Regex> {
    let mut sorted: Vec<&str> = names.iter().copied().filter(|n| !normalize_name(n).is_empty()).collect();
    if sorted.is_empty() {
        return None;
    }
    // longest first so "school bus" wins over "bus"
    sorted.sort_by_key(|n| std::cmp::Reverse(normalize_name(n).len()));
    let alternation: Vec<String> = sorted.iter().map(|n| format!("(?:{})", name_pattern(n))).collect();
    Some(
        RegexBuilder::new(&alternation.join("|"))
            .case_insensitive(true)
            .size_limit(size_limit)
            .build()
            .expect("escaped class-name pattern compiles"),
    )
}

/// Whole-word, case-insensitive occurrences of `name` (plural forms included).
pub fn count_mentions(text: &str, name: &str) -> usize {
    names_regex(&[name]).map_or(0, |re| re.find_iter(text).count())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterfactual {
    pub text: String,
    pub replacements: usize,
}

impl Counterfactual {
    /// True when no class name was found in the source text.
    pub fn no_substitution(&self) -> bool {
        self.replacements == 0
    }
}

/// Replaces every class-name occurrence with [`NOTHING`].
pub fn counterfactualize(text: &str, categories: &[&str]) -> Counterfactual {
    let Some(re) = names_regex(categories) else {
        return Counterfactual { text: text.to_string(), replacements: 0 };
    };
    let replacements = re.find_iter(text).count();
    let text = re.replace_all(text, NOTHING).into_owned();
    Counterfactual { text, replacements }
}

/// Finds which vocabulary categories a text mentions, using the same
/// matching rules as [`counterfactualize`].
#[derive(Debug, Clone)]
pub struct NameMatcher {
    regex: Option<Regex>,
    vocabulary: Vocabulary,
}

impl NameMatcher {
    pub fn new(vocabulary: &Vocabulary) -> Self {
        let names: Vec<&str> = vocabulary.names().iter().map(String::as_str).collect();
        let regex = names_regex_sized(&names, 256 << 20);
        NameMatcher { regex, vocabulary: vocabulary.clone() }
    }

    fn resolve(&self, matched: &str) -> Option<CategoryId> {
        let norm = normalize_name(matched);
        self.vocabulary
            .id_of(&norm)
            .or_else(|| norm.strip_suffix("es").and_then(|n| self.vocabulary.id_of(n)))
            .or_else(|| norm.strip_suffix('s').and_then(|n| self.vocabulary.id_of(n)))
    }

    /// Sorted, de-duplicated ids of every mentioned category.
    pub fn categories_in(&self, text: &str) -> Vec<CategoryId> {
        let Some(re) = &self.regex else { return Vec::new() };
        let mut ids: Vec<CategoryId> = re.find_iter(text).filter_map(|m| self.resolve(m.as_str())).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

const SETTINGS: &[&str] = &[
    "In a peaceful countryside setting at dawn",
    "On a rain-soaked avenue glowing under neon signs",
    "Inside a sunlit kitchen with pale tiled walls",
    "At the edge of a misty pine forest",
    "On a crowded harbor pier at sunset",
    "In a quiet library with tall wooden shelves",
    "Across a windswept desert under a pale sky",
    "In a snowy mountain village at dusk",
    "Beside a calm lake reflecting autumn colors",
    "In a busy open-air market full of striped awnings",
    "On a rooftop terrace overlooking the skyline",
    "In a cluttered artist studio lit by a skylight",
];

const ATTRIBUTES: &[&str] = &[
    "weathered", "bright", "small", "large", "glossy", "dusty", "striped", "vintage", "colorful",
    "sleek", "old", "elegant",
];

const DETAILS: &[&str] = &[
    "while soft light spills over the scene",
    "as a gentle breeze moves through the background",
    "with long shadows stretching across the ground",
    "surrounded by small details that fill the frame",
    "while distant sounds drift in from far away",
    "under a sky streaked with thin clouds",
    "with warm reflections dancing on every surface",
    "as the background fades into a soft blur",
];

const SINGLE_FRAMES: &[&str] = &[
    "{setting}, {a} {attr} {name} stands out clearly, {detail}.",
    "{setting}, {a} {attr} {name} rests near the center of the view, {detail}.",
    "{setting}, one can spot {a} {attr} {name} in the foreground, {detail}.",
    "{setting}, {a} {attr} {name} draws the eye, {detail}.",
];

const PAIR_FRAMES: &[&str] = &[
    "{setting}, {a} {attr} {name} sits beside {a2} {attr2} {name2}, {detail}.",
    "{setting}, {a} {attr} {name} and {a2} {attr2} {name2} share the scene, {detail}.",
    "{setting}, {a} {attr} {name} appears not far from {a2} {attr2} {name2}, {detail}.",
];

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

fn instantiate<R: Rng>(categories: &[&str], rng: &mut R) -> String {
    let setting = pick(rng, SETTINGS);
    let attr = pick(rng, ATTRIBUTES);
    let detail = pick(rng, DETAILS);
    let mut s = if categories.len() == 1 {
        pick(rng, SINGLE_FRAMES).to_string()
    } else {
        let attr2 = pick(rng, ATTRIBUTES);
        pick(rng, PAIR_FRAMES)
            .replace("{a2}", article(attr2))
            .replace("{attr2}", attr2)
            .replace("{name2}", categories[1])
    };
    s = s
        .replace("{setting}", setting)
        .replace("{a}", article(attr))
        .replace("{attr}", attr)
        .replace("{detail}", detail)
        .replace("{name}", categories[0]);
    s
}

/// Deterministic description used when no text-generation backend is
/// configured. Mentions each category exactly once, with a background clause
/// and an attribute clause.
pub fn template_fallback(categories: &[&str], rng_seed: u64) -> Result<String, PromptError> {
    check_categories(categories)?;
    let mut rng = seed::rng(seed::derive(rng_seed, 0x7e47));
    for _ in 0..32 {
        let text = instantiate(categories, &mut rng);
        if categories.iter().all(|c| count_mentions(&text, c) == 1) {
            return Ok(text);
        }
    }
    // every pooled word collides with a category name; fall back to a bare listing
    Ok(format!("A plain scene showing {}.", categories.join(" next to ")))
}
