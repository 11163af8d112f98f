//! Prompt construction for generation and LM-as-classifier calls, and parsing
//! of completions back into utterances or intent predictions.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// K examples of one seed intent under its name.
    SingleIntent,
    /// Full intent enumeration plus one example from each of K intents.
    Gpt3Mix,
    /// Full intent enumeration plus all K examples of the seed intent.
    Gpt3MixMixed,
    /// Labelled examples of a small intent group followed by a query.
    ClassifyTriplet,
}

impl FromStr for PromptStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_intent" => Ok(Self::SingleIntent),
            "gpt3mix" => Ok(Self::Gpt3Mix),
            "gpt3mix_mixed" => Ok(Self::Gpt3MixMixed),
            "classify_triplet" => Ok(Self::ClassifyTriplet),
            other => Err(Error::Prompt(format!("unknown prompt style `{other}`"))),
        }
    }
}

/// Placeholders: `{intent_name}` and `{intent_list}` in the header;
/// `{index}`, `{text}` and `{intent_name}` in the example line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub style: PromptStyle,
    pub header_pattern: String,
    pub example_line_pattern: String,
    pub stop_sequence: String,
}

impl PromptTemplate {
    pub fn single_intent() -> Self {
        Self {
            style: PromptStyle::SingleIntent,
            header_pattern: "The following sentences belong to the same category {intent_name}:"
                .into(),
            example_line_pattern: "Example {index}: {text}".into(),
            stop_sequence: "\nExample".into(),
        }
    }

    pub fn gpt3mix(mixed: bool) -> Self {
        Self {
            style: if mixed {
                PromptStyle::Gpt3MixMixed
            } else {
                PromptStyle::Gpt3Mix
            },
            header_pattern: "Each item in the following list contains a sentence and the respective intent. Intent is one of {intent_list}.".into(),
            example_line_pattern: "Sentence: {text} (Intent: {intent_name})".into(),
            stop_sequence: "\nSentence".into(),
        }
    }

    pub fn classify_triplet() -> Self {
        Self {
            style: PromptStyle::ClassifyTriplet,
            header_pattern: "Each of the following sentences belongs to one of the intents {intent_list}.".into(),
            example_line_pattern: "Sentence: {text} => Intent: {intent_name}".into(),
            stop_sequence: "\n".into(),
        }
    }

    pub fn default_for(style: PromptStyle) -> Self {
        match style {
            PromptStyle::SingleIntent => Self::single_intent(),
            PromptStyle::Gpt3Mix => Self::gpt3mix(false),
            PromptStyle::Gpt3MixMixed => Self::gpt3mix(true),
            PromptStyle::ClassifyTriplet => Self::classify_triplet(),
        }
    }

    /// Parses a template file of `key = value` lines.
    ///
    /// Keys: `style`, `header`, `example`, `stop`. Values may use `\n` and
    /// `\t` escapes; `#` starts a comment line. Missing keys fall back to the
    /// default template for the style.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                Error::Prompt(format!("template line {}: expected `key = value`", lineno + 1))
            })?;
            values.insert(key.trim().to_string(), unescape(value.trim()));
        }
        let style = match values.remove("style") {
            Some(s) => s.parse()?,
            None => PromptStyle::SingleIntent,
        };
        let mut template = Self::default_for(style);
        if let Some(h) = values.remove("header") {
            template.header_pattern = h;
        }
        if let Some(e) = values.remove("example") {
            template.example_line_pattern = e;
        }
        if let Some(s) = values.remove("stop") {
            template.stop_sequence = s;
        }
        if let Some(key) = values.keys().next() {
            return Err(Error::Prompt(format!("unknown template key `{key}`")));
        }
        if !template.example_line_pattern.contains("{text}") {
            return Err(Error::Prompt("example line must contain {text}".into()));
        }
        Ok(template)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&util::read_to_string(path)?)
    }

    pub(crate) fn render_line(&self, index: usize, text: &str, intent: &str) -> String {
        self.example_line_pattern
            .replace("{index}", &index.to_string())
            .replace("{intent_name}", intent)
            .replace("{text}", text)
    }

    fn render_header(&self, intent_name: &str, intent_list: &[String]) -> String {
        let list = intent_list
            .iter()
            .map(|i| format!("'{i}'"))
            .collect::<Vec<_>>()
            .join(", ");
        self.header_pattern
            .replace("{intent_name}", intent_name)
            .replace("{intent_list}", &list)
    }

    /// The unfilled line that ends a generation prompt: the example line cut
    /// just before `{text}`.
    pub(crate) fn open_line(&self, index: usize) -> String {
        let head = self
            .example_line_pattern
            .split("{text}")
            .next()
            .unwrap_or_default();
        head.replace("{index}", &index.to_string())
            .trim_end()
            .to_string()
    }

    /// Regex matching one rendered example line, capturing `text` and,
    /// when the pattern has one, `intent`.
    pub(crate) fn line_regex(&self) -> Regex {
        let mut pattern = String::from("^");
        let mut rest = self.example_line_pattern.as_str();
        let mut seen_text = false;
        let mut seen_intent = false;
        while !rest.is_empty() {
            let next = ["{index}", "{text}", "{intent_name}"]
                .iter()
                .filter_map(|p| rest.find(p).map(|pos| (pos, *p)))
                .min();
            match next {
                Some((pos, placeholder)) => {
                    pattern.push_str(&literal_regex(&rest[..pos]));
                    match placeholder {
                        "{index}" => pattern.push_str(r"\d+"),
                        "{text}" if !seen_text => {
                            seen_text = true;
                            pattern.push_str("(?P<text>.*?)")
                        }
                        "{intent_name}" if !seen_intent => {
                            seen_intent = true;
                            pattern.push_str("(?P<intent>.*?)")
                        }
                        _ => pattern.push_str(".*?"),
                    }
                    rest = &rest[pos + placeholder.len()..];
                }
                None => {
                    pattern.push_str(&literal_regex(rest));
                    rest = "";
                }
            }
        }
        pattern.push('$');
        Regex::new(&pattern).expect("escaped template pattern is a valid regex")
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::single_intent()
    }
}

/// Escapes a literal template fragment; runs of whitespace match loosely.
fn literal_regex(fragment: &str) -> String {
    let mut out = String::new();
    let mut in_space = false;
    for ch in fragment.chars() {
        if ch.is_whitespace() {
            if !in_space {
                out.push_str(r"\s*");
            }
            in_space = true;
        } else {
            in_space = false;
            out.push_str(&regex::escape(&ch.to_string()));
        }
    }
    out
}

fn unescape(value: &str) -> String {
    let mut out = String::new();
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// A prompt ready to send, plus what is needed to parse its completions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub seed_texts: Vec<String>,
    /// Seed intent for generation styles; `None` for classification prompts.
    pub seed_intent: Option<String>,
    /// Candidate intents for classification, or the full inventory for GPT3Mix styles.
    pub candidates: Vec<String>,
    pub template: PromptTemplate,
    /// SHA-256 of the prompt text.
    pub digest: String,
}

impl RenderedPrompt {
    fn new(
        text: String,
        seed_texts: Vec<String>,
        seed_intent: Option<String>,
        candidates: Vec<String>,
        template: &PromptTemplate,
    ) -> Self {
        let digest = util::digest_parts(&[text.as_str()]);
        Self {
            text,
            seed_texts,
            seed_intent,
            candidates,
            template: template.clone(),
            digest,
        }
    }

    /// The trailing, unfilled line of the prompt.
    pub fn open_line(&self) -> &str {
        self.text.rsplit('\n').next().unwrap_or_default()
    }
}

/// `music_likeness` -> `music likeness`.
pub fn display_name(intent: &str) -> String {
    intent.replace('_', " ")
}

fn check_seed(text: &str, template: &PromptTemplate) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Prompt("empty seed text".into()));
    }
    if text.contains('\n') {
        return Err(Error::Prompt(format!("seed text spans lines: {text:?}")));
    }
    let stop = &template.stop_sequence;
    if !stop.is_empty() && text.contains(stop.as_str()) {
        return Err(Error::Prompt(format!(
            "seed text contains the stop sequence {stop:?}: {text:?}"
        )));
    }
    Ok(())
}

/// Seed examples of one intent, listed under its name, followed by an open
/// `(K+1)`-th example slot.
pub fn build_generation_prompt(
    intent_name: &str,
    seed_intent: &str,
    seeds: &[String],
    template: &PromptTemplate,
) -> Result<RenderedPrompt> {
    if template.style != PromptStyle::SingleIntent {
        return Err(Error::Prompt(format!(
            "generation prompt needs the single_intent style, got {:?}",
            template.style
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Prompt("no seed examples".into()));
    }
    let mut lines = vec![template.render_header(intent_name, &[])];
    for (i, seed) in seeds.iter().enumerate() {
        check_seed(seed, template)?;
        lines.push(template.render_line(i + 1, seed.trim(), intent_name));
    }
    lines.push(template.open_line(seeds.len() + 1));
    Ok(RenderedPrompt::new(
        lines.join("\n"),
        seeds.to_vec(),
        Some(seed_intent.to_string()),
        Vec::new(),
        template,
    ))
}

/// Enumerates the inventory, then labelled examples, then an open line for a
/// new (text, intent) pair. With `mixed`, every example must belong to
/// `seed_intent`.
pub fn build_gpt3mix_prompt(
    inventory: &[String],
    sampled_examples: &[(String, String)],
    mixed: bool,
    seed_intent: Option<&str>,
    template: &PromptTemplate,
) -> Result<RenderedPrompt> {
    if inventory.is_empty() {
        return Err(Error::Prompt("empty intent inventory".into()));
    }
    if sampled_examples.is_empty() {
        return Err(Error::Prompt("no examples".into()));
    }
    if mixed {
        let seed = seed_intent
            .ok_or_else(|| Error::Prompt("mixed variant requires a seed intent".into()))?;
        if let Some((_, other)) = sampled_examples.iter().find(|(_, i)| i != seed) {
            return Err(Error::Prompt(format!(
                "mixed variant example labelled `{other}`, expected `{seed}`"
            )));
        }
    }
    for (_, intent) in sampled_examples {
        if !inventory.contains(intent) {
            return Err(Error::UnknownIntent {
                intent: intent.clone(),
                context: "gpt3mix example".into(),
            });
        }
    }
    let mut lines = vec![template.render_header("", inventory)];
    for (i, (text, intent)) in sampled_examples.iter().enumerate() {
        check_seed(text, template)?;
        lines.push(template.render_line(i + 1, text.trim(), intent));
    }
    lines.push(template.open_line(sampled_examples.len() + 1));
    Ok(RenderedPrompt::new(
        lines.join("\n"),
        sampled_examples.iter().map(|(t, _)| t.clone()).collect(),
        seed_intent.map(str::to_string),
        inventory.to_vec(),
        template,
    ))
}

/// Shuffled labelled seed lines of every candidate, then the query with an
/// unfilled intent slot.
pub fn build_classification_prompt(
    candidates: &[String],
    seeds_per_intent: &BTreeMap<String, Vec<String>>,
    query: &str,
    shuffle_seed: u64,
    template: &PromptTemplate,
) -> Result<RenderedPrompt> {
    if query.trim().is_empty() {
        return Err(Error::Prompt("empty query".into()));
    }
    if candidates.len() < 2 {
        return Err(Error::Prompt("classification needs at least two candidates".into()));
    }
    check_seed(query, template).or_else(|e| {
        // The stop sequence of classification prompts is a bare newline;
        // only multi-line queries are a problem.
        if query.contains('\n') {
            Err(e)
        } else {
            Ok(())
        }
    })?;
    let mut labelled = Vec::new();
    for intent in candidates {
        let seeds = seeds_per_intent
            .get(intent)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Prompt(format!("candidate `{intent}` has no seed examples")))?;
        for seed in seeds {
            if seed.trim().is_empty() || seed.contains('\n') {
                return Err(Error::Prompt(format!("bad seed for `{intent}`: {seed:?}")));
            }
            labelled.push((seed.trim().to_string(), intent.clone()));
        }
    }
    let mut rng = util::seeded_rng(shuffle_seed, "classification-shuffle");
    labelled.shuffle(&mut rng);

    let mut lines = vec![template.render_header("", candidates)];
    for (i, (text, intent)) in labelled.iter().enumerate() {
        lines.push(template.render_line(i + 1, text, intent));
    }
    let open = template
        .render_line(labelled.len() + 1, query.trim(), "\u{0}")
        .split('\u{0}')
        .next()
        .unwrap_or_default()
        .trim_end()
        .to_string();
    lines.push(open);
    Ok(RenderedPrompt::new(
        lines.join("\n"),
        labelled.into_iter().map(|(t, _)| t).collect(),
        None,
        candidates.to_vec(),
        template,
    ))
}

/// A parsed generated example; `intent` is set when the template carries labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedExample {
    pub text: String,
    pub intent: Option<String>,
}

fn strip_decoration(line: &str) -> &str {
    let mut s = line.trim();
    // Leading list markers such as `12.`, `3)`, `-`, `*`.
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix(['.', ')', ':']) {
            s = r.trim_start();
        }
    }
    if let Some(r) = s.strip_prefix(['-', '*', '•']) {
        s = r.trim_start();
    }
    strip_quotes(s)
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')] {
        if s.len() >= open.len_utf8() + close.len_utf8() && s.starts_with(open) && s.ends_with(close)
        {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Splits a completion into example lines, with labels where the template
/// has them. Drops empty lines, in-completion duplicates and copies of any
/// seed (compared case-insensitively with whitespace collapsed).
pub fn parse_labelled(completion: &str, prompt: &RenderedPrompt) -> Vec<ParsedExample> {
    let template = &prompt.template;
    let stop = template.stop_sequence.as_str();
    let body = if !stop.trim().is_empty() {
        completion.strip_suffix(stop).unwrap_or(completion)
    } else {
        completion
    };
    let full = format!("{}{}", prompt.open_line(), body);
    let regex = template.line_regex();
    let stop_norm = util::normalize_text(stop);
    let mut seen: HashSet<String> = prompt
        .seed_texts
        .iter()
        .map(|s| util::normalize_text(s))
        .collect();
    let mut out = Vec::new();
    for line in full.lines() {
        let (text, intent) = match regex.captures(line.trim()) {
            Some(caps) => (
                caps.name("text").map(|m| m.as_str()).unwrap_or_default(),
                caps.name("intent").map(|m| strip_quotes(m.as_str()).to_string()),
            ),
            None => {
                if util::normalize_text(line) == stop_norm {
                    continue;
                }
                (line, None)
            }
        };
        let text = strip_decoration(text);
        if text.is_empty() {
            continue;
        }
        if seen.insert(util::normalize_text(text)) {
            out.push(ParsedExample {
                text: text.to_string(),
                intent: intent.filter(|i| !i.is_empty()),
            });
        }
    }
    out
}

pub fn parse_generated(completion: &str, prompt: &RenderedPrompt) -> Vec<String> {
    parse_labelled(completion, prompt)
        .into_iter()
        .map(|p| p.text)
        .collect()
}

/// Recovers the labelled example lines from a rendered prompt (header and
/// open line excluded).
pub fn prompt_examples(prompt: &RenderedPrompt) -> Vec<ParsedExample> {
    let regex = prompt.template.line_regex();
    let lines: Vec<&str> = prompt.text.lines().collect();
    if lines.len() < 2 {
        return Vec::new();
    }
    lines[1..lines.len() - 1]
        .iter()
        .filter_map(|line| regex.captures(line.trim()))
        .filter_map(|caps| {
            let text = caps.name("text")?.as_str().trim().to_string();
            let intent = caps.name("intent").map(|m| m.as_str().trim().to_string());
            (!text.is_empty()).then_some(ParsedExample { text, intent })
        })
        .collect()
}

/// The query text carried by the open line of a classification prompt.
pub fn prompt_query(prompt: &RenderedPrompt) -> Option<String> {
    let caps = prompt.template.line_regex().captures(prompt.open_line().trim())?;
    let text = caps.name("text")?.as_str().trim();
    (!text.is_empty()).then(|| text.to_string())
}

/// Lowercase, trim, and fold underscores and whitespace into single spaces.
pub fn normalize_intent_name(name: &str) -> String {
    name.replace('_', " ")
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Matches the first line of a completion against the candidates.
pub fn parse_intent_prediction(completion: &str, candidates: &[String]) -> Option<String> {
    let first = completion
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or_default();
    let first = strip_quotes(first.trim_end_matches(['.', ',', ';']));
    let wanted = normalize_intent_name(first);
    if wanted.is_empty() {
        return None;
    }
    candidates
        .iter()
        .find(|c| normalize_intent_name(c) == wanted)
        .cloned()
}
