use thiserror::Error;

use super::{BinaryVerdict, ParsePath, VqaAnswer, Verdict};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("answer could not be mapped to yes/no: {raw:?}")]
    Unparseable { raw: String },
}

const AFFIRMATIVE: &[&str] = &[
    "there is a child",
    "there is one child",
    "there are children",
    "there are two children",
    "there are several children",
    "there is a kid",
    "there are kids",
    "there is a baby",
    "there is a toddler",
    "there is a boy",
    "there is a girl",
    "contains a child",
    "contains children",
    "shows a child",
    "shows children",
    "i can see a child",
    "i can see children",
    "a child is",
    "children are present",
    "child is present",
];

const NEGATIVE: &[&str] = &[
    "no children",
    "no child",
    "no kids",
    "no babies",
    "there are no",
    "there is no",
    "does not contain",
    "doesn t contain",
    "do not see any",
    "don t see any",
    "cannot see any",
    "not any children",
    "without children",
    "only adults",
];

/// Lowercase words, split on anything that is not alphanumeric.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_verdict(word: &str) -> Option<Verdict> {
    match word {
        "yes" => Some(Verdict::Positive),
        "no" => Some(Verdict::Negative),
        _ => None,
    }
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    haystack.contains(&format!(" {phrase} "))
}

pub fn parse_text(raw: &str) -> Result<BinaryVerdict, ParseError> {
    let words = words(raw);
    let unparseable = || ParseError::Unparseable { raw: raw.to_string() };
    let first = words.first().ok_or_else(unparseable)?;

    if words.len() == 1 {
        if let Some(value) = token_verdict(first) {
            return Ok(BinaryVerdict { value, parse_path: ParsePath::ExactToken });
        }
    }
    if let Some(value) = token_verdict(first) {
        return Ok(BinaryVerdict { value, parse_path: ParsePath::LeadingToken });
    }

    let joined = format!(" {} ", words.join(" "));
    let affirmative = AFFIRMATIVE.iter().any(|p| contains_phrase(&joined, p));
    let negative = NEGATIVE.iter().any(|p| contains_phrase(&joined, p));
    match (affirmative, negative) {
        (true, false) => Ok(BinaryVerdict { value: Verdict::Positive, parse_path: ParsePath::VerboseHeuristic }),
        (false, true) => Ok(BinaryVerdict { value: Verdict::Negative, parse_path: ParsePath::VerboseHeuristic }),
        _ => Err(unparseable()),
    }
}

pub fn parse_binary(answer: &VqaAnswer) -> Result<BinaryVerdict, ParseError> {
    parse_text(&answer.raw_text)
}
