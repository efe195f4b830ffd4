use crate::backends::{Backend, BackendExt};
use crate::templates::Template;

use super::{GroundingError, NounPhrase, PhraseSource};

pub fn normalize_phrase(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Split a model reply on newlines and commas, strip list markers, quotes
/// and trailing punctuation, then deduplicate keeping first occurrences.
pub fn parse_phrase_list(reply: &str, source: PhraseSource) -> Vec<NounPhrase> {
    let mut out: Vec<NounPhrase> = Vec::new();
    for item in reply.split(['\n', ',', ';']) {
        let mut s = item.trim();
        s = s.trim_start_matches(['-', '*', '•']).trim_start();
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                s = r.trim_start();
            }
        }
        let s = s.trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '.' || c == ':' || c.is_whitespace());
        if let Some(p) = NounPhrase::new(s, source) {
            if !out.iter().any(|q| q.text() == p.text()) {
                out.push(p);
            }
        }
    }
    out
}

/// Ask the chat backend for the key noun phrases of `response_text`. If the
/// backend fails or the reply yields nothing, fall back to
/// [`select_key_phrase`] over `frame_tags` (empty result when there are no
/// tags either).
pub fn extract_noun_phrases(
    response_text: &str,
    chat: &dyn Backend,
    template: &Template,
    frame_tags: &[String],
) -> Result<Vec<NounPhrase>, GroundingError> {
    if response_text.trim().is_empty() {
        return Err(GroundingError::EmptyResponse);
    }
    let prompt = template
        .render(&[("response", response_text.trim())])
        .expect("noun phrase template has a response placeholder");
    match chat.chat(&prompt, 128) {
        Ok(reply) => {
            let phrases = parse_phrase_list(&reply, PhraseSource::Llm);
            if !phrases.is_empty() {
                return Ok(phrases);
            }
            log::warn!("noun phrase reply parsed to nothing; using tag fallback");
        }
        Err(e) => log::warn!("noun phrase extraction failed ({e}); using tag fallback"),
    }
    if frame_tags.is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![select_key_phrase(response_text, frame_tags)?])
}

/// Longest frame tag found in the normalized response (ties go to the
/// earliest occurrence); if none occurs, the most frequent tag.
pub fn select_key_phrase(response_text: &str, frame_tags: &[String]) -> Result<NounPhrase, GroundingError> {
    let response = normalize_phrase(response_text);
    let tags: Vec<String> = frame_tags
        .iter()
        .map(|t| normalize_phrase(t))
        .filter(|t| !t.is_empty())
        .collect();
    if tags.is_empty() {
        return Err(GroundingError::NothingToSelect);
    }

    let best_match = tags
        .iter()
        .filter_map(|t| response.find(t.as_str()).map(|pos| (t, pos)))
        .min_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
    if let Some((tag, _)) = best_match {
        return Ok(NounPhrase::new(tag, PhraseSource::TagFallback).expect("non-empty tag"));
    }

    // most frequent, ties broken by first appearance in the tag list
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for t in &tags {
        match counts.iter_mut().find(|(s, _)| *s == t.as_str()) {
            Some(c) => c.1 += 1,
            None => counts.push((t.as_str(), 1)),
        }
    }
    let top = counts.iter().max_by_key(|(_, n)| *n).map(|(_, n)| *n).unwrap_or(0);
    let tag = counts.iter().find(|(_, n)| *n == top).map(|(s, _)| *s).expect("non-empty counts");
    Ok(NounPhrase::new(tag, PhraseSource::TagFallback).expect("non-empty tag"))
}
