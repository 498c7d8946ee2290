use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::catalog::{catalog, weather_tail, AttributeKind, AttributeSpec, COLORS};
use super::parse::{parse_caption, CaptionParse};
use crate::error::Result;

fn words(value: &str) -> Vec<String> {
    value.split(' ').map(ToString::to_string).collect()
}

/// Removes every adjective in `set`, plus any `and` left joining removed
/// words. Returns the index where the first removed word stood.
fn remove_adjectives(adjs: &mut Vec<String>, set: &[&str]) -> Option<usize> {
    let hit = |w: &String| set.contains(&w.as_str());
    let first = adjs.iter().position(hit)?;
    let mut keep = Vec::with_capacity(adjs.len());
    for (i, w) in adjs.iter().enumerate() {
        if hit(w) {
            continue;
        }
        if w == "and" {
            let prev = i.checked_sub(1).map(|p| &adjs[p]);
            let next = adjs.get(i + 1);
            if prev.is_some_and(hit) || next.is_some_and(hit) {
                continue;
            }
        }
        keep.push(w.clone());
    }
    *adjs = keep;
    Some(first.min(adjs.len()))
}

/// Applies one attribute variation to a parsed caption.
///
/// Colors replace the existing color adjectives in place, or go right before
/// the subject. Materials and patterns replace any adjective of their own
/// kind and are inserted in front of the remaining adjectives. Styles replace
/// the domain and weathers set the weather tail.
pub fn apply_variation(parse: &CaptionParse, spec: &AttributeSpec) -> Result<String> {
    spec.validate()?;
    let mut out = parse.clone();
    match spec.kind {
        AttributeKind::Color => {
            let at = remove_adjectives(&mut out.adjectives, COLORS).unwrap_or(out.adjectives.len());
            let new = words(&spec.value);
            out.adjectives.splice(at..at, new);
        }
        AttributeKind::Material | AttributeKind::Pattern => {
            remove_adjectives(&mut out.adjectives, catalog(spec.kind));
            out.adjectives.insert(0, spec.value.clone());
        }
        AttributeKind::Style => out.domain = spec.value.clone(),
        AttributeKind::Weather => {
            out.weather = weather_tail(&spec.value).map(ToString::to_string);
        }
    }
    if spec.kind.is_local() {
        out.fix_articles();
    } else {
        out.domain_article = CaptionParse::article_for(&out.domain).into();
    }
    let text = out.to_string();
    debug_assert!(parse_caption(&text).is_ok(), "variation produced {text:?}");
    Ok(text)
}
