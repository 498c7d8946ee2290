//! Controlled caption grammar.
//!
//! ```text
//! caption    := art " " domain " of " art " " [adjectives " "] subject
//!               [" " action " the " background] [" " weather] [", " residue] ["."]
//! art        := "a" | "an"
//! weather    := "on a " ("snowy" | "rainy" | "foggy") " day"
//! ```
//!
//! The action starts at the first action word after the subject and runs to
//! the next `the`. Words are separated by exactly one space, so a successful
//! parse re-serialises to the identical string.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use super::catalog::WEATHER_ADJECTIVES;
use crate::error::{Error, Result};

/// Words that open the action phrase.
pub const ACTION_WORDS: &[&str] = &[
    "on", "in", "at", "near", "under", "over", "above", "below", "beside", "behind", "by", "with",
    "against", "inside", "across", "along", "standing", "sitting", "flying", "running", "lying",
    "parked", "walking", "floating", "swimming", "hanging", "resting",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionParse {
    pub domain_article: String,
    pub domain: String,
    pub article: String,
    pub adjectives: Vec<String>,
    pub subject: String,
    pub action: Option<String>,
    pub background: Option<String>,
    pub weather: Option<String>,
    /// Unparsed text after the first comma.
    pub residue: Option<String>,
    pub period: bool,
}

impl fmt::Display for CaptionParse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} of {} ", self.domain_article, self.domain, self.article)?;
        for adj in &self.adjectives {
            write!(f, "{adj} ")?;
        }
        f.write_str(&self.subject)?;
        if let (Some(action), Some(bg)) = (&self.action, &self.background) {
            write!(f, " {action} the {bg}")?;
        }
        if let Some(w) = &self.weather {
            write!(f, " {w}")?;
        }
        if let Some(r) = &self.residue {
            write!(f, ", {r}")?;
        }
        if self.period {
            f.write_str(".")?;
        }
        Ok(())
    }
}

impl CaptionParse {
    /// `a` or `an` for the word that follows.
    pub fn article_for(word: &str) -> &'static str {
        match word.chars().next() {
            Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
            _ => "a",
        }
    }

    /// Recomputes both articles from the words they precede.
    pub fn fix_articles(&mut self) {
        self.domain_article = Self::article_for(&self.domain).into();
        let head = self.adjectives.first().unwrap_or(&self.subject);
        self.article = Self::article_for(head).into();
    }
}

/// Splits a caption into the tokens seen by the text encoder: words, with
/// a trailing `.` or `,` split off as its own token. Words are lowercased.
pub fn caption_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = raw;
        let mut tail = Vec::new();
        while let Some(stripped) = word.strip_suffix(['.', ',']) {
            tail.push(&word[stripped.len()..]);
            word = stripped;
        }
        if !word.is_empty() {
            out.push(word.to_lowercase());
        }
        out.extend(tail.into_iter().rev().map(ToString::to_string));
    }
    out
}

fn err(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

struct Word<'a> {
    text: &'a str,
    pos: usize,
}

fn split_words(text: &str, base: usize) -> Result<Vec<Word<'_>>> {
    let mut words = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if ch == ' ' {
            if i == start {
                return Err(err(base + i, "expected a word"));
            }
            words.push(Word {
                text: &text[start..i],
                pos: base + start,
            });
            start = i + 1;
        } else if ch.is_whitespace() || ch == '.' || ch == ',' || ch.is_uppercase() {
            return Err(err(base + i, alloc::format!("unexpected character {ch:?}")));
        }
    }
    if start == text.len() {
        return Err(err(base + start, "expected a word"));
    }
    words.push(Word {
        text: &text[start..],
        pos: base + start,
    });
    Ok(words)
}

fn join(words: &[Word<'_>]) -> String {
    let mut s = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(w.text);
    }
    s
}

pub fn parse_caption(text: &str) -> Result<CaptionParse> {
    let (body, period) = match text.strip_suffix('.') {
        Some(b) => (b, true),
        None => (text, false),
    };
    let (body, residue) = match body.find(", ") {
        Some(i) => {
            let r = &body[i + 2..];
            if r.is_empty() || r.contains('.') {
                return Err(err(i + 2, "malformed residue"));
            }
            (&body[..i], Some(r.to_string()))
        }
        None => (body, None),
    };
    let words = split_words(body, 0)?;
    let is_article = |w: &str| w == "a" || w == "an";

    if !is_article(words[0].text) {
        return Err(err(words[0].pos, "caption must start with an article"));
    }
    let of = words
        .iter()
        .enumerate()
        .skip(2)
        .find(|(_, w)| w.text == "of")
        .map(|(i, _)| i)
        .ok_or_else(|| err(words.get(1).map_or(body.len(), |w| w.pos), "expected `<domain> of`"))?;
    let domain = join(&words[1..of]);
    let art = words
        .get(of + 1)
        .filter(|w| is_article(w.text))
        .ok_or_else(|| err(words.get(of + 1).map_or(body.len(), |w| w.pos), "expected an article after `of`"))?;
    let mut rest = &words[of + 2..];
    if rest.is_empty() {
        return Err(err(body.len(), "expected a subject"));
    }

    let mut weather = None;
    if rest.len() >= 5 {
        let tail = &rest[rest.len() - 4..];
        if tail[0].text == "on"
            && tail[1].text == "a"
            && WEATHER_ADJECTIVES.contains(&tail[2].text)
            && tail[3].text == "day"
        {
            weather = Some(join(tail));
            rest = &rest[..rest.len() - 4];
        }
    }

    let action_at = rest
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, w)| ACTION_WORDS.contains(&w.text))
        .map(|(i, _)| i);
    let (noun_phrase, action, background) = match action_at {
        Some(k) => {
            let the = rest[k + 1..]
                .iter()
                .position(|w| w.text == "the")
                .map(|p| p + k + 1)
                .ok_or_else(|| err(rest[k].pos, "action must be followed by `the <background>`"))?;
            if the + 1 >= rest.len() {
                return Err(err(rest[the].pos, "expected a background after `the`"));
            }
            (
                &rest[..k],
                Some(join(&rest[k..the])),
                Some(join(&rest[the + 1..])),
            )
        }
        None => (rest, None, None),
    };
    let (subject, adjectives) = noun_phrase.split_last().expect("noun phrase is non-empty");
    if subject.text == "and" || ACTION_WORDS.contains(&subject.text) || is_article(subject.text) {
        return Err(err(subject.pos, alloc::format!("{:?} cannot be a subject", subject.text)));
    }

    Ok(CaptionParse {
        domain_article: words[0].text.to_string(),
        domain,
        article: art.text.to_string(),
        adjectives: adjectives.iter().map(|w| w.text.to_string()).collect(),
        subject: subject.text.to_string(),
        action,
        background,
        weather,
        residue,
        period,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn parses_running_example() {
        let p = parse_caption("a photo of a white horse on the grass").unwrap();
        assert_eq!(p.domain, "photo");
        assert_eq!(p.subject, "horse");
        assert_eq!(p.adjectives, vec!["white"]);
        assert_eq!(p.action.as_deref(), Some("on"));
        assert_eq!(p.background.as_deref(), Some("grass"));
        assert!(!p.period);
        assert_eq!(p.to_string(), "a photo of a white horse on the grass");
    }

    #[test]
    fn minimal_caption() {
        let p = parse_caption("a photo of a train.").unwrap();
        assert!(p.adjectives.is_empty());
        assert_eq!((p.action, p.background), (None, None));
        assert!(p.period);
    }

    #[test]
    fn rejects_garbage_at_start() {
        match parse_caption("xyzzy") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn error_positions_point_at_the_problem() {
        let pos = |s: &str| match parse_caption(s) {
            Err(Error::Parse { position, .. }) => position,
            other => panic!("{s:?} gave {other:?}"),
        };
        assert_eq!(pos("a photo of the train"), 11);
        assert_eq!(pos("a photo of a  train"), 13);
        assert_eq!(pos("a photo of a train on grass"), 19);
        assert_eq!(pos("a photo of a"), 12);
    }

    #[test]
    fn weather_residue_and_multiword_parts() {
        let s = "an oil pastel of an orange striped circle standing on the gray background on a snowy day, with a hat.";
        let p = parse_caption(s).unwrap();
        assert_eq!(p.domain, "oil pastel");
        assert_eq!(p.domain_article, "an");
        assert_eq!(p.adjectives, vec!["orange", "striped"]);
        assert_eq!(p.subject, "circle");
        assert_eq!(p.action.as_deref(), Some("standing on"));
        assert_eq!(p.background.as_deref(), Some("gray background"));
        assert_eq!(p.weather.as_deref(), Some("on a snowy day"));
        assert_eq!(p.residue.as_deref(), Some("with a hat"));
        assert_eq!(p.to_string(), s);
    }

    #[test]
    fn words_split_punctuation() {
        assert_eq!(
            caption_words("a photo of a Train, now."),
            vec!["a", "photo", "of", "a", "train", ",", "now", "."]
        );
    }

    mod generated {
        use super::*;
        use crate::captions::{apply_variation, caption_diff, AttributeKind, AttributeSpec, COLORS};
        use proptest::prelude::*;
        use proptest::sample::select;

        const DOMAINS: &[&str] = &["photo", "painting", "sketch", "oil pastel", "rendering"];
        const ADJECTIVES: &[&str] = &["white", "red", "small", "wooden", "striped", "old", "and", "shiny"];
        const SUBJECTS: &[&str] = &["train", "horse", "dog", "apple", "umbrella", "bus", "circle"];
        const ACTIONS: &[&str] = &["on", "in", "standing on", "parked near", "flying over", "beside"];
        const BACKGROUNDS: &[&str] = &["grass", "road", "white background", "blue sky", "track"];
        const WEATHER: &[&str] = &["on a snowy day", "on a rainy day", "on a foggy day"];
        const RESIDUE: &[&str] = &["with trees", "taken at night", "close up"];

        fn caption() -> impl Strategy<Value = CaptionParse> {
            (
                select(DOMAINS),
                prop::collection::vec(select(ADJECTIVES), 0..3),
                select(SUBJECTS),
                prop::option::of((select(ACTIONS), select(BACKGROUNDS))),
                prop::option::of(select(WEATHER)),
                prop::option::of(select(RESIDUE)),
                any::<bool>(),
            )
                .prop_map(|(domain, adjectives, subject, scene, weather, residue, period)| {
                    let mut p = CaptionParse {
                        domain_article: String::new(),
                        domain: domain.into(),
                        article: String::new(),
                        adjectives: adjectives.into_iter().map(String::from).collect(),
                        subject: subject.into(),
                        action: scene.map(|s| s.0.into()),
                        background: scene.map(|s| s.1.into()),
                        weather: weather.map(String::from),
                        residue: residue.map(String::from),
                        period,
                    };
                    p.fix_articles();
                    p
                })
        }

        proptest! {
            #[test]
            fn serialise_then_parse_is_identity(p in caption()) {
                let text = p.to_string();
                let back = parse_caption(&text).unwrap();
                prop_assert_eq!(back.to_string(), text);
                prop_assert_eq!(back, p);
            }

            #[test]
            fn colour_variations_reparse_with_a_diff(p in caption(), colour in select(COLORS)) {
                let text = p.to_string();
                let spec = AttributeSpec::new(AttributeKind::Color, colour, 1.0).unwrap();
                let target = apply_variation(&p, &spec).unwrap();
                let reparsed = parse_caption(&target).unwrap();
                prop_assert_eq!(reparsed.to_string(), target.clone());
                let (src, tgt) = (caption_words(&text), caption_words(&target));
                prop_assert!(tgt.iter().any(|w| w == colour));
                // an empty diff means the edit only deleted words
                let mut it = src.iter();
                let subsequence = tgt.iter().all(|w| it.any(|s| s == w));
                prop_assert_eq!(caption_diff(&text, &target).is_empty(), subsequence, "{} -> {}", text, target);
                if !p.adjectives.iter().any(|a| COLORS.contains(&a.as_str())) {
                    prop_assert!(!subsequence);
                }
            }
        }
    }
}
