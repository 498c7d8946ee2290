//! Caption decomposition and attribute variation.

mod catalog;
mod diff;
mod parse;
mod variation;

pub use catalog::{
    benchmark_variations, catalog, weather_tail, AttributeKind, AttributeSpec, COLORS, MATERIALS,
    PATTERNS, STYLES, WEATHERS,
};
pub use diff::caption_diff;
pub use parse::{caption_words, parse_caption, CaptionParse, ACTION_WORDS};
pub use variation::apply_variation;
