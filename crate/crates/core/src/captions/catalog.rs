use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Color,
    Material,
    Pattern,
    Style,
    Weather,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 5] = [
        AttributeKind::Color,
        AttributeKind::Material,
        AttributeKind::Pattern,
        AttributeKind::Style,
        AttributeKind::Weather,
    ];

    /// Local kinds edit one object and run with mask guidance.
    pub fn is_local(self) -> bool {
        matches!(self, Self::Color | Self::Material | Self::Pattern)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Color => "color",
            Self::Material => "material",
            Self::Pattern => "pattern",
            Self::Style => "style",
            Self::Weather => "weather",
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| domain_err!("unknown attribute kind {s:?}"))
    }
}

pub const COLORS: &[&str] = &[
    "violet", "pink", "multi-color", "blue", "yellow", "red", "green", "orange", "white", "black",
    "gray",
];
pub const MATERIALS: &[&str] = &["wooden", "stone", "metallic", "paper"];
pub const PATTERNS: &[&str] = &["dotted", "striped", "lettered"];
pub const STYLES: &[&str] = &["oil pastel", "painting", "sketch"];
pub const WEATHERS: &[&str] = &["snow", "rain", "fog"];

/// Values allowed for each attribute kind.
pub fn catalog(kind: AttributeKind) -> &'static [&'static str] {
    match kind {
        AttributeKind::Color => COLORS,
        AttributeKind::Material => MATERIALS,
        AttributeKind::Pattern => PATTERNS,
        AttributeKind::Style => STYLES,
        AttributeKind::Weather => WEATHERS,
    }
}

/// Caption tail describing a weather value, e.g. `on a snowy day`.
pub fn weather_tail(value: &str) -> Option<&'static str> {
    match value {
        "snow" => Some("on a snowy day"),
        "rain" => Some("on a rainy day"),
        "fog" => Some("on a foggy day"),
        _ => None,
    }
}

pub(crate) const WEATHER_ADJECTIVES: &[&str] = &["snowy", "rainy", "foggy"];

/// One attribute variation to apply to a caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub kind: AttributeKind,
    pub value: String,
    /// Requested strength; benchmark jobs copy it into the edit's `degree_c`.
    pub degree: f32,
}

impl AttributeSpec {
    /// Validated against the catalog. Colors may combine catalog colors with
    /// `and`, as in `blue and yellow`.
    pub fn new(kind: AttributeKind, value: &str, degree: f32) -> Result<Self> {
        let spec = Self {
            kind,
            value: value.to_string(),
            degree,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = catalog(self.kind);
        let ok = match self.kind {
            AttributeKind::Color => {
                let words: Vec<&str> = self.value.split(' ').collect();
                !words.is_empty()
                    && words.iter().enumerate().all(|(i, w)| {
                        if i % 2 == 1 {
                            *w == "and"
                        } else {
                            allowed.contains(w)
                        }
                    })
                    && words.len() % 2 == 1
            }
            _ => allowed.contains(&self.value.as_str()),
        };
        if !ok {
            return Err(domain_err!("{:?} is not a catalog {} value", self.value, self.kind));
        }
        if !(self.degree >= 0.0 && self.degree.is_finite()) {
            return Err(domain_err!("degree must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The twelve variations of the robustness benchmark.
pub fn benchmark_variations() -> Vec<AttributeSpec> {
    let rows: [(AttributeKind, &str); 12] = [
        (AttributeKind::Color, "violet"),
        (AttributeKind::Color, "pink"),
        (AttributeKind::Color, "multi-color"),
        (AttributeKind::Material, "wooden"),
        (AttributeKind::Material, "stone"),
        (AttributeKind::Material, "metallic"),
        (AttributeKind::Material, "paper"),
        (AttributeKind::Pattern, "dotted"),
        (AttributeKind::Pattern, "striped"),
        (AttributeKind::Weather, "snow"),
        (AttributeKind::Style, "painting"),
        (AttributeKind::Style, "sketch"),
    ];
    rows.iter()
        .map(|&(k, v)| AttributeSpec::new(k, v, 1.0).expect("benchmark values are in the catalog"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_values_are_lowercase_and_unique() {
        for kind in AttributeKind::ALL {
            let values = catalog(kind);
            for (i, v) in values.iter().enumerate() {
                assert_eq!(*v, v.to_lowercase());
                assert!(!values[i + 1..].contains(v), "{v} repeated in {kind}");
            }
        }
    }

    #[test]
    fn benchmark_list_is_covered() {
        let vars = benchmark_variations();
        assert_eq!(vars.len(), 12);
        for v in &vars {
            assert!(catalog(v.kind).contains(&v.value.as_str()));
        }
        let colors: Vec<_> = vars.iter().filter(|v| v.kind == AttributeKind::Color).collect();
        assert_eq!(colors.len(), 3);
    }

    #[test]
    fn spec_validation() {
        assert!(AttributeSpec::new(AttributeKind::Color, "blue and yellow", 1.0).is_ok());
        assert!(AttributeSpec::new(AttributeKind::Color, "blue and", 1.0).is_err());
        assert!(AttributeSpec::new(AttributeKind::Color, "teal", 1.0).is_err());
        assert!(AttributeSpec::new(AttributeKind::Material, "wood", 1.0).is_err());
        assert!(AttributeSpec::new(AttributeKind::Material, "stone", -1.0).is_err());
        assert!(AttributeSpec::new(AttributeKind::Style, "oil pastel", 0.0).is_ok());
        assert_eq!("weather".parse::<AttributeKind>().unwrap(), AttributeKind::Weather);
        assert!("texture".parse::<AttributeKind>().is_err());
        assert!(AttributeKind::Pattern.is_local());
        assert!(!AttributeKind::Style.is_local());
    }
}
