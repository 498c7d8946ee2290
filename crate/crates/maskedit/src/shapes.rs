//! Procedural corpus of single coloured shapes on plain backgrounds, with
//! label maps and in-grammar captions.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use maskedit_core::attention::TokenSet;
use maskedit_core::captions::caption_words;
use maskedit_core::diffusion::{Architecture, TrainExample};
use maskedit_core::layout::{extract_binary_mask, LabelMap};
use maskedit_core::Tensor;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};
use crate::io::{read_label_map, read_tensor, write_bytes, write_label_map, write_tensor};

pub const GRID: usize = 16;
pub const NUM_CLASSES: u32 = 4;
pub const CLASS_NAMES: [&str; 4] = ["background", "circle", "square", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class_id(self) -> u16 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.class_id() as usize]
    }

    /// Whether the pixel centre `(x, y)` lies inside a shape of half-size
    /// `size` centred at `(cx, cy)`.
    pub fn contains(self, x: f32, y: f32, cx: f32, cy: f32, size: f32) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= size * size,
            ShapeKind::Square => dx.abs() <= 0.8 * size && dy.abs() <= 0.8 * size,
            ShapeKind::Triangle => {
                let top = cy - size;
                y >= top && y <= cy + size && dx.abs() <= (y - top) / 2.0
            }
        }
    }
}

/// Shape colours. Backgrounds use the neutral subset.
pub const SHAPE_COLORS: &[&str] = &[
    "violet", "pink", "multi-color", "blue", "yellow", "red", "green", "orange", "white", "black", "gray",
];
pub const BACKGROUNDS: &[&str] = &["white", "black", "gray"];
pub const PATTERNS: &[&str] = &["striped", "dotted"];

/// RGB in `[0, 1]` of a colour at pixel `(x, y)`.
pub fn color_rgb(name: &str, x: usize, y: usize) -> Option<[f32; 3]> {
    Some(match name {
        "violet" => [0.55, 0.1, 0.95],
        "pink" => [1.0, 0.5, 0.75],
        "multi-color" => [[0.95, 0.15, 0.1], [0.1, 0.85, 0.2], [0.15, 0.3, 1.0]][(x + y) % 3],
        "blue" => [0.1, 0.25, 1.0],
        "yellow" => [1.0, 0.9, 0.1],
        "red" => [0.9, 0.1, 0.1],
        "green" => [0.1, 0.7, 0.2],
        "orange" => [1.0, 0.55, 0.0],
        "white" => [0.95, 0.95, 0.95],
        "black" => [0.05, 0.05, 0.05],
        "gray" => [0.5, 0.5, 0.5],
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub id: usize,
    pub shape: ShapeKind,
    pub color: String,
    pub pattern: Option<String>,
    pub background: String,
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
}

impl ShapeRecord {
    pub fn caption(&self) -> String {
        let pattern = self.pattern.as_deref().map(|p| format!("{p} ")).unwrap_or_default();
        let adjectives = format!("{pattern}{} {}", self.color, self.shape.name());
        let article = if adjectives.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
        format!("a photo of {article} {adjectives} on the {} background.", self.background)
    }

    /// Rasterises the record into a `3 x GRID x GRID` image in `[-1, 1]` and
    /// its label map.
    pub fn render(&self) -> Result<(Tensor, LabelMap)> {
        let bg = color_rgb(&self.background, 0, 0)
            .ok_or_else(|| maskedit_core::Error::Domain(format!("unknown colour {}", self.background)))?;
        let mut data = vec![0.0f32; 3 * GRID * GRID];
        let mut classes = vec![0u16; GRID * GRID];
        for y in 0..GRID {
            for x in 0..GRID {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let rgb = if self.shape.contains(px, py, self.cx, self.cy, self.size) {
                    classes[y * GRID + x] = self.shape.class_id();
                    let base = color_rgb(&self.color, x, y)
                        .ok_or_else(|| maskedit_core::Error::Domain(format!("unknown colour {}", self.color)))?;
                    apply_pattern(base, bg, self.pattern.as_deref(), x, y)
                } else {
                    bg
                };
                for c in 0..3 {
                    data[c * GRID * GRID + y * GRID + x] = 2.0 * rgb[c] - 1.0;
                }
            }
        }
        Ok((
            Tensor::new(vec![3, GRID, GRID], data)?,
            LabelMap::new(GRID, GRID, NUM_CLASSES, classes)?,
        ))
    }
}

/// Stripes and dots pull the colour toward black or white, whichever keeps
/// it away from the background.
fn apply_pattern(rgb: [f32; 3], background: [f32; 3], pattern: Option<&str>, x: usize, y: usize) -> [f32; 3] {
    let bg_lum = (background[0] + background[1] + background[2]) / 3.0;
    let lum = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
    let contrast = if bg_lum > 0.6 {
        0.0
    } else if bg_lum < 0.4 {
        1.0
    } else if lum < 0.5 {
        0.0
    } else {
        1.0
    };
    let mix = |t: f32| rgb.map(|v| v + t * (contrast - v));
    match pattern {
        Some("striped") if y.is_multiple_of(2) => mix(0.5),
        Some("dotted") if x % 3 == 1 && y % 3 == 1 => mix(0.7),
        _ => rgb,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSample {
    pub record: ShapeRecord,
    pub image: Tensor,
    pub layout: LabelMap,
    pub caption: String,
}

impl ShapesSample {
    /// Training example whose guide pairs the shape mask with the caption's
    /// colour and pattern words.
    pub fn train_example(&self, arch: &Architecture) -> Result<TrainExample> {
        let words = caption_words(&self.caption);
        let attr = TokenSet::new(
            words
                .iter()
                .enumerate()
                .filter(|(_, w)| **w == self.record.color || Some(w.as_str()) == self.record.pattern.as_deref())
                .map(|(i, _)| i)
                .collect(),
        );
        let mask = extract_binary_mask(&self.layout, self.record.shape.class_id())?;
        Ok(TrainExample {
            latent: self.image.clone(),
            tokens: arch.tokenize(&self.caption)?,
            layout: self.layout.clone(),
            guide: Some((mask, attr)),
        })
    }
}

/// Draws `count` records from `seed`.
pub fn generate_records(count: usize, seed: u64) -> Vec<ShapeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|id| {
            let shape = *ShapeKind::ALL.choose(&mut rng).unwrap();
            let background = BACKGROUNDS.choose(&mut rng).unwrap().to_string();
            let color = loop {
                let c = *SHAPE_COLORS.choose(&mut rng).unwrap();
                if c != background {
                    break c.to_string();
                }
            };
            let pattern = if rng.random::<f32>() < 0.3 {
                Some(PATTERNS.choose(&mut rng).unwrap().to_string())
            } else {
                None
            };
            let size = rng.random_range(3.0f32..5.5);
            let lo = 1.0 + 0.8 * size;
            let cx = rng.random_range(lo..GRID as f32 - lo);
            let cy = rng.random_range(lo..GRID as f32 - lo);
            ShapeRecord {
                id,
                shape,
                color,
                pattern,
                background,
                cx,
                cy,
                size,
            }
        })
        .collect()
}

pub fn generate(count: usize, seed: u64) -> Result<Vec<ShapesSample>> {
    generate_records(count, seed)
        .into_iter()
        .map(|record| {
            let (image, layout) = record.render()?;
            let caption = record.caption();
            Ok(ShapesSample {
                record,
                image,
                layout,
                caption,
            })
        })
        .collect()
}

/// One line of `corpus.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    #[serde(flatten)]
    pub record: ShapeRecord,
    pub caption: String,
    pub image_file: String,
    pub label_file: String,
}

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("images").join(format!("{id:05}.mten"))
}

pub fn label_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("labels").join(format!("{id:05}.pgm"))
}

fn relative(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned()
}

pub fn write_corpus(dir: &Path, samples: &[ShapesSample]) -> Result<()> {
    let mut lines = String::new();
    for s in samples {
        let img = image_path(dir, s.record.id);
        write_tensor(&img, &s.image)?;
        let lbl = write_label_map(&label_path(dir, s.record.id), &s.layout)?;
        let entry = CorpusEntry {
            record: s.record.clone(),
            caption: s.caption.clone(),
            image_file: relative(dir, &img),
            label_file: relative(dir, &lbl),
        };
        lines.push_str(&serde_json::to_string(&entry).expect("entry serialises"));
        lines.push('\n');
    }
    write_bytes(&dir.join("corpus.jsonl"), lines.as_bytes())
}

pub fn read_entries(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let path = dir.join("corpus.jsonl");
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?);
    }
    Ok(out)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<ShapesSample>> {
    read_entries(dir)?
        .into_iter()
        .map(|e| {
            let image = read_tensor(&dir.join(&e.image_file))?;
            if image.dims() != [3, GRID, GRID] {
                return Err(format_err(dir.join(&e.image_file), format!("unexpected dims {:?}", image.dims())));
            }
            Ok(ShapesSample {
                layout: read_label_map(&dir.join(&e.label_file))?,
                image,
                caption: e.caption,
                record: e.record,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskedit_core::captions::parse_caption;
    use maskedit_core::diffusion::Architecture;

    #[test]
    fn captions_parse_and_tokenize() {
        let arch = Architecture::default();
        for s in generate(300, 9).unwrap() {
            let p = parse_caption(&s.caption).unwrap();
            assert_eq!(p.subject, s.record.shape.name());
            assert_eq!(p.to_string(), s.caption);
            arch.tokenize(&s.caption).unwrap();
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(generate(20, 4).unwrap(), generate(20, 4).unwrap());
        assert_ne!(generate_records(5, 4), generate_records(5, 5));
    }

    #[test]
    fn shapes_are_visible_and_inside_the_grid() {
        for s in generate(500, 1).unwrap() {
            let h = s.layout.histogram();
            assert!(h[s.record.shape.class_id() as usize] >= 12, "{:?}", s.record);
            let bg = color_rgb(&s.record.background, 0, 0).unwrap();
            let d = s.image.data();
            for (i, &c) in s.layout.classes().iter().enumerate() {
                if c != 0 {
                    let dist: f32 = (0..3)
                        .map(|ch| ((d[ch * GRID * GRID + i] + 1.0) / 2.0 - bg[ch]).powi(2))
                        .sum::<f32>()
                        .sqrt();
                    assert!(dist > 0.3, "{:?} pixel {i} too close to background", s.record);
                }
            }
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(3, 2).unwrap();
        write_corpus(dir.path(), &samples).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), samples);
    }
}
