//! Semantic layouts, object masks and the attention rectification map.
//!
//! A [`LabelMap`] holds the per-pixel class layout of an image. A
//! [`BinaryMask`] selects one class out of it, and a [`RectificationMap`]
//! turns that mask into the additive attention correction that is `0` on the
//! object and [`NEG_LARGE`] everywhere else. Attention layers run at reduced
//! spatial resolution, so masks are resampled into a [`MaskPyramid`].

use alloc::vec::Vec;

use crate::error::{domain_err, shape_err, Result};

/// Finite stand-in for `-inf` in attention logits.
///
/// It is added before the `sqrt(d)` scaling. After softmax the suppressed
/// entries underflow to exactly zero for any realistic logit range.
pub const NEG_LARGE: f32 = -1.0e9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: u32,
    classes: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: u32, classes: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("label map must be non-empty, got {height}x{width}"));
        }
        if classes.len() != height * width {
            return Err(shape_err!(
                "{height}x{width} label map needs {} ids, got {}",
                height * width,
                classes.len()
            ));
        }
        if num_classes == 0 || num_classes > u16::MAX as u32 + 1 {
            return Err(domain_err!("num_classes {num_classes} out of range"));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as u32 >= num_classes) {
            return Err(domain_err!("class id {bad} >= num_classes {num_classes}"));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: u32, class_id: u16) -> Result<Self> {
        Self::new(height, width, num_classes, alloc::vec![class_id; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.classes[y * self.width + x]
    }

    pub fn contains_class(&self, class_id: u16) -> bool {
        self.classes.contains(&class_id)
    }

    /// Pixel count per class id.
    pub fn histogram(&self) -> Vec<u64> {
        let mut hist = alloc::vec![0u64; self.num_classes as usize];
        for &c in &self.classes {
            hist[c as usize] += 1;
        }
        hist
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("mask must be non-empty, got {height}x{width}"));
        }
        if bits.len() != height * width {
            return Err(shape_err!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Builds a mask from 0/1 bytes; any other value is rejected.
    pub fn from_u8(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(domain_err!("mask value {other} is not 0 or 1")),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, bits)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: alloc::vec![true; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: alloc::vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Row-major flattening of the mask.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn invert(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }
}

/// Additive map that is `0` on the object and [`NEG_LARGE`] elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct RectificationMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl RectificationMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major flattening, the form consumed by attention layers.
    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

pub fn extract_binary_mask(label: &LabelMap, class_id: u16) -> Result<BinaryMask> {
    if class_id as u32 >= label.num_classes {
        return Err(domain_err!(
            "class id {class_id} out of range for {} classes",
            label.num_classes
        ));
    }
    Ok(BinaryMask {
        height: label.height,
        width: label.width,
        bits: label.classes.iter().map(|&c| c == class_id).collect(),
    })
}

pub fn rectification_map(mask: &BinaryMask) -> RectificationMap {
    RectificationMap {
        height: mask.height,
        width: mask.width,
        values: mask
            .bits
            .iter()
            .map(|&b| if b { 0.0 } else { NEG_LARGE })
            .collect(),
    }
}

/// Majority-vote downsampling; a cell is set when at least half of the
/// source pixels it covers are set. Edge cells cover fewer pixels when the
/// dimensions are not divisible by `factor`.
pub fn downsample_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if factor == 0 {
        return Err(domain_err!("downsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(mask.clone());
    }
    let out_h = mask.height.div_ceil(factor);
    let out_w = mask.width.div_ceil(factor);
    let mut bits = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y_end = ((oy + 1) * factor).min(mask.height);
        for ox in 0..out_w {
            let x_end = ((ox + 1) * factor).min(mask.width);
            let mut ones = 0usize;
            let mut total = 0usize;
            for y in oy * factor..y_end {
                for x in ox * factor..x_end {
                    ones += mask.get(y, x) as usize;
                    total += 1;
                }
            }
            bits.push(2 * ones >= total);
        }
    }
    BinaryMask::new(out_h, out_w, bits)
}

/// Masks at successively halved resolutions; level 0 is the source mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPyramid {
    levels: Vec<BinaryMask>,
}

impl MaskPyramid {
    pub fn levels(&self) -> &[BinaryMask] {
        &self.levels
    }

    pub fn level(&self, index: usize) -> Option<&BinaryMask> {
        self.levels.get(index)
    }

    /// The level whose grid matches `height` x `width`, if any.
    pub fn at_size(&self, height: usize, width: usize) -> Option<&BinaryMask> {
        self.levels
            .iter()
            .find(|m| m.height == height && m.width == width)
    }
}

pub fn build_pyramid(mask: &BinaryMask, levels: usize) -> Result<MaskPyramid> {
    if levels == 0 {
        return Err(domain_err!("a pyramid needs at least one level"));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(mask.clone());
    for _ in 1..levels {
        let next = downsample_mask(out.last().expect("non-empty"), 2)?;
        out.push(next);
    }
    Ok(MaskPyramid { levels: out })
}
