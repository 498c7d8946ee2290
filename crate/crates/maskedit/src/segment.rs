//! A fixed, training-free segmenter for the shapes corpus. It stands in for
//! the pretrained segmentation models whose robustness the benchmark probes.

use maskedit_core::layout::LabelMap;
use maskedit_core::Tensor;

use maskedit_core::Result;
use crate::shapes::{ShapeKind, NUM_CLASSES};

/// RGB distance beyond which a pixel is foreground.
const FOREGROUND_DISTANCE: f32 = 0.3;

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

fn fit_iou(fg: &[bool], w: usize, kind: ShapeKind, cx: f32, cy: f32, size: f32) -> f32 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, &f) in fg.iter().enumerate() {
        let (x, y) = ((i % w) as f32 + 0.5, (i / w) as f32 + 0.5);
        let inside = kind.contains(x, y, cx, cy, size);
        inter += usize::from(inside && f);
        union += usize::from(inside || f);
    }
    inter as f32 / union.max(1) as f32
}

/// Shape whose outline, fitted to the box `[x0, x1, y0, y1]`, has the best
/// IoU with the foreground.
fn fit_shape(fg: &[bool], w: usize, h: usize, [x0, x1, y0, y1]: [usize; 4]) -> ShapeKind {
    let (bw, bh) = ((x1 - x0 + 1) as f32, (y1 - y0 + 1) as f32);
    let cx = x0 as f32 + bw / 2.0;
    let cy = y0 as f32 + bh / 2.0;
    let half = bw.max(bh) / 2.0;
    // a rasterised square is exactly its bounding box, so its IoU is the fill
    let count = fg.iter().filter(|&&f| f).count() as f32;
    let mut best = (ShapeKind::Square, count / (bw * bh));
    // rasterisation shifts outlines by up to a pixel, so search nearby fits
    let steps = [-0.5f32, -0.25, 0.0, 0.25, 0.5];
    for (kind, size) in [(ShapeKind::Circle, half), (ShapeKind::Triangle, bh / 2.0)] {
        for dx in steps {
            for dy in steps {
                for ds in steps {
                    let iou = fit_iou(fg, w, kind, cx + dx, cy + dy, size + ds);
                    if iou > best.1 {
                        best = (kind, iou);
                    }
                }
            }
        }
    }
    debug_assert!(fg.len() == w * h);
    best.0
}

/// Labels every pixel of a `3 x H x W` image in `[-1, 1]` as background or as
/// one of the shape classes.
///
/// The background colour is the per-channel median of the border. Foreground
/// pixels are those far from it. The class is the shape whose outline, fitted
/// to the bounding box of the foreground, overlaps it best; pixels with fewer
/// than two foreground 4-neighbours are ignored for the fit.
pub fn segment(image: &Tensor) -> Result<LabelMap> {
    let [c, h, w] = match image.dims() {
        [c, h, w] => [*c, *h, *w],
        d => return Err(maskedit_core::Error::Shape(format!("expected 3 x H x W, got {d:?}"))),
    };
    if c != 3 {
        return Err(maskedit_core::Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let rgb = |ch: usize, i: usize| (d[ch * h * w + i] + 1.0) / 2.0;
    let border: Vec<usize> = (0..h * w)
        .filter(|i| {
            let (y, x) = (i / w, i % w);
            y == 0 || x == 0 || y == h - 1 || x == w - 1
        })
        .collect();
    let bg: Vec<f32> = (0..3).map(|ch| median(border.iter().map(|&i| rgb(ch, i)).collect())).collect();
    let raw: Vec<bool> = (0..h * w)
        .map(|i| {
            let dist: f32 = (0..3).map(|ch| (rgb(ch, i) - bg[ch]).powi(2)).sum::<f32>().sqrt();
            dist > FOREGROUND_DISTANCE
        })
        .collect();
    let fg: Vec<bool> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let neighbours = [
                y.checked_sub(1).map(|yy| yy * w + x),
                (y + 1 < h).then(|| (y + 1) * w + x),
                x.checked_sub(1).map(|xx| y * w + xx),
                (x + 1 < w).then(|| y * w + x + 1),
            ];
            raw[i] && neighbours.iter().flatten().filter(|&&j| raw[j]).count() >= 2
        })
        .collect();
    let count = fg.iter().filter(|&&f| f).count();
    let mut classes = vec![0u16; h * w];
    if count == 0 {
        return LabelMap::new(h, w, NUM_CLASSES, classes);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
    for (i, _) in fg.iter().enumerate().filter(|(_, &f)| f) {
        let (y, x) = (i / w, i % w);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let kind = fit_shape(&fg, w, h, [x0, x1, y0, y1]);
    for (i, &f) in raw.iter().enumerate() {
        if f {
            classes[i] = kind.class_id();
        }
    }
    LabelMap::new(h, w, NUM_CLASSES, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::generate;
    use maskedit_core::metrics::ConfusionMatrix;

    #[test]
    fn clean_corpus_is_segmented_accurately() {
        let mut cm = ConfusionMatrix::new(NUM_CLASSES as usize);
        let mut wrong_class = 0;
        let samples = generate(400, 21).unwrap();
        for s in &samples {
            let pred = segment(&s.image).unwrap();
            cm.accumulate(&s.layout, &pred, None).unwrap();
            let predicted: Vec<u16> = pred.classes().iter().copied().filter(|&c| c != 0).collect();
            if predicted.first() != Some(&s.record.shape.class_id()) {
                wrong_class += 1;
            }
        }
        let miou = cm.miou().unwrap();
        assert!(miou > 0.98, "mIoU {miou}, {wrong_class} misclassified");
    }

    #[test]
    fn plain_image_is_background() {
        let t = Tensor::new(vec![3, 4, 4], vec![0.2; 48]).unwrap();
        assert!(segment(&t).unwrap().classes().iter().all(|&c| c == 0));
    }
}
