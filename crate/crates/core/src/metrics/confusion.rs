use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::layout::LabelMap;

/// Pixel counts indexed by `(ground truth, prediction)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: alloc::vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel of `gt`/`pred`, skipping ground-truth pixels equal to
    /// `ignore`.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap, ignore: Option<u16>) -> Result<()> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(shape_err!(
                "ground truth is {}x{}, prediction is {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            ));
        }
        if gt.num_classes() as usize != self.num_classes || pred.num_classes() as usize != self.num_classes {
            return Err(shape_err!(
                "label maps have {} and {} classes, matrix has {}",
                gt.num_classes(),
                pred.num_classes(),
                self.num_classes
            ));
        }
        for (&g, &p) in gt.classes().iter().zip(pred.classes()) {
            if Some(g) == ignore {
                continue;
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape_err!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes,
                other.num_classes
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU of every class, `None` where the class never occurs in either map.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Undefined("mIoU of an empty confusion matrix".into()));
        }
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}
