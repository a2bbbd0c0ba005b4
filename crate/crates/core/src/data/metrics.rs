//! Intersection-over-union for class maps.

use crate::error::{shape_err, Result};

/// Intersection and union pixel counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &[u8], gt: &[u8], cls: u8) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(shape_err!("iou: prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p == cls, g == cls);
            c.intersection += u64::from(p && g);
            c.union += u64::from(p || g);
        }
        Ok(c)
    }

    pub fn add(&mut self, other: Self) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// `|∩| / |∪|`, or 1 when the union is empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// IoU of class `cls` between two equally sized class maps.
pub fn iou(pred: &[u8], gt: &[u8], cls: u8) -> Result<f64> {
    Ok(IouCounts::of(pred, gt, cls)?.iou())
}
