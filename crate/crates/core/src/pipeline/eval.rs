//! Target-validation evaluation through the source-free path.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use crate::data::{Dataset, IouCounts, Pnm, Sample};
use crate::error::{file_err, Result};
use crate::model::{infer_target_sourcefree, QuadFormer};
use crate::params::ParamStore;

/// Class scored by the IoU reports.
pub const LINE_CLASS: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: usize,
    pub counts: IouCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Intersection and union summed over all images.
    pub total: IouCounts,
}

impl EvalReport {
    /// Dataset-level IoU from pooled counts.
    pub fn iou(&self) -> f64 {
        self.total.iou()
    }

    /// Mean of the per-image IoUs.
    pub fn mean_iou(&self) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        self.rows.iter().map(|r| r.counts.iou()).sum::<f64>() / self.rows.len() as f64
    }

    /// `image,intersection,union,iou` rows and a final `all` row with the
    /// pooled counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,intersection,union,iou\n");
        for r in &self.rows {
            let c = r.counts;
            let _ = writeln!(out, "{:04},{},{},{}", r.id, c.intersection, c.union, c.iou());
        }
        let t = self.total;
        let _ = writeln!(out, "all,{},{},{}", t.intersection, t.union, t.iou());
        out
    }
}

/// Predicts every sample with the source-free path. Returns the report and
/// the predicted class maps in sample order.
pub fn evaluate(
    model: &QuadFormer,
    store: &ParamStore,
    samples: &[Sample],
) -> Result<(EvalReport, Vec<Vec<u8>>)> {
    let results = samples
        .par_iter()
        .map(|s| {
            let mask = infer_target_sourcefree(model, store, &s.image)?.class_map();
            let counts = IouCounts::of(&mask, &s.label, LINE_CLASS)?;
            Ok((EvalRow { id: s.id, counts }, mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = IouCounts::default();
    let mut rows = Vec::with_capacity(results.len());
    let mut masks = Vec::with_capacity(results.len());
    for (row, mask) in results {
        total.add(row.counts);
        rows.push(row);
        masks.push(mask);
    }
    Ok((EvalReport { rows, total }, masks))
}

/// Evaluates a checkpoint on the target validation split, writing
/// `<out>/report.csv` and one `<out>/masks/NNNN.pgm` per image. Only target
/// images and labels are read.
pub fn run_eval(checkpoint: &Path, data: &Dataset, out: &Path) -> Result<EvalReport> {
    let (config, params) = Checkpoint::<f64>::load_model(checkpoint)?;
    let (model, mut store) = QuadFormer::init::<f64>(config.model.clone(), config.seed)?;
    super::checkpoint::restore_exact(&mut store, &params, "model")?;
    let samples = data.target_val()?;
    let (report, masks) = evaluate(&model, &store, &samples)?;
    let mask_dir = out.join("masks");
    std::fs::create_dir_all(&mask_dir).map_err(file_err(&mask_dir))?;
    for (s, m) in samples.iter().zip(&masks) {
        Pnm::gray(s.width(), s.height(), m).write(mask_dir.join(format!("{:04}.pgm", s.id)))?;
    }
    let path = out.join("report.csv");
    std::fs::write(&path, report.to_csv()).map_err(file_err(&path))?;
    Ok(report)
}
