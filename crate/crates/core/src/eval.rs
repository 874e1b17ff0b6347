//! Per-image scoring with the empty-mask rules, rejection reporting,
//! k-fold ensembling and flip test-time augmentation.
//!
//! An image is scored 1 when neither ground truth nor prediction has
//! foreground, 0 when exactly one of them does, and by the Dice similarity
//! score otherwise. A prediction is "rejected" when its thresholded mask is
//! empty.

use std::cmp::Ordering;
use std::fs::OpenOptions;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::Overlap;
use crate::mask::Mask;
use crate::segnet::SegNet;
use crate::tensor::Tensor;

/// Anything that maps a batch of images to probability maps.
pub trait Predictor: Sync {
    fn predict(&self, images: &Tensor) -> Result<Tensor>;
}

impl Predictor for SegNet {
    fn predict(&self, images: &Tensor) -> Result<Tensor> {
        SegNet::predict(self, images)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Predictions with at most this many foreground pixels are emptied.
    pub min_area: usize,
    pub tta: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            min_area: 0,
            tta: false,
        }
    }
}

/// Pixelwise `prob ≥ t`, emptied if the foreground count is `≤ min_area`.
pub fn threshold(prob: &Tensor, t: f64, min_area: usize) -> Result<Mask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {t}")));
    }
    let s = prob.shape();
    if s.batch() != 1 || s.channels() != 1 {
        return Err(Error::dim("threshold", "batch/channels (axes 0,1)", format!("expected 1×1×H×W, got {s}")));
    }
    let bits: Vec<bool> = prob.data().iter().map(|&p| p >= t).collect();
    let mut mask = Mask::new(s.height(), s.width(), bits)?;
    if mask.count() <= min_area {
        mask = Mask::empty(s.height(), s.width());
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub dsc: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_empty: bool,
    pub pred_empty: bool,
    pub rejected: bool,
}

pub fn score_image(id: &str, pred: &Mask, gt: &Mask) -> Result<EvalRecord> {
    let overlap = Overlap::between(pred, gt)?;
    let gt_empty = overlap.tp + overlap.fn_ == 0;
    let pred_empty = overlap.tp + overlap.fp == 0;
    let dsc = match (gt_empty, pred_empty) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => overlap.dice().expect("nonempty masks"),
    };
    Ok(EvalRecord {
        id: id.to_owned(),
        dsc,
        tp: overlap.tp,
        fp: overlap.fp,
        fn_: overlap.fn_,
        gt_empty,
        pred_empty,
        rejected: pred_empty,
    })
}

/// Mean of `values` that does not depend on their order and never leaves
/// `[min, max]`.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let sum: f64 = values.iter().sum();
    let mean = sum / values.len() as f64;
    mean.clamp(values[0], values[values.len() - 1])
}

fn average_maps(maps: &[Tensor]) -> Tensor {
    if maps.len() == 1 {
        return maps[0].clone();
    }
    let mut out = Tensor::zeros(maps[0].shape());
    let mut column = vec![0.0; maps.len()];
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        for (c, m) in column.iter_mut().zip(maps) {
            *c = m.data()[i];
        }
        *o = order_free_mean(&mut column);
    }
    out
}

/// Mean over the four flip combinations, each mapped back before averaging.
fn predict_with_flips<P: Predictor>(model: &P, images: &Tensor) -> Result<Tensor> {
    let views = [
        images.clone(),
        images.flip_horizontal(),
        images.flip_vertical(),
        images.flip_horizontal().flip_vertical(),
    ];
    let restored = [
        model.predict(&views[0])?,
        model.predict(&views[1])?.flip_horizontal(),
        model.predict(&views[2])?.flip_vertical(),
        model.predict(&views[3])?.flip_vertical().flip_horizontal(),
    ];
    Ok(average_maps(&restored))
}

/// Averages the probability maps of every member; with `tta` each member
/// first averages its own flip views.
pub fn ensemble_predict<P: Predictor>(models: &[P], images: &Tensor, tta: bool) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::Contract("ensemble needs at least one model".into()));
    }
    let maps = models
        .iter()
        .map(|m| {
            if tta {
                predict_with_flips(m, images)
            } else {
                m.predict(images)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average_maps(&maps))
}

/// One row of a results table. DSC values are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub schedule: String,
    pub encoder: String,
    pub mean_dsc: f64,
    pub rejected_pct: f64,
    pub id_dsc: Option<f64>,
    pub ood_dsc: Option<f64>,
    pub n: usize,
}

pub const REPORT_HEADER: [&str; 7] = ["schedule", "encoder", "mean_dsc", "rejected_pct", "id_dsc", "ood_dsc", "n"];

impl ReportRow {
    pub fn from_records(schedule: &str, encoder: &str, records: &[EvalRecord]) -> Self {
        let pct_mean = |rs: &[&EvalRecord]| -> Option<f64> {
            (!rs.is_empty()).then(|| 100.0 * rs.iter().map(|r| r.dsc).sum::<f64>() / rs.len() as f64)
        };
        let all: Vec<&EvalRecord> = records.iter().collect();
        let id: Vec<&EvalRecord> = records.iter().filter(|r| !r.gt_empty).collect();
        let ood: Vec<&EvalRecord> = records.iter().filter(|r| r.gt_empty).collect();
        let rejected = records.iter().filter(|r| r.rejected).count();
        ReportRow {
            schedule: schedule.to_owned(),
            encoder: encoder.to_owned(),
            mean_dsc: pct_mean(&all).unwrap_or(f64::NAN),
            rejected_pct: if records.is_empty() {
                f64::NAN
            } else {
                100.0 * rejected as f64 / records.len() as f64
            },
            id_dsc: pct_mean(&id),
            ood_dsc: pct_mean(&ood),
            n: records.len(),
        }
    }

    fn fields(&self) -> [String; 7] {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.4}"));
        [
            self.schedule.clone(),
            self.encoder.clone(),
            format!("{:.4}", self.mean_dsc),
            format!("{:.4}", self.rejected_pct),
            opt(self.id_dsc),
            opt(self.ood_dsc),
            self.n.to_string(),
        ]
    }
}

/// Writes a report table, replacing any existing file.
pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(REPORT_HEADER).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(r.fields()).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_report_row(row: &ReportRow, path: &Path) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(REPORT_HEADER).map_err(|e| Error::csv(path, e))?;
    }
    w.write_record(row.fields()).map_err(|e| Error::csv(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_records(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Threshold-and-score every sample with the ensemble, returning records
/// sorted by sample id and the aggregated row.
pub fn evaluate_split<P: Predictor>(
    models: &[P],
    samples: &[Sample],
    cfg: &EvalConfig,
    schedule: &str,
    encoder: &str,
) -> Result<(Vec<EvalRecord>, ReportRow)> {
    if models.is_empty() {
        return Err(Error::Contract("evaluation needs at least one model".into()));
    }
    let mut records = samples
        .par_iter()
        .map(|s| {
            let prob = ensemble_predict(models, &s.image, cfg.tta)?;
            let pred = threshold(&prob, cfg.threshold, cfg.min_area)?;
            score_image(&s.id, &pred, &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.id.cmp(&b.id).then(Ordering::Equal));
    let row = ReportRow::from_records(schedule, encoder, &records);
    Ok((records, row))
}
