//! Binary cross-entropy, soft Dice, their weighted combination, and the
//! thresholded Dice similarity score.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{DiffTensor, Tensor};

/// Whether soft Dice is computed per image and averaged, or once over the
/// whole batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceGranularity {
    #[default]
    PerImage,
    WholeBatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Predictions are clamped into `[clamp_eps, 1 − clamp_eps]` before taking logs.
    pub clamp_eps: f64,
    /// Added to both numerator and denominator of the soft Dice ratio.
    pub dice_smooth: f64,
    pub dice_granularity: DiceGranularity,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            clamp_eps: 1e-7,
            dice_smooth: 0.0,
            dice_granularity: DiceGranularity::PerImage,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 1e-3) {
            return Err(Error::Config(format!(
                "clamp_eps must lie in (0, 1e-3], got {}",
                self.clamp_eps
            )));
        }
        if !(self.dice_smooth >= 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::Config(format!(
                "dice_smooth must be a nonnegative number, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

/// Pair of nonnegative weights applied to the BCE and soft Dice terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl LossWeights {
    pub const fn new(bce: f64, dice: f64) -> Self {
        LossWeights { bce, dice }
    }
}

fn check_target(pred: &DiffTensor<'_>, target: &Tensor, op: &'static str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            op,
            "all axes",
            format!("prediction {} vs target {}", pred.shape(), target.shape()),
        ));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain {
            op,
            detail: format!("target must be binary, found {v}"),
        });
    }
    Ok(())
}

/// Mean binary cross-entropy over every pixel of the batch.
pub fn bce_loss<'g>(pred: &DiffTensor<'g>, target: &Tensor, cfg: &LossConfig) -> Result<DiffTensor<'g>> {
    check_target(pred, target, "bce_loss")?;
    cfg.validate()?;
    let g = pred.graph();
    let eps = cfg.clamp_eps;
    let p = pred.clamp(eps, 1.0 - eps);
    let y = g.constant(target.clone());
    let not_y = g.constant(Tensor::from_vec(
        target.shape(),
        target.data().iter().map(|v| 1.0 - v).collect(),
    )?);
    let fg = y.mul(&p.log()?)?;
    let bg = not_y.mul(&p.affine(-1.0, 1.0).log()?)?;
    Ok(fg.add(&bg)?.mean().affine(-1.0, 0.0))
}

/// `1 − (2⟨y,ŷ⟩ + ε) / (⟨y,y⟩ + ⟨ŷ,ŷ⟩ + ε)`.
///
/// With an empty target and `ε = 0` the ratio is `0 / ⟨ŷ,ŷ⟩`, so the loss
/// is 1 and its gradient is exactly zero whatever the prediction. If the
/// prediction is also exactly zero the loss is defined as 0.
pub fn soft_dice_loss<'g>(
    pred: &DiffTensor<'g>,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<DiffTensor<'g>> {
    check_target(pred, target, "soft_dice_loss")?;
    cfg.validate()?;
    let g = pred.graph();
    let eps = cfg.dice_smooth;
    let y = g.constant(target.clone());
    let yp = y.mul(pred)?;
    let pp = pred.mul(pred)?;
    let (inter, pred_sq, target_sq) = match cfg.dice_granularity {
        DiceGranularity::PerImage => {
            let yy = g.constant(Tensor::from_vec(
                crate::tensor::Shape::new(target.shape().batch(), 1, 1, 1),
                target
                    .data()
                    .chunks(target.shape().image_len())
                    .map(|c| c.iter().sum())
                    .collect(),
            )?);
            (yp.sum_per_image(), pp.sum_per_image(), yy)
        }
        DiceGranularity::WholeBatch => {
            let yy = g.constant(Tensor::scalar(target.data().iter().sum()));
            (yp.sum(), pp.sum(), yy)
        }
    };
    let num = inter.affine(2.0, eps);
    let den = pred_sq.add(&target_sq)?.affine(1.0, eps);
    Ok(num.ratio(&den)?.mean().affine(-1.0, 1.0))
}

/// `w_bce·BCE + w_dice·Dice`; a term whose weight is exactly zero is not built.
pub fn combined_loss<'g>(
    pred: &DiffTensor<'g>,
    target: &Tensor,
    weights: LossWeights,
    cfg: &LossConfig,
) -> Result<DiffTensor<'g>> {
    for (name, w) in [("bce", weights.bce), ("dice", weights.dice)] {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Contract(format!(
                "loss weight {name} must be nonnegative and finite, got {w}"
            )));
        }
    }
    let bce = (weights.bce != 0.0)
        .then(|| bce_loss(pred, target, cfg))
        .transpose()?;
    let dice = (weights.dice != 0.0)
        .then(|| soft_dice_loss(pred, target, cfg))
        .transpose()?;
    match (bce, dice) {
        (Some(b), Some(d)) => b.affine(weights.bce, 0.0).add(&d.affine(weights.dice, 0.0)),
        (Some(b), None) => Ok(scaled(b, weights.bce)),
        (None, Some(d)) => Ok(scaled(d, weights.dice)),
        (None, None) => {
            check_target(pred, target, "combined_loss")?;
            Ok(pred.mean().affine(0.0, 0.0))
        }
    }
}

fn scaled(t: DiffTensor<'_>, w: f64) -> DiffTensor<'_> {
    if w == 1.0 {
        t
    } else {
        t.affine(w, 0.0)
    }
}

/// True/false positive and false negative pixel counts of a prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Overlap {
    pub fn between(pred: &Mask, gt: &Mask) -> Result<Self> {
        if !pred.same_size(gt) {
            return Err(Error::dim(
                "overlap",
                "height/width",
                format!(
                    "prediction {}×{} vs ground truth {}×{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        let mut o = Overlap::default();
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            match (p, g) {
                (true, true) => o.tp += 1,
                (true, false) => o.fp += 1,
                (false, true) => o.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(o)
    }

    /// `2TP / (2TP + FP + FN)`; `None` when both masks are empty.
    pub fn dice(&self) -> Option<f64> {
        let den = 2 * self.tp + self.fp + self.fn_;
        (den > 0).then(|| (2 * self.tp) as f64 / den as f64)
    }
}

/// Dice similarity score of two binary masks, plus the counts behind it.
///
/// Both masks empty is left to the caller, which decides how such images
/// are scored.
pub fn dsc_metric(pred: &Mask, gt: &Mask) -> Result<(f64, Overlap)> {
    let overlap = Overlap::between(pred, gt)?;
    let dsc = overlap.dice().ok_or_else(|| {
        Error::Contract("dsc_metric is undefined when both masks are empty".into())
    })?;
    Ok((dsc, overlap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Shape};

    fn row(values: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
    }

    fn mask(bits: &[u8]) -> Mask {
        Mask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn bce_hand_values() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let perfect = g.parameter(row(&[1.0 - cfg.clamp_eps]));
        let v = bce_loss(&perfect, &row(&[1.0]), &cfg).unwrap().item().unwrap();
        assert!((0.0..=2.0 * cfg.clamp_eps).contains(&v), "{v}");

        let half = g.parameter(row(&[0.5, 0.5]));
        let v = bce_loss(&half, &row(&[1.0, 0.0]), &cfg).unwrap().item().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        let wrong = g.parameter(row(&[0.9]));
        let v = bce_loss(&wrong, &row(&[0.0]), &cfg).unwrap().item().unwrap();
        assert!((v - std::f64::consts::LN_10).abs() < 1e-9, "{v}");
    }

    #[test]
    fn bce_clamps_exact_zero_and_one() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let p = g.parameter(row(&[0.0, 1.0]));
        let v = bce_loss(&p, &row(&[1.0, 0.0]), &cfg).unwrap().item().unwrap();
        assert!(v.is_finite());
        assert!((v - -(cfg.clamp_eps.ln())).abs() < 1e-6);
    }

    #[test]
    fn bce_rejects_bad_targets() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let p = g.parameter(row(&[0.5, 0.5]));
        assert!(matches!(bce_loss(&p, &row(&[0.5, 1.0]), &cfg), Err(Error::Domain { .. })));
        assert!(matches!(bce_loss(&p, &row(&[1.0]), &cfg), Err(Error::Dimension { .. })));
    }

    #[test]
    fn loss_config_validation() {
        let bad = LossConfig {
            clamp_eps: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            clamp_eps: 1e-2,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn dice_hand_values() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let same = g.parameter(row(&[1.0, 0.0, 1.0]));
        let v = soft_dice_loss(&same, &row(&[1.0, 0.0, 1.0]), &cfg).unwrap().item().unwrap();
        assert_eq!(v, 0.0);

        let half = g.parameter(row(&[0.5; 4]));
        let v = soft_dice_loss(&half, &row(&[1.0; 4]), &cfg).unwrap().item().unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn dice_empty_target_is_maximal_with_zero_gradient() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let p = g.parameter(row(&[0.3, 0.7]));
        let loss = soft_dice_loss(&p, &row(&[0.0, 0.0]), &cfg).unwrap();
        assert_eq!(loss.item().unwrap(), 1.0);
        g.backward(loss).unwrap();
        assert!(p.grad().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn dice_zero_over_zero_is_zero_loss() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let p = g.parameter(row(&[0.0, 0.0]));
        let loss = soft_dice_loss(&p, &row(&[0.0, 0.0]), &cfg).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
        g.backward(loss).unwrap();
        assert!(p.grad().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn dice_smoothing_moves_empty_target_off_one() {
        let cfg = LossConfig {
            dice_smooth: 1.0,
            ..LossConfig::default()
        };
        let g = Graph::new();
        let p = g.parameter(row(&[0.5, 0.5]));
        let v = soft_dice_loss(&p, &row(&[0.0, 0.0]), &cfg).unwrap().item().unwrap();
        // 1 − 1 / (0.5 + 1)
        assert!((v - (1.0 - 1.0 / 1.5)).abs() < 1e-15);
    }

    #[test]
    fn dice_granularity_differs_on_unbalanced_batch() {
        let target = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let pred = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let per_image = LossConfig::default();
        let batch = LossConfig {
            dice_granularity: DiceGranularity::WholeBatch,
            ..per_image
        };
        let g = Graph::new();
        let p = g.parameter(pred);
        let a = soft_dice_loss(&p, &target, &per_image).unwrap().item().unwrap();
        let b = soft_dice_loss(&p, &target, &batch).unwrap().item().unwrap();
        // per image: 1 − mean(2/2.5, 1/1.5); whole batch: 1 − 3/4
        assert!((a - (1.0 - (0.8 + 2.0 / 3.0) / 2.0)).abs() < 1e-15);
        assert!((b - 0.25).abs() < 1e-15);
    }

    #[test]
    fn combined_matches_components() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let p = g.parameter(row(&[0.5; 4]));
        let y = row(&[1.0; 4]);
        let bce = bce_loss(&p, &y, &cfg).unwrap().item().unwrap();
        let dice = soft_dice_loss(&p, &y, &cfg).unwrap().item().unwrap();
        let only_bce = combined_loss(&p, &y, LossWeights::new(1.0, 0.0), &cfg).unwrap();
        let only_dice = combined_loss(&p, &y, LossWeights::new(0.0, 1.0), &cfg).unwrap();
        let both = combined_loss(&p, &y, LossWeights::new(1.0, 1.0), &cfg).unwrap();
        assert_eq!(only_bce.item().unwrap(), bce);
        assert_eq!(only_dice.item().unwrap(), dice);
        assert!((both.item().unwrap() - (std::f64::consts::LN_2 + 0.2)).abs() < 1e-12);
        assert!(combined_loss(&p, &y, LossWeights::new(-1.0, 1.0), &cfg).is_err());
    }

    #[test]
    fn combined_skips_zero_weighted_term() {
        // An empty target with zero prediction would make BCE fine but the
        // Dice term is never built when its weight is zero.
        let cfg = LossConfig::default();
        let g = Graph::new();
        let p = g.parameter(row(&[0.2, 0.4]));
        let before = g.len();
        combined_loss(&p, &row(&[1.0, 0.0]), LossWeights::new(1.0, 0.0), &cfg).unwrap();
        let bce_nodes = g.len() - before;
        let before = g.len();
        bce_loss(&p, &row(&[1.0, 0.0]), &cfg).unwrap();
        assert_eq!(g.len() - before, bce_nodes);
    }

    #[test]
    fn dsc_hand_values() {
        let (d, _) = dsc_metric(&mask(&[1, 1, 0]), &mask(&[1, 1, 0])).unwrap();
        assert_eq!(d, 1.0);
        // TP=2, FP=1, FN=1
        let (d, o) = dsc_metric(&mask(&[1, 1, 1, 0, 0]), &mask(&[1, 1, 0, 1, 0])).unwrap();
        assert_eq!(o, Overlap { tp: 2, fp: 1, fn_: 1 });
        assert!((d - 4.0 / 6.0).abs() < 1e-15);
        let (d, _) = dsc_metric(&mask(&[1, 0]), &mask(&[0, 1])).unwrap();
        assert_eq!(d, 0.0);
        assert!(matches!(dsc_metric(&mask(&[0, 0]), &mask(&[0, 0])), Err(Error::Contract(_))));
        assert!(dsc_metric(&mask(&[0, 1]), &mask(&[0, 1, 0])).is_err());
    }
}
