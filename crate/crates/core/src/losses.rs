//! Distance-based regression + margin-based cosine classification
//! multi-task loss, anchor matching, and the dual-shot combination.

use crate::boxes::{decode_delta, decode_jacobian, encode_delta, AnchorGeom, BBox, GEOM_EPS};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DrmcConfig {
    /// Additive cosine margin for the target class.
    pub margin: f64,
    /// Logit scale applied to cosines.
    pub scale: f64,
    pub lambda_reg: f64,
    pub lambda_cls: f64,
    pub lambda_aux: f64,
    /// Hard-negative mining ratio (negatives : positives).
    pub neg_pos_ratio: usize,
}

impl Default for DrmcConfig {
    fn default() -> Self {
        Self {
            margin: 0.35,
            scale: 30.0,
            lambda_reg: 1.0,
            lambda_cls: 1.0,
            lambda_aux: 1.0,
            neg_pos_ratio: 3,
        }
    }
}

impl DrmcConfig {
    /// Gentler margin/scale for small embeddings trained from scratch.
    /// The published values assume a pretrained backbone and a wide
    /// embedding; with an 8-dim head they drive every anchor to the
    /// background side of the margin and the detector never fires.
    pub fn desk() -> Self {
        Self {
            margin: 0.2,
            scale: 15.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin < 1.0) {
            return Err(Error::config("margin must be in [0, 1)"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("scale must be positive"));
        }
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_cls", self.lambda_cls),
            ("lambda_aux", self.lambda_aux),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// 1 - IoU + center-distance / enclosing-diagonal penalty; in [0, 2).
pub fn diou_loss(pred: &BBox, target: &BBox) -> f64 {
    let inter = pred.intersection_area(target);
    let union = pred.area() + target.area() - inter;
    let iou = if union > GEOM_EPS { inter / union } else { 0.0 };
    let (pcx, pcy) = pred.center();
    let (tcx, tcy) = target.center();
    let rho2 = (pcx - tcx).powi(2) + (pcy - tcy).powi(2);
    let cw = pred.x2.max(target.x2) - pred.x1.min(target.x1);
    let ch = pred.y2.max(target.y2) - pred.y1.min(target.y1);
    let c2 = cw * cw + ch * ch;
    if c2 <= GEOM_EPS {
        // both boxes degenerate and coincident
        return 0.0;
    }
    1.0 - iou + rho2 / c2
}

/// Analytic gradient of `diou_loss` w.r.t. the pred corners
/// (x1, y1, x2, y2). Subgradient convention at min/max kinks.
pub fn diou_grad(pred: &BBox, target: &BBox) -> [f64; 4] {
    let (px1, py1, px2, py2) = (pred.x1, pred.y1, pred.x2, pred.y2);
    let (tx1, ty1, tx2, ty2) = (target.x1, target.y1, target.x2, target.y2);
    let iw = (px2.min(tx2) - px1.max(tx1)).max(0.0);
    let ih = (py2.min(ty2) - py1.max(ty1)).max(0.0);
    let inter = iw * ih;
    let union = pred.area() + target.area() - inter;

    let d_inter = [
        if iw > 0.0 && px1 > tx1 { -ih } else { 0.0 },
        if ih > 0.0 && py1 > ty1 { -iw } else { 0.0 },
        if iw > 0.0 && px2 < tx2 { ih } else { 0.0 },
        if ih > 0.0 && py2 < ty2 { iw } else { 0.0 },
    ];
    let (pw, ph) = (pred.width(), pred.height());
    let d_area = [-ph, -pw, ph, pw];

    let mut d_iou = [0.0; 4];
    if union > GEOM_EPS {
        let u2 = union * union;
        for i in 0..4 {
            let d_union = d_area[i] - d_inter[i];
            d_iou[i] = (d_inter[i] * union - inter * d_union) / u2;
        }
    }

    let (pcx, pcy) = pred.center();
    let (tcx, tcy) = target.center();
    let rho2 = (pcx - tcx).powi(2) + (pcy - tcy).powi(2);
    let d_rho2 = [pcx - tcx, pcy - tcy, pcx - tcx, pcy - tcy];
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let c2 = cw * cw + ch * ch;
    let d_c2 = [
        if px1 < tx1 { -2.0 * cw } else { 0.0 },
        if py1 < ty1 { -2.0 * ch } else { 0.0 },
        if px2 > tx2 { 2.0 * cw } else { 0.0 },
        if py2 > ty2 { 2.0 * ch } else { 0.0 },
    ];

    let mut grad = [0.0; 4];
    if c2 > GEOM_EPS {
        let c4 = c2 * c2;
        for i in 0..4 {
            grad[i] = -d_iou[i] + (d_rho2[i] * c2 - rho2 * d_c2[i]) / c4;
        }
    }
    grad
}

/// Classification loss output: scalar plus gradients for the per-anchor
/// feature rows and the class weight rows.
#[derive(Debug, Clone)]
pub struct ClsLoss {
    pub loss: f64,
    pub grad_features: Array2<f64>,
    pub grad_weights: Array2<f64>,
    /// Set when no anchors contributed.
    pub empty: bool,
}

fn cos_logits(f: &[f64], weights: &Array2<f64>) -> (Vec<f64>, f64, Vec<f64>) {
    let n_cls = weights.nrows();
    let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(GEOM_EPS);
    let mut cos = Vec::with_capacity(n_cls);
    let mut wnorms = Vec::with_capacity(n_cls);
    for j in 0..n_cls {
        let wj = weights.row(j);
        let wn = wj.iter().map(|v| v * v).sum::<f64>().sqrt().max(GEOM_EPS);
        let dot: f64 = wj.iter().zip(f).map(|(a, b)| a * b).sum();
        cos.push(dot / (wn * fnorm));
        wnorms.push(wn);
    }
    (cos, fnorm, wnorms)
}

/// Per-sample margin-cosine cross-entropy, no gradients. Used for
/// hard-negative mining.
pub fn margin_cos_per_sample(
    features: &Array2<f64>,
    weights: &Array2<f64>,
    labels: &[usize],
    cfg: &DrmcConfig,
) -> Vec<f64> {
    features
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(f, &y)| {
            let fv: Vec<f64> = f.to_vec();
            let (cos, _, _) = cos_logits(&fv, weights);
            let z: Vec<f64> = cos
                .iter()
                .enumerate()
                .map(|(j, &c)| cfg.scale * (c - if j == y { cfg.margin } else { 0.0 }))
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .collect()
}

/// Mean cross-entropy over margin-adjusted scaled cosine logits.
/// With margin 0 and scale 1 this is plain softmax CE on raw cosines.
pub fn margin_cos_loss(
    features: &Array2<f64>,
    weights: &Array2<f64>,
    labels: &[usize],
    cfg: &DrmcConfig,
) -> Result<ClsLoss> {
    cfg.validate()?;
    let (n, d) = features.dim();
    let n_cls = weights.nrows();
    if weights.ncols() != d {
        return Err(Error::shape("feature and weight dims differ"));
    }
    if labels.len() != n {
        return Err(Error::shape("labels length mismatch"));
    }
    let mut grad_features = Array2::<f64>::zeros((n, d));
    let mut grad_weights = Array2::<f64>::zeros((n_cls, d));
    if n == 0 {
        return Ok(ClsLoss {
            loss: 0.0,
            grad_features,
            grad_weights,
            empty: true,
        });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_cls {
            return Err(Error::data(format!("label {y} out of range")));
        }
        let fv: Vec<f64> = features.row(i).to_vec();
        let (cos, fnorm, wnorms) = cos_logits(&fv, weights);
        let z: Vec<f64> = cos
            .iter()
            .enumerate()
            .map(|(j, &c)| cfg.scale * (c - if j == y { cfg.margin } else { 0.0 }))
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += m + sum.ln() - z[y];
        for j in 0..n_cls {
            let p = exps[j] / sum;
            let dz = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
            let dcos = dz * cfg.scale;
            let wj = weights.row(j);
            // d cos / d f = w/(|w||f|) - cos * f/|f|^2
            for k in 0..d {
                grad_features[[i, k]] +=
                    dcos * (wj[k] / (wnorms[j] * fnorm) - cos[j] * fv[k] / (fnorm * fnorm));
                grad_weights[[j, k]] +=
                    dcos * (fv[k] / (wnorms[j] * fnorm) - cos[j] * wj[k] / (wnorms[j] * wnorms[j]));
            }
        }
    }
    Ok(ClsLoss {
        loss: total / n as f64,
        grad_features,
        grad_weights,
        empty: false,
    })
}

/// Plain softmax cross-entropy on unnormalized logits W·f (the ablation
/// baseline classifier).
pub fn softmax_ce_loss(
    features: &Array2<f64>,
    weights: &Array2<f64>,
    labels: &[usize],
) -> Result<ClsLoss> {
    let (n, d) = features.dim();
    let n_cls = weights.nrows();
    if weights.ncols() != d || labels.len() != n {
        return Err(Error::shape("softmax_ce_loss shape mismatch"));
    }
    let mut grad_features = Array2::<f64>::zeros((n, d));
    let mut grad_weights = Array2::<f64>::zeros((n_cls, d));
    if n == 0 {
        return Ok(ClsLoss {
            loss: 0.0,
            grad_features,
            grad_weights,
            empty: true,
        });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let fv = features.row(i);
        let z: Vec<f64> = (0..n_cls)
            .map(|j| weights.row(j).iter().zip(fv.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += m + sum.ln() - z[y];
        for j in 0..n_cls {
            let dz = (exps[j] / sum - if j == y { 1.0 } else { 0.0 }) / n as f64;
            for k in 0..d {
                grad_features[[i, k]] += dz * weights[[j, k]];
                grad_weights[[j, k]] += dz * fv[k];
            }
        }
    }
    Ok(ClsLoss {
        loss: total / n as f64,
        grad_features,
        grad_weights,
        empty: false,
    })
}

/// Per-sample softmax CE on raw logits, for mining under the baseline.
pub fn softmax_ce_per_sample(
    features: &Array2<f64>,
    weights: &Array2<f64>,
    labels: &[usize],
) -> Vec<f64> {
    let n_cls = weights.nrows();
    features
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(f, &y)| {
            let z: Vec<f64> = (0..n_cls)
                .map(|j| weights.row(j).iter().zip(f.iter()).map(|(a, b)| a * b).sum())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .collect()
}

/// Smooth-L1 on a delta pair, with gradient w.r.t. pred.
pub fn smooth_l1(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = pred[i] - target[i];
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad[i] = d;
        } else {
            loss += d.abs() - 0.5;
            grad[i] = d.signum();
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignore,
}

/// Per-anchor matching outcome; labels partition the anchor set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
}

impl MatchResult {
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                AnchorLabel::Positive { gt } => Some((i, *gt)),
                _ => None,
            })
            .collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, AnchorLabel::Negative).then_some(i))
            .collect()
    }
}

/// IoU-threshold matching with best-anchor rescue: every ground truth
/// claims its highest-IoU anchor even below the positive threshold.
pub fn match_anchors(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<MatchResult> {
    if !(0.0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0) {
        return Err(Error::config(
            "require 0 <= neg_iou <= pos_iou <= 1".to_string(),
        ));
    }
    let n = anchors.len();
    if gt_boxes.is_empty() {
        return Ok(MatchResult {
            labels: vec![AnchorLabel::Negative; n],
        });
    }
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut best_gt = vec![(0usize, 0.0f64); n];
    for (i, a) in anchors.iter().enumerate() {
        let mut bg = 0;
        let mut bi = -1.0;
        for (j, g) in gt_boxes.iter().enumerate() {
            let iou = a.iou(g);
            if iou > bi {
                bi = iou;
                bg = j;
            }
        }
        best_gt[i] = (bg, bi);
        labels[i] = if bi >= pos_iou {
            AnchorLabel::Positive { gt: bg }
        } else if bi < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    // best-anchor rescue: every GT without a positive claims its
    // best-IoU anchor among anchors not already positive for another GT,
    // so no rescue can uncover a previously matched GT
    for (j, g) in gt_boxes.iter().enumerate() {
        let covered = labels
            .iter()
            .any(|l| matches!(l, AnchorLabel::Positive { gt } if *gt == j));
        if covered {
            continue;
        }
        let mut best_a = None;
        let mut best_iou = -1.0;
        for (i, a) in anchors.iter().enumerate() {
            if matches!(labels[i], AnchorLabel::Positive { .. }) {
                continue;
            }
            let iou = a.iou(g);
            if iou > best_iou {
                best_iou = iou;
                best_a = Some(i);
            }
        }
        if let Some(i) = best_a {
            labels[i] = AnchorLabel::Positive { gt: j };
        }
    }
    Ok(MatchResult { labels })
}

/// One shot's per-anchor predictions: classification embeddings and box
/// deltas, rows aligned with the anchor list.
#[derive(Debug, Clone)]
pub struct ShotPreds {
    pub embeddings: Array2<f64>,
    pub deltas: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ShotGrads {
    pub embeddings: Array2<f64>,
    pub deltas: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClsKind {
    SoftmaxCe,
    MarginCos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegKind {
    SmoothL1,
    Diou,
}

/// Per-component values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub cls_second: f64,
    pub reg_second: f64,
    pub cls_first: f64,
    pub reg_first: f64,
    pub cls_empty: bool,
}

fn shot_loss(
    preds: &ShotPreds,
    weights: &Array2<f64>,
    matches: &MatchResult,
    anchors: &[AnchorGeom],
    gts: &[BBox],
    cfg: &DrmcConfig,
    cls_kind: ClsKind,
    reg_kind: RegKind,
) -> Result<(f64, f64, bool, ShotGrads, Array2<f64>)> {
    let n = anchors.len();
    if preds.embeddings.nrows() != n || preds.deltas.nrows() != n {
        return Err(Error::shape(format!(
            "predictions rows != anchor count {n}"
        )));
    }
    let d = preds.embeddings.ncols();
    let mut grads = ShotGrads {
        embeddings: Array2::zeros((n, d)),
        deltas: Array2::zeros((n, 4)),
    };
    let mut grad_w = Array2::zeros(weights.raw_dim());

    let positives = matches.positives();
    let negatives = matches.negatives();

    // classification: positives plus hard-mined negatives at the ratio
    let n_neg = cfg.neg_pos_ratio * positives.len();
    let mut selected: Vec<(usize, usize)> = positives.iter().map(|&(i, _)| (i, 1)).collect();
    if n_neg > 0 && !negatives.is_empty() {
        let neg_feats = gather_rows(&preds.embeddings, &negatives);
        let neg_labels = vec![0usize; negatives.len()];
        let per = match cls_kind {
            ClsKind::MarginCos => margin_cos_per_sample(&neg_feats, weights, &neg_labels, cfg),
            ClsKind::SoftmaxCe => softmax_ce_per_sample(&neg_feats, weights, &neg_labels),
        };
        let mut ranked: Vec<(usize, f64)> =
            negatives.iter().copied().zip(per).collect();
        // total_cmp: a diverging run produces NaN losses here and must
        // still reach the caller's guard instead of panicking
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (i, _) in ranked.into_iter().take(n_neg) {
            selected.push((i, 0));
        }
    }
    selected.sort_by_key(|&(i, _)| i);

    let (cls, cls_empty) = if selected.is_empty() {
        (0.0, true)
    } else {
        let idx: Vec<usize> = selected.iter().map(|&(i, _)| i).collect();
        let labels: Vec<usize> = selected.iter().map(|&(_, y)| y).collect();
        let feats = gather_rows(&preds.embeddings, &idx);
        let out = match cls_kind {
            ClsKind::MarginCos => margin_cos_loss(&feats, weights, &labels, cfg)?,
            ClsKind::SoftmaxCe => softmax_ce_loss(&feats, weights, &labels)?,
        };
        for (r, &i) in idx.iter().enumerate() {
            for k in 0..d {
                grads.embeddings[[i, k]] += out.grad_features[[r, k]];
            }
        }
        grad_w += &out.grad_weights;
        (out.loss, false)
    };

    // regression over positives
    let mut reg = 0.0;
    if !positives.is_empty() {
        let scale = 1.0 / positives.len() as f64;
        for &(i, gt) in &positives {
            let delta = [
                preds.deltas[[i, 0]],
                preds.deltas[[i, 1]],
                preds.deltas[[i, 2]],
                preds.deltas[[i, 3]],
            ];
            match reg_kind {
                RegKind::SmoothL1 => {
                    let target = encode_delta(&anchors[i], &gts[gt]);
                    let (l, g) = smooth_l1(delta, target);
                    reg += l * scale;
                    for k in 0..4 {
                        grads.deltas[[i, k]] += g[k] * scale;
                    }
                }
                RegKind::Diou => {
                    let pred_box = decode_delta(&anchors[i], delta);
                    let l = diou_loss(&pred_box, &gts[gt]);
                    let gb = diou_grad(&pred_box, &gts[gt]);
                    let jac = decode_jacobian(&anchors[i], delta);
                    reg += l * scale;
                    for k in 0..4 {
                        let mut g = 0.0;
                        for c in 0..4 {
                            g += gb[c] * jac[c][k];
                        }
                        grads.deltas[[i, k]] += g * scale;
                    }
                }
            }
        }
    }
    Ok((cls, reg, cls_empty, grads, grad_w))
}

fn gather_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let d = a.ncols();
    let mut out = Array2::zeros((idx.len(), d));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&a.row(i));
    }
    out
}

/// Full dual-shot multi-task loss:
/// total = l_cls*cls(second) + l_reg*reg(second) + l_aux*(cls+reg)(first),
/// with gradients for both shots and the shared classifier weights.
#[allow(clippy::too_many_arguments)]
pub fn drmc_total(
    first: &ShotPreds,
    second: &ShotPreds,
    weights: &Array2<f64>,
    matches: &MatchResult,
    anchors: &[AnchorGeom],
    gts: &[BBox],
    cfg: &DrmcConfig,
    cls_kind: ClsKind,
    reg_kind: RegKind,
) -> Result<(LossBundle, ShotGrads, ShotGrads, Array2<f64>)> {
    cfg.validate()?;
    if first.embeddings.nrows() != second.embeddings.nrows()
        || first.deltas.nrows() != second.deltas.nrows()
    {
        return Err(Error::shape("shot anchor counts differ"));
    }
    let (cls2, reg2, empty2, mut g2, mut gw) = shot_loss(
        second, weights, matches, anchors, gts, cfg, cls_kind, reg_kind,
    )?;
    scale_shot(&mut g2, cfg.lambda_cls, cfg.lambda_reg);
    gw *= cfg.lambda_cls;

    let (cls1, reg1, g1) = if cfg.lambda_aux > 0.0 {
        let (c, r, _, mut g, gw1) = shot_loss(
            first, weights, matches, anchors, gts, cfg, cls_kind, reg_kind,
        )?;
        scale_shot(&mut g, cfg.lambda_aux, cfg.lambda_aux);
        gw += &(gw1 * cfg.lambda_aux);
        (c, r, g)
    } else {
        let n = first.embeddings.nrows();
        (
            0.0,
            0.0,
            ShotGrads {
                embeddings: Array2::zeros((n, first.embeddings.ncols())),
                deltas: Array2::zeros((n, 4)),
            },
        )
    };

    let total = cfg.lambda_cls * cls2 + cfg.lambda_reg * reg2 + cfg.lambda_aux * (cls1 + reg1);
    Ok((
        LossBundle {
            total,
            cls_second: cls2,
            reg_second: reg2,
            cls_first: cls1,
            reg_first: reg1,
            cls_empty: empty2,
        },
        g1,
        g2,
        gw,
    ))
}

fn scale_shot(g: &mut ShotGrads, cls: f64, reg: f64) {
    g.embeddings *= cls;
    g.deltas *= reg;
}
