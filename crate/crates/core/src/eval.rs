//! Average-precision evaluation with greedy score-descending matching,
//! monotone-interpolated PR area, and size-tier stratification with
//! ignore handling.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::synth::{GtBox, SizeTier};
use serde::{Deserialize, Serialize};

/// One scored detection on one image of the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalDet {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// None when the corresponding GT set is empty (undefined, not 0).
    pub ap_overall: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Raw (pre-interpolation) PR points of the overall evaluation.
    pub pr_curve: Vec<PrPoint>,
}

impl EvalReport {
    pub fn tier_ap(&self, tier: SizeTier) -> Option<f64> {
        match tier {
            SizeTier::Small => self.ap_small,
            SizeTier::Medium => self.ap_medium,
            SizeTier::Large => self.ap_large,
        }
    }
}

/// Globally score-sorted detections (ties broken by image then input
/// order), each greedily matched to the highest-IoU unmatched target.
/// `targets` and `ignores` are per-image; a detection whose best match
/// is an ignore region is dropped from the PR accounting.
fn pr_points(
    detections: &[Vec<EvalDet>],
    targets: &[Vec<BBox>],
    ignores: &[Vec<BBox>],
    iou_thresh: f64,
) -> (Vec<PrPoint>, usize) {
    let n_gt: usize = targets.iter().map(Vec::len).sum();
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        for di in 0..dets.len() {
            order.push((img, di));
        }
    }
    order.sort_by(|&(ia, da), &(ib, db)| {
        detections[ib][db]
            .score
            .partial_cmp(&detections[ia][da].score)
            .unwrap()
            .then(ia.cmp(&ib))
            .then(da.cmp(&db))
    });
    let mut matched: Vec<Vec<bool>> = targets.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::new();
    for (img, di) in order {
        let d = &detections[img][di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in targets[img].iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let iou = d.bbox.iou(g);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[img][gi] = true;
            tp += 1;
        } else if ignores[img]
            .iter()
            .any(|ig| d.bbox.iou(ig) >= iou_thresh)
        {
            continue; // matches an out-of-tier target: neither TP nor FP
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    (points, n_gt)
}

/// Area under the monotone-interpolated PR curve: precision at each
/// recall is replaced by the max precision at any >= recall.
pub fn interpolated_ap(points: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut best_to_right = vec![0.0; points.len()];
    let mut run = 0.0f64;
    for i in (0..points.len()).rev() {
        run = run.max(points[i].precision);
        best_to_right[i] = run;
    }
    for (i, p) in points.iter().enumerate() {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * best_to_right[i];
            prev_recall = p.recall;
        }
    }
    ap
}

/// Evaluate AP at one IoU threshold, overall and per size tier.
pub fn evaluate_ap(
    detections: &[Vec<EvalDet>],
    ground_truth: &[Vec<GtBox>],
    iou_thresh: f64,
) -> Result<EvalReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::shape(format!(
            "{} detection lists vs {} ground-truth lists",
            detections.len(),
            ground_truth.len()
        )));
    }
    if !(0.0 < iou_thresh && iou_thresh <= 1.0) {
        return Err(Error::config("iou threshold must be in (0, 1]"));
    }
    let no_ignores: Vec<Vec<BBox>> = vec![Vec::new(); detections.len()];
    let all: Vec<Vec<BBox>> = ground_truth
        .iter()
        .map(|g| g.iter().map(|t| t.bbox).collect())
        .collect();
    let (points, n_gt) = pr_points(detections, &all, &no_ignores, iou_thresh);
    let ap_overall = (n_gt > 0).then(|| interpolated_ap(&points));

    let mut tier_aps = [None; 3];
    for (ti, tier) in SizeTier::all().into_iter().enumerate() {
        let targets: Vec<Vec<BBox>> = ground_truth
            .iter()
            .map(|g| g.iter().filter(|t| t.tier == tier).map(|t| t.bbox).collect())
            .collect();
        let ignores: Vec<Vec<BBox>> = ground_truth
            .iter()
            .map(|g| g.iter().filter(|t| t.tier != tier).map(|t| t.bbox).collect())
            .collect();
        let (pts, n) = pr_points(detections, &targets, &ignores, iou_thresh);
        tier_aps[ti] = (n > 0).then(|| interpolated_ap(&pts));
    }

    Ok(EvalReport {
        ap_overall,
        ap_small: tier_aps[0],
        ap_medium: tier_aps[1],
        ap_large: tier_aps[2],
        pr_curve: points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(x: f64, y: f64, s: f64) -> GtBox {
        let bbox = BBox::new(x, y, x + s, y + s).unwrap();
        GtBox {
            bbox,
            tier: SizeTier::from_area(bbox.area()),
        }
    }

    fn det(x: f64, y: f64, s: f64, score: f64) -> EvalDet {
        EvalDet {
            bbox: BBox::new(x, y, x + s, y + s).unwrap(),
            score,
        }
    }

    #[test]
    fn perfect_single_detection_ap_one() {
        let r = evaluate_ap(&[vec![det(0.0, 0.0, 20.0, 0.9)]], &[vec![gt(0.0, 0.0, 20.0)]], 0.5)
            .unwrap();
        assert_eq!(r.ap_overall, Some(1.0));
    }

    #[test]
    fn zero_overlap_detections_ap_zero() {
        let r = evaluate_ap(
            &[vec![det(100.0, 100.0, 10.0, 0.9), det(200.0, 0.0, 10.0, 0.5)]],
            &[vec![gt(0.0, 0.0, 20.0)]],
            0.5,
        )
        .unwrap();
        assert_eq!(r.ap_overall, Some(0.0));
    }

    #[test]
    fn empty_tier_is_undefined_not_zero() {
        let r = evaluate_ap(&[vec![det(0.0, 0.0, 20.0, 0.9)]], &[vec![gt(0.0, 0.0, 20.0)]], 0.5)
            .unwrap();
        // only a small GT exists (area 400)
        assert!(r.ap_small.is_some());
        assert_eq!(r.ap_medium, None);
        assert_eq!(r.ap_large, None);
    }

    #[test]
    fn cross_tier_match_is_ignored_not_fp() {
        // one small GT; a confident detection on a large GT of the other
        // tier must not poison the small-tier precision
        let gts = vec![vec![gt(0.0, 0.0, 20.0), gt(50.0, 50.0, 100.0)]];
        let dets = vec![vec![
            det(50.0, 50.0, 100.0, 0.95), // matches the large GT
            det(0.0, 0.0, 20.0, 0.9),
        ]];
        let r = evaluate_ap(&dets, &gts, 0.5).unwrap();
        assert_eq!(r.ap_small, Some(1.0));
        assert_eq!(r.ap_large, Some(1.0));
    }

    #[test]
    fn interpolated_precision_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let gts: Vec<Vec<GtBox>> = (0..3)
                .map(|_| {
                    (0..rng.gen_range(1..4))
                        .map(|_| gt(rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0), 20.0))
                        .collect()
                })
                .collect();
            let dets: Vec<Vec<EvalDet>> = (0..3)
                .map(|_| {
                    (0..rng.gen_range(0..6))
                        .map(|_| {
                            det(
                                rng.gen_range(0.0..80.0),
                                rng.gen_range(0.0..80.0),
                                20.0,
                                rng.gen_range(0.0..1.0),
                            )
                        })
                        .collect()
                })
                .collect();
            let r = evaluate_ap(&dets, &gts, 0.5).unwrap();
            // envelope over the raw points must be non-increasing
            let mut run = 0.0;
            let mut envelope: Vec<f64> = r
                .pr_curve
                .iter()
                .rev()
                .map(|p| {
                    run = f64::max(run, p.precision);
                    run
                })
                .collect();
            envelope.reverse();
            for w in envelope.windows(2) {
                assert!(w[0] >= w[1]);
            }
            if let Some(ap) = r.ap_overall {
                assert!((0.0..=1.0).contains(&ap));
            }
        }
    }

    /// Independent integration: sample the envelope on a fine recall grid
    /// via direct max-scan, rectangle rule over exact recall steps.
    fn ap_reference(points: &[PrPoint]) -> f64 {
        let mut recalls: Vec<f64> = points.iter().map(|p| p.recall).collect();
        recalls.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &r in &recalls {
            if r <= prev {
                continue;
            }
            let p_max = points
                .iter()
                .filter(|p| p.recall >= r)
                .map(|p| p.precision)
                .fold(0.0, f64::max);
            ap += (r - prev) * p_max;
            prev = r;
        }
        ap
    }

    #[test]
    fn ap_matches_independent_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let mut tp = 0usize;
            let mut fp = 0usize;
            let n_gt = rng.gen_range(1..10usize);
            let mut points = Vec::new();
            for _ in 0..n {
                if rng.gen_bool(0.5) && tp < n_gt {
                    tp += 1;
                } else {
                    fp += 1;
                }
                points.push(PrPoint {
                    recall: tp as f64 / n_gt as f64,
                    precision: tp as f64 / (tp + fp) as f64,
                });
            }
            let a = interpolated_ap(&points);
            let b = ap_reference(&points);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    /// Exhaustive oracle for tiny instances: replay the greedy rule with
    /// an independent implementation that recomputes everything per step.
    fn ap_oracle(dets: &[Vec<EvalDet>], gts: &[Vec<GtBox>], thr: f64) -> f64 {
        let mut flat: Vec<(usize, usize, f64)> = Vec::new();
        for (i, dl) in dets.iter().enumerate() {
            for (j, d) in dl.iter().enumerate() {
                flat.push((i, j, d.score));
            }
        }
        flat.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        if n_gt == 0 {
            return 0.0;
        }
        let mut used: std::collections::HashSet<(usize, usize)> = Default::default();
        let mut outcomes = Vec::new();
        for &(i, j, _) in &flat {
            let d = dets[i][j].bbox;
            let mut cand: Vec<(usize, f64)> = gts[i]
                .iter()
                .enumerate()
                .filter(|(g, _)| !used.contains(&(i, *g)))
                .map(|(g, t)| (g, d.iou(&t.bbox)))
                .filter(|&(_, iou)| iou >= thr)
                .collect();
            cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            if let Some(&(g, _)) = cand.first() {
                used.insert((i, g));
                outcomes.push(true);
            } else {
                outcomes.push(false);
            }
        }
        let mut tp = 0;
        let mut points = Vec::new();
        for (k, &hit) in outcomes.iter().enumerate() {
            if hit {
                tp += 1;
            }
            points.push(PrPoint {
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (k + 1) as f64,
            });
        }
        ap_reference(&points)
    }

    #[test]
    fn matches_small_instance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n_img = rng.gen_range(1..3);
            let gts: Vec<Vec<GtBox>> = (0..n_img)
                .map(|_| {
                    (0..rng.gen_range(1..5))
                        .map(|_| gt(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0), 20.0))
                        .collect()
                })
                .collect();
            let total_gt: usize = gts.iter().map(Vec::len).sum();
            let dets: Vec<Vec<EvalDet>> = (0..n_img)
                .map(|_| {
                    (0..rng.gen_range(0..=(10 - total_gt).min(5)))
                        .map(|_| {
                            det(
                                rng.gen_range(0.0..60.0),
                                rng.gen_range(0.0..60.0),
                                20.0,
                                (rng.gen_range(0..100) as f64) / 100.0,
                            )
                        })
                        .collect()
                })
                .collect();
            let fast = evaluate_ap(&dets, &gts, 0.5).unwrap().ap_overall.unwrap();
            let slow = ap_oracle(&dets, &gts, 0.5);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(evaluate_ap(&[vec![]], &[], 0.5).is_err());
    }
}
