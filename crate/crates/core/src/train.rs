//! Detector training: warmup + step-decay SGD over the dual-shot loss,
//! per-epoch validation AP, and best-checkpoint tracking.

use crate::boxes::BBox;
use crate::detector::{detect_image, shot_rows, shot_seeds, Detector, NmsConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_ap, EvalDet};
use crate::graph::Graph;
use crate::losses::{drmc_total, match_anchors, ClsKind, DrmcConfig, LossBundle, MatchResult, RegKind};
use crate::nas::CandidateOpSet;
use crate::nn::{Params, SgdMomentum};
use crate::schedule::{diverged, lr_at, TrainSchedule};
use crate::synth::SynthScene;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which loss components are active; each axis maps to one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossToggles {
    pub cls: ClsKind,
    pub reg: RegKind,
    pub aux: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            cls: ClsKind::MarginCos,
            reg: RegKind::Diou,
            aux: true,
        }
    }
}

impl LossToggles {
    pub fn baseline() -> Self {
        Self {
            cls: ClsKind::SoftmaxCe,
            reg: RegKind::SmoothL1,
            aux: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_cls_second: f64,
    pub mean_reg_second: f64,
    pub mean_cls_first: f64,
    pub mean_reg_first: f64,
    pub lr_end: f64,
    pub val_ap: Option<f64>,
}

/// Everything needed to resume: weights, optimizer state, and where in
/// the schedule the run stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub detector: Detector,
    pub params: Params,
    pub optimizer: SgdMomentum,
    pub iter: usize,
    pub epoch: usize,
    pub val_ap: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&s)?;
        if ckpt.version != 1 {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// State at the best validation AP (final state if no val set).
    pub best: Checkpoint,
    /// State at the end of the schedule.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn snapshot(
    det: &Detector,
    params: &Params,
    opt: &SgdMomentum,
    iter: usize,
    epoch: usize,
    val_ap: Option<f64>,
) -> Checkpoint {
    Checkpoint {
        version: 1,
        detector: det.clone(),
        params: params.clone(),
        optimizer: opt.clone(),
        iter,
        epoch,
        val_ap,
    }
}

/// Forward/backward one image; returns the loss bundle. Gradients are
/// accumulated into `params`.
pub fn image_step(
    det: &Detector,
    params: &mut Params,
    opset: &CandidateOpSet,
    scene: &SynthScene,
    matches: &MatchResult,
    anchors: &[crate::boxes::AnchorGeom],
    cfg: &DrmcConfig,
    toggles: &LossToggles,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let image = g.leaf(scene.image.clone().into_dyn());
    let maps = det.forward(&mut g, params, opset, image)?;
    let first = shot_rows(&g, &maps.first);
    let second = shot_rows(&g, &maps.second);
    let weights = det.cls_weight_f64(params);
    let gts: Vec<BBox> = scene.gt.iter().map(|t| t.bbox).collect();
    let (bundle, g1, g2, gw) = drmc_total(
        &first, &second, &weights, matches, anchors, &gts, cfg, toggles.cls, toggles.reg,
    )?;
    let mut seeds = shot_seeds(&g, &maps.second, &g2);
    if cfg.lambda_aux > 0.0 {
        seeds.extend(shot_seeds(&g, &maps.first, &g1));
    }
    g.backward_params(seeds, params);
    det.fold_cls_weight_grad(params, &gw);
    Ok(bundle)
}

/// Validation AP over a held-out scene set.
pub fn validation_ap(
    det: &Detector,
    params: &Params,
    opset: &CandidateOpSet,
    val: &[SynthScene],
    score_scale: f64,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let nms = NmsConfig::default();
    let mut dets = Vec::with_capacity(val.len());
    let mut gts = Vec::with_capacity(val.len());
    for scene in val {
        let d = detect_image(det, params, opset, scene.image.clone().into_dyn(), &nms, score_scale)?;
        dets.push(
            d.iter()
                .map(|x| EvalDet {
                    bbox: x.bbox,
                    score: x.score,
                })
                .collect::<Vec<_>>(),
        );
        gts.push(scene.gt.clone());
    }
    Ok(evaluate_ap(&dets, &gts, 0.5)?.ap_overall)
}

pub const POS_IOU: f64 = 0.5;
pub const NEG_IOU: f64 = 0.4;

/// Run the full schedule. Deterministic under a fixed seed: the epoch
/// shuffle and every numeric step replay exactly.
#[allow(clippy::too_many_arguments)]
pub fn train_detector(
    det: &Detector,
    params: &mut Params,
    opset: &CandidateOpSet,
    train: &[SynthScene],
    val: &[SynthScene],
    sched: &TrainSchedule,
    toggles: &LossToggles,
    base_cfg: &DrmcConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    for s in train.iter().chain(val) {
        if s.image.shape()[1] != det.cfg.resolution {
            return Err(Error::data(format!(
                "scene rendered at {} but model expects {}",
                s.image.shape()[1],
                det.cfg.resolution
            )));
        }
    }
    let mut cfg = *base_cfg;
    if !toggles.aux {
        cfg.lambda_aux = 0.0;
    }
    cfg.validate()?;

    let anchors = det.anchors();
    let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox()).collect();
    let matches: Vec<MatchResult> = train
        .iter()
        .map(|s| {
            let gts: Vec<BBox> = s.gt.iter().map(|t| t.bbox).collect();
            match_anchors(&anchor_boxes, &gts, POS_IOU, NEG_IOU)
        })
        .collect::<Result<_>>()?;

    let ids = det.param_ids();
    let mut opt = SgdMomentum::new(
        ids.clone(),
        params,
        sched.warmup_start_lr as f32,
        sched.momentum as f32,
        sched.weight_decay as f32,
    );
    let iters_per_epoch = train.len().div_ceil(sched.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iter = 0usize;
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;

    if sched.total_epochs == 0 {
        let init_ap = validation_ap(det, params, opset, val, cfg.scale)?;
        let ck = snapshot(det, params, &opt, 0, 0, init_ap);
        return Ok(TrainOutcome {
            best: ck.clone(),
            last: ck,
            log,
        });
    }

    for epoch in 0..sched.total_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossBundle::default();
        let mut n_batches = 0usize;
        let mut lr = sched.warmup_start_lr;
        for chunk in order.chunks(sched.batch_size) {
            params.zero_grads();
            let mut batch_total = 0.0;
            for &i in chunk {
                let b = image_step(
                    det, params, opset, &train[i], &matches[i], &anchors, &cfg, toggles,
                )?;
                batch_total += b.total;
                sums.total += b.total;
                sums.cls_second += b.cls_second;
                sums.reg_second += b.reg_second;
                sums.cls_first += b.cls_first;
                sums.reg_first += b.reg_first;
            }
            let mean = batch_total / chunk.len() as f64;
            if diverged(mean) {
                return Err(Error::runtime(format!(
                    "training diverged at epoch {epoch} iter {iter}: batch loss {mean}; \
                     offending scene seeds {:?}",
                    chunk.iter().map(|&i| train[i].seed).collect::<Vec<_>>()
                )));
            }
            params.scale_grads(&ids, 1.0 / chunk.len() as f32);
            lr = lr_at(iter, iters_per_epoch, sched);
            opt.lr = lr as f32;
            opt.step(params);
            iter += 1;
            n_batches += 1;
        }
        if !params.all_finite() {
            return Err(Error::runtime(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let n_img = train.len() as f64;
        let val_ap = validation_ap(det, params, opset, val, cfg.scale)?;
        log.push(EpochLog {
            epoch,
            mean_total: sums.total / n_img,
            mean_cls_second: sums.cls_second / n_img,
            mean_reg_second: sums.reg_second / n_img,
            mean_cls_first: sums.cls_first / n_img,
            mean_reg_first: sums.reg_first / n_img,
            lr_end: lr,
            val_ap,
        });
        let _ = n_batches;
        let improved = match (&best, val_ap) {
            (None, _) => true,
            (Some(b), Some(ap)) => b.val_ap.map_or(true, |prev| ap >= prev),
            (Some(_), None) => true, // no val set: latest state wins
        };
        if improved {
            best = Some(snapshot(det, params, &opt, iter, epoch + 1, val_ap));
        }
    }

    let last_ap = log.last().and_then(|l| l.val_ap);
    let last = snapshot(det, params, &opt, iter, sched.total_epochs, last_ap);
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        log,
    })
}
