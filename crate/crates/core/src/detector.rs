//! Dual-shot anchor-based detection pipeline: a small configurable
//! backbone, anchor tiling, heads shared between the raw and enhanced
//! pyramids, delta decoding, and greedy NMS.

use crate::autofem::{AutoFem, AutoFemBundle, FeaturePyramid, PYRAMID_LEVELS, STRIDES};
use crate::boxes::{decode_delta, AnchorGeom, BBox};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::losses::{ShotGrads, ShotPreds};
use crate::nas::CandidateOpSet;
use crate::nn::{conv_init, ParamId, Params};
use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Plain conv backbone: a stride-2 stem then six stride-2 stages
/// emitting maps at strides 4 through 128.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stem_width: usize,
    pub stage_widths: [usize; PYRAMID_LEVELS],
    /// Convs per stage (first is the stride-2 downsample).
    pub stage_depths: [usize; PYRAMID_LEVELS],
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_width == 0 {
            return Err(Error::config("backbone widths must be positive"));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("backbone stage widths must be positive"));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::config("backbone stage depths must be >= 1"));
        }
        Ok(())
    }
}

/// Head tower shared across all levels and both shots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub depth: usize,
    pub width: usize,
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::config("head depth and width must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub resolution: usize,
    pub backbone: BackboneSpec,
    /// Pyramid width after lateral projection (C).
    pub width: usize,
    pub head: HeadSpec,
    /// Classification embedding channels (E).
    pub embed_dim: usize,
    /// Anchor side length as a multiple of the level stride.
    pub anchor_scale: f64,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.resolution == 0 {
            return Err(Error::config("resolution must be positive"));
        }
        if self.width == 0 || self.embed_dim == 0 {
            return Err(Error::config("width and embed_dim must be positive"));
        }
        if !(self.anchor_scale > 0.0) {
            return Err(Error::config("anchor_scale must be positive"));
        }
        Ok(())
    }
}

/// Square-anchor tiling: one scale per level, centers (i+0.5)*stride.
/// Non-divisible resolutions tile the ceil-sized grid (virtual padding).
pub fn generate_anchors(resolution: usize, anchor_scale: f64) -> Vec<AnchorGeom> {
    let mut out = Vec::new();
    for &stride in &STRIDES {
        let n = resolution.div_ceil(stride);
        let side = anchor_scale * stride as f64;
        for y in 0..n {
            for x in 0..n {
                out.push(AnchorGeom {
                    cx: (x as f64 + 0.5) * stride as f64,
                    cy: (y as f64 + 0.5) * stride as f64,
                    w: side,
                    h: side,
                });
            }
        }
    }
    out
}

/// Per-level (cls embedding map, box delta map) pairs for one shot.
pub type ShotMaps = Vec<(VarId, VarId)>;

#[derive(Debug)]
pub struct DualShotMaps {
    pub first: ShotMaps,
    pub second: ShotMaps,
}

/// The full model: backbone, lateral projections, enhance stage, shared
/// heads, and the cosine classifier weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detector {
    pub cfg: DetectorConfig,
    stem_w: ParamId,
    stage_ws: Vec<Vec<ParamId>>,
    lateral_ws: Vec<ParamId>,
    pub fem: AutoFem,
    head_ws: Vec<ParamId>,
    cls_out_w: ParamId,
    reg_out_w: ParamId,
    /// 2 x embed_dim cosine classifier rows (background, face).
    pub cls_weight: ParamId,
}

impl Detector {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        opset: &CandidateOpSet,
        cfg: DetectorConfig,
        bundle: &AutoFemBundle,
    ) -> Result<Self> {
        cfg.validate()?;
        if bundle.width != cfg.width {
            return Err(Error::config(format!(
                "bundle width {} != detector width {}",
                bundle.width, cfg.width
            )));
        }
        let bb = &cfg.backbone;
        let stem_w = params.add(conv_init(rng, bb.stem_width, bb.in_channels, 3));
        let mut stage_ws = Vec::new();
        let mut prev = bb.stem_width;
        for s in 0..PYRAMID_LEVELS {
            let w = bb.stage_widths[s];
            let mut convs = vec![params.add(conv_init(rng, w, prev, 3))];
            for _ in 1..bb.stage_depths[s] {
                convs.push(params.add(conv_init(rng, w, w, 3)));
            }
            stage_ws.push(convs);
            prev = w;
        }
        let lateral_ws = (0..PYRAMID_LEVELS)
            .map(|s| params.add(conv_init(rng, cfg.width, bb.stage_widths[s], 1)))
            .collect();
        let fem = AutoFem::new(params, rng, opset, bundle)?;
        let mut head_ws = Vec::new();
        let mut hw = cfg.width;
        for _ in 0..cfg.head.depth {
            head_ws.push(params.add(conv_init(rng, cfg.head.width, hw, 3)));
            hw = cfg.head.width;
        }
        let cls_out_w = params.add(conv_init(rng, cfg.embed_dim, hw, 3));
        let reg_out_w = params.add(conv_init(rng, 4, hw, 3));
        let cls_weight = params.add(
            conv_init(rng, 2, cfg.embed_dim, 1)
                .into_shape_with_order(ndarray::IxDyn(&[2, cfg.embed_dim]))
                .map_err(|e| Error::shape(e.to_string()))?,
        );
        Ok(Self {
            cfg,
            stem_w,
            stage_ws,
            lateral_ws,
            fem,
            head_ws,
            cls_out_w,
            reg_out_w,
            cls_weight,
        })
    }

    pub fn anchors(&self) -> Vec<AnchorGeom> {
        generate_anchors(self.cfg.resolution, self.cfg.anchor_scale)
    }

    /// All trainable parameter ids (heads listed once: both shots read
    /// the same storage).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem_w];
        for s in &self.stage_ws {
            ids.extend(s);
        }
        ids.extend(&self.lateral_ws);
        ids.extend(self.fem.param_ids());
        ids.extend(&self.head_ws);
        ids.push(self.cls_out_w);
        ids.push(self.reg_out_w);
        ids.push(self.cls_weight);
        ids
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        let mut ids = self.head_ws.clone();
        ids.push(self.cls_out_w);
        ids.push(self.reg_out_w);
        ids
    }

    fn backbone_pyramid(&self, g: &mut Graph, params: &Params, image: VarId) -> FeaturePyramid {
        let w = g.param(params, self.stem_w);
        let mut x = g.conv2d(image, w, None, 2, 1, 1);
        x = g.relu(x);
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for stage in &self.stage_ws {
            for (i, &cw) in stage.iter().enumerate() {
                let w = g.param(params, cw);
                x = g.conv2d(x, w, None, if i == 0 { 2 } else { 1 }, 1, 1);
                x = g.relu(x);
            }
            levels.push(x);
        }
        let levels = levels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let w = g.param(params, self.lateral_ws[i]);
                g.conv2d(c, w, None, 1, 1, 1)
            })
            .collect();
        FeaturePyramid {
            levels,
            width: self.cfg.width,
        }
    }

    fn head_forward(&self, g: &mut Graph, params: &Params, pyr: &FeaturePyramid) -> ShotMaps {
        pyr.levels
            .iter()
            .map(|&x| {
                let mut h = x;
                for &hw in &self.head_ws {
                    let w = g.param(params, hw);
                    h = g.conv2d(h, w, None, 1, 1, 1);
                    h = g.relu(h);
                }
                let cw = g.param(params, self.cls_out_w);
                let cls = g.conv2d(h, cw, None, 1, 1, 1);
                let rw = g.param(params, self.reg_out_w);
                let reg = g.conv2d(h, rw, None, 1, 1, 1);
                (cls, reg)
            })
            .collect()
    }

    /// First shot reads the raw pyramid, second shot the enhanced one;
    /// both through the same head weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        opset: &CandidateOpSet,
        image: VarId,
    ) -> Result<DualShotMaps> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 3
            || shape[0] != self.cfg.backbone.in_channels
            || shape[1] != self.cfg.resolution
            || shape[2] != self.cfg.resolution
        {
            return Err(Error::shape(format!(
                "image shape {shape:?} does not match configured resolution {} x {}",
                self.cfg.backbone.in_channels, self.cfg.resolution
            )));
        }
        let raw = self.backbone_pyramid(g, params, image);
        let enhanced = self.fem.forward(g, params, opset, &raw)?;
        Ok(DualShotMaps {
            first: self.head_forward(g, params, &raw),
            second: self.head_forward(g, params, &enhanced),
        })
    }

    /// Classifier weight rows as f64 for the loss/scoring path.
    pub fn cls_weight_f64(&self, params: &Params) -> Array2<f64> {
        let w = params.get(self.cls_weight);
        Array2::from_shape_fn((2, self.cfg.embed_dim), |(i, j)| w[[i, j]] as f64)
    }

    pub fn fold_cls_weight_grad(&self, params: &mut Params, grad: &Array2<f64>) {
        let g32: ArrayD<f32> = grad.mapv(|v| v as f32).into_dyn();
        params.accumulate_grad(self.cls_weight, &g32);
    }
}

/// Flatten one shot's per-level maps into per-anchor rows in anchor
/// order (level-major, then row-major positions).
pub fn shot_rows(g: &Graph, maps: &ShotMaps) -> ShotPreds {
    let mut emb_rows = Vec::new();
    let mut delta_rows = Vec::new();
    let mut n = 0;
    let e = g.map(maps[0].0).shape()[0];
    for &(cls, reg) in maps {
        let cm = g.map(cls);
        let rm = g.map(reg);
        let (h, w) = (cm.shape()[1], cm.shape()[2]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..e {
                    emb_rows.push(cm[[c, y, x]] as f64);
                }
                for c in 0..4 {
                    delta_rows.push(rm[[c, y, x]] as f64);
                }
                n += 1;
            }
        }
    }
    ShotPreds {
        embeddings: Array2::from_shape_vec((n, e), emb_rows).expect("row count consistent"),
        deltas: Array2::from_shape_vec((n, 4), delta_rows).expect("row count consistent"),
    }
}

/// Scatter per-anchor row gradients back into per-map seed arrays for
/// the reverse pass.
pub fn shot_seeds(g: &Graph, maps: &ShotMaps, grads: &ShotGrads) -> Vec<(VarId, ArrayD<f32>)> {
    let mut seeds = Vec::new();
    let mut row = 0;
    let e = grads.embeddings.ncols();
    for &(cls, reg) in maps {
        let shape = g.map(cls).dim();
        let (h, w) = (shape.1, shape.2);
        let mut gc = Array3::<f32>::zeros((e, h, w));
        let mut gr = Array3::<f32>::zeros((4, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..e {
                    gc[[c, y, x]] = grads.embeddings[[row, c]] as f32;
                }
                for c in 0..4 {
                    gr[[c, y, x]] = grads.deltas[[row, c]] as f32;
                }
                row += 1;
            }
        }
        seeds.push((cls, gc.into_dyn()));
        seeds.push((reg, gr.into_dyn()));
    }
    seeds
}

/// Decode per-anchor deltas and clip to the image bounds.
pub fn decode_boxes(anchors: &[AnchorGeom], deltas: &Array2<f64>, resolution: usize) -> Vec<BBox> {
    anchors
        .iter()
        .zip(deltas.rows())
        .map(|(a, d)| {
            decode_delta(a, [d[0], d[1], d[2], d[3]]).clip(resolution as f64, resolution as f64)
        })
        .collect()
}

/// Face probability per anchor: softmax over scale * cosine, no margin.
pub fn face_scores(emb: &Array2<f64>, weights: &Array2<f64>, scale: f64) -> Vec<f64> {
    use crate::boxes::GEOM_EPS;
    let w0: Vec<f64> = weights.row(0).to_vec();
    let w1: Vec<f64> = weights.row(1).to_vec();
    let n0 = w0.iter().map(|v| v * v).sum::<f64>().sqrt().max(GEOM_EPS);
    let n1 = w1.iter().map(|v| v * v).sum::<f64>().sqrt().max(GEOM_EPS);
    emb.rows()
        .into_iter()
        .map(|f| {
            let fn_ = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(GEOM_EPS);
            let c0: f64 = f.iter().zip(&w0).map(|(a, b)| a * b).sum::<f64>() / (fn_ * n0);
            let c1: f64 = f.iter().zip(&w1).map(|(a, b)| a * b).sum::<f64>() / (fn_ * n1);
            let z = scale * (c1 - c0);
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NmsConfig {
    pub pre_topk: usize,
    pub iou: f64,
    pub post_topk: usize,
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            pre_topk: 5000,
            iou: 0.3,
            post_topk: 750,
            score_floor: 0.01,
        }
    }
}

/// Greedy NMS: keep by descending score (ties by input index), suppress
/// any box overlapping a kept higher-scored box above the threshold.
pub fn nms_inference(detections: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= cfg.score_floor)
        .collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(cfg.pre_topk);
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        if kept.len() >= cfg.post_topk {
            break;
        }
        let d = &detections[i];
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= cfg.iou) {
            kept.push(*d);
        }
    }
    kept
}

/// Level of origin for each anchor index.
pub fn anchor_levels(resolution: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (li, &stride) in STRIDES.iter().enumerate() {
        let n = resolution.div_ceil(stride);
        out.extend(std::iter::repeat_n(li, n * n));
    }
    out
}

/// Full single-image inference: second-shot scores and boxes through NMS.
pub fn detect_image(
    det: &Detector,
    params: &Params,
    opset: &CandidateOpSet,
    image: ArrayD<f32>,
    nms: &NmsConfig,
    score_scale: f64,
) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let x = g.leaf(image);
    let maps = det.forward(&mut g, params, opset, x)?;
    let rows = shot_rows(&g, &maps.second);
    let anchors = det.anchors();
    let weights = det.cls_weight_f64(params);
    let scores = face_scores(&rows.embeddings, &weights, score_scale);
    let boxes = decode_boxes(&anchors, &rows.deltas, det.cfg.resolution);
    let levels = anchor_levels(det.cfg.resolution);
    let dets: Vec<Detection> = boxes
        .into_iter()
        .zip(scores)
        .zip(levels)
        .map(|((bbox, score), level)| Detection { bbox, score, level })
        .collect();
    Ok(nms_inference(&dets, nms))
}

/// One line of the detection output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub boxes: Vec<(f64, f64, f64, f64, f64)>,
}

impl DetectionRecord {
    pub fn from_detections(image_id: u64, dets: &[Detection]) -> Self {
        Self {
            image_id,
            boxes: dets
                .iter()
                .map(|d| (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score))
                .collect(),
        }
    }
}
