//! Compound scaling family (D0-D6) with exact parameter / multiply-add
//! accounting and a wall-clock latency bench.

use crate::autofem::{AutoFemBundle, ConnKind, FpnCellSpec, PYRAMID_LEVELS};
use crate::detector::{detect_image, BackboneSpec, Detector, DetectorConfig, HeadSpec, NmsConfig};
use crate::error::{Error, Result};
use crate::nas::{CandidateOpSet, CellKind, Genotype, OpKind, OutputRule};
use crate::nn::Params;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// One counted conv application. `param_group` identifies the weight
/// storage: instances sharing a group share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
    pub in_h: usize,
    pub in_w: usize,
    pub param_group: usize,
}

impl ConvLayer {
    pub fn out_hw(&self) -> (usize, usize) {
        crate::kernels::conv_out_hw(self.in_h, self.in_w, self.k, self.stride, self.dilation)
    }

    pub fn params(&self) -> u64 {
        let w = self.cout * (self.cin / self.groups) * self.k * self.k;
        (w + if self.bias { self.cout } else { 0 }) as u64
    }

    /// Multiply-adds for one application.
    pub fn flops(&self) -> u64 {
        let (ho, wo) = self.out_hw();
        (self.cout * ho * wo * (self.cin / self.groups) * self.k * self.k) as u64
    }
}

/// Static description of every conv application in a model, plus
/// non-conv parameter tensors (element counts).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NetSketch {
    pub layers: Vec<ConvLayer>,
    pub misc_params: Vec<usize>,
}

impl NetSketch {
    /// Exact parameter count; shared groups counted once.
    pub fn count_params(&self) -> u64 {
        let mut seen = std::collections::HashSet::new();
        let mut total: u64 = self.misc_params.iter().map(|&n| n as u64).sum();
        for l in &self.layers {
            if seen.insert(l.param_group) {
                total += l.params();
            }
        }
        total
    }

    /// Exact multiply-add count over every application.
    pub fn count_flops(&self) -> u64 {
        self.layers.iter().map(ConvLayer::flops).sum()
    }
}

struct SketchBuilder {
    sketch: NetSketch,
    next_group: usize,
}

impl SketchBuilder {
    fn new() -> Self {
        Self {
            sketch: NetSketch::default(),
            next_group: 0,
        }
    }

    fn fresh_group(&mut self) -> usize {
        let g = self.next_group;
        self.next_group += 1;
        g
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        hw: (usize, usize),
        group: usize,
    ) -> (usize, usize) {
        let l = ConvLayer {
            cin,
            cout,
            k,
            stride,
            dilation,
            groups,
            bias: false,
            in_h: hw.0,
            in_w: hw.1,
            param_group: group,
        };
        let out = l.out_hw();
        self.sketch.layers.push(l);
        out
    }
}

/// Conv applications for one candidate op at the given width/size.
/// Returns fresh param groups for the op's weights (caller may reuse).
fn sketch_op(
    b: &mut SketchBuilder,
    opset: &CandidateOpSet,
    op: usize,
    width: usize,
    hw: (usize, usize),
) {
    match opset.ops[op].kind {
        OpKind::None | OpKind::Identity => {}
        OpKind::Conv { kernel, dilation } => {
            let g = b.fresh_group();
            b.conv(width, width, kernel, 1, dilation, 1, hw, g);
        }
        OpKind::SepConv { kernel } => {
            let g1 = b.fresh_group();
            b.conv(width, width, kernel, 1, 1, width, hw, g1);
            let g2 = b.fresh_group();
            b.conv(width, width, 1, 1, 1, 1, hw, g2);
        }
    }
}

fn sketch_genotype(
    b: &mut SketchBuilder,
    opset: &CandidateOpSet,
    geno: &Genotype,
    hw: (usize, usize),
) {
    for node in &geno.nodes {
        for e in &node.inputs {
            sketch_op(b, opset, e.op, geno.width, hw);
        }
    }
    let g = b.fresh_group();
    b.conv(geno.concat_width(), geno.width, 1, 1, 1, 1, hw, g);
}

/// Full dual-shot sketch mirroring `Detector`: backbone, laterals, the
/// enhance stage, and the shared heads applied to both pyramids.
pub fn detector_sketch(
    cfg: &DetectorConfig,
    bundle: &AutoFemBundle,
    opset: &CandidateOpSet,
) -> Result<NetSketch> {
    cfg.validate()?;
    bundle.validate(opset)?;
    if bundle.width != cfg.width {
        return Err(Error::config("bundle width != detector width"));
    }
    let mut b = SketchBuilder::new();
    let res = cfg.resolution;
    let bb = &cfg.backbone;

    // backbone
    let g = b.fresh_group();
    let mut hw = b.conv(bb.in_channels, bb.stem_width, 3, 2, 1, 1, (res, res), g);
    let mut prev = bb.stem_width;
    let mut level_hw = Vec::new();
    for s in 0..PYRAMID_LEVELS {
        let w = bb.stage_widths[s];
        let g = b.fresh_group();
        hw = b.conv(prev, w, 3, 2, 1, 1, hw, g);
        for _ in 1..bb.stage_depths[s] {
            let g = b.fresh_group();
            hw = b.conv(w, w, 3, 1, 1, 1, hw, g);
        }
        level_hw.push(hw);
        prev = w;
    }

    // lateral projections to pyramid width
    for s in 0..PYRAMID_LEVELS {
        let g = b.fresh_group();
        b.conv(bb.stage_widths[s], cfg.width, 1, 1, 1, 1, level_hw[s], g);
    }

    // cross-scale fusion
    for (level, conns) in bundle.fpn_spec.connections.iter().enumerate() {
        for c in conns {
            match c.kind {
                ConnKind::Lateral => {
                    let g = b.fresh_group();
                    b.conv(cfg.width, cfg.width, 1, 1, 1, 1, level_hw[level], g);
                }
                ConnKind::TopDown => {
                    // nearest upsample is free; op runs at the target size
                    sketch_op(&mut b, opset, c.op, cfg.width, level_hw[level]);
                }
                ConnKind::BottomUp => {
                    let g = b.fresh_group();
                    b.conv(cfg.width, cfg.width, 3, 2, 1, 1, level_hw[level - 1], g);
                    sketch_op(&mut b, opset, c.op, cfg.width, level_hw[level]);
                }
            }
        }
    }

    // per-level context cells
    for (level, geno) in bundle.cpm_genotypes.iter().enumerate() {
        sketch_genotype(&mut b, opset, geno, level_hw[level]);
    }

    // shared heads: params once, applications 6 levels x 2 shots
    let head_groups: Vec<usize> = (0..cfg.head.depth).map(|_| b.fresh_group()).collect();
    let cls_group = b.fresh_group();
    let reg_group = b.fresh_group();
    for _shot in 0..2 {
        for &lhw in &level_hw {
            let mut cin = cfg.width;
            let mut hhw = lhw;
            for &hg in &head_groups {
                hhw = b.conv(cin, cfg.head.width, 3, 1, 1, 1, hhw, hg);
                cin = cfg.head.width;
            }
            b.conv(cin, cfg.embed_dim, 3, 1, 1, 1, hhw, cls_group);
            b.conv(cin, 4, 3, 1, 1, 1, hhw, reg_group);
        }
    }

    b.sketch.misc_params.push(2 * cfg.embed_dim);
    Ok(b.sketch)
}

/// Config-exposed compound growth coefficients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScaleCoeffs {
    pub base_resolution: usize,
    pub base_width: usize,
    pub base_backbone_width: usize,
    pub base_head_width: usize,
    /// Per-phi geometric width multiplier.
    pub width_growth: f64,
    /// Head depth grows by one every `head_depth_every` steps of phi.
    pub head_depth_every: u32,
    /// Backbone stage depth grows by one every this many steps.
    pub backbone_depth_every: u32,
    /// Resolution gains one base step every this many steps.
    pub resolution_every: u32,
}

impl Default for ScaleCoeffs {
    fn default() -> Self {
        Self {
            base_resolution: 128,
            base_width: 16,
            base_backbone_width: 16,
            base_head_width: 16,
            width_growth: 1.45,
            head_depth_every: 2,
            backbone_depth_every: 3,
            resolution_every: 2,
        }
    }
}

pub const MAX_PHI: u32 = 6;

/// One member of the scaled family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub phi: u32,
    pub resolution: usize,
    pub backbone_width: usize,
    pub backbone_depth: usize,
    pub width: usize,
    pub fem_repeats: usize,
    pub head_depth: usize,
    pub head_width: usize,
}

fn round8_up(x: f64) -> usize {
    ((x / 8.0).ceil() as usize).max(1) * 8
}

pub fn scale_config_with(phi: u32, c: &ScaleCoeffs) -> Result<ScaleConfig> {
    if phi > MAX_PHI {
        return Err(Error::config(format!("phi {phi} out of range 0..={MAX_PHI}")));
    }
    let grow = c.width_growth.powi(phi as i32);
    Ok(ScaleConfig {
        phi,
        resolution: c.base_resolution * (1 + (phi / c.resolution_every) as usize),
        backbone_width: round8_up(c.base_backbone_width as f64 * grow),
        backbone_depth: 1 + (phi / c.backbone_depth_every) as usize,
        width: round8_up(c.base_width as f64 * grow),
        fem_repeats: 1,
        head_depth: 1 + (phi / c.head_depth_every) as usize,
        head_width: round8_up(c.base_head_width as f64 * grow),
    })
}

pub fn scale_config(phi: u32) -> Result<ScaleConfig> {
    scale_config_with(phi, &ScaleCoeffs::default())
}

/// All seven family members D0-D6.
pub fn family(c: &ScaleCoeffs) -> Vec<ScaleConfig> {
    (0..=MAX_PHI).map(|p| scale_config_with(p, c).unwrap()).collect()
}

impl ScaleConfig {
    pub fn to_detector_config(&self, in_channels: usize) -> DetectorConfig {
        DetectorConfig {
            resolution: self.resolution,
            backbone: BackboneSpec {
                in_channels,
                stem_width: round8_up(self.backbone_width as f64 / 2.0),
                stage_widths: [self.backbone_width; PYRAMID_LEVELS],
                stage_depths: [self.backbone_depth; PYRAMID_LEVELS],
            },
            width: self.width,
            head: HeadSpec {
                depth: self.head_depth,
                width: self.head_width,
            },
            embed_dim: self.head_width,
            anchor_scale: 4.0,
        }
    }
}

/// Default enhance-stage wiring for a family member when no searched
/// bundle is supplied: plain FPN plus a 2-node conv/skip chain cell.
pub fn default_bundle(width: usize, opset: &CandidateOpSet) -> AutoFemBundle {
    let conv = opset
        .ops
        .iter()
        .position(|d| matches!(d.kind, OpKind::Conv { kernel: 3, dilation: 1 }))
        .expect("standard set has a 3x3 conv");
    let skip = opset.identity_index().expect("standard set has identity");
    let geno = Genotype::default_chain(CellKind::Cpm, 2, width, OutputRule::CatAll, conv, skip);
    AutoFemBundle::new(
        FpnCellSpec::plain_fpn(opset),
        (0..PYRAMID_LEVELS).map(|_| geno.clone()).collect(),
        width,
        opset.signature(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub params: u64,
    pub flops: u64,
    pub latency_ms: Option<f64>,
    pub hardware: Option<String>,
}

pub fn cost_report(
    name: &str,
    cfg: &DetectorConfig,
    bundle: &AutoFemBundle,
    opset: &CandidateOpSet,
) -> Result<CostReport> {
    let sketch = detector_sketch(cfg, bundle, opset)?;
    Ok(CostReport {
        model: name.to_string(),
        params: sketch.count_params(),
        flops: sketch.count_flops(),
        latency_ms: None,
        hardware: None,
    })
}

pub fn hardware_descriptor() -> String {
    format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

/// Median wall-clock per single-image inference after warmup.
pub fn latency_bench(
    det: &Detector,
    params: &Params,
    opset: &CandidateOpSet,
    warmup_iters: usize,
    timed_iters: usize,
) -> Result<f64> {
    if timed_iters == 0 {
        return Err(Error::config("timed_iters must be >= 1"));
    }
    let res = det.cfg.resolution;
    let image = Array3::<f32>::zeros((det.cfg.backbone.in_channels, res, res)).into_dyn();
    let nms = NmsConfig::default();
    for _ in 0..warmup_iters {
        detect_image(det, params, opset, image.clone(), &nms, 30.0)?;
    }
    let mut times = Vec::with_capacity(timed_iters);
    for _ in 0..timed_iters {
        let t0 = std::time::Instant::now();
        detect_image(det, params, opset, image.clone(), &nms, 30.0)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = times.len();
    Ok(if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    })
}
