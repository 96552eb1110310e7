//! Feature-enhance stages: a searchable cross-scale fusion layer over the
//! six pyramid levels, a per-level context cell bank, and the plain-FPN
//! baseline used by the ablation harness.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::nas::{
    apply_op, init_op_params, mixed_edge_forward, CandidateOpSet, DerivedCell, Genotype,
    OpParams,
};
use crate::nn::{conv_init, identity_conv_init, vec_init, ParamId, Params};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PYRAMID_LEVELS: usize = 6;
pub const STRIDES: [usize; PYRAMID_LEVELS] = [4, 8, 16, 32, 64, 128];

/// Spatial side length of each pyramid level for a square input.
pub fn level_sizes(resolution: usize) -> [usize; PYRAMID_LEVELS] {
    let mut out = [0; PYRAMID_LEVELS];
    for (i, s) in STRIDES.iter().enumerate() {
        out[i] = resolution / s;
    }
    out
}

/// Six feature maps of common width, strides 4..128.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<VarId>,
    pub width: usize,
}

impl FeaturePyramid {
    pub fn validate(&self, g: &Graph) -> Result<()> {
        if self.levels.len() != PYRAMID_LEVELS {
            return Err(Error::shape(format!(
                "pyramid has {} levels, expected {PYRAMID_LEVELS}",
                self.levels.len()
            )));
        }
        let mut prev_hw: Option<(usize, usize)> = None;
        for (i, &id) in self.levels.iter().enumerate() {
            let m = g.map(id);
            let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
            if c != self.width {
                return Err(Error::shape(format!(
                    "level {i} width {c} != pyramid width {}",
                    self.width
                )));
            }
            if let Some((ph, pw)) = prev_hw {
                if ph != 2 * h || pw != 2 * w {
                    return Err(Error::shape(format!(
                        "level {i} size {h}x{w} is not half of previous {ph}x{pw}"
                    )));
                }
            }
            prev_hw = Some((h, w));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnKind {
    Lateral,
    TopDown,
    BottomUp,
}

/// One fusion input for an output level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpnConn {
    pub source: usize,
    pub kind: ConnKind,
    /// Index into the candidate op set (ignored for laterals, which are
    /// always the linear 1x1).
    pub op: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
}

/// Per-level fusion wiring for the cross-scale layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpnCellSpec {
    pub connections: Vec<Vec<FpnConn>>,
    pub aggregation: Aggregation,
}

impl FpnCellSpec {
    pub fn validate(&self, opset: &CandidateOpSet) -> Result<()> {
        if self.connections.len() != PYRAMID_LEVELS {
            return Err(Error::config(format!(
                "fpn spec has {} levels, expected {PYRAMID_LEVELS}",
                self.connections.len()
            )));
        }
        let c1x1 = opset
            .conv1x1_index()
            .ok_or_else(|| Error::config("op set lacks a 1x1 conv"))?;
        for (level, conns) in self.connections.iter().enumerate() {
            if conns.is_empty() {
                return Err(Error::config(format!("level {level} has no sources")));
            }
            for c in conns {
                let expect = match c.kind {
                    ConnKind::Lateral => level as isize,
                    ConnKind::TopDown => level as isize + 1,
                    ConnKind::BottomUp => level as isize - 1,
                };
                if c.source as isize != expect || c.source >= PYRAMID_LEVELS {
                    return Err(Error::config(format!(
                        "level {level}: source {} invalid for {:?} (neighbors only)",
                        c.source, c.kind
                    )));
                }
                if c.kind == ConnKind::Lateral && c.op != c1x1 {
                    return Err(Error::config(format!(
                        "level {level}: lateral connections must use the 1x1 op"
                    )));
                }
                if c.op >= opset.len() {
                    return Err(Error::config(format!(
                        "level {level}: op index {} out of range",
                        c.op
                    )));
                }
            }
        }
        Ok(())
    }

    /// Lateral-only wiring; with identity-initialized laterals the layer
    /// is the identity map.
    pub fn lateral_only(opset: &CandidateOpSet) -> Self {
        let c1x1 = opset.conv1x1_index().expect("standard op set has 1x1");
        Self {
            connections: (0..PYRAMID_LEVELS)
                .map(|l| {
                    vec![FpnConn {
                        source: l,
                        kind: ConnKind::Lateral,
                        op: c1x1,
                    }]
                })
                .collect(),
            aggregation: Aggregation::Sum,
        }
    }

    /// Classic FPN baseline: lateral 1x1 plus top-down identity sum.
    pub fn plain_fpn(opset: &CandidateOpSet) -> Self {
        let c1x1 = opset.conv1x1_index().expect("standard op set has 1x1");
        let ident = opset.identity_index().expect("standard op set has identity");
        Self {
            connections: (0..PYRAMID_LEVELS)
                .map(|l| {
                    let mut conns = vec![FpnConn {
                        source: l,
                        kind: ConnKind::Lateral,
                        op: c1x1,
                    }];
                    if l + 1 < PYRAMID_LEVELS {
                        conns.push(FpnConn {
                            source: l + 1,
                            kind: ConnKind::TopDown,
                            op: ident,
                        });
                    }
                    conns
                })
                .collect(),
            aggregation: Aggregation::Sum,
        }
    }

    /// Whether perturbing input level `from` can influence output level
    /// `to`, under the two-phase (top-down then bottom-up) evaluation.
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        // transitive closure over connection edges source -> level
        let mut reach = vec![false; PYRAMID_LEVELS];
        reach[from] = true;
        loop {
            let mut changed = false;
            for (level, conns) in self.connections.iter().enumerate() {
                if reach[level] {
                    continue;
                }
                if conns.iter().any(|c| reach[c.source]) {
                    reach[level] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        reach[to]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConnWeights {
    /// Stride-2 3x3 resampler, present for bottom-up connections.
    down_w: Option<ParamId>,
    op: OpParams,
}

/// Discretized cross-scale fusion layer with its own weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivedFpn {
    pub spec: FpnCellSpec,
    pub width: usize,
    lateral_w: Vec<ParamId>,
    conn_weights: Vec<Vec<Option<ConnWeights>>>,
}

impl DerivedFpn {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        opset: &CandidateOpSet,
        spec: FpnCellSpec,
        width: usize,
    ) -> Result<Self> {
        spec.validate(opset)?;
        let lateral_w = (0..PYRAMID_LEVELS)
            .map(|_| params.add(conv_init(rng, width, width, 1)))
            .collect();
        let conn_weights = spec
            .connections
            .iter()
            .map(|conns| {
                conns
                    .iter()
                    .map(|c| match c.kind {
                        ConnKind::Lateral => None,
                        ConnKind::TopDown => Some(ConnWeights {
                            down_w: None,
                            op: init_op_params(params, rng, &opset.ops[c.op], width),
                        }),
                        ConnKind::BottomUp => Some(ConnWeights {
                            down_w: Some(params.add(conv_init(rng, width, width, 3))),
                            op: init_op_params(params, rng, &opset.ops[c.op], width),
                        }),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            spec,
            width,
            lateral_w,
            conn_weights,
        })
    }

    /// Make every lateral projection the identity map.
    pub fn set_identity_laterals(&self, params: &mut Params) {
        for &id in &self.lateral_w {
            *params.get_mut(id) = identity_conv_init(self.width);
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.lateral_w.clone();
        for conns in &self.conn_weights {
            for cw in conns.iter().flatten() {
                if let Some(d) = cw.down_w {
                    ids.push(d);
                }
                collect_op_ids(&cw.op, &mut ids);
            }
        }
        ids
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        opset: &CandidateOpSet,
        pyr: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        if pyr.width != self.width {
            return Err(Error::shape(format!(
                "pyramid width {} != fpn width {}",
                pyr.width, self.width
            )));
        }
        pyr.validate(g)?;
        // phase 1: top-down sweep (laterals + top_down connections)
        let mut mid: Vec<Option<VarId>> = vec![None; PYRAMID_LEVELS];
        for level in (0..PYRAMID_LEVELS).rev() {
            let mut terms = Vec::new();
            for (ci, conn) in self.spec.connections[level].iter().enumerate() {
                match conn.kind {
                    ConnKind::Lateral => {
                        let w = g.param(params, self.lateral_w[level]);
                        terms.push(g.conv2d(pyr.levels[level], w, None, 1, 1, 1));
                    }
                    ConnKind::TopDown => {
                        let cw = self.conn_weights[level][ci].as_ref().unwrap();
                        let src = mid[level + 1].expect("upper level already computed");
                        let up = g.upsample2x(src);
                        terms.push(apply_op(g, params, up, &opset.ops[conn.op], &cw.op));
                    }
                    ConnKind::BottomUp => {}
                }
            }
            mid[level] = Some(match terms.len() {
                0 => {
                    let shape = g.value(pyr.levels[level]).shape().to_vec();
                    g.zeros(&shape)
                }
                1 => terms[0],
                _ => g.add_n(&terms),
            });
        }
        // phase 2: bottom-up sweep over final outputs
        let mut out: Vec<VarId> = Vec::with_capacity(PYRAMID_LEVELS);
        for level in 0..PYRAMID_LEVELS {
            let mut acc = mid[level].unwrap();
            for (ci, conn) in self.spec.connections[level].iter().enumerate() {
                if conn.kind != ConnKind::BottomUp {
                    continue;
                }
                let cw = self.conn_weights[level][ci].as_ref().unwrap();
                let dw = g.param(params, cw.down_w.unwrap());
                let down = g.conv2d(out[level - 1], dw, None, 2, 1, 1);
                let t = apply_op(g, params, down, &opset.ops[conn.op], &cw.op);
                acc = g.add(acc, t);
            }
            out.push(acc);
        }
        Ok(FeaturePyramid {
            levels: out,
            width: self.width,
        })
    }
}

fn mk_op_bank(
    params: &mut Params,
    rng: &mut impl Rng,
    opset: &CandidateOpSet,
    width: usize,
) -> Vec<OpParams> {
    opset
        .ops
        .iter()
        .map(|d| init_op_params(params, rng, d, width))
        .collect()
}

fn collect_op_ids(op: &OpParams, ids: &mut Vec<ParamId>) {
    match op {
        OpParams::NoParams => {}
        OpParams::Conv { w } => ids.push(*w),
        OpParams::Sep { dw, pw } => {
            ids.push(*dw);
            ids.push(*pw);
        }
    }
}

/// Relaxed cross-scale layer under search: one shared alpha per cross
/// direction, a beta over {lateral, top_down, bottom_up}, per-level op
/// weights at the sampled channel width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpnSearch {
    pub width: usize,
    pub channel_fraction: usize,
    pub alpha_td: ParamId,
    pub alpha_bu: ParamId,
    pub beta: ParamId,
    lateral_w: Vec<ParamId>,
    td_ops: Vec<Vec<OpParams>>,
    bu_down: Vec<Option<ParamId>>,
    bu_ops: Vec<Vec<OpParams>>,
    offsets: Vec<usize>,
    pub eval_count: usize,
}

impl FpnSearch {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        opset: &CandidateOpSet,
        width: usize,
        channel_fraction: usize,
    ) -> Result<Self> {
        if channel_fraction == 0 || width % channel_fraction != 0 {
            return Err(Error::config(format!(
                "channel fraction 1/{channel_fraction} does not divide width {width}"
            )));
        }
        let ck = width / channel_fraction;
        let alpha_td = params.add(vec_init(rng, opset.len(), 1e-3));
        let alpha_bu = params.add(vec_init(rng, opset.len(), 1e-3));
        let beta = params.add(vec_init(rng, 3, 1e-3));
        let lateral_w = (0..PYRAMID_LEVELS)
            .map(|_| params.add(conv_init(rng, width, width, 1)))
            .collect();
        let mut td_ops = Vec::new();
        let mut bu_down = Vec::new();
        let mut bu_ops = Vec::new();
        for level in 0..PYRAMID_LEVELS {
            td_ops.push(if level + 1 < PYRAMID_LEVELS {
                mk_op_bank(params, rng, opset, ck)
            } else {
                Vec::new()
            });
            if level > 0 {
                bu_down.push(Some(params.add(conv_init(rng, width, width, 3))));
                bu_ops.push(mk_op_bank(params, rng, opset, ck));
            } else {
                bu_down.push(None);
                bu_ops.push(Vec::new());
            }
        }
        Ok(Self {
            width,
            channel_fraction,
            alpha_td,
            alpha_bu,
            beta,
            lateral_w,
            td_ops,
            bu_down,
            bu_ops,
            offsets: vec![0; PYRAMID_LEVELS],
            eval_count: 0,
        })
    }

    pub fn arch_ids(&self) -> Vec<ParamId> {
        vec![self.alpha_td, self.alpha_bu, self.beta]
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids = self.lateral_w.clone();
        for ops in self.td_ops.iter().chain(&self.bu_ops) {
            for op in ops {
                collect_op_ids(op, &mut ids);
            }
        }
        for d in self.bu_down.iter().flatten() {
            ids.push(*d);
        }
        ids
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &Params,
        opset: &CandidateOpSet,
        pyr: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        if pyr.width != self.width {
            return Err(Error::shape("pyramid width != search width"));
        }
        pyr.validate(g)?;
        let sb = g.param(params, self.beta);
        let sb = g.softmax(sb);
        let mut mid: Vec<Option<VarId>> = vec![None; PYRAMID_LEVELS];
        for level in (0..PYRAMID_LEVELS).rev() {
            let off = self.offsets[level];
            self.offsets[level] += 1;
            let w = g.param(params, self.lateral_w[level]);
            let lat = g.conv2d(pyr.levels[level], w, None, 1, 1, 1);
            let mut terms = vec![g.pick_scale(lat, sb, 0)];
            if level + 1 < PYRAMID_LEVELS {
                let src = mid[level + 1].unwrap();
                let up = g.upsample2x(src);
                let td = mixed_edge_forward(
                    g,
                    params,
                    up,
                    self.alpha_td,
                    &self.td_ops[level],
                    opset,
                    self.channel_fraction,
                    off,
                    &mut self.eval_count,
                )?;
                terms.push(g.pick_scale(td, sb, 1));
            }
            mid[level] = Some(g.add_n(&terms));
        }
        let mut out: Vec<VarId> = Vec::with_capacity(PYRAMID_LEVELS);
        for level in 0..PYRAMID_LEVELS {
            let mut acc = mid[level].unwrap();
            if level > 0 {
                let dw = g.param(params, self.bu_down[level].unwrap());
                let down = g.conv2d(out[level - 1], dw, None, 2, 1, 1);
                let bu = mixed_edge_forward(
                    g,
                    params,
                    down,
                    self.alpha_bu,
                    &self.bu_ops[level],
                    opset,
                    self.channel_fraction,
                    self.offsets[level],
                    &mut self.eval_count,
                )?;
                let bu = g.pick_scale(bu, sb, 2);
                acc = g.add(acc, bu);
            }
            out.push(acc);
        }
        Ok(FeaturePyramid {
            levels: out,
            width: self.width,
        })
    }

    /// Discretize: laterals always kept; each cross direction kept at the
    /// levels where it exists unless `none` dominates its alpha.
    pub fn derive(&self, params: &Params, opset: &CandidateOpSet) -> Result<FpnCellSpec> {
        let c1x1 = opset
            .conv1x1_index()
            .ok_or_else(|| Error::config("op set lacks a 1x1 conv"))?;
        let pick = |pid: ParamId| -> Result<Option<usize>> {
            let a = params.get(pid);
            let a = a
                .as_slice()
                .ok_or_else(|| Error::runtime("alpha not contiguous"))?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::runtime("non-finite arch parameter"));
            }
            let best = (0..a.len())
                .max_by(|&i, &j| a[i].partial_cmp(&a[j]).unwrap().then(j.cmp(&i)))
                .unwrap();
            if Some(best) == opset.none_index() {
                return Ok(None);
            }
            let best_non_none = (0..a.len())
                .filter(|&i| Some(i) != opset.none_index())
                .max_by(|&i, &j| a[i].partial_cmp(&a[j]).unwrap().then(j.cmp(&i)))
                .unwrap();
            Ok(Some(best_non_none))
        };
        let td = pick(self.alpha_td)?;
        let bu = pick(self.alpha_bu)?;
        let connections = (0..PYRAMID_LEVELS)
            .map(|level| {
                let mut conns = vec![FpnConn {
                    source: level,
                    kind: ConnKind::Lateral,
                    op: c1x1,
                }];
                if level + 1 < PYRAMID_LEVELS {
                    if let Some(op) = td {
                        conns.push(FpnConn {
                            source: level + 1,
                            kind: ConnKind::TopDown,
                            op,
                        });
                    }
                }
                if level > 0 {
                    if let Some(op) = bu {
                        conns.push(FpnConn {
                            source: level - 1,
                            kind: ConnKind::BottomUp,
                            op,
                        });
                    }
                }
                conns
            })
            .collect();
        Ok(FpnCellSpec {
            connections,
            aggregation: Aggregation::Sum,
        })
    }
}

/// Six per-level context-cell genotypes of a common width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpmBank {
    pub genotypes: Vec<Genotype>,
}

impl CpmBank {
    pub fn validate(&self) -> Result<()> {
        if self.genotypes.len() != PYRAMID_LEVELS {
            return Err(Error::config(format!(
                "cpm bank has {} genotypes, expected {PYRAMID_LEVELS}",
                self.genotypes.len()
            )));
        }
        let width = self.genotypes[0].width;
        for (i, g) in self.genotypes.iter().enumerate() {
            g.validate()?;
            if g.cell_kind != crate::nas::CellKind::Cpm {
                return Err(Error::config(format!("genotype {i} is not a cpm cell")));
            }
            if g.width != width {
                return Err(Error::config(format!(
                    "genotype {i} width {} != bank width {width}",
                    g.width
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.genotypes[0].width
    }
}

/// Serialized search result: fused wiring plus the six cell genotypes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoFemBundle {
    pub version: u32,
    pub op_set_signature: String,
    pub fpn_spec: FpnCellSpec,
    pub cpm_genotypes: Vec<Genotype>,
    pub width: usize,
}

impl AutoFemBundle {
    pub fn new(
        fpn_spec: FpnCellSpec,
        cpm_genotypes: Vec<Genotype>,
        width: usize,
        op_set_signature: String,
    ) -> Self {
        Self {
            version: 1,
            op_set_signature,
            fpn_spec,
            cpm_genotypes,
            width,
        }
    }

    pub fn validate(&self, opset: &CandidateOpSet) -> Result<()> {
        if self.op_set_signature != opset.signature() {
            return Err(Error::config(
                "bundle op set signature does not match this build",
            ));
        }
        self.fpn_spec.validate(opset)?;
        let bank = CpmBank {
            genotypes: self.cpm_genotypes.clone(),
        };
        bank.validate()?;
        if bank.width() != self.width {
            return Err(Error::config("bundle width != genotype width"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path, opset: &CandidateOpSet) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let b: Self = serde_json::from_str(&s)?;
        b.validate(opset)?;
        Ok(b)
    }
}

/// Instantiated enhance stage: fusion layer cascaded into per-level cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoFem {
    pub fpn: DerivedFpn,
    pub cpms: Vec<DerivedCell>,
}

impl AutoFem {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        opset: &CandidateOpSet,
        bundle: &AutoFemBundle,
    ) -> Result<Self> {
        bundle.validate(opset)?;
        let fpn = DerivedFpn::new(params, rng, opset, bundle.fpn_spec.clone(), bundle.width)?;
        let cpms = bundle
            .cpm_genotypes
            .iter()
            .map(|g| DerivedCell::new(params, rng, opset, g.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { fpn, cpms })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fpn.param_ids();
        for c in &self.cpms {
            ids.extend(c.param_ids());
        }
        ids
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        opset: &CandidateOpSet,
        pyr: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        if self.cpms.len() != PYRAMID_LEVELS {
            return Err(Error::config("cpm bank size must be 6"));
        }
        let fused = self.fpn.forward(g, params, opset, pyr)?;
        let levels = fused
            .levels
            .iter()
            .zip(&self.cpms)
            .map(|(&x, cell)| cell.forward(g, params, opset, x))
            .collect();
        Ok(FeaturePyramid {
            levels,
            width: fused.width,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::{CellKind, GenoEdge, GenoNode, OutputRule};
    use ndarray::{Array3, ArrayD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn make_pyr(g: &mut Graph, rng: &mut ChaCha8Rng, width: usize, base: usize) -> FeaturePyramid {
        use rand::Rng;
        let levels = (0..PYRAMID_LEVELS)
            .map(|l| {
                let s = base >> l;
                let v = Array3::from_shape_fn((width, s, s), |_| rng.gen_range(-1.0f32..1.0));
                g.leaf(v.into_dyn())
            })
            .collect();
        FeaturePyramid { levels, width }
    }

    fn max_abs_diff(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f32 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn level_sizes_for_640_input() {
        assert_eq!(level_sizes(640), [160, 80, 40, 20, 10, 5]);
    }

    #[test]
    fn lateral_identity_wiring_is_identity() {
        let opset = CandidateOpSet::standard();
        let mut params = Params::new();
        let mut r = rng();
        let fpn = DerivedFpn::new(
            &mut params,
            &mut r,
            &opset,
            FpnCellSpec::lateral_only(&opset),
            4,
        )
        .unwrap();
        fpn.set_identity_laterals(&mut params);
        let mut g = Graph::new();
        let pyr = make_pyr(&mut g, &mut r, 4, 32);
        let out = fpn.forward(&mut g, &params, &opset, &pyr).unwrap();
        for (a, b) in pyr.levels.iter().zip(&out.levels) {
            assert!(max_abs_diff(g.value(*a), g.value(*b)) < 1e-6);
        }
    }

    #[test]
    fn plain_fpn_is_top_down_only() {
        let opset = CandidateOpSet::standard();
        let spec = FpnCellSpec::plain_fpn(&opset);
        spec.validate(&opset).unwrap();
        // classic chain: high levels reach low levels, never the reverse
        assert!(spec.reaches(5, 0));
        assert!(!spec.reaches(0, 3));

        let mut params = Params::new();
        let mut r = rng();
        let fpn = DerivedFpn::new(&mut params, &mut r, &opset, spec, 4).unwrap();
        let mut g = Graph::new();
        let pyr = make_pyr(&mut g, &mut r, 4, 32);
        let base_out = fpn.forward(&mut g, &params, &opset, &pyr).unwrap();
        // perturb level 0: outputs for levels >= 1 unchanged
        let mut g2 = Graph::new();
        let mut levels2 = Vec::new();
        for (l, &id) in pyr.levels.iter().enumerate() {
            let mut v = g.value(id).clone();
            if l == 0 {
                v += 1.0;
            }
            levels2.push(g2.leaf(v));
        }
        let pyr2 = FeaturePyramid { levels: levels2, width: 4 };
        let out2 = fpn.forward(&mut g2, &params, &opset, &pyr2).unwrap();
        for l in 1..PYRAMID_LEVELS {
            assert!(
                max_abs_diff(g.value(base_out.levels[l]), g2.value(out2.levels[l])) == 0.0,
                "level {l} affected by lower-level input"
            );
        }
        assert!(max_abs_diff(g.value(base_out.levels[0]), g2.value(out2.levels[0])) > 0.0);
        // perturb level 5: level 0 changes through the cascade
        let mut g3 = Graph::new();
        let levels3: Vec<VarId> = pyr
            .levels
            .iter()
            .enumerate()
            .map(|(l, &id)| {
                let mut v = g.value(id).clone();
                if l == 5 {
                    v += 1.0;
                }
                g3.leaf(v)
            })
            .collect();
        let pyr3 = FeaturePyramid { levels: levels3, width: 4 };
        let out3 = fpn.forward(&mut g3, &params, &opset, &pyr3).unwrap();
        assert!(max_abs_diff(g.value(base_out.levels[0]), g3.value(out3.levels[0])) > 0.0);
    }

    #[test]
    fn non_neighbor_source_rejected() {
        let opset = CandidateOpSet::standard();
        let mut spec = FpnCellSpec::lateral_only(&opset);
        spec.connections[0].push(FpnConn {
            source: 3,
            kind: ConnKind::TopDown,
            op: opset.identity_index().unwrap(),
        });
        assert!(matches!(spec.validate(&opset), Err(Error::Config(_))));
    }

    #[test]
    fn lateral_must_be_1x1() {
        let opset = CandidateOpSet::standard();
        let mut spec = FpnCellSpec::lateral_only(&opset);
        spec.connections[2][0].op = opset.identity_index().unwrap();
        assert!(matches!(spec.validate(&opset), Err(Error::Config(_))));
    }

    fn identity_genotype(width: usize) -> Genotype {
        Genotype {
            cell_kind: CellKind::Cpm,
            width,
            nodes: vec![GenoNode {
                id: 1,
                inputs: vec![GenoEdge {
                    input: 0,
                    op: CandidateOpSet::standard().identity_index().unwrap(),
                }],
            }],
            output_rule: OutputRule::CatLeaf,
        }
    }

    fn identity_autofem(params: &mut Params, r: &mut ChaCha8Rng, width: usize) -> AutoFem {
        let opset = CandidateOpSet::standard();
        let bundle = AutoFemBundle::new(
            FpnCellSpec::lateral_only(&opset),
            (0..PYRAMID_LEVELS).map(|_| identity_genotype(width)).collect(),
            width,
            opset.signature(),
        );
        let fem = AutoFem::new(params, r, &opset, &bundle).unwrap();
        fem.fpn.set_identity_laterals(params);
        for c in &fem.cpms {
            c.set_identity_proj(params).unwrap();
        }
        fem
    }

    #[test]
    fn identity_fpn_and_cpms_compose_to_identity() {
        let mut params = Params::new();
        let mut r = rng();
        let fem = identity_autofem(&mut params, &mut r, 4);
        let opset = CandidateOpSet::standard();
        let mut g = Graph::new();
        let pyr = make_pyr(&mut g, &mut r, 4, 32);
        let out = fem.forward(&mut g, &params, &opset, &pyr).unwrap();
        out.validate(&g).unwrap();
        for (a, b) in pyr.levels.iter().zip(&out.levels) {
            assert!(max_abs_diff(g.value(*a), g.value(*b)) < 1e-5);
        }
    }

    #[test]
    fn zeroing_unreachable_level_leaves_output_unchanged() {
        // lateral-only wiring: no path from level 5 to level 2
        let mut params = Params::new();
        let mut r = rng();
        let fem = identity_autofem(&mut params, &mut r, 4);
        assert!(!fem.fpn.spec.reaches(5, 2));
        let opset = CandidateOpSet::standard();
        let mut g = Graph::new();
        let pyr = make_pyr(&mut g, &mut r, 4, 32);
        let out = fem.forward(&mut g, &params, &opset, &pyr).unwrap();
        let mut g2 = Graph::new();
        let levels2: Vec<VarId> = pyr
            .levels
            .iter()
            .enumerate()
            .map(|(l, &id)| {
                if l == 5 {
                    g2.zeros(g.value(id).shape())
                } else {
                    g2.leaf(g.value(id).clone())
                }
            })
            .collect();
        let pyr2 = FeaturePyramid { levels: levels2, width: 4 };
        let out2 = fem.forward(&mut g2, &params, &opset, &pyr2).unwrap();
        assert_eq!(
            max_abs_diff(g.value(out.levels[2]), g2.value(out2.levels[2])),
            0.0
        );
    }

    #[test]
    fn random_fpn_preserves_width_and_strides() {
        let opset = CandidateOpSet::standard();
        let mut params = Params::new();
        let mut r = rng();
        // full wiring: lateral + both cross directions where available
        let c1x1 = opset.conv1x1_index().unwrap();
        let connections = (0..PYRAMID_LEVELS)
            .map(|l| {
                let mut conns = vec![FpnConn { source: l, kind: ConnKind::Lateral, op: c1x1 }];
                if l + 1 < PYRAMID_LEVELS {
                    conns.push(FpnConn { source: l + 1, kind: ConnKind::TopDown, op: 3 });
                }
                if l > 0 {
                    conns.push(FpnConn { source: l - 1, kind: ConnKind::BottomUp, op: 6 });
                }
                conns
            })
            .collect();
        let spec = FpnCellSpec { connections, aggregation: Aggregation::Sum };
        let fpn = DerivedFpn::new(&mut params, &mut r, &opset, spec, 4).unwrap();
        let mut g = Graph::new();
        let pyr = make_pyr(&mut g, &mut r, 4, 32);
        let out = fpn.forward(&mut g, &params, &opset, &pyr).unwrap();
        out.validate(&g).unwrap();
        for (l, &id) in out.levels.iter().enumerate() {
            assert_eq!(g.map(id).shape(), g.map(pyr.levels[l]).shape());
        }
    }

    #[test]
    fn search_forward_and_saturated_derive() {
        let opset = CandidateOpSet::standard();
        let mut params = Params::new();
        let mut r = rng();
        let mut search = FpnSearch::new(&mut params, &mut r, &opset, 4, 2).unwrap();
        let mut g = Graph::new();
        let pyr = make_pyr(&mut g, &mut r, 4, 32);
        let out = search.forward(&mut g, &params, &opset, &pyr).unwrap();
        out.validate(&g).unwrap();
        assert!(search.eval_count > 0);
        crate::nn::assert_disjoint(&search.arch_ids(), &search.weight_ids()).unwrap();

        // saturate: top-down -> 3x3 conv, bottom-up -> none (dropped)
        params.get_mut(search.alpha_td).fill(0.0);
        params.get_mut(search.alpha_td)[3] = 10.0;
        params.get_mut(search.alpha_bu).fill(0.0);
        params.get_mut(search.alpha_bu)[opset.none_index().unwrap()] = 10.0;
        let spec = search.derive(&params, &opset).unwrap();
        spec.validate(&opset).unwrap();
        for (l, conns) in spec.connections.iter().enumerate() {
            let td: Vec<_> = conns.iter().filter(|c| c.kind == ConnKind::TopDown).collect();
            if l + 1 < PYRAMID_LEVELS {
                assert_eq!(td.len(), 1);
                assert_eq!(td[0].op, 3);
            } else {
                assert!(td.is_empty());
            }
            assert!(conns.iter().all(|c| c.kind != ConnKind::BottomUp));
        }
    }

    #[test]
    fn bundle_roundtrip_and_signature_check() {
        let opset = CandidateOpSet::standard();
        let bundle = AutoFemBundle::new(
            FpnCellSpec::plain_fpn(&opset),
            (0..PYRAMID_LEVELS).map(|_| identity_genotype(8)).collect(),
            8,
            opset.signature(),
        );
        let dir = std::env::temp_dir().join("autofem_bundle_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bundle.json");
        bundle.save(&path).unwrap();
        let loaded = AutoFemBundle::load(&path, &opset).unwrap();
        assert_eq!(loaded.fpn_spec, bundle.fpn_spec);
        assert_eq!(loaded.width, 8);

        let mut bad = bundle.clone();
        bad.op_set_signature = "deadbeef".into();
        bad.save(&path).unwrap();
        assert!(matches!(
            AutoFemBundle::load(&path, &opset),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_cpm_bank_rejected() {
        let bank = CpmBank {
            genotypes: (0..4).map(|_| identity_genotype(8)).collect(),
        };
        assert!(matches!(bank.validate(), Err(Error::Config(_))));
    }

    fn footprint_radius(v: &ArrayD<f32>, cy: usize, cx: usize) -> usize {
        let m = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut r = 0;
        for c in 0..m.shape()[0] {
            for y in 0..m.shape()[1] {
                for x in 0..m.shape()[2] {
                    if m[[c, y, x]].abs() > 1e-7 {
                        r = r.max(cy.abs_diff(y).max(cx.abs_diff(x)));
                    }
                }
            }
        }
        r
    }

    #[test]
    fn dilated_cell_widens_receptive_field() {
        let opset = CandidateOpSet::standard();
        let mut params = Params::new();
        let mut r = rng();
        let dilated = Genotype {
            cell_kind: CellKind::Cpm,
            width: 4,
            nodes: vec![GenoNode {
                id: 1,
                inputs: vec![GenoEdge { input: 0, op: 5 }], // 3x3 dilation 3
            }],
            output_rule: OutputRule::CatLeaf,
        };
        let dcell = DerivedCell::new(&mut params, &mut r, &opset, dilated).unwrap();
        let icell = DerivedCell::new(&mut params, &mut r, &opset, identity_genotype(4)).unwrap();
        let mut g = Graph::new();
        let mut imp = Array3::<f32>::zeros((4, 17, 17));
        imp[[0, 8, 8]] = 1.0;
        let x = g.leaf(imp.into_dyn());
        let dy = dcell.forward(&mut g, &params, &opset, x);
        let iy = icell.forward(&mut g, &params, &opset, x);
        let dr = footprint_radius(g.value(dy), 8, 8);
        let ir = footprint_radius(g.value(iy), 8, 8);
        assert!(dr > ir, "dilated radius {dr} vs identity radius {ir}");
        assert_eq!(ir, 0);
        assert!(dr >= 3);
    }
}
