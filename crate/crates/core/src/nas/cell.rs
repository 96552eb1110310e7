//! Relaxed cells: mixed-op edges with partial-channel sampling, the
//! single-path highest-weight forward, and discretization into genotypes.

use super::genotype::{CellKind, GenoEdge, GenoNode, Genotype, OutputRule};
use super::ops::{apply_op, init_op_params, CandidateOpSet, OpKind, OpParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::nn::{conv_init, ParamId, Params};
use ndarray::{Array1, Ix1};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Cell DAG shape: node i (0-based) receives candidate edges from the
/// cell input (id 0) and every earlier node, i+1 edges in total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CellTopology {
    pub n_nodes: usize,
}

impl CellTopology {
    pub fn n_edges(&self, node: usize) -> usize {
        node + 1
    }
}

/// Architecture parameter ids: one alpha vector per edge, one beta vector
/// per node over its incoming edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellArch {
    pub alpha: Vec<Vec<ParamId>>,
    pub beta: Vec<ParamId>,
}

impl CellArch {
    pub fn init(params: &mut Params, topo: CellTopology, n_ops: usize) -> Self {
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for node in 0..topo.n_nodes {
            let edges = topo.n_edges(node);
            alpha.push(
                (0..edges)
                    .map(|_| params.add(Array1::<f32>::zeros(n_ops).into_dyn()))
                    .collect(),
            );
            beta.push(params.add(Array1::<f32>::zeros(edges).into_dyn()));
        }
        Self { alpha, beta }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.alpha
            .iter()
            .flatten()
            .copied()
            .chain(self.beta.iter().copied())
            .collect()
    }

    pub fn snapshot(&self, params: &Params) -> ArchSnapshot {
        let take = |id: &ParamId| {
            params
                .get(*id)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        };
        ArchSnapshot {
            alpha: self
                .alpha
                .iter()
                .map(|es| es.iter().map(take).collect())
                .collect(),
            beta: self.beta.iter().map(take).collect(),
        }
    }
}

/// Plain-array view of the architecture weights, used for derivation and
/// logging without touching the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSnapshot {
    pub alpha: Vec<Vec<Array1<f32>>>,
    pub beta: Vec<Array1<f32>>,
}

pub fn softmax_arr(x: &Array1<f32>) -> Array1<f32> {
    let m = x.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

impl ArchSnapshot {
    /// Shannon entropy (nats) of every edge's op mixture, flattened.
    pub fn alpha_entropies(&self) -> Vec<f32> {
        self.alpha
            .iter()
            .flatten()
            .map(|a| {
                softmax_arr(a)
                    .iter()
                    .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                    .sum()
            })
            .collect()
    }
}

/// How a relaxed cell is evaluated during search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Full weighted mixture over all ops of all edges (DARTS-style).
    Mixed,
    /// Only the highest-weight (edge, op) pair per node.
    SinglePath,
}

/// Weighted op mixture on sampled channels, untouched bypass for the
/// rest, and a rotating channel shuffle so the sampled window moves
/// across calls.
#[allow(clippy::too_many_arguments)]
pub fn mixed_edge_forward(
    g: &mut Graph,
    params: &Params,
    x: VarId,
    alpha: ParamId,
    edge_ops: &[OpParams],
    opset: &CandidateOpSet,
    channel_fraction: usize,
    shuffle_offset: usize,
    eval_count: &mut usize,
) -> Result<VarId> {
    let c = g.value(x).shape()[0];
    let k = channel_fraction;
    if k == 0 || c % k != 0 {
        return Err(Error::config(format!(
            "channel fraction 1/{k} does not divide width {c}"
        )));
    }
    if params.get(alpha).len() != opset.len() || edge_ops.len() != opset.len() {
        return Err(Error::shape(format!(
            "alpha/op-param length must equal |ops| = {}",
            opset.len()
        )));
    }
    let ck = c / k;
    let (xs, bypass, perm) = if k == 1 {
        (x, None, None)
    } else {
        let start = (shuffle_offset * ck) % c;
        let perm: Vec<usize> = (0..c).map(|i| (start + i) % c).collect();
        let xr = g.permute_ch(x, perm.clone());
        let xs = g.slice_ch(xr, 0, ck);
        let byp = g.slice_ch(xr, ck, c - ck);
        (xs, Some(byp), Some(perm))
    };

    let sa = g.param(params, alpha);
    let sa = g.softmax(sa);
    let mut terms = Vec::new();
    for (o, desc) in opset.ops.iter().enumerate() {
        if desc.kind == OpKind::None {
            continue;
        }
        let out = apply_op(g, params, xs, desc, &edge_ops[o]);
        *eval_count += 1;
        terms.push(g.pick_scale(out, sa, o));
    }
    let mixed = if terms.is_empty() {
        let shape: Vec<usize> = g.value(xs).shape().to_vec();
        g.zeros(&shape)
    } else {
        g.add_n(&terms)
    };
    match (bypass, perm) {
        (Some(byp), Some(perm)) => {
            let cat = g.concat_ch(&[mixed, byp]);
            let mut inv = vec![0usize; c];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            Ok(g.permute_ch(cat, inv))
        }
        _ => Ok(mixed),
    }
}

/// Argmax of softmax(beta)_e * softmax(alpha_e)_o with deterministic
/// tie-break: lowest edge index, then lowest op index.
pub fn single_path_choice(alphas: &[Array1<f32>], beta: &Array1<f32>) -> (usize, usize) {
    let sb = softmax_arr(beta);
    let mut best = (0usize, 0usize);
    let mut best_w = f32::NEG_INFINITY;
    for (e, a) in alphas.iter().enumerate() {
        let sa = softmax_arr(a);
        for (o, &w) in sa.iter().enumerate() {
            let prod = sb[e] * w;
            if prod > best_w {
                best_w = prod;
                best = (e, o);
            }
        }
    }
    best
}

/// Evaluate exactly one (edge, op) pair for a node: the highest-weight
/// one, scaled by its (differentiable) mixture weight. Partial-channel
/// sampling applies around the chosen op like in mixed mode.
#[allow(clippy::too_many_arguments)]
pub fn single_path_forward(
    g: &mut Graph,
    params: &Params,
    inputs: &[VarId],
    alpha: &[ParamId],
    beta: ParamId,
    edge_ops: &[Vec<OpParams>],
    opset: &CandidateOpSet,
    channel_fraction: usize,
    shuffle_offset: usize,
    eval_count: &mut usize,
) -> Result<VarId> {
    if inputs.len() != alpha.len() || inputs.len() != edge_ops.len() {
        return Err(Error::shape("inputs/alpha/op-params length mismatch"));
    }
    let alphas: Vec<Array1<f32>> = alpha
        .iter()
        .map(|id| {
            params
                .get(*id)
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned()
        })
        .collect();
    let beta_v = params
        .get(beta)
        .view()
        .into_dimensionality::<Ix1>()
        .unwrap()
        .to_owned();
    if !alphas.iter().all(|a| a.iter().all(|v| v.is_finite()))
        || !beta_v.iter().all(|v| v.is_finite())
    {
        return Err(Error::runtime("non-finite architecture weights"));
    }
    let (e, o) = single_path_choice(&alphas, &beta_v);

    let x = inputs[e];
    let c = g.value(x).shape()[0];
    let k = channel_fraction;
    if k == 0 || c % k != 0 {
        return Err(Error::config(format!(
            "channel fraction 1/{k} does not divide width {c}"
        )));
    }
    let ck = c / k;
    let (xs, bypass, perm) = if k == 1 {
        (x, None, None)
    } else {
        let start = (shuffle_offset * ck) % c;
        let perm: Vec<usize> = (0..c).map(|i| (start + i) % c).collect();
        let xr = g.permute_ch(x, perm.clone());
        let xs = g.slice_ch(xr, 0, ck);
        let byp = g.slice_ch(xr, ck, c - ck);
        (xs, Some(byp), Some(perm))
    };

    let out = apply_op(g, params, xs, &opset.ops[o], &edge_ops[e][o]);
    *eval_count += 1;
    let sa = g.param(params, alpha[e]);
    let sa = g.softmax(sa);
    let sb = g.param(params, beta);
    let sb = g.softmax(sb);
    let scaled = g.pick_scale(out, sa, o);
    let scaled = g.pick_scale(scaled, sb, e);
    match (bypass, perm) {
        (Some(byp), Some(perm)) => {
            let cat = g.concat_ch(&[scaled, byp]);
            let mut inv = vec![0usize; c];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            Ok(g.permute_ch(cat, inv))
        }
        _ => Ok(scaled),
    }
}

/// Keep the `retain_k` strongest incoming edges per node by edge
/// normalization weight softmax(beta)_e, each with its best (argmax)
/// non-none op.
pub fn derive_genotype(
    snap: &ArchSnapshot,
    opset: &CandidateOpSet,
    retain_k: usize,
    output_rule: OutputRule,
    cell_kind: CellKind,
    width: usize,
) -> Result<Genotype> {
    if retain_k == 0 {
        return Err(Error::config("retain_k must be >= 1"));
    }
    let none = opset.none_index();
    let mut nodes = Vec::new();
    for (i, (alphas, beta)) in snap.alpha.iter().zip(&snap.beta).enumerate() {
        let sb = softmax_arr(beta);
        // Edge ranking uses softmax(beta) alone so the result is invariant
        // to positive scaling and shift of alpha; the op on each kept edge
        // is the argmax non-none alpha entry.
        let mut scored: Vec<(f32, usize, usize)> = Vec::new();
        for (e, a) in alphas.iter().enumerate() {
            let mut best_op = None;
            let mut best_w = f32::NEG_INFINITY;
            for (o, &w) in a.iter().enumerate() {
                if Some(o) == none {
                    continue;
                }
                if w > best_w {
                    best_w = w;
                    best_op = Some(o);
                }
            }
            let op = best_op.ok_or_else(|| Error::config("op set has only a none op"))?;
            scored.push((sb[e], e, op));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let keep = retain_k.min(scored.len());
        let mut inputs: Vec<GenoEdge> = scored[..keep]
            .iter()
            .map(|&(_, e, op)| GenoEdge { input: e, op })
            .collect();
        inputs.sort_by_key(|e| e.input);
        nodes.push(GenoNode { id: i + 1, inputs });
    }
    let g = Genotype {
        cell_kind,
        width,
        nodes,
        output_rule,
    };
    g.validate()?;
    Ok(g)
}

/// Concatenate the rule-selected node outputs and project back to cell
/// width with a linear 1x1 conv.
pub fn cell_output(
    g: &mut Graph,
    params: &Params,
    node_outputs: &[VarId],
    genotype: &Genotype,
    proj_w: ParamId,
) -> VarId {
    let outs = genotype.output_nodes();
    assert!(!outs.is_empty(), "empty output set");
    let selected: Vec<VarId> = outs.iter().map(|&id| node_outputs[id - 1]).collect();
    let cat = g.concat_ch(&selected);
    let w = g.param(params, proj_w);
    g.conv2d(cat, w, None, 1, 1, 1)
}

/// A relaxed cell under search: arch parameters, per-edge op weights at
/// sampled width, and a concat-all output projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchCell {
    pub kind: CellKind,
    pub topo: CellTopology,
    pub width: usize,
    pub channel_fraction: usize,
    pub arch: CellArch,
    edge_ops: Vec<Vec<Vec<OpParams>>>,
    pub proj_w: ParamId,
    offsets: Vec<Vec<usize>>,
    pub eval_count: usize,
}

impl SearchCell {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        opset: &CandidateOpSet,
        kind: CellKind,
        n_nodes: usize,
        width: usize,
        channel_fraction: usize,
    ) -> Result<Self> {
        if channel_fraction == 0 || width % channel_fraction != 0 {
            return Err(Error::config(format!(
                "channel fraction 1/{channel_fraction} does not divide width {width}"
            )));
        }
        let topo = CellTopology { n_nodes };
        let arch = CellArch::init(params, topo, opset.len());
        let ck = width / channel_fraction;
        let mut edge_ops = Vec::new();
        let mut offsets = Vec::new();
        for node in 0..n_nodes {
            let edges = topo.n_edges(node);
            edge_ops.push(
                (0..edges)
                    .map(|_| {
                        opset
                            .ops
                            .iter()
                            .map(|d| init_op_params(params, rng, d, ck))
                            .collect()
                    })
                    .collect(),
            );
            offsets.push(vec![0usize; edges]);
        }
        let proj_w = params.add(conv_init(rng, width, n_nodes * width, 1));
        Ok(Self {
            kind,
            topo,
            width,
            channel_fraction,
            arch,
            edge_ops,
            proj_w,
            offsets,
            eval_count: 0,
        })
    }

    /// Ids of the op weights and projection (the "weight" parameter set).
    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj_w];
        for node in &self.edge_ops {
            for edge in node {
                for op in edge {
                    match op {
                        OpParams::NoParams => {}
                        OpParams::Conv { w } => ids.push(*w),
                        OpParams::Sep { dw, pw } => {
                            ids.push(*dw);
                            ids.push(*pw);
                        }
                    }
                }
            }
        }
        ids
    }

    pub fn reset_eval_count(&mut self) {
        self.eval_count = 0;
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &Params,
        opset: &CandidateOpSet,
        x: VarId,
        mode: EvalMode,
    ) -> Result<VarId> {
        let mut states = vec![x];
        for node in 0..self.topo.n_nodes {
            let inputs: Vec<VarId> = states.clone();
            let out = match mode {
                EvalMode::Mixed => {
                    let sb = g.param(params, self.arch.beta[node]);
                    let sb = g.softmax(sb);
                    let mut terms = Vec::new();
                    for e in 0..self.topo.n_edges(node) {
                        let off = self.offsets[node][e];
                        self.offsets[node][e] += 1;
                        let edge_out = mixed_edge_forward(
                            g,
                            params,
                            inputs[e],
                            self.arch.alpha[node][e],
                            &self.edge_ops[node][e],
                            opset,
                            self.channel_fraction,
                            off,
                            &mut self.eval_count,
                        )?;
                        terms.push(g.pick_scale(edge_out, sb, e));
                    }
                    g.add_n(&terms)
                }
                EvalMode::SinglePath => {
                    let off = self.offsets[node][0];
                    for o in self.offsets[node].iter_mut() {
                        *o += 1;
                    }
                    single_path_forward(
                        g,
                        params,
                        &inputs,
                        &self.arch.alpha[node],
                        self.arch.beta[node],
                        &self.edge_ops[node],
                        opset,
                        self.channel_fraction,
                        off,
                        &mut self.eval_count,
                    )?
                }
            };
            states.push(out);
        }
        // concat-all projection during search
        let cat = g.concat_ch(&states[1..]);
        let w = g.param(params, self.proj_w);
        Ok(g.conv2d(cat, w, None, 1, 1, 1))
    }

    pub fn derive(
        &self,
        params: &Params,
        opset: &CandidateOpSet,
        retain_k: usize,
        output_rule: OutputRule,
    ) -> Result<Genotype> {
        derive_genotype(
            &self.arch.snapshot(params),
            opset,
            retain_k,
            output_rule,
            self.kind,
            self.width,
        )
    }
}

/// A discretized cell with full-width op parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivedCell {
    pub genotype: Genotype,
    op_params: Vec<Vec<OpParams>>,
    pub proj_w: ParamId,
}

impl DerivedCell {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        opset: &CandidateOpSet,
        genotype: Genotype,
    ) -> Result<Self> {
        genotype.validate()?;
        let width = genotype.width;
        let op_params = genotype
            .nodes
            .iter()
            .map(|n| {
                n.inputs
                    .iter()
                    .map(|e| init_op_params(params, rng, &opset.ops[e.op], width))
                    .collect()
            })
            .collect();
        let proj_w = params.add(conv_init(rng, width, genotype.concat_width(), 1));
        Ok(Self {
            genotype,
            op_params,
            proj_w,
        })
    }

    /// Replace the projection with the identity map. Only valid when the
    /// concat width equals the cell width.
    pub fn set_identity_proj(&self, params: &mut Params) -> Result<()> {
        if self.genotype.concat_width() != self.genotype.width {
            return Err(Error::config("identity projection needs concat width == width"));
        }
        *params.get_mut(self.proj_w) = crate::nn::identity_conv_init(self.genotype.width);
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj_w];
        for node in &self.op_params {
            for op in node {
                match op {
                    OpParams::NoParams => {}
                    OpParams::Conv { w } => ids.push(*w),
                    OpParams::Sep { dw, pw } => {
                        ids.push(*dw);
                        ids.push(*pw);
                    }
                }
            }
        }
        ids
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        opset: &CandidateOpSet,
        x: VarId,
    ) -> VarId {
        let mut states = vec![x];
        for (node, ops) in self.genotype.nodes.iter().zip(&self.op_params) {
            let terms: Vec<VarId> = node
                .inputs
                .iter()
                .zip(ops)
                .map(|(e, p)| apply_op(g, params, states[e.input], &opset.ops[e.op], p))
                .collect();
            states.push(if terms.len() == 1 {
                terms[0]
            } else {
                g.add_n(&terms)
            });
        }
        cell_output(g, params, &states[1..], &self.genotype, self.proj_w)
    }
}
