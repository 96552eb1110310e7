//! Bilevel architecture search: a weight-sharing supernet over the
//! fusion stage and per-level context cells, alternating weight and
//! architecture updates on disjoint data halves.

use crate::autofem::{AutoFemBundle, FeaturePyramid, FpnSearch, PYRAMID_LEVELS};
use crate::boxes::BBox;
use crate::detector::{generate_anchors, shot_rows, shot_seeds, DualShotMaps, ShotMaps};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::losses::{drmc_total, match_anchors, DrmcConfig, MatchResult};
use crate::nas::{
    CandidateOpSet, CellKind, EvalMode, OutputRule, SearchCell,
};
use crate::nn::{assert_disjoint, conv_init, Adam, Params, SgdMomentum};
use crate::schedule::{diverged, SearchSchedule};
use crate::synth::SynthScene;
use crate::train::{LossToggles, NEG_IOU, POS_IOU};
use crate::detector::{BackboneSpec, HeadSpec};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub resolution: usize,
    pub backbone: BackboneSpec,
    pub width: usize,
    pub head: HeadSpec,
    pub embed_dim: usize,
    pub anchor_scale: f64,
    /// Intermediate nodes per context cell.
    pub n_nodes: usize,
    /// Partial-channel denominator K: edges mix 1/K of the channels.
    pub channel_fraction: usize,
    /// Incoming edges kept per node at derivation.
    pub retain_k: usize,
    pub output_rule: OutputRule,
    /// How relaxed cells are evaluated during search.
    pub search_mode: EvalMode,
}

impl SearchConfig {
    /// Paper-shaped cell settings at a width the caller picks.
    pub fn with_width(width: usize, resolution: usize) -> Self {
        Self {
            resolution,
            backbone: BackboneSpec {
                in_channels: 1,
                stem_width: width,
                stage_widths: [width; 6],
                stage_depths: [1; 6],
            },
            width,
            head: HeadSpec {
                depth: 1,
                width,
            },
            embed_dim: width,
            anchor_scale: 4.0,
            n_nodes: 6,
            channel_fraction: 4,
            retain_k: 2,
            output_rule: OutputRule::CatAll,
            search_mode: EvalMode::SinglePath,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.n_nodes == 0 || self.retain_k == 0 {
            return Err(Error::config("n_nodes and retain_k must be positive"));
        }
        if self.channel_fraction == 0 || self.width % self.channel_fraction != 0 {
            return Err(Error::config(format!(
                "channel fraction 1/{} does not divide width {}",
                self.channel_fraction, self.width
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        Ok(())
    }
}

/// Weight-sharing model searched over: fixed backbone and heads around
/// a relaxed fusion stage and relaxed per-level cells.
pub struct SearchSupernet {
    pub cfg: SearchConfig,
    stem_w: crate::nn::ParamId,
    stage_ws: Vec<Vec<crate::nn::ParamId>>,
    lateral_ws: Vec<crate::nn::ParamId>,
    pub fpn: FpnSearch,
    pub cells: Vec<SearchCell>,
    head_ws: Vec<crate::nn::ParamId>,
    cls_out_w: crate::nn::ParamId,
    reg_out_w: crate::nn::ParamId,
    pub cls_weight: crate::nn::ParamId,
}

impl SearchSupernet {
    pub fn new(
        params: &mut Params,
        rng: &mut impl Rng,
        opset: &CandidateOpSet,
        cfg: SearchConfig,
    ) -> Result<Self> {
        cfg.validate()?;
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
        let fpn = FpnSearch::new(params, rng, opset, cfg.width, cfg.channel_fraction)?;
        let cells = (0..PYRAMID_LEVELS)
            .map(|_| {
                SearchCell::new(
                    params,
                    rng,
                    opset,
                    CellKind::Cpm,
                    cfg.n_nodes,
                    cfg.width,
                    cfg.channel_fraction,
                )
            })
            .collect::<Result<Vec<_>>>()?;
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
            fpn,
            cells,
            head_ws,
            cls_out_w,
            reg_out_w,
            cls_weight,
        })
    }

    /// Architecture parameters: fusion alphas/betas and cell alphas/betas.
    pub fn arch_ids(&self) -> Vec<crate::nn::ParamId> {
        let mut ids = self.fpn.arch_ids();
        for c in &self.cells {
            ids.extend(c.arch.ids());
        }
        ids
    }

    /// All remaining (weight) parameters.
    pub fn weight_ids(&self) -> Vec<crate::nn::ParamId> {
        let mut ids = vec![self.stem_w];
        for s in &self.stage_ws {
            ids.extend(s);
        }
        ids.extend(&self.lateral_ws);
        ids.extend(self.fpn.weight_ids());
        for c in &self.cells {
            ids.extend(c.weight_ids());
        }
        ids.extend(&self.head_ws);
        ids.push(self.cls_out_w);
        ids.push(self.reg_out_w);
        ids.push(self.cls_weight);
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

    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &Params,
        opset: &CandidateOpSet,
        image: VarId,
        mode: EvalMode,
    ) -> Result<DualShotMaps> {
        let raw = self.backbone_pyramid(g, params, image);
        let fused = self.fpn.forward(g, params, opset, &raw)?;
        let enhanced = fused
            .levels
            .iter()
            .zip(self.cells.iter_mut())
            .map(|(&x, cell)| cell.forward(g, params, opset, x, mode))
            .collect::<Result<Vec<_>>>()?;
        let enhanced = FeaturePyramid {
            levels: enhanced,
            width: self.cfg.width,
        };
        Ok(DualShotMaps {
            first: self.head_forward(g, params, &raw),
            second: self.head_forward(g, params, &enhanced),
        })
    }

    pub fn cls_weight_f64(&self, params: &Params) -> Array2<f64> {
        let w = params.get(self.cls_weight);
        Array2::from_shape_fn((2, self.cfg.embed_dim), |(i, j)| w[[i, j]] as f64)
    }

    /// Discretize fusion topology and cell genotypes into a bundle.
    pub fn derive(&self, params: &Params, opset: &CandidateOpSet) -> Result<AutoFemBundle> {
        let spec = self.fpn.derive(params, opset)?;
        let genotypes = self
            .cells
            .iter()
            .map(|c| c.derive(params, opset, self.cfg.retain_k, self.cfg.output_rule))
            .collect::<Result<Vec<_>>>()?;
        let bundle = AutoFemBundle::new(spec, genotypes, self.cfg.width, opset.signature());
        bundle.validate(opset)?;
        Ok(bundle)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchEpochLog {
    pub epoch: usize,
    pub mean_weight_loss: f64,
    pub mean_arch_loss: Option<f64>,
    /// Entropy of each alpha softmax (cells' edges plus the 2 fusion alphas).
    pub alpha_entropies: Vec<f32>,
    /// FNV-1a over the raw arch parameter bits, for freeze auditing.
    pub arch_digest: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SearchStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub status: SearchStatus,
    /// Present only on completion.
    pub bundle: Option<AutoFemBundle>,
    pub log: Vec<SearchEpochLog>,
    /// Last parameter state with all values finite.
    pub last_finite: Params,
}

fn arch_digest(params: &Params, ids: &[crate::nn::ParamId]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for id in ids {
        for v in params.get(*id).iter() {
            h ^= v.to_bits() as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn alpha_entropies(net: &SearchSupernet, params: &Params) -> Vec<f32> {
    let mut out = Vec::new();
    for c in &net.cells {
        out.extend(c.arch.snapshot(params).alpha_entropies());
    }
    let ent = |pid: crate::nn::ParamId| {
        let a = params.get(pid);
        let v = ndarray::Array1::from_iter(a.iter().copied());
        let s = crate::nas::softmax_arr(&v);
        -s.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f32>()
    };
    out.push(ent(net.fpn.alpha_td));
    out.push(ent(net.fpn.alpha_bu));
    out
}

/// One supernet forward/backward on one scene; gradients accumulate.
#[allow(clippy::too_many_arguments)]
fn supernet_step(
    net: &mut SearchSupernet,
    params: &mut Params,
    opset: &CandidateOpSet,
    scene: &SynthScene,
    matches: &MatchResult,
    anchors: &[crate::boxes::AnchorGeom],
    cfg: &DrmcConfig,
    toggles: &LossToggles,
    mode: EvalMode,
) -> Result<f64> {
    let mut g = Graph::new();
    let image = g.leaf(scene.image.clone().into_dyn());
    let maps = net.forward(&mut g, params, opset, image, mode)?;
    let first = shot_rows(&g, &maps.first);
    let second = shot_rows(&g, &maps.second);
    let weights = net.cls_weight_f64(params);
    let gts: Vec<BBox> = scene.gt.iter().map(|t| t.bbox).collect();
    let (bundle, g1, g2, gw) = drmc_total(
        &first, &second, &weights, matches, anchors, &gts, cfg, toggles.cls, toggles.reg,
    )?;
    let mut seeds = shot_seeds(&g, &maps.second, &g2);
    if cfg.lambda_aux > 0.0 {
        seeds.extend(shot_seeds(&g, &maps.first, &g1));
    }
    g.backward_params(seeds, params);
    let gw32: ndarray::ArrayD<f32> = gw.mapv(|v| v as f32).into_dyn();
    params.accumulate_grad(net.cls_weight, &gw32);
    Ok(bundle.total)
}

/// Alternate weight and (after the start epoch) architecture updates on
/// a 50/50 data split. Deterministic under a fixed seed.
pub fn bilevel_search(
    net: &mut SearchSupernet,
    params: &mut Params,
    opset: &CandidateOpSet,
    scenes: &[SynthScene],
    sched: &SearchSchedule,
    toggles: &LossToggles,
    loss_cfg: &DrmcConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    sched.validate()?;
    loss_cfg.validate()?;
    if scenes.len() < 2 {
        return Err(Error::data("need at least 2 scenes to split"));
    }
    for s in scenes {
        if s.image.shape()[1] != net.cfg.resolution {
            return Err(Error::data(format!(
                "scene rendered at {} but supernet expects {}",
                s.image.shape()[1],
                net.cfg.resolution
            )));
        }
    }
    let anchors = generate_anchors(net.cfg.resolution, net.cfg.anchor_scale);
    let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox()).collect();
    let matches: Vec<MatchResult> = scenes
        .iter()
        .map(|s| {
            let gts: Vec<BBox> = s.gt.iter().map(|t| t.bbox).collect();
            match_anchors(&anchor_boxes, &gts, POS_IOU, NEG_IOU)
        })
        .collect::<Result<_>>()?;

    let half = scenes.len() / 2;
    let weight_set: Vec<usize> = (0..half).collect();
    let arch_set: Vec<usize> = (half..scenes.len()).collect();

    let weight_ids = net.weight_ids();
    let arch_ids = net.arch_ids();
    assert_disjoint(&weight_ids, &arch_ids)?;
    let mut opt_w = SgdMomentum::new(
        weight_ids.clone(),
        params,
        sched.weight_lr as f32,
        sched.weight_momentum as f32,
        sched.weight_decay as f32,
    );
    let mut opt_a = Adam::new(
        arch_ids.clone(),
        params,
        sched.arch_lr as f32,
        sched.arch_weight_decay as f32,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    let mut last_finite = params.clone();
    let n_batches = weight_set.len().div_ceil(sched.batch_size);

    for epoch in 0..sched.total_epochs {
        let mut w_order = weight_set.clone();
        w_order.shuffle(&mut rng);
        let mut a_order = arch_set.clone();
        a_order.shuffle(&mut rng);
        let arch_active = epoch >= sched.arch_update_start_epoch;

        let mut w_sum = 0.0;
        let mut w_n = 0usize;
        let mut a_sum = 0.0;
        let mut a_n = 0usize;
        for b in 0..n_batches {
            let chunk: Vec<usize> = w_order
                .iter()
                .copied()
                .skip(b * sched.batch_size)
                .take(sched.batch_size)
                .collect();
            params.zero_grads();
            let mut tot = 0.0;
            for &i in &chunk {
                tot += supernet_step(
                    net, params, opset, &scenes[i], &matches[i], &anchors, loss_cfg, toggles,
                    net.cfg.search_mode,
                )?;
            }
            let mean = tot / chunk.len() as f64;
            if diverged(mean) {
                return Ok(SearchOutcome {
                    status: SearchStatus::Diverged {
                        epoch,
                        reason: format!("weight-step loss {mean} at batch {b}"),
                    },
                    bundle: None,
                    log,
                    last_finite,
                });
            }
            w_sum += tot;
            w_n += chunk.len();
            params.scale_grads(&weight_ids, 1.0 / chunk.len() as f32);
            opt_w.step(params);

            if arch_active && !a_order.is_empty() {
                let start = (b * sched.batch_size) % a_order.len();
                let chunk: Vec<usize> = (0..sched.batch_size.min(a_order.len()))
                    .map(|k| a_order[(start + k) % a_order.len()])
                    .collect();
                params.zero_grads();
                let mut tot = 0.0;
                for &i in &chunk {
                    tot += supernet_step(
                        net, params, opset, &scenes[i], &matches[i], &anchors, loss_cfg, toggles,
                        net.cfg.search_mode,
                    )?;
                }
                let mean = tot / chunk.len() as f64;
                if diverged(mean) {
                    return Ok(SearchOutcome {
                        status: SearchStatus::Diverged {
                            epoch,
                            reason: format!("arch-step loss {mean} at batch {b}"),
                        },
                        bundle: None,
                        log,
                        last_finite,
                    });
                }
                a_sum += tot;
                a_n += chunk.len();
                params.scale_grads(&arch_ids, 1.0 / chunk.len() as f32);
                opt_a.step(params);
            }
        }
        if !params.all_finite() {
            return Ok(SearchOutcome {
                status: SearchStatus::Diverged {
                    epoch,
                    reason: "non-finite parameters after epoch".into(),
                },
                bundle: None,
                log,
                last_finite,
            });
        }
        last_finite = params.clone();
        log.push(SearchEpochLog {
            epoch,
            mean_weight_loss: w_sum / w_n as f64,
            mean_arch_loss: (a_n > 0).then(|| a_sum / a_n as f64),
            alpha_entropies: alpha_entropies(net, params),
            arch_digest: arch_digest(params, &arch_ids),
        });
    }

    let bundle = net.derive(params, opset)?;
    Ok(SearchOutcome {
        status: SearchStatus::Completed,
        bundle: Some(bundle),
        log,
        last_finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthParams};

    fn tiny_cfg() -> SearchConfig {
        SearchConfig {
            n_nodes: 2,
            channel_fraction: 2,
            ..SearchConfig::with_width(8, 128)
        }
    }

    fn tiny_sched(total: usize, start: usize) -> SearchSchedule {
        SearchSchedule {
            total_epochs: total,
            arch_update_start_epoch: start,
            batch_size: 2,
            ..SearchSchedule::paper()
        }
    }

    fn scenes(n: usize, seed: u64) -> Vec<SynthScene> {
        let p = SynthParams {
            min_faces: 1,
            max_faces: 2,
            tier_mix: [0.5, 0.5, 0.0],
            ..SynthParams::default()
        };
        generate_corpus(n, &p, seed).unwrap()
    }

    fn run(seed: u64, total: usize, start: usize) -> (SearchOutcome, SearchSupernet, Params) {
        let opset = CandidateOpSet::standard();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = SearchSupernet::new(&mut params, &mut rng, &opset, tiny_cfg()).unwrap();
        let out = bilevel_search(
            &mut net,
            &mut params,
            &opset,
            &scenes(4, 100 + seed),
            &tiny_sched(total, start),
            &LossToggles::default(),
            &DrmcConfig::default(),
            seed,
        )
        .unwrap();
        (out, net, params)
    }

    #[test]
    fn weight_and_arch_ids_disjoint() {
        let opset = CandidateOpSet::standard();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SearchSupernet::new(&mut params, &mut rng, &opset, tiny_cfg()).unwrap();
        assert_disjoint(&net.weight_ids(), &net.arch_ids()).unwrap();
        let total = net.weight_ids().len() + net.arch_ids().len();
        assert_eq!(total, params.len());
    }

    #[test]
    fn arch_frozen_before_start_epoch() {
        let (out, net, params) = run(1, 3, 2);
        assert!(matches!(out.status, SearchStatus::Completed));
        // epochs 0 and 1 must leave the arch bits untouched
        assert_eq!(out.log[0].arch_digest, out.log[1].arch_digest);
        assert!(out.log[0].mean_arch_loss.is_none());
        assert!(out.log[2].mean_arch_loss.is_some());
        // and the final epoch must have moved them
        assert_ne!(out.log[1].arch_digest, out.log[2].arch_digest);
        let _ = (net, params);
    }

    #[test]
    fn identical_seeds_identical_genotypes() {
        let (a, _, _) = run(7, 2, 1);
        let (b, _, _) = run(7, 2, 1);
        let ja = serde_json::to_string(&a.bundle.unwrap()).unwrap();
        let jb = serde_json::to_string(&b.bundle.unwrap()).unwrap();
        assert_eq!(ja, jb);
        for (la, lb) in a.log.iter().zip(&b.log) {
            assert_eq!(la.mean_weight_loss.to_bits(), lb.mean_weight_loss.to_bits());
        }
    }

    #[test]
    fn derived_bundle_validates_and_loads_into_detector() {
        let (out, _, _) = run(3, 2, 1);
        let bundle = out.bundle.unwrap();
        let opset = CandidateOpSet::standard();
        bundle.validate(&opset).unwrap();
        assert_eq!(bundle.cpm_genotypes.len(), PYRAMID_LEVELS);
        for g in &bundle.cpm_genotypes {
            assert_eq!(g.nodes.len(), 2);
        }
    }

    #[test]
    fn divergent_lr_reports_last_finite_state() {
        let opset = CandidateOpSet::standard();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = SearchSupernet::new(&mut params, &mut rng, &opset, tiny_cfg()).unwrap();
        let sched = SearchSchedule {
            weight_lr: 1e6, // guaranteed blow-up
            ..tiny_sched(3, 1)
        };
        let out = bilevel_search(
            &mut net,
            &mut params,
            &opset,
            &scenes(4, 400),
            &sched,
            &LossToggles::default(),
            &DrmcConfig::default(),
            4,
        )
        .unwrap();
        assert!(matches!(out.status, SearchStatus::Diverged { .. }));
        assert!(out.bundle.is_none());
        assert!(out.last_finite.all_finite());
    }

    #[test]
    fn entropy_log_covers_all_alpha_edges() {
        let (out, net, params) = run(5, 2, 0);
        // 6 cells x (1 + 2) edges for 2 nodes, plus 2 fusion alphas
        let n_edges: usize = net
            .cells
            .iter()
            .map(|c| (0..c.topo.n_nodes).map(|n| c.topo.n_edges(n)).sum::<usize>())
            .sum();
        assert_eq!(out.log[0].alpha_entropies.len(), n_edges + 2);
        let _ = params;
    }
}
