//! Component ablation runner: trains and evaluates every cell of a
//! small grid (fusion stage x context cells x loss variant x cell
//! shape) at desk scale under one shared seed.

use crate::autofem::{AutoFemBundle, FpnCellSpec};
use crate::detector::{BackboneSpec, Detector, DetectorConfig, HeadSpec};
use crate::error::{Error, Result};
use crate::losses::{ClsKind, DrmcConfig, RegKind};
use crate::nas::{CandidateOpSet, CellKind, EvalMode, Genotype, OutputRule};
use crate::nn::Params;
use crate::schedule::{SearchSchedule, TrainSchedule};
use crate::search::{bilevel_search, SearchConfig, SearchStatus, SearchSupernet};
use crate::synth::SynthScene;
use crate::train::{train_detector, LossToggles};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpnChoice {
    None,
    Plain,
    Autofem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpmChoice {
    None,
    Autofem,
}

/// Loss variants, cumulative in the order the contributions stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    /// smooth-L1 box + softmax CE, second shot only.
    Baseline,
    /// + first-shot auxiliary supervision.
    Aux,
    /// + margin-cosine classification.
    Mc,
    /// + distance-IoU regression (without margin-cosine).
    Dr,
    /// + both.
    Drmc,
}

impl LossChoice {
    pub fn toggles(self) -> LossToggles {
        match self {
            LossChoice::Baseline => LossToggles {
                cls: ClsKind::SoftmaxCe,
                reg: RegKind::SmoothL1,
                aux: false,
            },
            LossChoice::Aux => LossToggles {
                cls: ClsKind::SoftmaxCe,
                reg: RegKind::SmoothL1,
                aux: true,
            },
            LossChoice::Mc => LossToggles {
                cls: ClsKind::MarginCos,
                reg: RegKind::SmoothL1,
                aux: true,
            },
            LossChoice::Dr => LossToggles {
                cls: ClsKind::SoftmaxCe,
                reg: RegKind::Diou,
                aux: true,
            },
            LossChoice::Drmc => LossToggles {
                cls: ClsKind::MarginCos,
                reg: RegKind::Diou,
                aux: true,
            },
        }
    }
}

/// How relaxed cells are evaluated if the cell requires a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    /// Full mixture over all channels.
    Darts,
    /// Full mixture over a 1/K channel sample.
    PcDarts,
    /// Highest-weight path over a 1/K channel sample.
    SinglePath,
}

pub const ALLOWED_NODES: [usize; 3] = [4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub fpn: FpnChoice,
    pub cpm: CpmChoice,
    pub loss: LossChoice,
    pub output_rule: OutputRule,
    pub nodes: usize,
    pub method: SearchMethod,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            fpn: FpnChoice::Plain,
            cpm: CpmChoice::None,
            loss: LossChoice::Baseline,
            output_rule: OutputRule::CatAll,
            nodes: 6,
            method: SearchMethod::SinglePath,
        }
    }
}

impl AblationSpec {
    /// Parse `key=value` pairs separated by commas; unset keys keep the
    /// baseline defaults. Unknown keys or values are rejected here,
    /// before any training starts.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = AblationSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("grid entry `{part}` is not key=value")))?;
            match key {
                "fpn" => {
                    spec.fpn = match value {
                        "none" => FpnChoice::None,
                        "plain" => FpnChoice::Plain,
                        "autofem" => FpnChoice::Autofem,
                        _ => return Err(Error::config(format!("unknown fpn `{value}`"))),
                    }
                }
                "cpm" => {
                    spec.cpm = match value {
                        "none" => CpmChoice::None,
                        "autofem" => CpmChoice::Autofem,
                        _ => return Err(Error::config(format!("unknown cpm `{value}`"))),
                    }
                }
                "loss" => {
                    spec.loss = match value {
                        "smooth-l1+softmax" => LossChoice::Baseline,
                        "+aux" => LossChoice::Aux,
                        "+MC" => LossChoice::Mc,
                        "+DR" => LossChoice::Dr,
                        "+DRMC" => LossChoice::Drmc,
                        _ => return Err(Error::config(format!("unknown loss `{value}`"))),
                    }
                }
                "output_rule" => {
                    spec.output_rule = match value {
                        "cat_all" => OutputRule::CatAll,
                        "cat_leaf" => OutputRule::CatLeaf,
                        _ => return Err(Error::config(format!("unknown output_rule `{value}`"))),
                    }
                }
                "nodes" => {
                    let n: usize = value
                        .parse()
                        .map_err(|_| Error::config(format!("bad node count `{value}`")))?;
                    if !ALLOWED_NODES.contains(&n) {
                        return Err(Error::config(format!(
                            "nodes must be one of {ALLOWED_NODES:?}, got {n}"
                        )));
                    }
                    spec.nodes = n;
                }
                "method" => {
                    spec.method = match value {
                        "darts" => SearchMethod::Darts,
                        "pc-darts" => SearchMethod::PcDarts,
                        "single-path" => SearchMethod::SinglePath,
                        _ => return Err(Error::config(format!("unknown method `{value}`"))),
                    }
                }
                _ => return Err(Error::config(format!("unknown grid key `{key}`"))),
            }
        }
        Ok(spec)
    }

    /// The full-mixture partial-channel mode is memory-prohibitive at
    /// 8 nodes and is reported as unavailable rather than run.
    pub fn available(&self) -> bool {
        !(self.method == SearchMethod::PcDarts && self.nodes == 8)
    }

    pub fn needs_search(&self) -> bool {
        self.fpn == FpnChoice::Autofem || self.cpm == CpmChoice::Autofem
    }

    pub fn label(&self) -> String {
        format!(
            "fpn={:?} cpm={:?} loss={:?} rule={:?} nodes={} method={:?}",
            self.fpn, self.cpm, self.loss, self.output_rule, self.nodes, self.method
        )
    }
}

/// The 3 search methods x 3 node counts comparison grid.
pub fn method_nodes_grid() -> Vec<AblationSpec> {
    let mut grid = Vec::new();
    for method in [
        SearchMethod::Darts,
        SearchMethod::PcDarts,
        SearchMethod::SinglePath,
    ] {
        for nodes in ALLOWED_NODES {
            grid.push(AblationSpec {
                fpn: FpnChoice::Autofem,
                cpm: CpmChoice::Autofem,
                loss: LossChoice::Drmc,
                nodes,
                method,
                ..AblationSpec::default()
            });
        }
    }
    grid
}

/// Shared per-cell budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRunCfg {
    pub width: usize,
    pub resolution: usize,
    pub train: TrainSchedule,
    pub search: SearchSchedule,
    pub loss: DrmcConfig,
    pub seed: u64,
}

impl AblationRunCfg {
    pub fn desk(width: usize, seed: u64) -> Self {
        Self {
            width,
            resolution: 128,
            train: TrainSchedule::desk(),
            search: SearchSchedule::desk(),
            loss: DrmcConfig::desk(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub available: bool,
    pub ap_overall: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn fmt_ap(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    }
}

impl AblationReport {
    /// Fixed-width text table, one row per grid cell.
    pub fn aligned_text(&self) -> String {
        let mut labels: Vec<String> = self.rows.iter().map(|r| r.spec.label()).collect();
        let w = labels.iter().map(String::len).max().unwrap_or(4).max(4);
        for l in &mut labels {
            while l.len() < w {
                l.push(' ');
            }
        }
        let mut out = format!(
            "{:<w$}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            "cell", "AP", "AP-s", "AP-m", "AP-l",
        );
        for (r, l) in self.rows.iter().zip(&labels) {
            if r.available {
                out.push_str(&format!(
                    "{l}  {:>8}  {:>8}  {:>8}  {:>8}\n",
                    fmt_ap(r.ap_overall),
                    fmt_ap(r.ap_small),
                    fmt_ap(r.ap_medium),
                    fmt_ap(r.ap_large),
                ));
            } else {
                out.push_str(&format!("{l}  {:>8}  {:>8}  {:>8}  {:>8}\n", "-", "-", "-", "-"));
            }
        }
        out
    }
}

fn base_detector_cfg(run: &AblationRunCfg) -> DetectorConfig {
    DetectorConfig {
        resolution: run.resolution,
        backbone: BackboneSpec {
            in_channels: 1,
            stem_width: run.width,
            stage_widths: [run.width; 6],
            stage_depths: [1; 6],
        },
        width: run.width,
        head: HeadSpec {
            depth: 1,
            width: run.width,
        },
        embed_dim: run.width,
        anchor_scale: 4.0,
    }
}

fn passthrough_cpms(width: usize, output_rule: OutputRule, opset: &CandidateOpSet) -> Result<Vec<Genotype>> {
    let id = opset
        .identity_index()
        .ok_or_else(|| Error::config("op set lacks identity"))?;
    Ok((0..crate::autofem::PYRAMID_LEVELS)
        .map(|_| Genotype::default_chain(CellKind::Cpm, 1, width, output_rule, id, id))
        .collect())
}

/// Build the enhance-stage description a grid cell asks for, searching
/// first when either component is the searched one.
pub fn bundle_for_spec(
    spec: &AblationSpec,
    run: &AblationRunCfg,
    scenes: &[SynthScene],
    opset: &CandidateOpSet,
) -> Result<AutoFemBundle> {
    let searched = if spec.needs_search() {
        let (mode, cf) = match spec.method {
            SearchMethod::Darts => (EvalMode::Mixed, 1),
            SearchMethod::PcDarts => (EvalMode::Mixed, 4),
            SearchMethod::SinglePath => (EvalMode::SinglePath, 4),
        };
        let cf = if run.width % cf == 0 { cf } else { 1 };
        let cfg = SearchConfig {
            n_nodes: spec.nodes,
            channel_fraction: cf,
            output_rule: spec.output_rule,
            search_mode: mode,
            ..SearchConfig::with_width(run.width, run.resolution)
        };
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let mut net = SearchSupernet::new(&mut params, &mut rng, opset, cfg)?;
        let out = bilevel_search(
            &mut net,
            &mut params,
            opset,
            scenes,
            &run.search,
            &spec.loss.toggles(),
            &run.loss,
            run.seed,
        )?;
        match out.status {
            SearchStatus::Completed => out.bundle,
            SearchStatus::Diverged { epoch, reason } => {
                return Err(Error::runtime(format!(
                    "search diverged at epoch {epoch}: {reason}"
                )))
            }
        }
    } else {
        None
    };

    let fpn_spec = match spec.fpn {
        FpnChoice::None => FpnCellSpec::lateral_only(opset),
        FpnChoice::Plain => FpnCellSpec::plain_fpn(opset),
        FpnChoice::Autofem => {
            searched
                .as_ref()
                .expect("needs_search covered autofem fpn")
                .fpn_spec
                .clone()
        }
    };
    let cpms = match spec.cpm {
        CpmChoice::None => passthrough_cpms(run.width, spec.output_rule, opset)?,
        CpmChoice::Autofem => searched
            .as_ref()
            .expect("needs_search covered autofem cpm")
            .cpm_genotypes
            .clone(),
    };
    let bundle = AutoFemBundle::new(fpn_spec, cpms, run.width, opset.signature());
    bundle.validate(opset)?;
    Ok(bundle)
}

/// Train and evaluate one grid cell; scenes are split 80/20 train/val.
fn run_cell(
    spec: &AblationSpec,
    run: &AblationRunCfg,
    scenes: &[SynthScene],
    opset: &CandidateOpSet,
) -> Result<AblationRow> {
    let bundle = bundle_for_spec(spec, run, scenes, opset)?;
    let cut = (scenes.len() * 4) / 5;
    let (train, val) = scenes.split_at(cut.max(1));
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let det = Detector::new(&mut params, &mut rng, opset, base_detector_cfg(run), &bundle)?;
    let out = train_detector(
        &det,
        &mut params,
        opset,
        train,
        val,
        &run.train,
        &spec.loss.toggles(),
        &run.loss,
        run.seed,
    )?;
    let report = {
        use crate::eval::{evaluate_ap, EvalDet};
        use crate::detector::{detect_image, NmsConfig};
        let nms = NmsConfig::default();
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for scene in val {
            let d = detect_image(
                &out.best.detector,
                &out.best.params,
                opset,
                scene.image.clone().into_dyn(),
                &nms,
                run.loss.scale,
            )?;
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
        evaluate_ap(&dets, &gts, 0.5)?
    };
    Ok(AblationRow {
        spec: *spec,
        available: true,
        ap_overall: report.ap_overall,
        ap_small: report.ap_small,
        ap_medium: report.ap_medium,
        ap_large: report.ap_large,
        final_loss: out.log.last().map(|l| l.mean_total),
    })
}

/// Run every cell of the grid under the shared seed. Specs are fully
/// validated (here via the type system, upstream via `parse`) before
/// any cell trains.
pub fn run_ablation(
    grid: &[AblationSpec],
    run: &AblationRunCfg,
    scenes: &[SynthScene],
    opset: &CandidateOpSet,
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::config("empty ablation grid"));
    }
    run.train.validate()?;
    run.search.validate()?;
    for spec in grid {
        if !ALLOWED_NODES.contains(&spec.nodes) {
            return Err(Error::config(format!(
                "nodes must be one of {ALLOWED_NODES:?}, got {}",
                spec.nodes
            )));
        }
    }
    let mut rows = Vec::with_capacity(grid.len());
    for spec in grid {
        if !spec.available() {
            rows.push(AblationRow {
                spec: *spec,
                available: false,
                ap_overall: None,
                ap_small: None,
                ap_medium: None,
                ap_large: None,
                final_loss: None,
            });
            continue;
        }
        rows.push(run_cell(spec, run, scenes, opset)?);
    }
    Ok(AblationReport {
        seed: run.seed,
        rows,
    })
}
