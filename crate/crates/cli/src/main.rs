//! `autodet`: search, train, evaluate, scale, and benchmark the
//! desk-scale face-detector family from the command line.

mod cfg;
mod out;

use autodet_core::ablate::{method_nodes_grid, run_ablation, AblationRunCfg, AblationSpec};
use autodet_core::autofem::AutoFemBundle;
use autodet_core::detector::{detect_image, Detector, DetectionRecord, NmsConfig};
use autodet_core::eval::{evaluate_ap, EvalDet, EvalReport};
use autodet_core::losses::{ClsKind, DrmcConfig, RegKind};
use autodet_core::nas::{CandidateOpSet, EvalMode, OutputRule};
use autodet_core::nn::Params;
use autodet_core::scaling::{
    cost_report, default_bundle, family, hardware_descriptor, latency_bench, scale_config,
    ScaleCoeffs,
};
use autodet_core::schedule::{SearchSchedule, TrainSchedule};
use autodet_core::search::{bilevel_search, SearchConfig, SearchStatus, SearchSupernet};
use autodet_core::synth::{generate_corpus, GtBox, GtRecord, SynthScene};
use autodet_core::train::{train_detector, LossToggles};
use autodet_core::{boxes::BBox, Error, Result};
use cfg::FileConfig;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "autodet", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a deterministic synthetic detection corpus.
    GenData(GenDataArgs),
    /// Run the bilevel architecture search and emit a module bundle.
    Search(SearchArgs),
    /// Train a detector, tracking validation AP.
    Train(TrainArgs),
    /// Score a detection file against ground truth.
    Eval(EvalArgs),
    /// Print the compound-scaled model family with exact costs.
    Scale(ScaleArgs),
    /// Exact parameter and FLOP counts for one family member.
    Count(CountArgs),
    /// Wall-clock inference benchmark, parallel vs sequential.
    Bench(BenchArgs),
    /// Train/evaluate a component-ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct PresetArgs {
    /// Published-scale schedule (50 epochs, batch 48).
    #[arg(long, conflicts_with = "desk_scale")]
    paper_scale: bool,
    /// Workstation schedule (10 epochs, batch 8).
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

impl PresetArgs {
    /// A preset and custom schedule numbers contradict each other.
    fn check(&self) -> Result<()> {
        if (self.paper_scale || self.desk_scale) && (self.epochs.is_some() || self.batch.is_some())
        {
            return Err(Error::config(
                "--paper-scale/--desk-scale conflict with --epochs/--batch; pick one",
            ));
        }
        Ok(())
    }
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    preset: PresetArgs,
    #[arg(long)]
    arch_start: Option<usize>,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    scenes: usize,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, value_parser = parse_output_rule)]
    output_rule: Option<OutputRule>,
    /// Evaluate relaxed cells fully mixed instead of single-path.
    #[arg(long)]
    mixed: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    preset: PresetArgs,
    /// Searched module bundle; defaults to the plain fallback wiring.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    scenes: usize,
    #[arg(long, default_value_t = 8)]
    val_scenes: usize,
    #[arg(long, value_parser = parse_cls)]
    cls: Option<ClsKind>,
    #[arg(long, value_parser = parse_reg)]
    reg: Option<RegKind>,
    /// Disable the first-shot auxiliary loss.
    #[arg(long)]
    no_aux: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args)]
struct ScaleArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 0)]
    phi: u32,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    iters: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Grid cell as comma-separated key=value pairs; repeatable.
    #[arg(long = "cell")]
    cells: Vec<String>,
    /// Use the built-in 3x3 search-method / node-count grid.
    #[arg(long)]
    method_grid: bool,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    #[arg(long)]
    train_epochs: Option<usize>,
    #[arg(long)]
    search_epochs: Option<usize>,
}

fn parse_output_rule(s: &str) -> std::result::Result<OutputRule, String> {
    match s {
        "cat_all" => Ok(OutputRule::CatAll),
        "cat_leaf" => Ok(OutputRule::CatLeaf),
        _ => Err(format!("unknown output rule `{s}` (cat_all | cat_leaf)")),
    }
}

fn parse_cls(s: &str) -> std::result::Result<ClsKind, String> {
    match s {
        "softmax" => Ok(ClsKind::SoftmaxCe),
        "margin-cos" => Ok(ClsKind::MarginCos),
        _ => Err(format!("unknown classifier `{s}` (softmax | margin-cos)")),
    }
}

fn parse_reg(s: &str) -> std::result::Result<RegKind, String> {
    match s {
        "smooth-l1" => Ok(RegKind::SmoothL1),
        "diou" => Ok(RegKind::Diou),
        _ => Err(format!("unknown regression `{s}` (smooth-l1 | diou)")),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Serde(_) => 3,
        Error::Runtime(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Search(a) => cmd_search(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Scale(a) => cmd_scale(a),
        Cmd::Count(a) => cmd_count(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    }
}

fn prepare_out(common: &CommonArgs) -> Result<(FileConfig, PathBuf)> {
    let file = FileConfig::load(common.config.as_deref())?;
    std::fs::create_dir_all(&common.out)?;
    Ok((file, common.out.clone()))
}

fn make_scenes(
    file: &FileConfig,
    resolution: Option<usize>,
    count: usize,
    seed: u64,
) -> Result<Vec<SynthScene>> {
    let params = file.synth_params(resolution);
    generate_corpus(count, &params, seed)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let (file, dir) = prepare_out(&a.common)?;
    let seed = file.seed.unwrap_or(a.common.seed);
    let params = file.synth_params(a.resolution);
    let scenes = generate_corpus(a.count, &params, seed)?;
    let records: Vec<GtRecord> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| GtRecord::from_scene(i as u64, s))
        .collect();
    out::write_jsonl(&dir.join("gt.jsonl"), &records)?;
    out::write_json(&dir.join("synth_params.json"), &params)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        params: &'a autodet_core::synth::SynthParams,
        count: usize,
    }
    out::write_manifest(
        &dir,
        "gen-data",
        &Resolved {
            params: &params,
            count: a.count,
        },
        seed,
    )?;
    println!(
        "wrote {} scenes ({} boxes) to {}",
        scenes.len(),
        records.iter().map(|r| r.boxes.len()).sum::<usize>(),
        dir.display()
    );
    Ok(())
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    a.preset.check()?;
    let (file, dir) = prepare_out(&a.common)?;
    let seed = file.seed.unwrap_or(a.common.seed);
    let (preset, loss_base) = if a.preset.paper_scale {
        (SearchSchedule::paper(), DrmcConfig::default())
    } else {
        (SearchSchedule::desk(), DrmcConfig::desk())
    };
    let mut sched = file.search_schedule(preset);
    if let Some(e) = a.preset.epochs {
        sched.total_epochs = e;
    }
    if let Some(b) = a.preset.batch {
        sched.batch_size = b;
    }
    if let Some(s) = a.arch_start {
        sched.arch_update_start_epoch = s;
    }

    let opset = CandidateOpSet::standard();
    let fsec = file.search.clone().unwrap_or_default();
    let mut cfg = SearchConfig::with_width(a.width, 128);
    if let Some(n) = a.nodes.or(fsec.nodes) {
        cfg.n_nodes = n;
    }
    if let Some(k) = fsec.channel_fraction {
        cfg.channel_fraction = k;
    }
    if let Some(k) = fsec.retain_k {
        cfg.retain_k = k;
    }
    if let Some(r) = a.output_rule {
        cfg.output_rule = r;
    }
    if a.mixed {
        cfg.search_mode = EvalMode::Mixed;
    }
    let scenes = make_scenes(&file, Some(cfg.resolution), a.scenes, seed)?;

    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SearchSupernet::new(&mut params, &mut rng, &opset, cfg.clone())?;
    let loss_cfg = file.loss_config(loss_base);
    let started = Instant::now();
    let outcome = bilevel_search(
        &mut net,
        &mut params,
        &opset,
        &scenes,
        &sched,
        &LossToggles::default(),
        &loss_cfg,
        seed,
    )?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        search: &'a SearchConfig,
        schedule: &'a SearchSchedule,
        n_scenes: usize,
    }
    out::write_manifest(
        &dir,
        "search",
        &Resolved {
            search: &cfg,
            schedule: &sched,
            n_scenes: scenes.len(),
        },
        seed,
    )?;
    out::write_json(&dir.join("search_log.json"), &outcome.log)?;

    match outcome.status {
        SearchStatus::Completed => {
            let bundle = outcome.bundle.expect("completed search carries a bundle");
            bundle.save(&dir.join("bundle.json"))?;
            println!(
                "search finished in {:.1}s; bundle written to {}",
                started.elapsed().as_secs_f64(),
                dir.join("bundle.json").display()
            );
            Ok(())
        }
        SearchStatus::Diverged { epoch, reason } => {
            out::write_json(&dir.join("diverged_params.json"), &outcome.last_finite)?;
            Err(Error::runtime(format!(
                "search diverged at epoch {epoch} ({reason}); last finite state saved to {}",
                dir.join("diverged_params.json").display()
            )))
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    a.preset.check()?;
    let (file, dir) = prepare_out(&a.common)?;
    let seed = file.seed.unwrap_or(a.common.seed);
    let (preset, loss_base) = if a.preset.paper_scale {
        (TrainSchedule::paper(), DrmcConfig::default())
    } else {
        (TrainSchedule::desk(), DrmcConfig::desk())
    };
    let mut sched = file.train_schedule(preset);
    if let Some(e) = a.preset.epochs {
        sched.total_epochs = e;
        sched.decay_epochs.retain(|&d| d < e);
    }
    if let Some(b) = a.preset.batch {
        sched.batch_size = b;
    }

    let opset = CandidateOpSet::standard();
    let bundle = match &a.bundle {
        Some(p) => AutoFemBundle::load(p, &opset)?,
        None => default_bundle(a.width, &opset),
    };
    if bundle.width != a.width {
        return Err(Error::config(format!(
            "bundle width {} != --width {}",
            bundle.width, a.width
        )));
    }
    let cfg = SearchConfig::with_width(a.width, 128);
    let det_cfg = autodet_core::detector::DetectorConfig {
        resolution: cfg.resolution,
        backbone: cfg.backbone.clone(),
        width: cfg.width,
        head: cfg.head.clone(),
        embed_dim: cfg.embed_dim,
        anchor_scale: cfg.anchor_scale,
    };
    let scenes = make_scenes(&file, Some(det_cfg.resolution), a.scenes + a.val_scenes, seed)?;
    let (train, val) = scenes.split_at(a.scenes);

    let toggles = LossToggles {
        cls: a.cls.unwrap_or(ClsKind::MarginCos),
        reg: a.reg.unwrap_or(RegKind::Diou),
        aux: !a.no_aux,
    };
    let loss_cfg = file.loss_config(loss_base);
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = Detector::new(&mut params, &mut rng, &opset, det_cfg.clone(), &bundle)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        detector: &'a autodet_core::detector::DetectorConfig,
        schedule: &'a TrainSchedule,
        toggles: &'a LossToggles,
        n_train: usize,
        n_val: usize,
    }
    out::write_manifest(
        &dir,
        "train",
        &Resolved {
            detector: &det_cfg,
            schedule: &sched,
            toggles: &toggles,
            n_train: train.len(),
            n_val: val.len(),
        },
        seed,
    )?;

    let outcome = train_detector(
        &det, &mut params, &opset, train, val, &sched, &toggles, &loss_cfg, seed,
    )?;
    outcome.best.save(&dir.join("best.ckpt.json"))?;
    outcome.last.save(&dir.join("last.ckpt.json"))?;
    out::write_json(&dir.join("train_log.json"), &outcome.log)?;

    // also emit detections on the val split for downstream `eval`
    if !val.is_empty() {
        let nms = NmsConfig::default();
        let mut det_records = Vec::new();
        let mut gt_records = Vec::new();
        for (i, scene) in val.iter().enumerate() {
            let d = detect_image(
                &outcome.best.detector,
                &outcome.best.params,
                &opset,
                scene.image.clone().into_dyn(),
                &nms,
                loss_cfg.scale,
            )?;
            det_records.push(DetectionRecord::from_detections(i as u64, &d));
            gt_records.push(GtRecord::from_scene(i as u64, scene));
        }
        out::write_jsonl(&dir.join("val_detections.jsonl"), &det_records)?;
        out::write_jsonl(&dir.join("val_gt.jsonl"), &gt_records)?;
    }
    println!(
        "trained {} epochs; best val AP {}",
        outcome.log.len(),
        outcome
            .best
            .val_ap
            .map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn detections_to_eval(records: &[DetectionRecord]) -> Result<Vec<Vec<EvalDet>>> {
    records
        .iter()
        .map(|r| {
            r.boxes
                .iter()
                .map(|&(x1, y1, x2, y2, score)| {
                    Ok(EvalDet {
                        bbox: BBox::new(x1, y1, x2, y2).map_err(|e| {
                            Error::data(format!("image {}: {e}", r.image_id))
                        })?,
                        score,
                    })
                })
                .collect()
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (_file, dir) = prepare_out(&a.common)?;
    let det_records: Vec<DetectionRecord> = out::read_jsonl(&a.detections)?;
    let gt_records: Vec<GtRecord> = out::read_jsonl(&a.gt)?;
    if det_records.len() != gt_records.len() {
        return Err(Error::data(format!(
            "{} detection images vs {} ground-truth images",
            det_records.len(),
            gt_records.len()
        )));
    }
    let dets = detections_to_eval(&det_records)?;
    let gts: Vec<Vec<GtBox>> = gt_records
        .iter()
        .map(|r| r.gt_boxes())
        .collect::<Result<_>>()?;
    let report = evaluate_ap(&dets, &gts, a.iou)?;

    out::write_json(&dir.join("report.json"), &report)?;
    std::fs::write(&dir.join("report.txt"), report_text(&report))?;
    std::fs::write(
        &dir.join("pr_curve.svg"),
        out::pr_curve_svg(&report.pr_curve, "precision-recall"),
    )?;
    #[derive(Serialize)]
    struct Resolved {
        iou: f64,
        n_images: usize,
    }
    out::write_manifest(
        &dir,
        "eval",
        &Resolved {
            iou: a.iou,
            n_images: gt_records.len(),
        },
        a.common.seed,
    )?;
    print!("{}", report_text(&report));
    Ok(())
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn report_text(r: &EvalReport) -> String {
    out::aligned_table(
        &["tier", "AP"],
        &[
            vec!["overall".into(), fmt_ap(r.ap_overall)],
            vec!["small".into(), fmt_ap(r.ap_small)],
            vec!["medium".into(), fmt_ap(r.ap_medium)],
            vec!["large".into(), fmt_ap(r.ap_large)],
        ],
    )
}

fn cmd_scale(a: ScaleArgs) -> Result<()> {
    let (_file, dir) = prepare_out(&a.common)?;
    let opset = CandidateOpSet::standard();
    let coeffs = ScaleCoeffs::default();
    let mut reports = Vec::new();
    for sc in family(&coeffs) {
        let det_cfg = sc.to_detector_config(1);
        let bundle = default_bundle(det_cfg.width, &opset);
        let mut r = cost_report(&format!("D{}", sc.phi), &det_cfg, &bundle, &opset)?;
        r.hardware = Some(hardware_descriptor());
        reports.push((sc, r));
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|(sc, r)| {
            vec![
                r.model.clone(),
                sc.resolution.to_string(),
                sc.width.to_string(),
                sc.head_depth.to_string(),
                r.params.to_string(),
                r.flops.to_string(),
            ]
        })
        .collect();
    let text = out::aligned_table(
        &["model", "res", "width", "head_depth", "params", "flops"],
        &rows,
    );
    std::fs::write(dir.join("scale.txt"), &text)?;
    out::write_json(&dir.join("scale.json"), &reports)?;
    out::write_manifest(&dir, "scale", &coeffs, a.common.seed)?;
    print!("{text}");
    Ok(())
}

fn cmd_count(a: CountArgs) -> Result<()> {
    let (_file, dir) = prepare_out(&a.common)?;
    let opset = CandidateOpSet::standard();
    let sc = scale_config(a.phi)?;
    let det_cfg = sc.to_detector_config(1);
    let bundle = default_bundle(det_cfg.width, &opset);
    let report = cost_report(&format!("D{}", a.phi), &det_cfg, &bundle, &opset)?;
    out::write_json(&dir.join("count.json"), &report)?;
    out::write_manifest(&dir, "count", &sc, a.common.seed)?;
    println!(
        "{}: {} params, {} mult-add FLOPs/image",
        report.model, report.params, report.flops
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (_file, dir) = prepare_out(&a.common)?;
    if a.iters == 0 {
        return Err(Error::config("--iters must be >= 1"));
    }
    let opset = CandidateOpSet::standard();
    let bundle = default_bundle(a.width, &opset);
    let cfg = SearchConfig::with_width(a.width, 128);
    let det_cfg = autodet_core::detector::DetectorConfig {
        resolution: cfg.resolution,
        backbone: cfg.backbone.clone(),
        width: cfg.width,
        head: cfg.head.clone(),
        embed_dim: cfg.embed_dim,
        anchor_scale: cfg.anchor_scale,
    };
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(a.common.seed);
    let det = Detector::new(&mut params, &mut rng, &opset, det_cfg, &bundle)?;

    let was = autodet_core::par::set_parallel(true);
    let par_ms = latency_bench(&det, &params, &opset, a.warmup, a.iters)?;
    autodet_core::par::set_parallel(false);
    let seq_ms = latency_bench(&det, &params, &opset, a.warmup, a.iters)?;
    autodet_core::par::set_parallel(was);

    #[derive(Serialize)]
    struct BenchReport {
        width: usize,
        warmup: usize,
        iters: usize,
        parallel_ms: f64,
        sequential_ms: f64,
        hardware: String,
    }
    let report = BenchReport {
        width: a.width,
        warmup: a.warmup,
        iters: a.iters,
        parallel_ms: par_ms,
        sequential_ms: seq_ms,
        hardware: hardware_descriptor(),
    };
    out::write_json(&dir.join("bench.json"), &report)?;
    out::write_manifest(&dir, "bench", &report, a.common.seed)?;
    println!(
        "median latency: {par_ms:.2} ms parallel, {seq_ms:.2} ms sequential ({})",
        report.hardware
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let (file, dir) = prepare_out(&a.common)?;
    let seed = file.seed.unwrap_or(a.common.seed);
    // every cell must parse before any training starts
    let mut grid: Vec<AblationSpec> = a
        .cells
        .iter()
        .map(|s| AblationSpec::parse(s))
        .collect::<Result<_>>()?;
    if a.method_grid {
        grid.extend(method_nodes_grid());
    }
    if grid.is_empty() {
        return Err(Error::config(
            "no grid cells: pass --cell key=value,... or --method-grid",
        ));
    }
    let mut run = AblationRunCfg::desk(a.width, seed);
    run.train = file.train_schedule(run.train);
    run.search = file.search_schedule(run.search);
    run.loss = file.loss_config(run.loss);
    if let Some(e) = a.train_epochs {
        run.train.total_epochs = e;
        run.train.decay_epochs.retain(|&d| d < e);
    }
    if let Some(e) = a.search_epochs {
        run.search.total_epochs = e;
        run.search.arch_update_start_epoch = (e / 2).min(e.saturating_sub(1));
    }
    let scenes = make_scenes(&file, Some(run.resolution), a.scenes, seed)?;
    let opset = CandidateOpSet::standard();
    let report = run_ablation(&grid, &run, &scenes, &opset)?;
    std::fs::write(dir.join("table.txt"), report.aligned_text())?;
    out::write_json(&dir.join("table.json"), &report)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        grid: &'a [AblationSpec],
        run: &'a AblationRunCfg,
    }
    out::write_manifest(
        &dir,
        "ablate",
        &Resolved {
            grid: &grid,
            run: &run,
        },
        seed,
    )?;
    print!("{}", report.aligned_text());
    Ok(())
}
