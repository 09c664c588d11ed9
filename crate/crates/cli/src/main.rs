//! `oblimatch`: synthesize scenes, match pairs, evaluate and visualize.

mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oblimatch::assign::{
    match_pair, random_weights, ConfidenceMode, MatchList, MatcherConfig, MatcherWeights,
};
use oblimatch::descfield::{
    load_grid, oracle_grid, save_grid, scene_keypoints, KeypointSet, DEFAULT_DIM,
};
use oblimatch::evalkit::{
    correctness_flags, run_confidence_ablation, run_manifest, FileEntry, Manifest, ManifestEntry,
    Matcher, Report,
};
use oblimatch::geom::{synth_scene, PoseRecord, SceneConfig, ScenePair};
use oblimatch::posest::RansacConfig;

#[derive(Parser)]
#[command(name = "oblimatch", version, about = "Detector-oblivious keypoint matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene pairs with oracle descriptor grids and a manifest.
    Synth(SynthArgs),
    /// Match the keypoints of one image pair.
    Match(MatchArgs),
    /// Evaluate every pair of a manifest and write a report.
    Eval(EvalArgs),
    /// Draw keypoints and matches of a pair as SVG.
    Viz(VizArgs),
    /// Write randomly initialized matcher weights.
    InitWeights(InitWeightsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pairs: usize,
    /// Points visible in both views.
    #[arg(long, default_value_t = 1024)]
    points: usize,
    /// Extra points visible in exactly one view.
    #[arg(long, default_value_t = 0)]
    exclusive: usize,
    /// Descriptor noise (norm of the perturbation before renormalizing).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Gaussian keypoint jitter in pixels.
    #[arg(long, default_value_t = 0.0)]
    pixel_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    baseline: f64,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 320)]
    width: u32,
    #[arg(long, default_value_t = 240)]
    height: u32,
    #[arg(long, default_value_t = 300.0)]
    focal: f64,
    #[arg(long, default_value_t = 15.0)]
    max_rotation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MatcherArgs {
    /// Matcher weights archive.
    #[arg(long, conflicts_with = "passthrough", required_unless_present = "passthrough")]
    weights: Option<PathBuf>,
    /// Untrained identity matcher scoring descriptor similarity only.
    #[arg(long)]
    passthrough: bool,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 100)]
    sinkhorn_iters: usize,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value = "oblivious")]
    confidence_mode: ConfidenceMode,
}

impl MatcherArgs {
    /// `dim` is only used for the passthrough matcher.
    fn build(&self, dim: usize) -> Result<Matcher> {
        let base = MatcherConfig {
            num_heads: self.heads,
            sinkhorn_iters: self.sinkhorn_iters,
            match_threshold: self.threshold,
            confidence_mode: self.confidence_mode,
            ..MatcherConfig::default()
        };
        let matcher = match &self.weights {
            None => Matcher::passthrough(MatcherConfig { dim, ..base }),
            Some(path) => {
                let weights = MatcherWeights::load(path)
                    .with_context(|| format!("loading weights {}", path.display()))?;
                let config = MatcherConfig {
                    dim: weights.dim(),
                    num_layers: weights.layers.len(),
                    ..base
                };
                Matcher { weights, config }
            }
        };
        matcher.config.validate()?;
        matcher.weights.check(&matcher.config)?;
        Ok(matcher)
    }
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    grid_a: PathBuf,
    #[arg(long)]
    grid_b: PathBuf,
    #[arg(long)]
    kps_a: PathBuf,
    #[arg(long)]
    kps_b: PathBuf,
    #[command(flatten)]
    matcher: MatcherArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    matcher: MatcherArgs,
    /// Descriptor dimension for the passthrough matcher and for scene
    /// entries without one (default: taken from the first entry, else 256).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    ransac_iters: usize,
    #[arg(long, default_value_t = 0.99999)]
    ransac_confidence: f64,
    /// RANSAC inlier threshold in pixels.
    #[arg(long, default_value_t = 1.0)]
    inlier_threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate with native, random, zero and unit keypoint confidence.
    #[arg(long)]
    ablation: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    kps_a: PathBuf,
    #[arg(long)]
    kps_b: PathBuf,
    /// Matches JSON; omitted means keypoints only.
    #[arg(long)]
    matches: Option<PathBuf>,
    /// Scene file providing ground truth for coloring.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitWeightsArgs {
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    /// Self+cross attention layer pairs.
    #[arg(long, default_value_t = 9)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value = "oblivious")]
    confidence_mode: ConfidenceMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_synth(args: &SynthArgs) -> Result<ExitCode> {
    let config = SceneConfig {
        num_points: args.points,
        num_exclusive: args.exclusive,
        image_size: (args.width, args.height),
        focal: args.focal,
        baseline: args.baseline,
        max_rotation_deg: args.max_rotation,
        ..SceneConfig::default()
    };
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(args.seed);
    let mut entries = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let (scene_seed, grid_seed, kp_seed): (u64, u64, u64) =
            (seeds.random(), seeds.random(), seeds.random());
        let scene = synth_scene(&config, scene_seed)?;
        let (grid_a, grid_b) = oracle_grid(&scene, args.dim, args.noise, grid_seed)?;
        let kps = scene_keypoints(&scene, args.pixel_noise, kp_seed);

        let rel = PathBuf::from(format!("pair_{i:04}"));
        let dir = args.out_dir.join(&rel);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        scene.save(dir.join("scene.json"))?;
        save_grid(&grid_a, dir.join("grid_a.dgrd"))?;
        save_grid(&grid_b, dir.join("grid_b.dgrd"))?;
        kps.a.save(dir.join("kps_a.json"))?;
        kps.b.save(dir.join("kps_b.json"))?;
        entries.push(ManifestEntry::Files(FileEntry {
            grid_a: rel.join("grid_a.dgrd"),
            grid_b: rel.join("grid_b.dgrd"),
            keypoints_a: rel.join("kps_a.json"),
            keypoints_b: rel.join("kps_b.json"),
            intrinsics_a: scene.intrinsics_a,
            intrinsics_b: scene.intrinsics_b,
            pose_gt: PoseRecord::from(&scene.pose),
        }));
        log::info!("pair {i}: {} points", scene.points.len());
    }
    let manifest_path = args.out_dir.join("manifest.json");
    Manifest::new(entries, &args.out_dir).save(&manifest_path)?;
    println!("{}", manifest_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_match(args: &MatchArgs) -> Result<ExitCode> {
    let grid_a = load_grid(&args.grid_a)?;
    let grid_b = load_grid(&args.grid_b)?;
    let kps_a = KeypointSet::load(&args.kps_a)?;
    let kps_b = KeypointSet::load(&args.kps_b)?;
    let matcher = args.matcher.build(grid_a.dim())?;
    let (_, matches) = match_pair(
        &kps_a,
        &kps_b,
        &grid_a,
        &grid_b,
        &matcher.weights,
        &matcher.config,
    )?;
    write_text(&args.out, &matches.to_json())?;
    log::info!("{} matches", matches.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let manifest = Manifest::load(&args.manifest)?;
    if manifest.is_empty() {
        bail!("manifest {} has no entries", args.manifest.display());
    }
    let dim = match args.dim {
        Some(d) => d,
        None => manifest.entry_dim(0)?.unwrap_or(DEFAULT_DIM),
    };
    let matcher = args.matcher.build(dim)?;
    let ransac = RansacConfig {
        max_iters: args.ransac_iters,
        confidence: args.ransac_confidence,
        inlier_threshold_pix: args.inlier_threshold,
        seed: args.seed,
    };
    let reports = if args.ablation {
        run_confidence_ablation(&manifest, &matcher, &ransac, args.jobs, args.seed)?
    } else {
        let label = args.label.clone().unwrap_or_else(|| {
            match matcher.config.confidence_mode {
                ConfidenceMode::Oblivious => "oblivious",
                ConfidenceMode::Legacy => "legacy",
            }
            .to_string()
        });
        vec![run_manifest(&manifest, &matcher, &ransac, args.jobs, &label)?]
    };
    let text = if args.ablation {
        let mut s = serde_json::to_string_pretty(&reports)?;
        s.push('\n');
        s
    } else {
        reports[0].to_json()
    };
    write_text(&args.out, &text)?;
    for r in &reports {
        let rec = &r.record;
        eprintln!(
            "{:>10}  AUC@5 {:6.2}  @10 {:6.2}  @20 {:6.2}  P {:6.2}  M {:6.2}  ({} pairs, {} failed)",
            rec.label,
            rec.auc.at5,
            rec.auc.at10,
            rec.auc.at20,
            rec.precision,
            rec.matching_score,
            rec.num_pairs,
            r.num_failures()
        );
    }
    let failed = reports.iter().any(|r: &Report| r.num_failures() > 0);
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_viz(args: &VizArgs) -> Result<ExitCode> {
    let kps_a = KeypointSet::load(&args.kps_a)?;
    let kps_b = KeypointSet::load(&args.kps_b)?;
    let matches = match &args.matches {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            MatchList::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => MatchList::default(),
    };
    if let Some(m) = matches.0.iter().find(|m| m.a >= kps_a.len() || m.b >= kps_b.len()) {
        bail!("match ({}, {}) indexes past the keypoint sets", m.a, m.b);
    }
    let correct: Vec<Option<bool>> = match &args.scene {
        Some(p) => {
            let scene = ScenePair::load(p)?;
            correctness_flags(
                &matches.0,
                &kps_a,
                &kps_b,
                &scene.pose,
                &scene.intrinsics_a,
                &scene.intrinsics_b,
            )?
            .into_iter()
            .map(Some)
            .collect()
        }
        None => vec![None; matches.len()],
    };
    let lines: Vec<svg::Line> = matches
        .0
        .iter()
        .zip(correct)
        .map(|(m, correct)| svg::Line {
            a: m.a,
            b: m.b,
            correct,
        })
        .collect();
    write_text(&args.out, &svg::render(&kps_a, &kps_b, &lines))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_init_weights(args: &InitWeightsArgs) -> Result<ExitCode> {
    let config = MatcherConfig {
        dim: args.dim,
        num_layers: args.layers,
        num_heads: args.heads,
        confidence_mode: args.confidence_mode,
        ..MatcherConfig::default()
    };
    config.validate()?;
    random_weights(&config, args.seed).save(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OBLIMATCH_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Match(a) => cmd_match(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(a),
        Command::InitWeights(a) => cmd_init_weights(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
