//! Command-line front end: one subcommand per pipeline stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{run_strategy, subset_ratio, timing_summary, write_report, BenchOptions, Strategy};
use crate::connectivity::{
    build_graph_from_frames, load_graph, nearest_frame, retrieve_candidates, prune_visible, save_graph,
    DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::image::{read_ppm, write_ppm};
use crate::ingest::{
    accumulate, colorize, load_map, read_intrinsics, read_poses, read_scan_dir, save_map, split_train_test,
    Sequence,
};
use crate::raster::{rasterize_pyramid, Channels, DEFAULT_LEVELS};
use crate::render::{psnr, render_rgb, ssim, DEFAULT_BACKGROUND};
use crate::synth::{dump_scene, load_scene, make_canyon, paint, CanyonParams};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "CENPBG_THREADS";

/// Map file written next to a synthetic scene dump.
pub const SCENE_MAP_FILE: &str = "map.bin";

/// Directory of reference images in a synthetic scene dump.
pub const REFERENCE_DIR: &str = "refs";

#[derive(Debug, Parser)]
#[command(name = "cenpbg", version, about = "Connectivity-based visibility and point rasterization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accumulate scans into a map file.
    BuildMap(BuildMapArgs),
    /// Link frames to scan windows.
    BuildGraph(BuildGraphArgs),
    /// Render one view of a colored map.
    Render(RenderArgs),
    /// Compare visibility strategies on a synthetic scene.
    Bench(BenchArgs),
    /// Generate a synthetic street-canyon scene.
    Synth(SynthArgs),
}

/// Parameters shared by several commands.
#[derive(Clone, Debug, Args)]
pub struct Config {
    /// Window parameter: frame t sees scans t-n ..= t+2n.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub n: u32,
    /// Pyramid levels, as "0..5" or "0,1,2".
    #[arg(long, default_value = "0..5", value_parser = parse_levels)]
    pub levels: LevelSet,
    /// Raster channels: "color" or "descriptor".
    #[arg(long, default_value = "color", value_parser = parse_channels)]
    pub channels: Channels,
    /// Gray level for pixels no level covers.
    #[arg(long, default_value_t = DEFAULT_BACKGROUND)]
    pub background: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            n: DEFAULT_WINDOW,
            levels: LevelSet(DEFAULT_LEVELS.to_vec()),
            channels: Channels::Color,
            background: DEFAULT_BACKGROUND,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildMapArgs {
    #[arg(long)]
    pub scans: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of `<frame:06>.ppm` images used to color points.
    #[arg(long, requires = "intrinsics")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// Attach random descriptors of this width.
    #[arg(long, num_args = 0..=1, default_missing_value = "8")]
    pub descriptors: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub n: u32,
    /// Link only the training split, holding out every 10th frame.
    #[arg(long)]
    pub train_only: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Frame whose pose to render.
    #[arg(long)]
    pub frame: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth image; prints PSNR and SSIM when given.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub config: Config,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scene directory written by `synth`.
    #[arg(long)]
    pub scene: PathBuf,
    /// Comma-separated strategies, e.g. "connectivity,fullmap,depth:20".
    #[arg(long, default_value = "connectivity,fullmap", value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    /// Report path; with several strategies each gets `<stem>.<strategy>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the recall column, which needs an oracle pass over the whole map.
    #[arg(long)]
    pub no_recall: bool,
    #[command(flatten)]
    pub config: Config,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CanyonParams::default().length)]
    pub length: f64,
    #[arg(long, default_value_t = CanyonParams::default().wall_gap)]
    pub wall_gap: f64,
    #[arg(long, default_value_t = CanyonParams::default().wall_height)]
    pub wall_height: f64,
    #[arg(long, default_value_t = CanyonParams::default().camera_height)]
    pub camera_height: f64,
    #[arg(long, default_value_t = CanyonParams::default().point_spacing)]
    pub spacing: f64,
    #[arg(long, default_value_t = CanyonParams::default().occluder_spacing)]
    pub occluder_spacing: f64,
    #[arg(long, default_value_t = CanyonParams::default().lidar_range)]
    pub lidar_range: f64,
    #[arg(long, default_value_t = CanyonParams::default().frame_step)]
    pub frame_step: f64,
    #[arg(long, default_value_t = CanyonParams::default().occluders)]
    pub occluders: usize,
    #[arg(long, default_value_t = CanyonParams::default().width)]
    pub width: u32,
    #[arg(long, default_value_t = CanyonParams::default().height)]
    pub height: u32,
    #[arg(long, default_value_t = CanyonParams::default().focal)]
    pub focal: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also paint ground-truth images of the held-out frames.
    #[arg(long)]
    pub references: bool,
    #[arg(long, default_value_t = DEFAULT_BACKGROUND)]
    pub background: f32,
}

impl SynthArgs {
    pub fn params(&self) -> CanyonParams {
        CanyonParams {
            length: self.length,
            wall_gap: self.wall_gap,
            wall_height: self.wall_height,
            camera_height: self.camera_height,
            point_spacing: self.spacing,
            occluder_spacing: self.occluder_spacing,
            lidar_range: self.lidar_range,
            frame_step: self.frame_step,
            occluders: self.occluders,
            width: self.width,
            height: self.height,
            focal: self.focal,
            seed: self.seed,
        }
    }
}

/// Sorted, deduplicated pyramid levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSet(pub Vec<u32>);

pub fn parse_levels(s: &str) -> std::result::Result<LevelSet, String> {
    let s = s.trim();
    let mut levels: Vec<u32> = if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|e| format!("bad level range {s:?}: {e}"))?;
        let b: u32 = b.trim().trim_start_matches('=').parse().map_err(|e| format!("bad level range {s:?}: {e}"))?;
        if a > b {
            return Err(format!("empty level range {s:?}"));
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|e| format!("bad level {t:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?
    };
    levels.sort_unstable();
    levels.dedup();
    Ok(LevelSet(levels))
}

pub fn parse_channels(s: &str) -> std::result::Result<Channels, String> {
    match s {
        "color" | "3" => Ok(Channels::Color),
        "descriptor" => Ok(Channels::Descriptor),
        _ => Err(format!("unknown channels {s:?} (expected color or descriptor)")),
    }
}

/// Report path for one strategy of a multi-strategy run.
pub fn report_path(out: &Path, strategy: Strategy, several: bool) -> PathBuf {
    if !several {
        return out.to_path_buf();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let tag = strategy.to_string().replace(':', "-");
    out.with_file_name(format!("{stem}.{tag}.csv"))
}

/// Worker count from [`THREADS_ENV`], if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::domain(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Runs one parsed command, writing human-readable lines to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::BuildMap(a) => build_map(&a, out),
        Command::BuildGraph(a) => build_graph_cmd(&a, out),
        Command::Render(a) => render(&a, out),
        Command::Bench(a) => bench(&a, out),
        Command::Synth(a) => synth(&a, out),
    }
}

fn say(out: &mut dyn std::io::Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn build_map(a: &BuildMapArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let frames = read_poses(&a.poses)?;
    let scans = read_scan_dir(&a.scans)?;
    let poses = scans
        .iter()
        .map(|s| {
            frames
                .iter()
                .find(|(id, _)| *id == s.scan_id)
                .map(|(_, p)| p.clone())
                .ok_or_else(|| Error::format(&a.poses, format!("no pose for scan {}", s.scan_id)))
        })
        .collect::<Result<Vec<Pose>>>()?;
    let mut map = accumulate(&scans, &poses)?;
    if let (Some(dir), Some(k)) = (&a.images, &a.intrinsics) {
        let k = read_intrinsics(k)?;
        let mut images = BTreeMap::new();
        for (id, _) in &frames {
            let path = dir.join(format!("{id:06}.ppm"));
            if path.exists() {
                images.insert(*id, read_ppm(&path)?);
            }
        }
        map = colorize(map, &frames, &k, &images)?;
    }
    if let Some(dim) = a.descriptors {
        map = map.with_random_descriptors(dim, a.seed)?;
    }
    save_map(&a.out, &map)?;
    say(out, format!("points={} scans={}", map.len(), map.scan_ranges().len()))
}

fn build_graph_cmd(a: &BuildGraphArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let map = load_map(&a.map)?;
    let mut frames = read_poses(&a.poses)?;
    if a.train_only {
        let ids: Vec<u64> = frames.iter().map(|f| f.0).collect();
        let (train, _) = split_train_test(&ids)?;
        frames.retain(|(id, _)| train.binary_search(id).is_ok());
    }
    let graph = build_graph_from_frames(&frames, &map, a.n)?;
    save_graph(&a.out, &graph)?;
    say(out, format!("frames={} n={}", graph.len(), graph.n()))
}

fn render(a: &RenderArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let c = &a.config;
    if c.channels != Channels::Color {
        return Err(Error::domain("render needs color channels"));
    }
    let map = load_map(&a.map)?;
    let graph = load_graph(&a.graph)?;
    let k = read_intrinsics(&a.intrinsics)?;
    let frames = read_poses(&a.poses)?;
    let pose = frames
        .iter()
        .find(|(id, _)| *id == a.frame)
        .map(|(_, p)| p.clone())
        .ok_or_else(|| Error::domain(format!("frame {} is not in {}", a.frame, a.poses.display())))?;
    let source = if graph.entry(a.frame).is_some() {
        a.frame
    } else {
        nearest_frame(&graph, &pose)?
    };
    let candidates = retrieve_candidates(&graph, &map, source)?;
    let vis = prune_visible(&candidates, &map, &pose, &k);
    let mut pyramid = rasterize_pyramid(&map, &vis.point_indices, &pose, &k, &c.levels.0, c.channels)?;
    pyramid.source_frame = Some(source);
    let img = render_rgb(&pyramid, c.background)?;
    write_ppm(&a.out, &img)?;
    say(out, format!("frame={} source={} visible={}", a.frame, source, vis.len()))?;
    if let Some(r) = &a.reference {
        let reference = read_ppm(r)?;
        say(out, format!("psnr={:.6} ssim={:.6}", psnr(&img, &reference)?, ssim(&img, &reference)?))?;
    }
    Ok(())
}

/// Test-split queries and a graph over the train split of a scene dump.
pub fn bench_inputs(
    scene_dir: &Path,
    n: u32,
) -> Result<(crate::synth::SyntheticScene, Sequence, crate::connectivity::ConnectivityGraph, Vec<(u64, Pose)>)> {
    let scene = load_scene(scene_dir)?;
    let seq = match load_map(&scene_dir.join(SCENE_MAP_FILE)) {
        Ok(map) => Sequence::new(scene.frames(), scene.intrinsics, map)?,
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => scene.sequence()?,
        Err(e) => return Err(e),
    };
    let ids: Vec<u64> = seq.frames.iter().map(|f| f.0).collect();
    let (train, test) = split_train_test(&ids)?;
    let train_frames: Vec<(u64, Pose)> =
        seq.frames.iter().filter(|(id, _)| train.binary_search(id).is_ok()).cloned().collect();
    let graph = build_graph_from_frames(&train_frames, &seq.map, n)?;
    let queries = test.iter().filter_map(|&id| seq.pose(id).map(|p| (id, p.clone()))).collect();
    Ok((scene, seq, graph, queries))
}

fn bench(a: &BenchArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let c = &a.config;
    let (scene, seq, graph, queries) = bench_inputs(&a.scene, c.n)?;
    let opts = BenchOptions {
        levels: c.levels.0.clone(),
        channels: c.channels,
        score: true,
        recall: !a.no_recall,
    };
    let several = a.strategies.len() > 1;
    for &strategy in &a.strategies {
        let strategy = match strategy {
            Strategy::Connectivity(_) => Strategy::Connectivity(c.n),
            s => s,
        };
        let report = run_strategy(strategy, &seq, Some(&graph), &scene.surfaces, &queries, &opts)?;
        let path = report_path(&a.out, strategy, several);
        write_report(&path, &report)?;
        let t = timing_summary(&report)?;
        say(
            out,
            format!(
                "strategy={strategy} views={} retrieved_ratio={:.6} leak={:.6} precision={:.6} recall={:.6} prune_s={:.6} raster_s={:.6} fps={:.3} report={}",
                report.rows.len(),
                subset_ratio(&report),
                report.mean_leak(),
                report.mean_precision(),
                report.mean_recall(),
                t.mean_prune_s,
                t.mean_raster_s,
                t.fps,
                path.display()
            ),
        )?;
    }
    Ok(())
}

fn synth(a: &SynthArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let scene = make_canyon(&a.params())?;
    dump_scene(&scene, &a.out)?;
    let map = scene.map()?;
    save_map(&a.out.join(SCENE_MAP_FILE), &map)?;
    let frames = scene.frames();
    if a.references {
        let dir = a.out.join(REFERENCE_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ids: Vec<u64> = frames.iter().map(|f| f.0).collect();
        let (_, test) = split_train_test(&ids)?;
        for id in test {
            let pose = &frames.iter().find(|f| f.0 == id).expect("split ids come from frames").1;
            let img = paint(&scene.surfaces, pose, &scene.intrinsics, a.background)?;
            write_ppm(&dir.join(format!("{id:06}.ppm")), &img)?;
        }
    }
    say(out, format!("frames={} points={} surfaces={}", frames.len(), map.len(), scene.surfaces.len()))
}

/// Process exit code for an error: 2 for bad inputs, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_usage() {
        2
    } else {
        1
    }
}
