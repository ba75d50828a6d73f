use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use labelprop_core::pipeline::{
    aggregate_rows, load_benchmark, run_benchmark, summarize, sweep, FeatureSource, SweepSpec,
    VideoData,
};
use labelprop_core::scheduler::plan_clips;
use labelprop_core::synthkit::{benchmark_videos, generate_benchmark, SynthConfig, MANIFEST_FILE};
use labelprop_core::tensorio::{
    frame_file_name, load_feature_volume, load_frame_image, load_label_grid, save_frame_image,
    save_label_grid, write_atomic,
};
use labelprop_core::viz::{overlay_masks, pca_rgb};
use labelprop_core::{
    evaluate_sequence, fuse, run, stitch_features, DatasetProfile, Error, FeatureVolume,
    FusionWeight, PropagationConfig, SweepAxis, SweepRow,
};

const EXIT_OTHER: u8 = 1;
const EXIT_MISSING: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_SHAPE: u8 = 5;
const EXIT_CONFIG: u8 = 6;

#[derive(Parser)]
#[command(
    name = "labelprop",
    version,
    about = "Track objects through video by propagating first-frame masks over dense features"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of `key=value` lines supplying defaults for the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Tuning {
    /// Preset bundle of fusion weight, temperature and window settings.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    temp: Option<f64>,
    /// Previous frames kept in the reference queue besides frame 1.
    #[arg(long)]
    context: Option<usize>,
    /// Motion weight of the fused features.
    #[arg(long)]
    lambda: Option<f64>,
    /// Clip length used to stitch per-clip feature files.
    #[arg(long)]
    window: Option<usize>,
    /// Frames shared by consecutive clips.
    #[arg(long)]
    overlap: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Davis,
    Similar,
    Kubric,
}

impl From<ProfileArg> for DatasetProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Davis => DatasetProfile::Davis,
            ProfileArg::Similar => DatasetProfile::Similar,
            ProfileArg::Kubric => DatasetProfile::Kubric,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum SourceArg {
    Motion,
    Appearance,
    Fused,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the identical-balls benchmark.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Feature grid stride relative to the frames.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Propagate first-frame labels through a feature volume.
    Propagate {
        /// Motion feature file; repeat for consecutive clips.
        #[arg(long, required = true)]
        features: Vec<PathBuf>,
        /// Appearance feature file(s); when given, both streams are fused.
        #[arg(long)]
        features_appearance: Vec<PathBuf>,
        /// Ground-truth label grid; only its first frame is used.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print per-frame wall-clock times to stderr.
        #[arg(long)]
        profile_timing: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Score predicted labels against ground truth.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Report file (key=value lines); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-object, per-frame scores.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render visualizations.
    #[command(subcommand)]
    Viz(VizCommand),
    /// Sweep one parameter over a benchmark directory and write a CSV table.
    Sweep {
        /// Benchmark directory containing the manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also emit one row per video and value.
        #[arg(long)]
        per_video: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Track a whole benchmark and report aggregate scores and runtime.
    Bench {
        /// Benchmark directory; generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "fused")]
        source: SourceArg,
        #[arg(long)]
        profile_timing: bool,
        #[command(flatten)]
        tuning: Tuning,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Lambda,
    Overlap,
    Tau,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Lambda => SweepAxis::Lambda,
            AxisArg::Overlap => SweepAxis::Overlap,
            AxisArg::Tau => SweepAxis::Tau,
        }
    }
}

#[derive(Subcommand)]
enum VizCommand {
    /// Joint PCA of two feature volumes mapped to RGB.
    Pca {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        features_appearance: PathBuf,
        /// Output directory; receives `a/` and `b/` frame folders.
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend label colors over video frames.
    Overlay {
        /// Directory of `frame_NNNNN.ppm` files.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
}

/// `key=value` defaults from `--config`; command-line flags take precedence.
#[derive(Default)]
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            map.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> anyhow::Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("config key `{key}`: cannot parse `{v}`")).into()
            }),
        }
    }
}

struct Resolved {
    profile: DatasetProfile,
    config: PropagationConfig,
    lambda: f64,
    window: usize,
    overlap: usize,
}

fn resolve(t: &Tuning, file: &FileConfig) -> anyhow::Result<Resolved> {
    let profile: DatasetProfile = match t.profile {
        Some(p) => p.into(),
        None => file
            .get::<String>(None, "profile")?
            .map(|s| s.parse::<DatasetProfile>())
            .transpose()?
            .unwrap_or_default(),
    };
    let mut config = profile.propagation_config();
    if let Some(v) = file.get(t.radius, "radius")? {
        config.radius = v;
    }
    if let Some(v) = file.get(t.topk, "topk")? {
        config.top_k = v;
    }
    if let Some(v) = file.get(t.temp, "temp")? {
        config.temperature = v;
    }
    if let Some(v) = file.get(t.context, "context")? {
        config.max_context = v;
    }
    config.validate()?;
    let lambda = file.get(t.lambda, "lambda")?.unwrap_or(profile.lambda());
    FusionWeight::new(lambda)?;
    let window = file.get(t.window, "window")?.unwrap_or(16);
    let overlap = file.get(t.overlap, "overlap")?.unwrap_or(2);
    Ok(Resolved {
        profile,
        config,
        lambda,
        window,
        overlap,
    })
}

fn load_volume(path: &Path) -> anyhow::Result<FeatureVolume> {
    load_feature_volume(path).with_context(|| format!("reading features {}", path.display()))
}

/// Loads one volume, or stitches several consecutive clip volumes of a
/// `frames`-long video.
fn load_stitched(
    paths: &[PathBuf],
    frames: usize,
    window: usize,
    overlap: usize,
) -> anyhow::Result<FeatureVolume> {
    let vols = paths
        .iter()
        .map(|p| load_volume(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if vols.len() == 1 {
        return Ok(vols.into_iter().next().expect("one volume"));
    }
    let plan = plan_clips(frames, window, overlap)?;
    Ok(stitch_features(&plan, &vols)?)
}

fn cmd_gen(
    out: &Path,
    videos: Option<usize>,
    seed: Option<u64>,
    dims: (Option<usize>, Option<usize>, Option<usize>, Option<usize>),
    file: &FileConfig,
) -> anyhow::Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: file.get(seed, "seed")?.unwrap_or(0),
        frames: file.get(dims.0, "frames")?.unwrap_or(d.frames),
        height: file.get(dims.1, "height")?.unwrap_or(d.height),
        width: file.get(dims.2, "width")?.unwrap_or(d.width),
        stride: file.get(dims.3, "stride")?.unwrap_or(d.stride),
        ..d
    };
    let n = file.get(videos, "videos")?.unwrap_or(30);
    let manifest = generate_benchmark(&cfg, n, out)?;
    println!(
        "wrote {} videos to {}",
        manifest.entries.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn cmd_propagate(
    features: &[PathBuf],
    appearance: &[PathBuf],
    labels: &Path,
    out: &Path,
    timing: bool,
    r: &Resolved,
) -> anyhow::Result<()> {
    let gt =
        load_label_grid(labels).with_context(|| format!("reading labels {}", labels.display()))?;
    if features.len() > 1 && gt.frames == 1 {
        bail!(Error::Config(
            "stitching clip files needs labels covering every frame".into()
        ));
    }
    let motion = load_stitched(features, gt.frames, r.window, r.overlap)?;
    let volume = if appearance.is_empty() {
        motion
    } else {
        let app = load_stitched(appearance, gt.frames, r.window, r.overlap)?;
        fuse(&motion, &app, FusionWeight::new(r.lambda)?)?
    };
    let s = volume.shape();
    if gt.frames != 1 && gt.frames != s.frames {
        bail!(Error::Shape(format!(
            "features have {} frames, labels {}",
            s.frames, gt.frames
        )));
    }
    let output = run(&volume, &gt, &r.config)?;
    if timing {
        eprint!("{}", output.timing_report());
    }
    save_label_grid(out, &output.masks).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} frames to {}", output.masks.frames, out.display());
    Ok(())
}

fn cmd_eval(
    preds: &Path,
    labels: &Path,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> anyhow::Result<()> {
    let p = load_label_grid(preds)
        .with_context(|| format!("reading predictions {}", preds.display()))?;
    let g =
        load_label_grid(labels).with_context(|| format!("reading labels {}", labels.display()))?;
    let report = evaluate_sequence(&p, &g)?;
    let text = report.to_key_values();
    match out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    if let Some(path) = csv {
        let video = g
            .meta
            .get("video_id")
            .and_then(|v| v.as_str())
            .unwrap_or("video")
            .to_string();
        write_text(
            path,
            &format!(
                "{}\n{}",
                labelprop_core::EvalReport::CSV_HEADER,
                report.csv_rows(&video)
            ),
        )?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, |w| {
        w.write_all(text.as_bytes())?;
        Ok(text.len())
    })
    .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_viz(cmd: &VizCommand) -> anyhow::Result<()> {
    match cmd {
        VizCommand::Pca {
            features,
            features_appearance,
            out,
        } => {
            let (a, b) = pca_rgb(&load_volume(features)?, &load_volume(features_appearance)?)?;
            for (sub, frames) in [("a", &a), ("b", &b)] {
                let dir = out.join(sub);
                fs::create_dir_all(&dir)?;
                for (i, f) in frames.iter().enumerate() {
                    save_frame_image(&dir.join(frame_file_name(i)), f)?;
                }
            }
            println!(
                "wrote {} + {} frames to {}",
                a.len(),
                b.len(),
                out.display()
            );
        }
        VizCommand::Overlay {
            frames,
            labels,
            out,
            alpha,
        } => {
            let masks = load_label_grid(labels)
                .with_context(|| format!("reading labels {}", labels.display()))?;
            fs::create_dir_all(out)?;
            for t in 0..masks.frames {
                let src = frames.join(frame_file_name(t));
                let img = load_frame_image(&src)
                    .with_context(|| format!("reading frame {}", src.display()))?;
                if (img.height, img.width) != (masks.height, masks.width) {
                    bail!(Error::Shape(format!(
                        "frame {} is {}x{}, labels {}x{}",
                        t, img.height, img.width, masks.height, masks.width
                    )));
                }
                save_frame_image(
                    &out.join(frame_file_name(t)),
                    &overlay_masks(&img, masks.frame(t), *alpha)?,
                )?;
            }
            println!("wrote {} frames to {}", masks.frames, out.display());
        }
    }
    Ok(())
}

fn cmd_sweep(
    data: &Path,
    axis: SweepAxis,
    values: Vec<f64>,
    out: Option<&Path>,
    per_video: bool,
    r: &Resolved,
) -> anyhow::Result<()> {
    let videos =
        load_benchmark(data).with_context(|| format!("loading benchmark {}", data.display()))?;
    let spec = SweepSpec {
        axis,
        values,
        config: r.config.clone(),
        lambda: r.lambda,
        window: r.window,
        overlap: r.overlap,
    };
    let rows = sweep(&videos, &spec)?;
    let mut table: Vec<SweepRow> = aggregate_rows(&rows, axis, &spec.values);
    if per_video {
        table.extend(rows);
    }
    let mut text = format!("{}\n", SweepRow::CSV_HEADER);
    for row in &table {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    match out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_bench(
    data: Option<&Path>,
    videos: Option<usize>,
    seed: Option<u64>,
    source: SourceArg,
    timing: bool,
    r: &Resolved,
    file: &FileConfig,
) -> anyhow::Result<()> {
    let start = Instant::now();
    let set: Vec<VideoData> = match data {
        Some(dir) => {
            load_benchmark(dir).with_context(|| format!("loading benchmark {}", dir.display()))?
        }
        None => {
            let cfg = SynthConfig {
                seed: file.get(seed, "seed")?.unwrap_or(0),
                ..Default::default()
            };
            let n = file.get(videos, "videos")?.unwrap_or(30);
            benchmark_videos(&cfg, n)?
                .into_iter()
                .map(VideoData::from)
                .collect()
        }
    };
    let src = match source {
        SourceArg::Motion => FeatureSource::Motion,
        SourceArg::Appearance => FeatureSource::Appearance,
        SourceArg::Fused => FeatureSource::Fused(r.lambda),
    };
    let results = run_benchmark(&set, src, &r.config)?;
    let elapsed = start.elapsed();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for res in &results {
        writeln!(
            out,
            "{} Jm={:.6} Fm={:.6} JFm={:.6}",
            res.video_id, res.report.j_mean, res.report.f_mean, res.report.jf_mean
        )?;
        if timing {
            for line in res.output.timing_report().lines() {
                eprintln!("{} {line}", res.video_id);
            }
        }
    }
    let s = summarize(results.iter().map(|r| &r.report));
    writeln!(
        out,
        "profile={} videos={} objects={}",
        r.profile,
        results.len(),
        s.objects
    )?;
    writeln!(
        out,
        "Jm={:.6}\nFm={:.6}\nJFm={:.6}\nseconds={:.3}",
        s.j_mean,
        s.f_mean,
        s.jf_mean,
        elapsed.as_secs_f64()
    )?;
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(n) = file.get(cli.threads, "threads")? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!(Error::Config(e.to_string())))?;
    }
    match &cli.command {
        Command::Gen {
            out,
            videos,
            seed,
            frames,
            height,
            width,
            stride,
        } => cmd_gen(
            out,
            *videos,
            *seed,
            (*frames, *height, *width, *stride),
            &file,
        ),
        Command::Propagate {
            features,
            features_appearance,
            labels,
            out,
            profile_timing,
            tuning,
        } => cmd_propagate(
            features,
            features_appearance,
            labels,
            out,
            *profile_timing,
            &resolve(tuning, &file)?,
        ),
        Command::Eval {
            preds,
            labels,
            out,
            csv,
        } => cmd_eval(preds, labels, out.as_deref(), csv.as_deref()),
        Command::Viz(v) => cmd_viz(v),
        Command::Sweep {
            data,
            axis,
            values,
            out,
            per_video,
            tuning,
        } => cmd_sweep(
            data,
            (*axis).into(),
            values.clone(),
            out.as_deref(),
            *per_video,
            &resolve(tuning, &file)?,
        ),
        Command::Bench {
            data,
            videos,
            seed,
            source,
            profile_timing,
            tuning,
        } => cmd_bench(
            data.as_deref(),
            *videos,
            *seed,
            *source,
            *profile_timing,
            &resolve(tuning, &file)?,
            &file,
        ),
    }
}

fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(io) if io.kind() == io::ErrorKind::NotFound => {
                    (EXIT_MISSING, "missing file")
                }
                Error::Io(_) => (EXIT_OTHER, "i/o error"),
                Error::Format(_) | Error::Length { .. } | Error::Data(_) => {
                    (EXIT_FORMAT, "format error")
                }
                Error::Shape(_) => (EXIT_SHAPE, "shape error"),
                Error::Config(_) | Error::Placement { .. } => (EXIT_CONFIG, "config error"),
            };
        }
        if let Some(io) = cause.downcast_ref::<io::Error>() {
            return if io.kind() == io::ErrorKind::NotFound {
                (EXIT_MISSING, "missing file")
            } else {
                (EXIT_OTHER, "i/o error")
            };
        }
    }
    (EXIT_OTHER, "error")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, class) = classify(&err);
            let detail = err
                .chain()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(": ");
            eprintln!("labelprop: {class}: {detail}");
            ExitCode::from(code)
        }
    }
}
