//! Benchmark runs and parameter sweeps over a directory of videos.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionWeight};
use crate::metrics::{evaluate_sequence, EvalReport};
use crate::propagator::{run, PropagationConfig, PropagationOutput};
use crate::scheduler::{plan_clips, split_features, stitch_features};
use crate::synthkit::{
    BenchmarkVideo, Manifest, GROUND_TRUTH_FILE, ORACLE_APPEARANCE_FILE, ORACLE_MOTION_FILE,
};
use crate::tensorio::{load_feature_volume, load_label_grid, FeatureVolume, MaskSequence};

/// Per-dataset defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetProfile {
    Davis,
    Similar,
    #[default]
    Kubric,
}

impl DatasetProfile {
    pub const ALL: [DatasetProfile; 3] = [Self::Davis, Self::Similar, Self::Kubric];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Davis => "davis",
            Self::Similar => "similar",
            Self::Kubric => "kubric",
        }
    }

    /// Noise step for motion features.
    pub fn tau_video(&self) -> u32 {
        match self {
            Self::Davis => 300,
            Self::Similar => 600,
            Self::Kubric => 900,
        }
    }

    /// Noise step for appearance features.
    pub fn tau_image(&self) -> u32 {
        51
    }

    /// Decoder block probed for motion features.
    pub fn motion_block(&self) -> u32 {
        3
    }

    /// Decoder block probed for appearance features.
    pub fn appearance_block(&self) -> u32 {
        8
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Self::Davis => 0.4,
            Self::Similar => 0.6,
            Self::Kubric => 1.0,
        }
    }

    pub fn temperature(&self) -> f64 {
        match self {
            Self::Davis => 0.2,
            Self::Similar | Self::Kubric => 0.1,
        }
    }

    pub fn propagation_config(&self) -> PropagationConfig {
        PropagationConfig {
            radius: 15,
            top_k: 10,
            temperature: self.temperature(),
            ..Default::default()
        }
    }
}

impl FromStr for DatasetProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown profile `{s}` (expected davis, similar or kubric)"
                ))
            })
    }
}

impl fmt::Display for DatasetProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Overlap,
    Tau,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Overlap => "overlap",
            Self::Tau => "tau",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "overlap" => Ok(Self::Overlap),
            "tau" => Ok(Self::Tau),
            _ => Err(Error::config(format!(
                "unknown sweep axis `{s}` (expected lambda, overlap or tau)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One line of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub video: String,
    pub axis: SweepAxis,
    pub value: f64,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "video,axis,value,Jm,Fm,JFm";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.video, self.axis, self.value, self.j_mean, self.f_mean, self.jf_mean
        )
    }
}

/// Feature volumes and ground truth of one video, in memory.
#[derive(Debug, Clone)]
pub struct VideoData {
    pub video_id: String,
    pub dir: Option<PathBuf>,
    pub gt: MaskSequence,
    pub motion: FeatureVolume,
    pub appearance: FeatureVolume,
}

impl From<BenchmarkVideo> for VideoData {
    fn from(bv: BenchmarkVideo) -> Self {
        Self {
            video_id: bv.video_id,
            dir: None,
            gt: bv.video.masks,
            motion: bv.motion,
            appearance: bv.appearance,
        }
    }
}

/// Loads ground truth and both oracle volumes of every video in the
/// manifest of `dir`.
pub fn load_benchmark(dir: &Path) -> Result<Vec<VideoData>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let vdir = dir.join(&e.video_id);
            Ok(VideoData {
                video_id: e.video_id.clone(),
                gt: load_label_grid(&vdir.join(GROUND_TRUTH_FILE))?,
                motion: load_feature_volume(&vdir.join(ORACLE_MOTION_FILE))?,
                appearance: load_feature_volume(&vdir.join(ORACLE_APPEARANCE_FILE))?,
                dir: Some(vdir),
            })
        })
        .collect()
}

/// Which features drive propagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureSource {
    Motion,
    Appearance,
    Fused(f64),
}

impl VideoData {
    pub fn features(&self, source: FeatureSource) -> Result<FeatureVolume> {
        match source {
            FeatureSource::Motion => Ok(self.motion.clone()),
            FeatureSource::Appearance => Ok(self.appearance.clone()),
            FeatureSource::Fused(lambda) => {
                fuse(&self.motion, &self.appearance, FusionWeight::new(lambda)?)
            }
        }
    }
}

/// Result of tracking one video.
#[derive(Debug, Clone)]
pub struct TrackResult {
    pub video_id: String,
    pub output: PropagationOutput,
    pub report: EvalReport,
}

pub fn track(
    video_id: &str,
    features: &FeatureVolume,
    gt: &MaskSequence,
    cfg: &PropagationConfig,
) -> Result<TrackResult> {
    let output = run(features, gt, cfg)?;
    let report = evaluate_sequence(&output.masks, gt)?;
    Ok(TrackResult {
        video_id: video_id.to_string(),
        output,
        report,
    })
}

/// Tracks every video in parallel; results keep the input order.
pub fn run_benchmark(
    videos: &[VideoData],
    source: FeatureSource,
    cfg: &PropagationConfig,
) -> Result<Vec<TrackResult>> {
    videos
        .par_iter()
        .map(|v| track(&v.video_id, &v.features(source)?, &v.gt, cfg))
        .collect()
}

/// Means over all objects of all videos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub objects: usize,
}

pub fn summarize<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Summary {
    let (mut j, mut f, mut n) = (0.0, 0.0, 0usize);
    for r in reports {
        j += r.object_j.iter().sum::<f64>();
        f += r.object_f.iter().sum::<f64>();
        n += r.object_j.len();
    }
    let (j_mean, f_mean) = if n == 0 {
        (1.0, 1.0)
    } else {
        (j / n as f64, f / n as f64)
    };
    Summary {
        j_mean,
        f_mean,
        jf_mean: (j_mean + f_mean) / 2.0,
        objects: n,
    }
}

/// Shared settings of a sweep; the swept axis overrides one of them.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub config: PropagationConfig,
    pub lambda: f64,
    /// Clip length used when re-chunking features for the overlap axis.
    pub window: usize,
    pub overlap: usize,
}

pub fn tau_file_name(tau: u32) -> String {
    format!("motion_tau{tau}.tedf")
}

fn tau_value(v: f64) -> Result<u32> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(Error::config(format!(
            "noise step must be a non-negative integer, got {v}"
        )))
    }
}

fn overlap_value(v: f64, window: usize) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < window {
        Ok(v as usize)
    } else {
        Err(Error::config(format!(
            "overlap must be an integer in [0, {window}), got {v}"
        )))
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config(format!(
                "no values given for the {} sweep",
                self.axis
            )));
        }
        self.config.validate()?;
        FusionWeight::new(self.lambda)?;
        for &v in &self.values {
            match self.axis {
                SweepAxis::Lambda => {
                    FusionWeight::new(v)?;
                }
                SweepAxis::Overlap => {
                    overlap_value(v, self.window)?;
                }
                SweepAxis::Tau => {
                    tau_value(v)?;
                }
            }
        }
        Ok(())
    }
}

/// Checks that every video directory holds a motion volume for every noise
/// step, naming all missing files at once.
pub fn check_tau_files(videos: &[VideoData], taus: &[u32]) -> Result<()> {
    let mut missing = Vec::new();
    for v in videos {
        let Some(dir) = &v.dir else {
            missing.push(format!("{} (no directory)", v.video_id));
            continue;
        };
        for &tau in taus {
            let p = dir.join(tau_file_name(tau));
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "missing noise-step feature files: {}",
            missing.join(", ")
        )))
    }
}

fn sweep_point(video: &VideoData, spec: &SweepSpec, value: f64) -> Result<EvalReport> {
    let features = match spec.axis {
        SweepAxis::Lambda => video.features(FeatureSource::Fused(value))?,
        SweepAxis::Overlap => {
            let overlap = overlap_value(value, spec.window)?;
            let fused = video.features(FeatureSource::Fused(spec.lambda))?;
            let plan = plan_clips(fused.shape().frames, spec.window, overlap)?;
            stitch_features(&plan, &split_features(&plan, &fused)?)?
        }
        SweepAxis::Tau => {
            let dir = video
                .dir
                .as_ref()
                .ok_or_else(|| Error::config("tau sweep needs videos on disk"))?;
            let motion = load_feature_volume(&dir.join(tau_file_name(tau_value(value)?)))?;
            fuse(&motion, &video.appearance, FusionWeight::new(spec.lambda)?)?
        }
    };
    Ok(track(&video.video_id, &features, &video.gt, &spec.config)?.report)
}

/// Per-video rows sorted by `(video, value)`.
pub fn sweep(videos: &[VideoData], spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    if spec.axis == SweepAxis::Tau {
        let taus = spec
            .values
            .iter()
            .map(|v| tau_value(*v))
            .collect::<Result<Vec<_>>>()?;
        check_tau_files(videos, &taus)?;
    }
    let jobs: Vec<(usize, f64)> = (0..videos.len())
        .flat_map(|i| spec.values.iter().map(move |v| (i, *v)))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(i, value)| {
            let r = sweep_point(&videos[i], spec, value)?;
            Ok(SweepRow {
                video: videos[i].video_id.clone(),
                axis: spec.axis,
                value,
                j_mean: r.j_mean,
                f_mean: r.f_mean,
                jf_mean: r.jf_mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.video.cmp(&b.video).then(a.value.total_cmp(&b.value)));
    Ok(rows)
}

/// Collapses per-video rows into one row per axis value (video `all`),
/// averaging each metric over videos, in the order of `values`.
pub fn aggregate_rows(rows: &[SweepRow], axis: SweepAxis, values: &[f64]) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&value| {
            let hits: Vec<&SweepRow> = rows.iter().filter(|r| r.value == value).collect();
            let n = hits.len().max(1) as f64;
            SweepRow {
                video: "all".into(),
                axis,
                value,
                j_mean: hits.iter().map(|r| r.j_mean).sum::<f64>() / n,
                f_mean: hits.iter().map(|r| r.f_mean).sum::<f64>() / n,
                jf_mean: hits.iter().map(|r| r.jf_mean).sum::<f64>() / n,
            }
        })
        .collect()
}
