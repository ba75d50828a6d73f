//! Controlled benchmark of two identical balls moving independently in 2D,
//! with exact ground-truth masks and analytic oracle features.
//!
//! Balls move at constant velocity and reflect elastically off the walls.
//! Both balls share color and radius, so only motion tells them apart.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensorio::{
    frame_file_name, save_feature_volume, save_frame_image, save_label_grid, FeatureKind,
    FeatureMeta, FeatureVolume, MaskSequence, RgbFrame, Shape4,
};

pub const PLACEMENT_ATTEMPTS: usize = 1000;
pub const NUM_BALLS: usize = 2;

pub const GROUND_TRUTH_FILE: &str = "gt.tedl";
pub const ORACLE_MOTION_FILE: &str = "oracle_motion.tedf";
pub const ORACLE_APPEARANCE_FILE: &str = "oracle_appearance.tedf";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Sampling stride of the oracle feature grid relative to the frames.
    pub stride: usize,
    pub radius_range: (f64, f64),
    /// Speed range in pixels per frame.
    pub speed_range: (f64, f64),
    /// Minimum angle between the two initial velocities, in degrees.
    pub min_angle_deg: f64,
    pub ball_color: [u8; 3],
    pub background_color: [u8; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 16,
            height: 64,
            width: 64,
            stride: 1,
            radius_range: (6.0, 12.0),
            speed_range: (1.5, 4.0),
            min_angle_deg: 60.0,
            ball_color: [230, 90, 40],
            background_color: [24, 32, 48],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (r_min, r_max) = self.radius_range;
        let (s_min, s_max) = self.speed_range;
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("frames, height and width must be positive"));
        }
        if self.stride == 0
            || !self.height.is_multiple_of(self.stride)
            || !self.width.is_multiple_of(self.stride)
        {
            return Err(Error::config(format!(
                "stride {} must divide {}x{}",
                self.stride, self.height, self.width
            )));
        }
        if !(r_min > 0.0 && r_min <= r_max) {
            return Err(Error::config(format!(
                "invalid radius range [{r_min}, {r_max}]"
            )));
        }
        if r_max >= self.height.min(self.width) as f64 / 4.0 {
            return Err(Error::config(format!(
                "max radius {r_max} must be below a quarter of the frame side"
            )));
        }
        if !(s_min >= 0.0 && s_min <= s_max && s_max.is_finite()) {
            return Err(Error::config(format!(
                "invalid speed range [{s_min}, {s_max}]"
            )));
        }
        if !(0.0..=180.0).contains(&self.min_angle_deg) {
            return Err(Error::config(format!(
                "min angle {} outside [0, 180]",
                self.min_angle_deg
            )));
        }
        Ok(())
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub object_id: u8,
    pub radius: f64,
    /// Ball center `(x, y)` per frame, in pixels.
    pub centers: Vec<(f64, f64)>,
    /// Velocity `(vx, vy)` carried at each frame. A wall contact during the
    /// following step flips the affected component from the next frame on.
    pub velocities: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub seed: u64,
    pub frames: Vec<RgbFrame>,
    pub masks: MaskSequence,
    pub tracks: Vec<ObjectTrack>,
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    // a single bounce suffices because speed < hi - lo, but loop anyway so
    // the invariant holds for any configuration
    loop {
        if *pos < lo {
            *pos = 2.0 * lo - *pos;
            *vel = -*vel;
        } else if *pos > hi {
            *pos = 2.0 * hi - *pos;
            *vel = -*vel;
        } else {
            break;
        }
    }
}

fn simulate(
    start: (f64, f64),
    velocity: (f64, f64),
    radius: f64,
    cfg: &SynthConfig,
    id: u8,
) -> ObjectTrack {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let (mut x, mut y) = start;
    let (mut vx, mut vy) = velocity;
    let mut centers = Vec::with_capacity(cfg.frames);
    let mut velocities = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        centers.push((x, y));
        let (mut nx, mut ny) = (x + vx, y + vy);
        let (mut nvx, mut nvy) = (vx, vy);
        reflect(&mut nx, &mut nvx, radius, w - radius);
        reflect(&mut ny, &mut nvy, radius, h - radius);
        velocities.push((vx, vy));
        x = nx;
        y = ny;
        vx = nvx;
        vy = nvy;
    }
    ObjectTrack {
        object_id: id,
        radius,
        centers,
        velocities,
    }
}

fn rasterize(tracks: &[ObjectTrack], cfg: &SynthConfig) -> (Vec<RgbFrame>, MaskSequence) {
    let (h, w) = (cfg.height, cfg.width);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut ids = vec![0u8; cfg.frames * h * w];
    for t in 0..cfg.frames {
        let mut img = RgbFrame::filled(w, h, cfg.background_color);
        let plane = &mut ids[t * h * w..(t + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // lower id wins where disks overlap
                let hit = tracks.iter().find(|tr| {
                    let (cx, cy) = tr.centers[t];
                    (px - cx).powi(2) + (py - cy).powi(2) <= tr.radius * tr.radius
                });
                if let Some(tr) = hit {
                    plane[y * w + x] = tr.object_id;
                    img.set_pixel(y, x, cfg.ball_color);
                }
            }
        }
        frames.push(img);
    }
    let masks = MaskSequence::new(cfg.frames, h, w, tracks.len(), ids)
        .expect("rasterized ids within range");
    (frames, masks)
}

/// Simulates and renders one video from `cfg.seed`.
pub fn generate_video(cfg: &SynthConfig) -> Result<SyntheticVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (r_min, r_max) = cfg.radius_range;
    let radius = if r_min == r_max {
        r_min
    } else {
        rng.random_range(r_min..=r_max)
    };
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let mut placed = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let a = (
            rng.random_range(radius..=w - radius),
            rng.random_range(radius..=h - radius),
        );
        let b = (
            rng.random_range(radius..=w - radius),
            rng.random_range(radius..=h - radius),
        );
        let dist = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        if dist > 2.0 * radius {
            placed = Some((a, b));
            break;
        }
    }
    let (start_a, start_b) = placed.ok_or(Error::Placement {
        attempts: PLACEMENT_ATTEMPTS,
    })?;

    let (s_min, s_max) = cfg.speed_range;
    let mut speed = || {
        if s_min == s_max {
            s_min
        } else {
            rng.random_range(s_min..=s_max)
        }
    };
    let (speed_a, speed_b) = (speed(), speed());
    let heading_a = rng.random_range(0.0..2.0 * PI);
    // offset in [min, 2pi - min] keeps the unsigned angle between headings >= min
    let min_angle = cfg.min_angle_deg.to_radians();
    let offset = if min_angle >= PI {
        PI
    } else {
        rng.random_range(min_angle..=2.0 * PI - min_angle)
    };
    let heading_b = heading_a + offset;

    let tracks = vec![
        simulate(
            start_a,
            (speed_a * heading_a.cos(), speed_a * heading_a.sin()),
            radius,
            cfg,
            1,
        ),
        simulate(
            start_b,
            (speed_b * heading_b.cos(), speed_b * heading_b.sin()),
            radius,
            cfg,
            2,
        ),
    ];
    let (frames, mut masks) = rasterize(&tracks, cfg);
    masks.meta.insert("seed".into(), cfg.seed.into());
    Ok(SyntheticVideo {
        seed: cfg.seed,
        frames,
        masks,
        tracks,
    })
}

/// Zero-based pixel sampled for feature cell `i` at the given stride.
#[inline]
fn sample_index(i: usize, stride: usize) -> usize {
    i * stride + stride / 2
}

fn oracle_volume(
    cfg: &SynthConfig,
    kind: FeatureKind,
    video_id: &str,
    mut feature_at: impl FnMut(usize, usize, usize) -> [f64; 4],
) -> Result<FeatureVolume> {
    let (fh, fw) = cfg.feature_dims();
    let shape = Shape4::new(cfg.frames, 4, fh, fw);
    let plane = fh * fw;
    let mut data = vec![0.0f32; shape.len()];
    for t in 0..cfg.frames {
        let frame = &mut data[t * 4 * plane..(t + 1) * 4 * plane];
        for y in 0..fh {
            for x in 0..fw {
                let v = feature_at(t, sample_index(y, cfg.stride), sample_index(x, cfg.stride));
                let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                for (c, val) in v.iter().enumerate() {
                    frame[c * plane + y * fw + x] = (val / n) as f32;
                }
            }
        }
    }
    let mut meta = FeatureMeta::new(video_id, kind);
    meta.extra.insert("stride".into(), cfg.stride.into());
    FeatureVolume::new(shape, data, meta)
}

/// Background pixels get `(0, 0, 0, 1)`; pixels of object `o` at frame `t`
/// get `normalize(vx, vy, 1, 0)` from that object's velocity.
pub fn oracle_motion_features(
    masks: &MaskSequence,
    tracks: &[ObjectTrack],
    cfg: &SynthConfig,
) -> Result<FeatureVolume> {
    if (masks.frames, masks.height, masks.width) != (cfg.frames, cfg.height, cfg.width) {
        return Err(Error::shape("masks do not match the synthesis config"));
    }
    let w = cfg.width;
    oracle_volume(cfg, FeatureKind::OracleMotion, "", |t, py, px| {
        let id = masks.frame(t)[py * w + px];
        match tracks.iter().find(|tr| tr.object_id == id && id != 0) {
            Some(tr) => {
                let (vx, vy) = tr.velocities[t];
                [vx, vy, 1.0, 0.0]
            }
            None => [0.0, 0.0, 0.0, 1.0],
        }
    })
}

/// `normalize(R, G, B, 1)` with color channels scaled to `[0, 1]`.
pub fn oracle_appearance_features(frames: &[RgbFrame], cfg: &SynthConfig) -> Result<FeatureVolume> {
    if frames.len() != cfg.frames
        || frames
            .iter()
            .any(|f| (f.height, f.width) != (cfg.height, cfg.width))
    {
        return Err(Error::shape("frames do not match the synthesis config"));
    }
    oracle_volume(cfg, FeatureKind::OracleAppearance, "", |t, py, px| {
        let [r, g, b] = frames[t].pixel(py, px);
        [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0, 1.0]
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                e.video_id, e.seed, e.frames, e.height, e.width
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || {
                Error::format(format!(
                    "manifest line {}: expected `<video_id> <seed> <T> <H> <W>`",
                    lineno + 1
                ))
            };
            if fields.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
            entries.push(ManifestEntry {
                video_id: fields[0].to_string(),
                seed: num(fields[1])?,
                frames: num(fields[2])? as usize,
                height: num(fields[3])? as usize,
                width: num(fields[4])? as usize,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }
}

/// Seed of the `index`-th video of a benchmark (SplitMix64 of the base seed
/// and the index), independent of generation order.
pub fn video_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:03}")
}

/// A generated video together with both oracle feature volumes.
#[derive(Debug, Clone)]
pub struct BenchmarkVideo {
    pub video_id: String,
    pub video: SyntheticVideo,
    pub motion: FeatureVolume,
    pub appearance: FeatureVolume,
}

pub fn build_video(cfg: &SynthConfig, id: &str) -> Result<BenchmarkVideo> {
    let video = generate_video(cfg)?;
    let mut motion = oracle_motion_features(&video.masks, &video.tracks, cfg)?;
    let mut appearance = oracle_appearance_features(&video.frames, cfg)?;
    motion.meta.video_id = id.to_string();
    appearance.meta.video_id = id.to_string();
    let mut video = video;
    video.masks.meta.insert("video_id".into(), id.into());
    Ok(BenchmarkVideo {
        video_id: id.to_string(),
        video,
        motion,
        appearance,
    })
}

/// Builds `n_videos` videos in memory; video `i` uses [`video_seed`]`(cfg.seed, i)`.
pub fn benchmark_videos(cfg: &SynthConfig, n_videos: usize) -> Result<Vec<BenchmarkVideo>> {
    cfg.validate()?;
    (0..n_videos)
        .into_par_iter()
        .map(|i| {
            build_video(
                &SynthConfig {
                    seed: video_seed(cfg.seed, i),
                    ..cfg.clone()
                },
                &video_id(i),
            )
        })
        .collect()
}

fn write_video_dir(dir: &Path, bv: &BenchmarkVideo) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, frame) in bv.video.frames.iter().enumerate() {
        save_frame_image(&dir.join(frame_file_name(i)), frame)?;
    }
    save_label_grid(&dir.join(GROUND_TRUTH_FILE), &bv.video.masks)?;
    save_feature_volume(&dir.join(ORACLE_MOTION_FILE), &bv.motion)?;
    save_feature_volume(&dir.join(ORACLE_APPEARANCE_FILE), &bv.appearance)?;
    Ok(())
}

/// Writes frames, ground truth and oracle volumes for each video into
/// `out_dir/<video_id>/`, plus `out_dir/manifest.txt`.
pub fn generate_benchmark(cfg: &SynthConfig, n_videos: usize, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let entries: Vec<ManifestEntry> = (0..n_videos)
        .into_par_iter()
        .map(|i| {
            let seed = video_seed(cfg.seed, i);
            let id = video_id(i);
            let bv = build_video(
                &SynthConfig {
                    seed,
                    ..cfg.clone()
                },
                &id,
            )?;
            write_video_dir(&out_dir.join(&id), &bv)?;
            Ok(ManifestEntry {
                video_id: id,
                seed,
                frames: cfg.frames,
                height: cfg.height,
                width: cfg.width,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest { entries };
    crate::tensorio::write_atomic(&out_dir.join(MANIFEST_FILE), |w| {
        let text = manifest.to_text();
        w.write_all(text.as_bytes())?;
        Ok(text.len())
    })?;
    Ok(manifest)
}

/// Regenerates every video listed in `manifest` from its recorded seed.
/// `cfg` supplies everything except seed and geometry.
pub fn regenerate_from_manifest(
    manifest: &Manifest,
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let video_cfg = SynthConfig {
                seed: e.seed,
                frames: e.frames,
                height: e.height,
                width: e.width,
                ..cfg.clone()
            };
            let dir = out_dir.join(&e.video_id);
            write_video_dir(&dir, &build_video(&video_cfg, &e.video_id)?)?;
            Ok(dir)
        })
        .collect()
}
