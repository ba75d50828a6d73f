//! Binary containers shared with the feature extractor.
//!
//! Two little-endian formats plus plain PPM frames:
//!
//! ```text
//! TEDF (features)                     TEDL (labels)
//! 0..4   b"TEDF"                      0..4   b"TEDL"
//! 4      version = 1                  4      version = 1
//! 5      dtype = 1 (f32 LE)           5      dtype = 2 (u8)
//! 6..8   zero                         6..8   zero
//! u32    rank = 4                     u32    rank = 3
//! u32x4  T, C, h, w                   u32x3  T, H, W
//! u32    metadata length M            u32    num_objects K
//! M      UTF-8 JSON metadata          u32    metadata length M
//! f32 x T*C*h*w (w fastest)           M      UTF-8 JSON metadata
//!                                     u8 x T*H*W
//! ```
//!
//! Metadata is a JSON object. Known keys are parsed into typed fields and
//! unknown keys survive a read/write cycle untouched.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"TEDF";
pub const LABEL_MAGIC: &[u8; 4] = b"TEDL";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U8: u8 = 2;

/// Largest object count representable with 8-bit ids.
pub const MAX_OBJECTS: usize = u8::MAX as usize;

/// Dimensions of a feature volume: frames, channels, rows, cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    fn checked_len(&self) -> Option<usize> {
        self.frames
            .checked_mul(self.channels)?
            .checked_mul(self.height)?
            .checked_mul(self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Motion,
    Appearance,
    #[default]
    Fused,
    OracleMotion,
    OracleAppearance,
}

impl FeatureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureKind::Motion => "motion",
            FeatureKind::Appearance => "appearance",
            FeatureKind::Fused => "fused",
            FeatureKind::OracleMotion => "oracle_motion",
            FeatureKind::OracleAppearance => "oracle_appearance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureMeta {
    pub video_id: String,
    pub clip_start_frame: u64,
    /// Diffusion noise step the features were extracted at.
    pub noise_step: u64,
    /// Index of the network block the activations were hooked from.
    pub block_index: u64,
    pub feature_kind: FeatureKind,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl FeatureMeta {
    pub fn new(video_id: impl Into<String>, kind: FeatureKind) -> Self {
        Self {
            video_id: video_id.into(),
            feature_kind: kind,
            ..Default::default()
        }
    }
}

/// Per-pixel representations of a video or clip, stored `T x C x h x w`
/// with `w` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    shape: Shape4,
    data: Vec<f32>,
    pub meta: FeatureMeta,
}

impl FeatureVolume {
    pub fn new(shape: Shape4, data: Vec<f32>, meta: FeatureMeta) -> Result<Self> {
        if shape.frames == 0 || shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::shape(format!(
                "feature volume dims must be positive, got {shape:?}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "feature volume {shape:?} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite feature value at flat index {pos}"
            )));
        }
        Ok(Self { shape, data, meta })
    }

    pub fn zeros(shape: Shape4, meta: FeatureMeta) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.len()], meta)
    }

    /// Builds a volume from pixel-major frames that share a geometry.
    pub fn from_frames(frames: &[FeatureFrame], meta: FeatureMeta) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::shape("no frames"))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let shape = Shape4::new(frames.len(), c, h, w);
        let mut data = Vec::with_capacity(shape.len());
        for frame in frames {
            if (frame.channels, frame.height, frame.width) != (c, h, w) {
                return Err(Error::shape("frames disagree on C/h/w"));
            }
            let plane = h * w;
            let start = data.len();
            data.resize(start + c * plane, 0.0);
            let dst = &mut data[start..];
            for p in 0..plane {
                for ch in 0..c {
                    dst[ch * plane + p] = frame.data[p * c + ch];
                }
            }
        }
        Self::new(shape, data, meta)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((t * s.channels + c) * s.height + y) * s.width + x
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(t, c, y, x)]
    }

    /// Channel-major slice of one frame.
    pub fn frame_data(&self, t: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Copies one frame into pixel-major layout for correspondence search.
    pub fn frame(&self, t: usize) -> FeatureFrame {
        let s = self.shape;
        let plane = s.plane_len();
        let src = self.frame_data(t);
        let mut data = vec![0.0; s.frame_len()];
        for ch in 0..s.channels {
            let chan = &src[ch * plane..(ch + 1) * plane];
            for (p, v) in chan.iter().enumerate() {
                data[p * s.channels + ch] = *v;
            }
        }
        FeatureFrame {
            height: s.height,
            width: s.width,
            channels: s.channels,
            data,
        }
    }

    /// Sub-volume holding `len` frames starting at zero-based `start`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.frames {
            return Err(Error::shape(format!(
                "frame range {start}+{len} outside volume of {} frames",
                self.shape.frames
            )));
        }
        let n = self.shape.frame_len();
        let data = self.data[start * n..(start + len) * n].to_vec();
        let mut meta = self.meta.clone();
        meta.clip_start_frame += start as u64;
        Ok(Self {
            shape: Shape4 {
                frames: len,
                ..self.shape
            },
            data,
            meta,
        })
    }

    /// Applies `f` to every value, re-checking finiteness.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.shape,
            self.data.iter().map(|v| f(*v)).collect(),
            self.meta.clone(),
        )
    }
}

/// One frame of features in pixel-major layout (`h x w x C`, channels fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureFrame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature frame {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Integer object-id masks, `T x H x W`, id 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    ids: Vec<u8>,
    pub meta: BTreeMap<String, Value>,
}

impl MaskSequence {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        num_objects: usize,
        ids: Vec<u8>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "mask dims must be positive, got {frames}x{height}x{width}"
            )));
        }
        if num_objects == 0 || num_objects > MAX_OBJECTS {
            return Err(Error::data(format!(
                "num_objects must be in 1..={MAX_OBJECTS}, got {num_objects}"
            )));
        }
        if ids.len() != frames * height * width {
            return Err(Error::shape(format!(
                "mask sequence {frames}x{height}x{width} needs {} ids, got {}",
                frames * height * width,
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize > num_objects) {
            return Err(Error::data(format!(
                "object id {bad} exceeds declared num_objects {num_objects}"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            num_objects,
            ids,
            meta: BTreeMap::new(),
        })
    }

    pub fn from_frames(
        frames: &[Vec<u8>],
        height: usize,
        width: usize,
        num_objects: usize,
    ) -> Result<Self> {
        let ids = frames.concat();
        Self::new(frames.len(), height, width, num_objects, ids)
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.ids[t * n..(t + 1) * n]
    }

    /// Checks that every object 1..=K is visible in the first frame, as
    /// required of ground truth handed to the propagator.
    pub fn check_first_frame_objects(&self) -> Result<()> {
        let first = self.frame(0);
        for obj in 1..=self.num_objects {
            if !first.iter().any(|&id| id as usize == obj) {
                return Err(Error::data(format!(
                    "object {obj} is absent from the first frame"
                )));
            }
        }
        Ok(())
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "rgb frame {width}x{height} with {} bytes",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

fn write_u32<W: Write + ?Sized>(sink: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::shape(format!("{v} does not fit in u32")))?;
    sink.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_header_bytes<R: Read + ?Sized, const N: usize>(source: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    source.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("truncated header"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read + ?Sized>(source: &mut R) -> Result<usize> {
    Ok(u32::from_le_bytes(read_header_bytes::<R, 4>(source)?) as usize)
}

fn check_preamble(pre: [u8; 8], magic: &[u8; 4], dtype: u8) -> Result<()> {
    if &pre[0..4] != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&pre[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    if pre[4] != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported version {}", pre[4])));
    }
    if pre[5] != dtype {
        return Err(Error::format(format!(
            "unsupported dtype code {}, expected {dtype}",
            pre[5]
        )));
    }
    if pre[6] != 0 || pre[7] != 0 {
        return Err(Error::format("reserved header bytes are not zero"));
    }
    Ok(())
}

/// Reads exactly `len` bytes, reporting a short stream as a length error.
fn read_payload<R: Read + ?Sized>(source: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    source.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Length {
            expected: len,
            actual: buf.len(),
        });
    }
    Ok(buf)
}

fn parse_meta<T: for<'de> Deserialize<'de> + Default>(bytes: &[u8]) -> Result<T> {
    if bytes.is_empty() {
        return Ok(T::default());
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::format(format!("metadata is not UTF-8: {e}")))?;
    serde_json::from_str(text)
        .map_err(|e| Error::format(format!("metadata is not a valid JSON object: {e}")))
}

pub fn write_feature_volume<W: Write + ?Sized>(vol: &FeatureVolume, sink: &mut W) -> Result<usize> {
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("refusing to write non-finite feature values"));
    }
    let meta = serde_json::to_vec(&vol.meta).map_err(|e| Error::format(e.to_string()))?;
    let s = vol.shape;

    sink.write_all(FEATURE_MAGIC)?;
    sink.write_all(&[FORMAT_VERSION, DTYPE_F32, 0, 0])?;
    write_u32(sink, 4)?;
    for d in [s.frames, s.channels, s.height, s.width] {
        write_u32(sink, d)?;
    }
    write_u32(sink, meta.len())?;
    sink.write_all(&meta)?;

    let mut payload = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    Ok(32 + meta.len() + payload.len())
}

pub fn read_feature_volume<R: Read + ?Sized>(source: &mut R) -> Result<FeatureVolume> {
    check_preamble(read_header_bytes::<R, 8>(source)?, FEATURE_MAGIC, DTYPE_F32)?;
    let rank = read_u32(source)?;
    if rank != 4 {
        return Err(Error::format(format!("feature rank must be 4, got {rank}")));
    }
    let shape = Shape4::new(
        read_u32(source)?,
        read_u32(source)?,
        read_u32(source)?,
        read_u32(source)?,
    );
    if shape.is_empty() {
        return Err(Error::format(format!("zero dimension in {shape:?}")));
    }
    let meta_len = read_u32(source)?;
    let meta: FeatureMeta = parse_meta(&read_payload(source, meta_len)?)?;

    let bytes = shape
        .checked_len()
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(format!("dims {shape:?} overflow")))?;
    let payload = read_payload(source, bytes)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureVolume::new(shape, data, meta)
}

pub fn write_label_grid<W: Write + ?Sized>(masks: &MaskSequence, sink: &mut W) -> Result<usize> {
    if let Some(bad) = masks
        .ids
        .iter()
        .find(|&&id| id as usize > masks.num_objects)
    {
        return Err(Error::data(format!(
            "object id {bad} exceeds num_objects {}",
            masks.num_objects
        )));
    }
    let meta = serde_json::to_vec(&masks.meta).map_err(|e| Error::format(e.to_string()))?;

    sink.write_all(LABEL_MAGIC)?;
    sink.write_all(&[FORMAT_VERSION, DTYPE_U8, 0, 0])?;
    write_u32(sink, 3)?;
    for d in [masks.frames, masks.height, masks.width] {
        write_u32(sink, d)?;
    }
    write_u32(sink, masks.num_objects)?;
    write_u32(sink, meta.len())?;
    sink.write_all(&meta)?;
    sink.write_all(&masks.ids)?;
    Ok(32 + meta.len() + masks.ids.len())
}

pub fn read_label_grid<R: Read + ?Sized>(source: &mut R) -> Result<MaskSequence> {
    check_preamble(read_header_bytes::<R, 8>(source)?, LABEL_MAGIC, DTYPE_U8)?;
    let rank = read_u32(source)?;
    if rank != 3 {
        return Err(Error::format(format!("label rank must be 3, got {rank}")));
    }
    let (t, h, w) = (read_u32(source)?, read_u32(source)?, read_u32(source)?);
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::format(format!("zero dimension in {t}x{h}x{w}")));
    }
    let num_objects = read_u32(source)?;
    let meta_len = read_u32(source)?;
    let meta: BTreeMap<String, Value> = parse_meta(&read_payload(source, meta_len)?)?;
    let n = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| Error::format("label dims overflow"))?;
    let ids = read_payload(source, n)?;
    let mut masks = MaskSequence::new(t, h, w, num_objects, ids)?;
    masks.meta = meta;
    Ok(masks)
}

/// Writes a binary PPM (P6, maxval 255).
pub fn write_frame_image<W: Write + ?Sized>(frame: &RgbFrame, sink: &mut W) -> Result<usize> {
    let header = format!("P6\n{} {}\n255\n", frame.width, frame.height);
    sink.write_all(header.as_bytes())?;
    sink.write_all(&frame.data)?;
    Ok(header.len() + frame.data.len())
}

/// Reads a binary PPM with maxval 255. Comments in the header are skipped.
pub fn read_frame_image<R: Read + ?Sized>(source: &mut R) -> Result<RgbFrame> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PPM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if tokens[0] != "P6" {
        return Err(Error::format(format!(
            "expected P6 magic, got {:?}",
            tokens[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::format(format!(
            "only maxval 255 is supported, got {maxval}"
        )));
    }
    let need = width * height * 3;
    let raster = bytes.get(pos.min(bytes.len())..).unwrap_or_default();
    if raster.len() < need {
        return Err(Error::Length {
            expected: need,
            actual: raster.len(),
        });
    }
    RgbFrame::new(width, height, raster[..need].to_vec())
}

/// Writes `path` through a temporary file in the same directory and renames
/// it into place only after `write` succeeds, so failures never leave a
/// truncated artifact behind.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<usize>
where
    F: FnOnce(&mut dyn Write) -> Result<usize>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let mut out = BufWriter::new(tmp);
    let n = write(&mut out)?;
    let tmp = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(n)
}

pub fn save_feature_volume(path: &Path, vol: &FeatureVolume) -> Result<usize> {
    write_atomic(path, |w| write_feature_volume(vol, w))
}

pub fn load_feature_volume(path: &Path) -> Result<FeatureVolume> {
    read_feature_volume(&mut BufReader::new(File::open(path)?))
}

pub fn save_label_grid(path: &Path, masks: &MaskSequence) -> Result<usize> {
    write_atomic(path, |w| write_label_grid(masks, w))
}

pub fn load_label_grid(path: &Path) -> Result<MaskSequence> {
    read_label_grid(&mut BufReader::new(File::open(path)?))
}

pub fn save_frame_image(path: &Path, frame: &RgbFrame) -> Result<usize> {
    write_atomic(path, |w| write_frame_image(frame, w))
}

pub fn load_frame_image(path: &Path) -> Result<RgbFrame> {
    read_frame_image(&mut BufReader::new(File::open(path)?))
}

/// Frame filename convention shared with the extractor (zero-based index).
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.ppm")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encode(vol: &FeatureVolume) -> Vec<u8> {
        let mut buf = Vec::new();
        write_feature_volume(vol, &mut buf).unwrap();
        buf
    }

    #[test]
    fn unit_zero_volume_layout() {
        let vol = FeatureVolume::zeros(Shape4::new(1, 1, 1, 1), FeatureMeta::default()).unwrap();
        let bytes = encode(&vol);
        assert_eq!(&bytes[0..4], b"TEDF");
        assert_eq!(bytes[4..8], [1, 1, 0, 0]);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        for i in 0..4 {
            let d = u32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap());
            assert_eq!(d, 1);
        }
        let m = u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 32 + m + 4);
        assert_eq!(&bytes[32 + m..], &[0, 0, 0, 0]);
        let meta: Value = serde_json::from_slice(&bytes[32..32 + m]).unwrap();
        assert!(meta.is_object());
    }

    #[test]
    fn seeded_volume_round_trips_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = Shape4::new(2, 3, 4, 5);
        let data: Vec<f32> = (0..shape.len())
            .map(|_| rng.random_range(-10.0..10.0))
            .collect();
        let mut meta = FeatureMeta::new("clip-a", FeatureKind::Motion);
        meta.noise_step = 900;
        meta.block_index = 3;
        meta.clip_start_frame = 14;
        meta.extra.insert("backbone".into(), Value::from("toy3d"));
        let vol = FeatureVolume::new(shape, data, meta).unwrap();

        let bytes = encode(&vol);
        let back = read_feature_volume(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.shape(), vol.shape());
        assert_eq!(back.meta, vol.meta);
        let a: Vec<u32> = vol.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn unknown_metadata_keys_survive() {
        let shape = Shape4::new(1, 1, 1, 2);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TEDF");
        bytes.extend_from_slice(&[1, 1, 0, 0]);
        for v in [4u32, 1, 1, 1, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let meta = br#"{"feature_kind":"appearance","noise_step":51,"sampler":{"n":4}}"#;
        bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        bytes.extend_from_slice(meta);
        for v in [1.5f32, -2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let vol = read_feature_volume(&mut bytes.as_slice()).unwrap();
        assert_eq!(vol.shape(), shape);
        assert_eq!(vol.meta.feature_kind, FeatureKind::Appearance);
        assert_eq!(vol.meta.noise_step, 51);
        assert_eq!(vol.meta.extra["sampler"], serde_json::json!({"n": 4}));
        let again = read_feature_volume(&mut encode(&vol).as_slice()).unwrap();
        assert_eq!(again.meta, vol.meta);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let vol = FeatureVolume::zeros(Shape4::new(1, 1, 1, 1), FeatureMeta::default()).unwrap();
        let mut bytes = encode(&vol);
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            read_feature_volume(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_version_and_dtype_are_format_errors() {
        let vol = FeatureVolume::zeros(Shape4::new(1, 1, 1, 1), FeatureMeta::default()).unwrap();
        let mut v = encode(&vol);
        v[4] = 2;
        assert!(matches!(
            read_feature_volume(&mut v.as_slice()),
            Err(Error::Format(_))
        ));
        let mut d = encode(&vol);
        d[5] = 2;
        assert!(matches!(
            read_feature_volume(&mut d.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let vol = FeatureVolume::zeros(Shape4::new(1, 1, 2, 5), FeatureMeta::default()).unwrap();
        let mut bytes = encode(&vol);
        bytes.truncate(bytes.len() - 4);
        match read_feature_volume(&mut bytes.as_slice()) {
            Err(Error::Length { expected, actual }) => {
                assert_eq!(expected, 40);
                assert_eq!(actual, 36);
            }
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn nan_payload_is_data_error() {
        let vol = FeatureVolume::zeros(Shape4::new(1, 1, 1, 2), FeatureMeta::default()).unwrap();
        let mut bytes = encode(&vol);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_feature_volume(&mut bytes.as_slice()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn non_finite_volume_is_rejected() {
        let r = FeatureVolume::new(
            Shape4::new(1, 1, 1, 1),
            vec![f32::INFINITY],
            FeatureMeta::default(),
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn frame_layout_conversion_round_trips() {
        let shape = Shape4::new(2, 3, 2, 2);
        let data: Vec<f32> = (0..shape.len()).map(|i| i as f32).collect();
        let vol = FeatureVolume::new(shape, data, FeatureMeta::default()).unwrap();
        let f1 = vol.frame(1);
        assert_eq!(
            f1.pixel(1, 0),
            &[
                vol.get(1, 0, 1, 0),
                vol.get(1, 1, 1, 0),
                vol.get(1, 2, 1, 0)
            ]
        );
        let back = FeatureVolume::from_frames(&[vol.frame(0), f1], FeatureMeta::default()).unwrap();
        assert_eq!(back.data(), vol.data());
    }

    #[test]
    fn background_only_labels_round_trip() {
        let masks = MaskSequence::new(2, 4, 4, 1, vec![0; 32]).unwrap();
        let mut buf = Vec::new();
        write_label_grid(&masks, &mut buf).unwrap();
        assert_eq!(&buf[0..8], &[b'T', b'E', b'D', b'L', 1, 2, 0, 0]);
        assert_eq!(read_label_grid(&mut buf.as_slice()).unwrap(), masks);
    }

    #[test]
    fn seeded_labels_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<u8> = (0..3 * 6 * 7).map(|_| rng.random_range(0..=3)).collect();
        let mut masks = MaskSequence::new(3, 6, 7, 3, ids).unwrap();
        masks.meta.insert("video_id".into(), Value::from("v7"));
        let mut buf = Vec::new();
        let n = write_label_grid(&masks, &mut buf).unwrap();
        assert_eq!(n, buf.len());
        assert_eq!(read_label_grid(&mut buf.as_slice()).unwrap(), masks);
    }

    #[test]
    fn label_id_above_declared_count_is_data_error() {
        let ok = MaskSequence::new(1, 1, 2, 2, vec![1, 2]).unwrap();
        let mut buf = Vec::new();
        write_label_grid(&ok, &mut buf).unwrap();
        // patch num_objects down to 1
        buf[24..28].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(
            read_label_grid(&mut buf.as_slice()),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            MaskSequence::new(1, 1, 2, 1, vec![1, 2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn single_black_pixel_ppm() {
        let frame = RgbFrame::filled(1, 1, [0, 0, 0]);
        let mut buf = Vec::new();
        let n = write_frame_image(&frame, &mut buf).unwrap();
        let mut expected = b"P6\n1 1\n255\n".to_vec();
        expected.extend_from_slice(&[0, 0, 0]);
        assert_eq!(buf, expected);
        assert_eq!(n, buf.len());
    }

    #[test]
    fn ppm_size_and_external_reader() {
        let data: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let frame = RgbFrame::new(2, 2, data.clone()).unwrap();
        let mut buf = Vec::new();
        let n = write_frame_image(&frame, &mut buf).unwrap();
        assert_eq!(n, "P6\n2 2\n255\n".len() + 3 * 2 * 2);

        let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Pnm)
            .unwrap()
            .to_rgb8();
        assert_eq!((decoded.width(), decoded.height()), (2, 2));
        assert_eq!(decoded.into_raw(), data);
        assert_eq!(read_frame_image(&mut buf.as_slice()).unwrap(), frame);
    }

    #[test]
    fn ppm_reader_skips_comments() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        let f = read_frame_image(&mut bytes.as_slice()).unwrap();
        assert_eq!(f.pixel(0, 0), [9, 8, 7]);
    }

    #[test]
    fn atomic_write_leaves_nothing_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.tedf");
        let r = write_atomic(&path, |w| {
            w.write_all(b"partial")?;
            Err(Error::shape("boom"))
        });
        assert!(r.is_err());
        assert!(!path.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    proptest! {
        #[test]
        fn prop_feature_round_trip(
            t in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in any::<u64>(), start in any::<u32>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape4::new(t, c, h, w);
            let data: Vec<f32> = (0..shape.len()).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            let mut meta = FeatureMeta::new(format!("v{seed}"), FeatureKind::OracleMotion);
            meta.clip_start_frame = start as u64;
            let vol = FeatureVolume::new(shape, data, meta).unwrap();
            let bytes = encode(&vol);
            let back = read_feature_volume(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &vol);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
