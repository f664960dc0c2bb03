//! Frame sequences, label masks, image IO and the synthetic scene generator.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;

use crate::error::{Error, Result};

/// One video frame, row-major `H×W×C` with intensities in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::shape(format!(
                "frame must be non-empty with 1 or 3 channels, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "frame buffer holds {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame intensities must lie in [0,1]"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Replicates a grayscale frame to three channels; RGB frames pass through.
    pub fn to_rgb(&self) -> Frame {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Frame {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }
}

/// A video as an ordered list of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    /// File index of each frame (as parsed from the file name), ascending.
    indices: Vec<u64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let indices = (0..frames.len() as u64).collect();
        Self::with_indices(frames, indices)
    }

    pub fn with_indices(frames: Vec<Frame>, indices: Vec<u64>) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("frame sequence"))?;
        let dims = (first.height, first.width, first.channels);
        for (i, f) in frames.iter().enumerate() {
            if (f.height, f.width, f.channels) != dims {
                return Err(Error::shape(format!(
                    "frame {i} is {}x{}x{}, expected {}x{}x{}",
                    f.height, f.width, f.channels, dims.0, dims.1, dims.2
                )));
            }
        }
        if indices.len() != frames.len() {
            return Err(Error::shape("one file index per frame required"));
        }
        Ok(Self { frames, indices })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Background,
    Foreground,
    Other,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Background, Label::Foreground, Label::Other];

    /// Class index used by the classifier output (`0`, `1`, `2`).
    pub fn class_index(self) -> usize {
        match self {
            Label::Background => 0,
            Label::Foreground => 1,
            Label::Other => 2,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    /// Byte written to mask images.
    pub fn to_byte(self) -> u8 {
        match self {
            Label::Background => 0,
            Label::Foreground => 255,
            Label::Other => 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    GroundTruth,
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Label>,
    pub provenance: Provenance,
}

impl LabelMask {
    pub fn filled(height: usize, width: usize, label: Label, provenance: Provenance) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
            provenance,
        }
    }

    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<Label>,
        provenance: Provenance,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "mask holds {} labels, expected {}",
                labels.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            provenance,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Binary foreground plane: 1 for Foreground, 0 otherwise (Other included).
    pub fn foreground_plane(&self) -> Vec<f32> {
        self.labels
            .iter()
            .map(|&l| if l == Label::Foreground { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Raw mask byte → label table.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMap {
    table: [Option<Label>; 256],
}

impl ValueMap {
    pub fn empty() -> Self {
        Self { table: [None; 256] }
    }

    /// CDNet ground-truth convention. Hard shadow (50) counts as Background;
    /// outside-ROI (85) and unknown/boundary (170) become Other.
    pub fn cdnet() -> Self {
        Self::empty()
            .with(0, Label::Background)
            .with(50, Label::Background)
            .with(85, Label::Other)
            .with(170, Label::Other)
            .with(255, Label::Foreground)
    }

    /// Convention of masks written by [`write_mask`].
    pub fn predicted() -> Self {
        Self::empty()
            .with(0, Label::Background)
            .with(128, Label::Other)
            .with(255, Label::Foreground)
    }

    pub fn with(mut self, raw: u8, label: Label) -> Self {
        self.table[raw as usize] = Some(label);
        self
    }

    pub fn get(&self, raw: u8) -> Option<Label> {
        self.table[raw as usize]
    }

    /// Parses `raw:label` pairs separated by commas, e.g. `0:bg,255:fg,170:other`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::empty();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (raw, label) = item
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("value map entry {item:?} lacks ':'")))?;
            let raw: u8 = raw
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad raw value in {item:?}")))?;
            let label = match label.trim().to_ascii_lowercase().as_str() {
                "bg" | "background" => Label::Background,
                "fg" | "foreground" => Label::Foreground,
                "other" => Label::Other,
                l => return Err(Error::invalid(format!("unknown label {l:?}"))),
            };
            map = map.with(raw, label);
        }
        Ok(map)
    }
}

impl Default for ValueMap {
    fn default() -> Self {
        Self::cdnet()
    }
}

/// File-name pattern with a single printf-style integer placeholder
/// (`in%06d.png`, `gt%d.png`).
#[derive(Debug, Clone)]
pub struct FilePattern {
    prefix: String,
    width: Option<usize>,
    suffix: String,
}

impl FilePattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        let re = Regex::new(r"^([^%]*)%(0\d+)?d([^%]*)$").expect("static regex");
        let caps = re
            .captures(pattern)
            .ok_or_else(|| Error::BadPattern(pattern.to_string()))?;
        let width = caps
            .get(2)
            .map(|m| m.as_str()[1..].parse::<usize>())
            .transpose()
            .map_err(|_| Error::BadPattern(pattern.to_string()))?;
        Ok(Self {
            prefix: caps[1].to_string(),
            width,
            suffix: caps[3].to_string(),
        })
    }

    pub fn format(&self, index: u64) -> String {
        match self.width {
            Some(w) => format!("{}{:0w$}{}", self.prefix, index, self.suffix, w = w),
            None => format!("{}{}{}", self.prefix, index, self.suffix),
        }
    }

    /// Index encoded in `name`, if the name matches.
    pub fn index_of(&self, name: &str) -> Option<u64> {
        let digits = name.strip_prefix(&self.prefix)?.strip_suffix(&self.suffix)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if let Some(w) = self.width {
            if digits.len() < w {
                return None;
            }
        }
        digits.parse().ok()
    }

    /// Matching files in `dir`, sorted by index.
    pub fn list(&self, dir: &Path, pattern_text: &str) -> Result<Vec<(u64, PathBuf)>> {
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir.to_path_buf()));
        }
        let mut files = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(idx) = self.index_of(name) {
                files.push((idx, entry.path()));
            }
        }
        if files.is_empty() {
            return Err(Error::NoMatchingFiles {
                dir: dir.to_path_buf(),
                pattern: pattern_text.to_string(),
            });
        }
        files.sort_by_key(|(i, _)| *i);
        Ok(files)
    }
}

fn decode_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    fn norm8(v: u8) -> f32 {
        v as f32 / 255.0
    }
    fn norm16(v: u16) -> f32 {
        v as f32 / 65535.0
    }
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(norm8).collect()),
        DynamicImage::ImageLumaA8(b) => (1, b.pixels().map(|p| norm8(p.0[0])).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(norm8).collect()),
        DynamicImage::ImageRgba8(b) => (
            3,
            b.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2]]).map(norm8).collect(),
        ),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(norm16).collect()),
        DynamicImage::ImageLumaA16(b) => (1, b.pixels().map(|p| norm16(p.0[0])).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(norm16).collect()),
        DynamicImage::ImageRgba16(b) => (
            3,
            b.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2]]).map(norm16).collect(),
        ),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                detail: format!("{:?}", other.color()),
            })
        }
    };
    Ok(Frame {
        height: h,
        width: w,
        channels,
        data,
    }
    .to_rgb())
}

/// Loads every file in `dir` matching `pattern`, sorted by index, as a
/// three-channel sequence normalized to `[0,1]`.
pub fn load_frames(dir: &Path, pattern: &str) -> Result<FrameSequence> {
    let pat = FilePattern::parse(pattern)?;
    let files = pat.list(dir, pattern)?;
    let mut frames = Vec::with_capacity(files.len());
    let mut indices = Vec::with_capacity(files.len());
    let mut dims = None;
    for (idx, path) in files {
        let f = decode_frame(&path)?;
        match dims {
            None => dims = Some((f.height, f.width)),
            Some(d) if d != (f.height, f.width) => {
                return Err(Error::DimensionMismatch {
                    path,
                    expected: d,
                    found: (f.height, f.width),
                })
            }
            _ => {}
        }
        frames.push(f);
        indices.push(idx);
    }
    FrameSequence::with_indices(frames, indices)
}

/// Reads one single-channel 8-bit mask image through `map`.
pub fn read_mask(path: &Path, map: &ValueMap, provenance: Provenance) -> Result<LabelMask> {
    let img = image::open(path)?;
    let DynamicImage::ImageLuma8(buf) = img else {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            detail: format!("mask must be 8-bit single channel, got {:?}", img.color()),
        });
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let labels = buf
        .into_raw()
        .into_iter()
        .map(|raw| {
            map.get(raw).ok_or(Error::UnmappedValue {
                path: path.to_path_buf(),
                value: raw,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMask::new(h, w, labels, provenance)
}

/// Loads ground-truth masks matching `pattern`, sorted by index.
pub fn load_gt_masks(dir: &Path, pattern: &str, map: &ValueMap) -> Result<Vec<(u64, LabelMask)>> {
    let pat = FilePattern::parse(pattern)?;
    let files = pat.list(dir, pattern)?;
    let mut out = Vec::with_capacity(files.len());
    let mut dims = None;
    for (idx, path) in files {
        let m = read_mask(&path, map, Provenance::GroundTruth)?;
        match dims {
            None => dims = Some((m.height, m.width)),
            Some(d) if d != (m.height, m.width) => {
                return Err(Error::DimensionMismatch {
                    path,
                    expected: d,
                    found: (m.height, m.width),
                })
            }
            _ => {}
        }
        out.push((idx, m));
    }
    Ok(out)
}

/// Pairs ground-truth masks with frames by file index. Masks without a
/// matching frame are dropped; a dimension mismatch is an error.
pub fn align_masks(
    seq: &FrameSequence,
    masks: Vec<(u64, LabelMask)>,
) -> Result<Vec<(usize, LabelMask)>> {
    let mut out = Vec::new();
    for (idx, mask) in masks {
        let Ok(t) = seq.indices().binary_search(&idx) else {
            continue;
        };
        if (mask.height, mask.width) != (seq.height(), seq.width()) {
            return Err(Error::DimensionMismatch {
                path: PathBuf::from(format!("mask #{idx}")),
                expected: (seq.height(), seq.width()),
                found: (mask.height, mask.width),
            });
        }
        out.push((t, mask));
    }
    Ok(out)
}

pub fn write_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.labels.iter().map(|l| l.to_byte()).collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .ok_or_else(|| Error::shape("mask buffer size"))?;
    img.save(path)?;
    Ok(())
}

/// Quantizes an intensity in `[0,1]` to a byte, `round(v·255)`.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_heatmap(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("heatmap buffer size"));
    }
    let raw: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::shape("heatmap buffer size"))?;
    img.save(path)?;
    Ok(())
}

pub fn write_frame(frame: &Frame, path: &Path) -> Result<()> {
    let rgb = frame.to_rgb();
    let raw: Vec<u8> = rgb.data.iter().map(|&v| quantize(v as f64)).collect();
    let img = RgbImage::from_raw(rgb.width as u32, rgb.height as u32, raw)
        .ok_or_else(|| Error::shape("frame buffer size"))?;
    img.save(path)?;
    Ok(())
}

/// A rectangle moving at constant velocity, optionally bouncing off the
/// canvas borders.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub width: usize,
    pub height: usize,
    pub intensity: Vec<f32>,
    pub bounce: bool,
    /// Whether the object is labeled Foreground in the ground truth. Static
    /// scene furniture sets this to `false`.
    pub foreground: bool,
}

impl SyntheticObject {
    /// Top-left corner at frame `t`.
    pub fn position(&self, t: usize, canvas_h: usize, canvas_w: usize) -> (i64, i64) {
        let reflect = |p: f64, span: f64| -> f64 {
            if span <= 0.0 {
                return 0.0;
            }
            let period = 2.0 * span;
            let m = p.rem_euclid(period);
            if m <= span {
                m
            } else {
                period - m
            }
        };
        let tf = t as f64;
        let (mut x, mut y) = (self.x0 + self.vx * tf, self.y0 + self.vy * tf);
        if self.bounce {
            x = reflect(x, canvas_w as f64 - self.width as f64);
            y = reflect(y, canvas_h as f64 - self.height as f64);
        }
        (x.round() as i64, y.round() as i64)
    }

    pub fn covers(&self, t: usize, y: usize, x: usize, canvas_h: usize, canvas_w: usize) -> bool {
        let (left, top) = self.position(t, canvas_h, canvas_w);
        let (x, y) = (x as i64, y as i64);
        x >= left && x < left + self.width as i64 && y >= top && y < top + self.height as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: Vec<f32>,
    pub objects: Vec<SyntheticObject>,
    pub sigma: f64,
    pub frames: usize,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// A bright square bouncing around a darker uniform canvas.
    pub fn moving_square(
        height: usize,
        width: usize,
        frames: usize,
        side: usize,
        sigma: f64,
        seed: u64,
    ) -> Self {
        Self {
            height,
            width,
            background: vec![0.25, 0.3, 0.35],
            objects: vec![SyntheticObject {
                x0: 3.0,
                y0: 5.0,
                vx: 1.7,
                vy: 1.1,
                width: side,
                height: side,
                intensity: vec![0.85, 0.8, 0.7],
                bounce: true,
                foreground: true,
            }],
            sigma,
            frames,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::invalid("synthetic scene needs positive size and frame count"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and >= 0"));
        }
        if self.background.len() != 3 {
            return Err(Error::invalid("background needs one intensity per channel"));
        }
        let in_unit = |v: &f32| (0.0..=1.0).contains(v);
        if !self.background.iter().all(in_unit) {
            return Err(Error::invalid("background intensity outside [0,1]"));
        }
        for o in &self.objects {
            if o.intensity.len() != 3 || !o.intensity.iter().all(in_unit) {
                return Err(Error::invalid("object intensity must be 3 values in [0,1]"));
            }
            if o.width == 0 || o.height == 0 {
                return Err(Error::invalid("object size must be positive"));
            }
            if ![o.x0, o.y0, o.vx, o.vy].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("object trajectory must be finite"));
            }
        }
        Ok(())
    }
}

/// Renders the scene. Objects are painted in list order; the ground truth
/// marks Foreground wherever a foreground object covers the pixel.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<(FrameSequence, Vec<LabelMask>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&spec.background);
        }
        let mut labels = vec![Label::Background; h * w];
        for obj in &spec.objects {
            let (left, top) = obj.position(t, h, w);
            let x_range = left.max(0)..(left + obj.width as i64).min(w as i64);
            let y_range = top.max(0)..(top + obj.height as i64).min(h as i64);
            for y in y_range.clone() {
                for x in x_range.clone() {
                    let p = y as usize * w + x as usize;
                    data[p * 3..p * 3 + 3].copy_from_slice(&obj.intensity);
                    // Later objects occlude earlier ones, including in the labels.
                    labels[p] = if obj.foreground {
                        Label::Foreground
                    } else {
                        Label::Background
                    };
                }
            }
        }
        if spec.sigma > 0.0 {
            for v in data.iter_mut() {
                *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        frames.push(Frame {
            height: h,
            width: w,
            channels: 3,
            data,
        });
        masks.push(LabelMask {
            height: h,
            width: w,
            labels,
            provenance: Provenance::GroundTruth,
        });
    }
    Ok((FrameSequence::new(frames)?, masks))
}
