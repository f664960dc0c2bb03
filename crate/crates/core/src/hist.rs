//! Temporal difference histograms, labeled instance pools and similarity pruning.
//!
//! Every histogram has 201 bins covering `[-1, 1]` in steps of `0.01`; bin
//! `i` represents the value `-1 + 0.01·i`, so bin 100 is zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::videoio::{FrameSequence, Label, LabelMask};

pub const NUM_BINS: usize = 201;
pub const ZERO_BIN: usize = 100;
pub const BIN_WIDTH: f64 = 0.01;
/// `1 / BIN_WIDTH`, kept separate so binning multiplies by an exact integer.
pub const BINS_PER_UNIT: f64 = 100.0;
pub const CHANNELS: usize = 3;
/// Values per instance: three channel histograms back to back.
pub const INSTANCE_LEN: usize = CHANNELS * NUM_BINS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinIndex {
    Bin(usize),
    Overflow,
}

impl BinIndex {
    pub fn bin(self) -> Option<usize> {
        match self {
            BinIndex::Bin(i) => Some(i),
            BinIndex::Overflow => None,
        }
    }
}

/// Nearest bin of `value`, `round((value + 1) / 0.01)`, or `Overflow` when
/// that falls outside `0..=200`.
pub fn bin_index(value: f64) -> Result<BinIndex> {
    if !value.is_finite() {
        return Err(Error::NonFinite("bin_index"));
    }
    Ok(bin_index_finite(value))
}

#[inline]
pub(crate) fn bin_index_finite(value: f64) -> BinIndex {
    let r = ((value + 1.0) * BINS_PER_UNIT).round();
    if (0.0..=(NUM_BINS - 1) as f64).contains(&r) {
        BinIndex::Bin(r as usize)
    } else {
        BinIndex::Overflow
    }
}

/// Value represented by bin `i`.
#[inline]
pub fn bin_value(i: usize) -> f64 {
    (i as f64 - ZERO_BIN as f64) * BIN_WIDTH
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalHistogram {
    pub mass: Vec<f32>,
    pub x: usize,
    pub y: usize,
    pub channel: usize,
    pub t: usize,
}

impl TemporalHistogram {
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().map(|&m| m as f64).sum()
    }
}

/// All per-pixel, per-channel histograms extracted at one reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramFrame {
    pub height: usize,
    pub width: usize,
    pub t: usize,
    /// `H×W×3×201`, pixel-major.
    data: Vec<f32>,
}

impl HistogramFrame {
    /// The three channel histograms of pixel `(y, x)`, back to back.
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let p = y * self.width + x;
        &self.data[p * INSTANCE_LEN..(p + 1) * INSTANCE_LEN]
    }

    pub fn histogram(&self, y: usize, x: usize, channel: usize) -> TemporalHistogram {
        let px = self.pixel(y, x);
        TemporalHistogram {
            mass: px[channel * NUM_BINS..(channel + 1) * NUM_BINS].to_vec(),
            x,
            y,
            channel,
            t: self.t,
        }
    }

    /// Pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(INSTANCE_LEN)
    }
}

/// Histogram of `|I_i(x,y) − I_t(x,y)|` over all frames `i`, each frame
/// contributing `1/T`.
pub fn extract_histograms(seq: &FrameSequence, t: usize) -> Result<HistogramFrame> {
    let len = seq.len();
    if t >= len {
        return Err(Error::OutOfRange {
            what: "reference frame",
            index: t,
            limit: len,
        });
    }
    if seq.channels() != CHANNELS {
        return Err(Error::shape("histogram extraction expects 3-channel frames"));
    }
    let (h, w) = (seq.height(), seq.width());
    let frames = seq.frames();
    let reference = &frames[t].data;
    let mut data = vec![0.0f32; h * w * INSTANCE_LEN];
    data.par_chunks_mut(w * INSTANCE_LEN)
        .enumerate()
        .for_each(|(y, row)| {
            let mut counts = [0u32; INSTANCE_LEN];
            for (x, out) in row.chunks_exact_mut(INSTANCE_LEN).enumerate() {
                counts.fill(0);
                let base = (y * w + x) * CHANNELS;
                for f in frames {
                    for c in 0..CHANNELS {
                        let d = (f.data[base + c] as f64 - reference[base + c] as f64).abs();
                        // |d| <= 1, so the bin is always on the grid.
                        if let BinIndex::Bin(b) = bin_index_finite(d) {
                            counts[c * NUM_BINS + b] += 1;
                        }
                    }
                }
                for (o, &n) in out.iter_mut().zip(counts.iter()) {
                    *o = (n as f64 / len as f64) as f32;
                }
            }
        });
    Ok(HistogramFrame {
        height: h,
        width: w,
        t,
        data,
    })
}

/// One training instance: the three channel histograms of a pixel plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub x: usize,
    pub y: usize,
    pub t: usize,
    pub label: Label,
    masses: Box<[f32]>,
}

impl LabeledInstance {
    pub fn new(x: usize, y: usize, t: usize, label: Label, masses: Vec<f32>) -> Result<Self> {
        if masses.len() != INSTANCE_LEN {
            return Err(Error::shape(format!(
                "instance needs {INSTANCE_LEN} masses, got {}",
                masses.len()
            )));
        }
        Ok(Self {
            x,
            y,
            t,
            label,
            masses: masses.into_boxed_slice(),
        })
    }

    /// All 603 masses (channel-major).
    pub fn masses(&self) -> &[f32] {
        &self.masses
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.masses[c * NUM_BINS..(c + 1) * NUM_BINS]
    }

    pub fn histogram(&self, c: usize) -> TemporalHistogram {
        TemporalHistogram {
            mass: self.channel(c).to_vec(),
            x: self.x,
            y: self.y,
            channel: c,
            t: self.t,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstancePool {
    instances: Vec<LabeledInstance>,
    counts: [usize; 3],
}

impl InstancePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_instances(instances: Vec<LabeledInstance>) -> Self {
        let mut pool = Self::new();
        for i in instances {
            pool.push(i);
        }
        pool
    }

    pub fn push(&mut self, inst: LabeledInstance) {
        self.counts[inst.label.class_index()] += 1;
        self.instances.push(inst);
    }

    pub fn extend(&mut self, other: InstancePool) {
        for i in other.instances {
            self.push(i);
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn get(&self, i: usize) -> &LabeledInstance {
        &self.instances[i]
    }

    pub fn count(&self, label: Label) -> usize {
        self.counts[label.class_index()]
    }
}

/// One instance per pixel of each `(histograms, ground truth)` pair.
pub fn label_instances(frames: &[(&HistogramFrame, &LabelMask)]) -> Result<InstancePool> {
    if frames.is_empty() {
        return Err(Error::Empty("histogram frame list"));
    }
    let mut pool = InstancePool::new();
    for (hist, gt) in frames {
        if (hist.height, hist.width) != (gt.height, gt.width) {
            return Err(Error::shape(format!(
                "histograms are {}x{}, mask is {}x{}",
                hist.height, hist.width, gt.height, gt.width
            )));
        }
        for (p, masses) in hist.pixels().enumerate() {
            let (y, x) = (p / hist.width, p % hist.width);
            pool.push(LabeledInstance {
                x,
                y,
                t: hist.t,
                label: gt.labels[p],
                masses: masses.into(),
            });
        }
    }
    Ok(pool)
}

/// Extracts and labels every `stride`-th ground-truth frame.
pub fn build_pool(
    seq: &FrameSequence,
    gt: &[(usize, LabelMask)],
    stride: usize,
) -> Result<InstancePool> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth frame list"));
    }
    let mut pool = InstancePool::new();
    for (t, mask) in gt.iter().step_by(stride) {
        let hist = extract_histograms(seq, *t)?;
        pool.extend(label_instances(&[(&hist, mask)])?);
    }
    Ok(pool)
}

/// Sum of squared bin differences (no square root).
pub fn euclidean_distance(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "histograms must share the bin count");
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum()
}

/// Distance between two instances: the per-channel distances summed.
pub fn instance_distance(a: &LabeledInstance, b: &LabeledInstance) -> f64 {
    (0..CHANNELS)
        .map(|c| euclidean_distance(a.channel(c), b.channel(c)))
        .sum()
}

/// `true` when the instance distance is below `tau`; stops summing as soon
/// as the partial sum reaches `tau`.
fn closer_than(a: &[f32], b: &[f32], tau: f64) -> bool {
    let mut acc = 0.0f64;
    for (ca, cb) in a.chunks(NUM_BINS).zip(b.chunks(NUM_BINS)) {
        for (&p, &q) in ca.iter().zip(cb) {
            let d = p as f64 - q as f64;
            acc += d * d;
        }
        if acc >= tau {
            return false;
        }
    }
    acc < tau
}

/// Bins used as reference points for the triangle-inequality prefilter.
const PIVOT_BINS: [usize; 3] = [ZERO_BIN, ZERO_BIN + 5, ZERO_BIN + 20];

/// Euclidean distances from `m` to the origin and to unit masses at
/// `PIVOT_BINS` in every channel.
fn pivot_coords(m: &[f32]) -> [f64; 1 + CHANNELS * PIVOT_BINS.len()] {
    let norm2: f64 = m.iter().map(|&v| v as f64 * v as f64).sum();
    let mut out = [0.0; 1 + CHANNELS * PIVOT_BINS.len()];
    out[0] = norm2.sqrt();
    for c in 0..CHANNELS {
        for (k, &b) in PIVOT_BINS.iter().enumerate() {
            let v = m[c * NUM_BINS + b] as f64;
            out[1 + c * PIVOT_BINS.len() + k] = (norm2 - 2.0 * v + 1.0).max(0.0).sqrt();
        }
    }
    out
}

/// Drops every instance whose distance to an earlier kept instance of the
/// same label is strictly below `tau`. Labels are pruned independently; the
/// survivors keep their input order.
pub fn prune_similar(pool: &InstancePool, tau: f64) -> Result<InstancePool> {
    if !(tau >= 0.0) {
        return Err(Error::invalid("tau must be >= 0"));
    }
    if tau == 0.0 {
        return Ok(pool.clone());
    }
    // Slightly widened so rounding in the bound never hides a true neighbour.
    let radius = tau.sqrt() * (1.0 + 1e-9) + 1e-9;
    let shards: Vec<Vec<usize>> = Label::ALL
        .iter()
        .map(|&l| {
            (0..pool.len())
                .filter(|&i| pool.instances[i].label == l)
                .collect()
        })
        .collect();
    let kept_per_shard: Vec<Vec<usize>> = shards
        .par_iter()
        .map(|shard| {
            let mut kept: Vec<usize> = Vec::new();
            // Kept instances sorted by norm, with their pivot distances.
            let mut by_norm: Vec<(f64, [f64; 1 + CHANNELS * PIVOT_BINS.len()], usize)> = Vec::new();
            for &i in shard {
                let cand = pool.instances[i].masses();
                let pc = pivot_coords(cand);
                let lo = by_norm.partition_point(|e| e.0 < pc[0] - radius);
                let dup = by_norm[lo..]
                    .iter()
                    .take_while(|e| e.0 <= pc[0] + radius)
                    .filter(|e| e.1.iter().zip(&pc).all(|(a, b)| (a - b).abs() <= radius))
                    .any(|e| closer_than(cand, pool.instances[e.2].masses(), tau));
                if !dup {
                    kept.push(i);
                    let at = by_norm.partition_point(|e| e.0 < pc[0]);
                    by_norm.insert(at, (pc[0], pc, i));
                }
            }
            kept
        })
        .collect();
    let mut keep: Vec<usize> = kept_per_shard.into_iter().flatten().collect();
    keep.sort_unstable();
    Ok(InstancePool::from_instances(
        keep.into_iter().map(|i| pool.instances[i].clone()).collect(),
    ))
}

const CACHE_MAGIC: &[u8; 4] = b"LTSH";
const CACHE_VERSION: u32 = 1;

fn label_byte(l: Label) -> u8 {
    l.class_index() as u8
}

/// Writes the pool as a histogram cache. Pixel coordinates are not stored.
pub fn write_pool<W: Write>(pool: &InstancePool, mut w: W) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    w.write_u64::<LittleEndian>(pool.len() as u64)?;
    w.write_u32::<LittleEndian>(NUM_BINS as u32)?;
    w.write_u32::<LittleEndian>(CHANNELS as u32)?;
    for inst in pool.instances() {
        w.write_u8(label_byte(inst.label))?;
        for &m in inst.masses() {
            w.write_f32::<LittleEndian>(m)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pool<R: Read>(mut r: R) -> Result<InstancePool> {
    let bad = |detail: String| Error::Format {
        kind: "histogram cache",
        detail,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CACHE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LittleEndian>()?;
    let bins = r.read_u32::<LittleEndian>()?;
    let channels = r.read_u32::<LittleEndian>()?;
    if bins as usize != NUM_BINS || channels as usize != CHANNELS {
        return Err(bad(format!("layout {channels}x{bins}, expected 3x201")));
    }
    let mut pool = InstancePool::new();
    let mut buf = vec![0f32; INSTANCE_LEN];
    for _ in 0..count {
        let lb = r.read_u8()?;
        let label = Label::from_class_index(lb as usize)
            .ok_or_else(|| bad(format!("bad label byte {lb}")))?;
        r.read_f32_into::<LittleEndian>(&mut buf)?;
        pool.push(LabeledInstance::new(0, 0, 0, label, buf.clone())?);
    }
    Ok(pool)
}

pub fn save_pool(pool: &InstancePool, path: &Path) -> Result<()> {
    write_pool(pool, BufWriter::new(File::create(path)?))
}

pub fn load_pool(path: &Path) -> Result<InstancePool> {
    read_pool(BufReader::new(File::open(path)?))
}
