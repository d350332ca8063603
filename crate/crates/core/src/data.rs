//! Synthetic moving-sprite sequences, IDX ingestion, the last-frame
//! baseline and the `FRSQ` sequence file format.
//!
//! Sprites move with integer velocities and bounce off the canvas edges;
//! where sprites overlap the brighter pixel wins.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::binio::{self, Le, WriteLe};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

const SEQ_MAGIC: &[u8; 4] = b"FRSQ";
const SEQ_VERSION: u32 = 1;
/// Magic, version and five extents.
pub const SEQ_HEADER_BYTES: u64 = 28;

#[derive(Clone, Debug, PartialEq)]
pub enum SpriteSource {
    /// Soft round blob of the given diameter, peak intensity 1.
    Blob { size: usize },
    /// Solid square of the given side.
    Block { size: usize },
    /// Images `[n, h, w]` in `[0, 1]`, e.g. parsed MNIST digits.
    Glyphs(Arc<Tensor<f32>>),
}

impl SpriteSource {
    pub fn extent(&self) -> (usize, usize) {
        match self {
            SpriteSource::Blob { size } | SpriteSource::Block { size } => (*size, *size),
            SpriteSource::Glyphs(g) => (g.shape()[1], g.shape()[2]),
        }
    }

    fn render(&self, rng: &mut Rng) -> Vec<f32> {
        match self {
            SpriteSource::Block { size } => vec![1.0; size * size],
            SpriteSource::Blob { size } => {
                let c = (*size as f64 - 1.0) / 2.0;
                let sigma = (*size as f64 / 4.0).max(0.5);
                (0..size * size)
                    .map(|i| {
                        let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp() as f32
                    })
                    .collect()
            }
            SpriteSource::Glyphs(g) => {
                let idx = rng.below(g.shape()[0]);
                g.index_outer(idx).expect("glyph index in range").into_data()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: usize,
    pub source: SpriteSource,
    /// Largest speed per axis in pixels per frame.
    pub max_speed: usize,
    pub seed: u64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        SpriteConfig {
            height: 32,
            width: 32,
            frames: 20,
            sprites: 2,
            source: SpriteSource::Blob { size: 5 },
            max_speed: 3,
            seed: 0,
        }
    }
}

impl SpriteConfig {
    pub fn validate(&self) -> Result<()> {
        let (sh, sw) = self.source.extent();
        if sh == 0 || sw == 0 || sh >= self.height || sw >= self.width {
            return Err(Error::invalid(format!(
                "sprite {sh}x{sw} must be non-empty and smaller than the {}x{} canvas",
                self.height, self.width
            )));
        }
        if self.frames < 2 {
            return Err(Error::invalid("sequences need at least 2 frames"));
        }
        if self.sprites == 0 {
            return Err(Error::invalid("sequences need at least one sprite"));
        }
        if self.max_speed == 0 {
            return Err(Error::invalid("max_speed must be at least 1"));
        }
        if let SpriteSource::Glyphs(g) = &self.source {
            if g.shape().len() != 3 {
                return Err(Error::invalid(format!(
                    "glyph set must be [n, h, w], got {:?}",
                    g.shape()
                )));
            }
        }
        Ok(())
    }

    /// Largest top-left row and column.
    fn bounds(&self) -> (i64, i64) {
        let (sh, sw) = self.source.extent();
        ((self.height - sh) as i64, (self.width - sw) as i64)
    }
}

/// One axis of motion: advance by `v` and reflect off `0` and `max`.
pub fn reflect(pos: i64, v: i64, max: i64) -> (i64, i64) {
    let next = pos + v;
    if next < 0 {
        (-next, -v)
    } else if next > max {
        (2 * max - next, -v)
    } else {
        (next, v)
    }
}

/// Trajectory of one sprite: top-left `(row, col)` per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpriteTrack {
    pub positions: Vec<(i64, i64)>,
    pub velocity: (i64, i64),
}

/// Generate sequence `index` of the stream defined by `cfg.seed`: frames
/// `[frames, 1, h, w]` plus each sprite's trajectory.
pub fn gen_sequence(cfg: &SpriteConfig, index: u64) -> Result<(Tensor<f32>, Vec<SpriteTrack>)> {
    cfg.validate()?;
    let mut rng = Rng::stream(cfg.seed, index);
    let (max_r, max_c) = cfg.bounds();
    // Reflection keeps sprites inside only while a step cannot overshoot
    // by more than the free margin.
    let vr_max = (cfg.max_speed as i64).min(max_r);
    let vc_max = (cfg.max_speed as i64).min(max_c);
    let (sh, sw) = cfg.source.extent();
    let (h, w) = (cfg.height, cfg.width);

    let mut sprites = Vec::with_capacity(cfg.sprites);
    let mut tracks = Vec::with_capacity(cfg.sprites);
    for _ in 0..cfg.sprites {
        let pixels = cfg.source.render(&mut rng);
        let (mut r, mut c) = (rng.int_inclusive(0, max_r), rng.int_inclusive(0, max_c));
        let velocity = loop {
            let v = (rng.int_inclusive(-vr_max, vr_max), rng.int_inclusive(-vc_max, vc_max));
            if v != (0, 0) {
                break v;
            }
        };
        let (mut vr, mut vc) = velocity;
        let mut positions = Vec::with_capacity(cfg.frames);
        for _ in 0..cfg.frames {
            positions.push((r, c));
            (r, vr) = reflect(r, vr, max_r);
            (c, vc) = reflect(c, vc, max_c);
        }
        sprites.push(pixels);
        tracks.push(SpriteTrack {
            positions,
            velocity,
        });
    }

    let mut data = vec![0f32; cfg.frames * h * w];
    for (pixels, track) in sprites.iter().zip(&tracks) {
        for (t, &(r, c)) in track.positions.iter().enumerate() {
            let frame = &mut data[t * h * w..(t + 1) * h * w];
            for y in 0..sh {
                let row = (r as usize + y) * w + c as usize;
                for x in 0..sw {
                    let v = pixels[y * sw + x];
                    if v > frame[row + x] {
                        frame[row + x] = v;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![cfg.frames, 1, h, w], data)?, tracks))
}

/// `count` sequences, sequence `i` drawn from stream `i` of `cfg.seed`.
pub fn gen_sequences(cfg: &SpriteConfig, count: usize) -> Result<SequenceBatch> {
    gen_sequences_from(cfg, 0, count)
}

/// Sequences `first..first + count` of the stream.
pub fn gen_sequences_from(cfg: &SpriteConfig, first: u64, count: usize) -> Result<SequenceBatch> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let mut data = Vec::with_capacity(count * cfg.frames * cfg.height * cfg.width);
    for i in 0..count as u64 {
        data.extend_from_slice(gen_sequence(cfg, first + i)?.0.data());
    }
    SequenceBatch::new(Tensor::new(
        vec![count, cfg.frames, 1, cfg.height, cfg.width],
        data,
    )?)
}

/// Frames `[batch, time, channels, height, width]` with every value in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    values: Tensor<f32>,
}

impl SequenceBatch {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        if values.shape().len() != 5 {
            return Err(Error::invalid(format!(
                "sequence batch must be [batch, time, channels, height, width], got {:?}",
                values.shape()
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "sequence values must lie in [0, 1], found {v}"
            )));
        }
        Ok(SequenceBatch { values })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<f32> {
        self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn len(&self) -> usize {
        self.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> usize {
        self.shape()[1]
    }

    fn frame_len(&self) -> usize {
        self.shape()[2..].iter().product()
    }

    /// Stack the windows `(sequence, offset)` of `len` frames each into a
    /// `[windows, len, c, h, w]` tensor.
    pub fn gather(&self, windows: &[(usize, usize)], len: usize) -> Result<Tensor<f32>> {
        let (n, t, f) = (self.len(), self.frames(), self.frame_len());
        let mut data = Vec::with_capacity(windows.len() * len * f);
        for &(s, off) in windows {
            if s >= n || off + len > t {
                return Err(Error::invalid(format!(
                    "window ({s}, {off}) of length {len} exceeds a batch of {n} x {t} frames"
                )));
            }
            let start = (s * t + off) * f;
            data.extend_from_slice(&self.values.data()[start..start + len * f]);
        }
        let mut shape = vec![windows.len(), len];
        shape.extend_from_slice(&self.shape()[2..]);
        Tensor::new(shape, data)
    }

    /// Frames `start..start + len` of every sequence.
    pub fn time_slice(&self, start: usize, len: usize) -> Result<Tensor<f32>> {
        let windows: Vec<_> = (0..self.len()).map(|s| (s, start)).collect();
        self.gather(&windows, len)
    }

    /// Sequences `start..start + count`.
    pub fn sequences(&self, start: usize, count: usize) -> Result<SequenceBatch> {
        if count == 0 || start + count > self.len() {
            return Err(Error::invalid(format!(
                "sequences {start}..{} out of range for {}",
                start + count,
                self.len()
            )));
        }
        let per = self.frames() * self.frame_len();
        let mut shape = self.shape().to_vec();
        shape[0] = count;
        Ok(SequenceBatch {
            values: Tensor::new(
                shape,
                self.values.data()[start * per..(start + count) * per].to_vec(),
            )?,
        })
    }
}

/// Repeat the last input frame `p` times: `[b, g, ...]` -> `[b, p, ...]`.
pub fn last_frame_baseline(inputs: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    let s = inputs.shape();
    if s.len() != 5 {
        return Err(Error::invalid(format!("expected a 5-d sequence tensor, got {s:?}")));
    }
    if p == 0 {
        return Err(Error::invalid("p must be at least 1"));
    }
    let f: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * p * f);
    for b in 0..s[0] {
        let last = (b * s[1] + s[1] - 1) * f;
        for _ in 0..p {
            data.extend_from_slice(&inputs.data()[last..last + f]);
        }
    }
    Tensor::new(vec![s[0], p, s[2], s[3], s[4]], data)
}

/// Parse an IDX container of unsigned bytes, scaled to `[0, 1]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("IDX magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::BadMagic {
            expected: vec![0, 0],
            found: bytes[..2].to_vec(),
        });
    }
    if bytes[2] != 0x08 {
        return Err(Error::UnsupportedType(bytes[2]));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::invalid("IDX stream declares zero dimensions"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated("IDX extents".into()));
    }
    let shape: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() < n {
        return Err(Error::Truncated(format!(
            "IDX payload has {} of {n} bytes",
            payload.len()
        )));
    }
    let data = payload[..n].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(shape, data)
}

pub fn read_idx(path: &Path) -> Result<Tensor<f32>> {
    parse_idx(&std::fs::read(path)?)
}

pub fn write_seq(path: &Path, batch: &SequenceBatch) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_seq(&mut w, batch)?;
    w.flush()?;
    Ok(())
}

pub fn encode_seq(w: &mut impl Write, batch: &SequenceBatch) -> Result<()> {
    w.write_all(SEQ_MAGIC)?;
    w.write_u32::<Le>(SEQ_VERSION)?;
    for &d in batch.shape() {
        w.write_u32::<Le>(d as u32)?;
    }
    binio::write_f32s(w, batch.values.data())?;
    Ok(())
}

pub fn read_seq(path: &Path) -> Result<SequenceBatch> {
    let mut r = BufReader::new(File::open(path)?);
    let batch = decode_seq(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::invalid("trailing bytes after sequence payload"));
    }
    Ok(batch)
}

pub fn decode_seq(r: &mut impl Read) -> Result<SequenceBatch> {
    binio::expect_magic(r, SEQ_MAGIC)?;
    binio::expect_version(r, SEQ_VERSION)?;
    let shape = (0..5)
        .map(|_| binio::read_u32(r, "sequence shape").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(Error::invalid(format!("sequence shape {shape:?} has a zero extent")));
    }
    let n = shape.iter().product();
    let data = binio::read_f32s(r, n, "sequence payload")?;
    SequenceBatch::new(Tensor::new(shape, data)?)
}
