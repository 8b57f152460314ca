//! On-disk formats: raw B-mode videos (`BMV1`), the tab-separated video
//! manifest, model weights (`MMSL`), extracted M-mode stores (`MMS1`) and
//! 8-bit PGM images. All binary integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mmode::{BModeVideo, MModeImage};
use crate::model::ModelParameters;
use crate::tensor::Tensor;

const VIDEO_MAGIC: &[u8; 4] = b"BMV1";
const WEIGHTS_MAGIC: &[u8; 4] = b"MMSL";
const WEIGHTS_VERSION: u32 = 1;
const STORE_MAGIC: &[u8; 4] = b"MMS1";

/// Cursor over a byte buffer that reports truncation as a format error.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: name is not UTF-8", self.what)))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

// ---------------------------------------------------------------------------
// BMV1 videos

/// Serializes a video. Pixels are stored as `f32`.
pub fn encode_video(v: &BModeVideo) -> Result<Vec<u8>> {
    let (lo, hi) = v.pleural_bounds();
    let mut out = Vec::with_capacity(28 + v.frames().numel() * 4);
    out.extend_from_slice(VIDEO_MAGIC);
    for d in [v.num_frames(), v.height(), v.width()] {
        out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
    }
    out.extend_from_slice(&(v.fps() as f32).to_le_bytes());
    out.extend_from_slice(&u32_of(lo, "column")?.to_le_bytes());
    out.extend_from_slice(&u32_of(hi, "column")?.to_le_bytes());
    for &p in v.frames().data() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_video(bytes: &[u8], video_id: &str) -> Result<BModeVideo> {
    let mut r = Reader::new(bytes, "BMV1 video");
    if &r.array::<4>()? != VIDEO_MAGIC {
        return Err(Error::Format("not a BMV1 video (bad magic)".into()));
    }
    let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let fps = r.f32()? as f64;
    let (lo, hi) = (r.u32()? as usize, r.u32()? as usize);
    let n = t
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Format("BMV1 dimensions overflow".into()))?;
    let data = r.f32s(n)?;
    r.finish()?;
    let frames = Tensor::new(vec![t, h, w], data).map_err(|e| Error::Format(e.to_string()))?;
    BModeVideo::new(frames, fps, (lo, hi), video_id)
}

pub fn write_video(path: &Path, v: &BModeVideo) -> Result<()> {
    fs::write(path, encode_video(v)?)?;
    Ok(())
}

pub fn read_video(path: &Path, video_id: &str) -> Result<BModeVideo> {
    decode_video(&read_file(path)?, video_id)
}

// ---------------------------------------------------------------------------
// Manifest

/// Lung-sliding label. Absent sliding is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Present,
    Absent,
}

impl Label {
    /// 1 for absent sliding, 0 for present.
    pub fn target(self) -> f64 {
        match self {
            Label::Present => 0.0,
            Label::Absent => 1.0,
        }
    }

    pub fn from_code(code: i64) -> Result<Option<Label>> {
        match code {
            0 => Ok(Some(Label::Present)),
            1 => Ok(Some(Label::Absent)),
            -1 => Ok(None),
            other => Err(Error::Data(format!("label must be 0, 1 or -1, got {other}"))),
        }
    }

    pub fn code(label: Option<Label>) -> i8 {
        match label {
            Some(Label::Present) => 0,
            Some(Label::Absent) => 1,
            None => -1,
        }
    }
}

/// One manifest row. `path` is resolved relative to the manifest's directory
/// when read.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub video_id: String,
    pub label: Option<Label>,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, id, label] = fields[..] else {
            return Err(Error::Data(format!(
                "manifest line {}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        };
        let code: i64 = label
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {}: bad label {label:?}", lineno + 1)))?;
        let path = Path::new(path);
        entries.push(ManifestEntry {
            path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
            video_id: id.to_string(),
            label: Label::from_code(code)?,
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes entries with paths relative to the manifest's directory where
/// possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        out.push_str(&format!("{}\t{}\t{}\n", p.display(), e.video_id, Label::code(e.label)));
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// MMSL weights

pub fn encode_weights(params: &ModelParameters) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(params.len(), "array count")?.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0);
        out.push(u8::try_from(t.ndim()).map_err(|_| Error::Format("too many dimensions".into()))?);
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelParameters> {
    let mut r = Reader::new(bytes, "MMSL weights");
    if &r.array::<4>()? != WEIGHTS_MAGIC {
        return Err(Error::Format("not an MMSL weights file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let count = r.u32()?;
    let mut params = ModelParameters::default();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(Error::Format(format!("{name}: unknown dtype code {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{name}: dimensions overflow")))?;
        let data = r.f64s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    r.finish()?;
    Ok(params)
}

pub fn write_weights(path: &Path, params: &ModelParameters) -> Result<()> {
    fs::write(path, encode_weights(params)?)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<ModelParameters> {
    decode_weights(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// MMS1 M-mode store

/// An extracted M-mode together with the label of its source video.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredMMode {
    pub image: MModeImage,
    pub label: Option<Label>,
}

/// Layout: magic, u32 count, then per image: u16 id length, id bytes,
/// i8 label code, u32 column, u32 rank, u32 H, u32 W, H·W f32 pixels.
pub fn encode_store(items: &[StoredMMode]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&u32_of(items.len(), "image count")?.to_le_bytes());
    for s in items {
        let img = &s.image;
        let id = img.source_video_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::Format("video id too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        out.push(Label::code(s.label) as u8);
        for d in [img.column_index, img.brightness_rank, img.height(), img.width()] {
            out.extend_from_slice(&u32_of(d, "field")?.to_le_bytes());
        }
        for &p in img.pixels.data() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_store(bytes: &[u8]) -> Result<Vec<StoredMMode>> {
    let mut r = Reader::new(bytes, "MMS1 store");
    if &r.array::<4>()? != STORE_MAGIC {
        return Err(Error::Format("not an MMS1 store (bad magic)".into()));
    }
    let count = r.u32()? as usize;
    let mut items = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let id = r.string(len)?;
        let label = Label::from_code(r.u8()? as i8 as i64).map_err(|e| Error::Format(e.to_string()))?;
        let (col, rank, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let pixels = r.f32s(h.checked_mul(w).ok_or_else(|| Error::Format("store dimensions overflow".into()))?)?;
        let pixels = Tensor::new(vec![h, w], pixels).map_err(|e| Error::Format(e.to_string()))?;
        let image = MModeImage::new(pixels, id, col, rank).map_err(|e| Error::Format(e.to_string()))?;
        items.push(StoredMMode { image, label });
    }
    r.finish()?;
    Ok(items)
}

pub fn write_store(path: &Path, items: &[StoredMMode]) -> Result<()> {
    fs::write(path, encode_store(items)?)?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<Vec<StoredMMode>> {
    decode_store(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// PGM

/// Binary 8-bit PGM of a 2-D array whose values span `[0, max]`.
pub fn encode_pgm(img: &Tensor, max: f64) -> Result<Vec<u8>> {
    let [h, w] = *img.shape() else {
        return Err(Error::InvalidArgument(format!("PGM needs a 2-D array, got {:?}", img.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &Tensor, max: f64) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(img, max)?)?;
    Ok(())
}
