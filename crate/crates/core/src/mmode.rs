//! Turning B-mode videos into M-mode images.
//!
//! An M-mode image is one vertical slice of a B-mode video traced over time:
//! row `r`, column `t` of the image is pixel `(r, column)` of frame `t`.
//! Candidate slices are restricted to the horizontal extent of the pleural
//! line and ranked by total intensity, brightest first.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Side length every M-mode is resized to before training.
pub const MMODE_SIZE: usize = 128;

/// A greyscale B-mode clip with its pleural-line annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct BModeVideo {
    frames: Tensor,
    fps: f64,
    pleural_bounds: (usize, usize),
    video_id: String,
}

impl BModeVideo {
    /// `frames` is `[T, H, W]` with values in `[0, 255]`; `pleural_bounds` is
    /// an inclusive column range.
    pub fn new(
        frames: Tensor,
        fps: f64,
        pleural_bounds: (usize, usize),
        video_id: impl Into<String>,
    ) -> Result<Self> {
        let [t, _, w] = *frames.shape() else {
            return Err(shape_err!("video frames must be [T, H, W], got {:?}", frames.shape()));
        };
        if t == 0 {
            return Err(Error::Data("video has no frames".into()));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::Data(format!("frame rate must be positive, got {fps}")));
        }
        let (lo, hi) = pleural_bounds;
        if lo > hi || hi >= w {
            return Err(Error::Data(format!(
                "pleural bounds [{lo}, {hi}] invalid for width {w}"
            )));
        }
        if frames.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
            return Err(Error::Data("pixel values must lie in [0, 255]".into()));
        }
        Ok(Self {
            frames,
            fps,
            pleural_bounds,
            video_id: video_id.into(),
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn pleural_bounds(&self) -> (usize, usize) {
        self.pleural_bounds
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    fn pixel(&self, t: usize, r: usize, c: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.frames.data()[(t * h + r) * w + c]
    }

    /// Columns inside the pleural bounds.
    pub fn candidate_columns(&self) -> std::ops::RangeInclusive<usize> {
        self.pleural_bounds.0..=self.pleural_bounds.1
    }
}

/// One M-mode image (rows = depth, columns = time) and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct MModeImage {
    pub pixels: Tensor,
    pub source_video_id: String,
    pub column_index: usize,
    /// 1 = brightest candidate column of the source video.
    pub brightness_rank: usize,
}

impl MModeImage {
    /// Wraps a `[H, T]` pixel array.
    pub fn new(pixels: Tensor, source_video_id: impl Into<String>, column_index: usize, brightness_rank: usize) -> Result<Self> {
        if pixels.ndim() != 2 {
            return Err(shape_err!("M-mode pixels must be 2-D, got {:?}", pixels.shape()));
        }
        if brightness_rank == 0 {
            return Err(Error::InvalidArgument("brightness rank starts at 1".into()));
        }
        Ok(Self {
            pixels,
            source_video_id: source_video_id.into(),
            column_index,
            brightness_rank,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Same provenance, new pixels.
    pub fn with_pixels(&self, pixels: Tensor) -> Self {
        Self { pixels, ..self.clone() }
    }
}

/// Cuts a video into consecutive clips of `floor(seconds · fps)` frames,
/// discarding the trailing remainder. Clip `k` is named `{id}#{k}`.
pub fn segment_video(video: &BModeVideo, seconds: f64) -> Result<Vec<BModeVideo>> {
    let len = (seconds * video.fps).floor();
    if !(len >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "segments of {seconds} s at {} fps contain no frames",
            video.fps
        )));
    }
    let len = len as usize;
    let (h, w) = (video.height(), video.width());
    let frame = h * w;
    let count = video.num_frames() / len;
    (0..count)
        .map(|k| {
            let data = video.frames.data()[k * len * frame..(k + 1) * len * frame].to_vec();
            BModeVideo::new(
                Tensor::from_parts(vec![len, h, w], data),
                video.fps,
                video.pleural_bounds,
                format!("{}#{k}", video.video_id),
            )
        })
        .collect()
}

/// Gathers column `column` of every frame into an `[H, T]` image.
pub fn extract_mmode(video: &BModeVideo, column: usize) -> Result<MModeImage> {
    if !video.candidate_columns().contains(&column) {
        let (lo, hi) = video.pleural_bounds;
        return Err(Error::InvalidArgument(format!(
            "column {column} outside pleural bounds [{lo}, {hi}]"
        )));
    }
    let (t, h) = (video.num_frames(), video.height());
    let mut data = Vec::with_capacity(h * t);
    for r in 0..h {
        for f in 0..t {
            data.push(video.pixel(f, r, column));
        }
    }
    Ok(MModeImage {
        pixels: Tensor::from_parts(vec![h, t], data),
        source_video_id: video.video_id.clone(),
        column_index: column,
        brightness_rank: 1,
    })
}

/// Candidate columns with their total intensity, brightest first; equal
/// totals keep ascending column order.
pub fn rank_columns(video: &BModeVideo) -> Vec<(usize, f64)> {
    let (lo, hi) = video.pleural_bounds;
    let w = video.width();
    let mut totals = vec![0.0; hi - lo + 1];
    for row in video.frames.data().chunks_exact(w) {
        for (acc, v) in totals.iter_mut().zip(&row[lo..=hi]) {
            *acc += v;
        }
    }
    let mut ranked: Vec<(usize, f64)> = totals.into_iter().enumerate().map(|(i, s)| (lo + i, s)).collect();
    // Stable sort keeps ascending column order among ties.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

/// The `count` brightest candidate columns (fewer if the bounds are
/// narrower), extracted and resized to `size × size`.
pub fn brightest_mmodes(video: &BModeVideo, count: usize, size: usize) -> Result<Vec<MModeImage>> {
    rank_columns(video)
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(i, (col, _))| {
            let mut img = extract_mmode(video, col)?;
            img.brightness_rank = i + 1;
            resize_bilinear(&img, size, size)
        })
        .collect()
}

/// Number of M-modes kept per video for pretraining: the brighter half,
/// rounded up.
pub fn pretraining_count(candidates: usize) -> usize {
    candidates.div_ceil(2)
}

/// The brighter half (rounded up) of a video's candidate M-modes at
/// training resolution.
pub fn select_for_pretraining(video: &BModeVideo) -> Result<Vec<MModeImage>> {
    let n = video.candidate_columns().count();
    brightest_mmodes(video, pretraining_count(n), MMODE_SIZE)
}

/// Align-corners bilinear resize, clamped to `[0, 255]`.
pub fn resize_bilinear(img: &MModeImage, out_h: usize, out_w: usize) -> Result<MModeImage> {
    Ok(img.with_pixels(resize_tensor(&img.pixels, out_h, out_w)?))
}

/// Align-corners bilinear resize of a 2-D array, clamped to `[0, 255]`.
pub fn resize_tensor(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = *src.shape() else {
        return Err(shape_err!("resize expects a 2-D array, got {:?}", src.shape()));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return src.map(|v| v.clamp(0.0, 255.0));
    }
    let d = src.data();
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|j| coord(j, out_w, w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1, fy) = coord(i, out_h, h);
        for &(c0, c1, fx) in &cols {
            let top = d[r0 * w + c0] * (1.0 - fx) + d[r0 * w + c1] * fx;
            let bottom = d[r1 * w + c0] * (1.0 - fx) + d[r1 * w + c1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 255.0));
        }
    }
    Tensor::checked(vec![out_h, out_w], out, "resize_bilinear")
}
