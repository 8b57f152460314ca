//! Positive-pair batches for pretraining. Two M-modes from the same video
//! form a positive pair; every batch slot comes from a different video.

use rand::seq::SliceRandom;

use crate::augment::{sample_index, AugmentationConfig, BranchRole, RngStream, SampleKey};
use crate::error::{Error, Result};
use crate::mmode::{resize_tensor, MModeImage};
use crate::tensor::Tensor;

const PAIR_STEP: u64 = 100;
const SHUFFLE_STEP: u64 = 101;

/// The retained M-modes of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMModes {
    pub video_id: String,
    pub images: Vec<MModeImage>,
}

/// `N` positive pairs as two `[N, 1, S, S]` tensors scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub video_ids: Vec<String>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }

    /// Both views stacked into one `[2N, 1, S, S]` tensor, view A first.
    pub fn stacked(&self) -> Result<Tensor> {
        let n = self.len();
        let per = self.view_a.numel() / n.max(1);
        let mut data = Vec::with_capacity(2 * n * per);
        data.extend_from_slice(self.view_a.data());
        data.extend_from_slice(self.view_b.data());
        let mut shape = self.view_a.shape().to_vec();
        shape[0] = 2 * n;
        Tensor::new(shape, data)
    }
}

/// Two distinct images drawn uniformly, in random order; a lone image is
/// returned twice.
pub fn sample_pair<'a>(images: &'a [MModeImage], rng: &mut RngStream) -> Result<(&'a MModeImage, &'a MModeImage)> {
    match images.len() {
        0 => Err(Error::Data("cannot sample a pair from a video with no M-modes".into())),
        1 => Ok((&images[0], &images[0])),
        n => {
            let i = rng.int(0, n - 1);
            let j = rng.int(0, n - 2);
            let j = if j >= i { j + 1 } else { j };
            Ok((&images[i], &images[j]))
        }
    }
}

/// Splits the videos into shuffled batches of `batch_size` distinct
/// videos for one epoch. The incomplete final batch is dropped.
pub fn epoch_batches(n_videos: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if n_videos < batch_size {
        return Err(Error::Data(format!(
            "batch size {batch_size} needs at least that many videos, have {n_videos}"
        )));
    }
    let mut order: Vec<usize> = (0..n_videos).collect();
    order.shuffle(RngStream::new(seed, sample_index(&[epoch]), SHUFFLE_STEP).inner());
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// Converts an image to the training resolution and scales it to `[0, 1]`.
pub fn to_input(img: &MModeImage, size: usize) -> Result<Vec<f64>> {
    let px = resize_tensor(&img.pixels, size, size)?;
    Ok(px.data().iter().map(|v| v / 255.0).collect())
}

/// Assembles one batch from the videos at `members`: each contributes a
/// pair, and each member of the pair is augmented independently.
/// `batch_index` and `epoch` only select random streams.
pub fn make_batch(
    dataset: &[VideoMModes],
    members: &[usize],
    aug: &AugmentationConfig,
    size: usize,
    epoch: u64,
    batch_index: u64,
) -> Result<PairBatch> {
    let mut seen = std::collections::HashSet::new();
    let n = members.len();
    let mut a = Vec::with_capacity(n * size * size);
    let mut b = Vec::with_capacity(n * size * size);
    let mut ids = Vec::with_capacity(n);
    for (slot, &v) in members.iter().enumerate() {
        let video = dataset
            .get(v)
            .ok_or_else(|| Error::InvalidArgument(format!("video index {v} out of range")))?;
        if !seen.insert(video.video_id.as_str()) {
            return Err(Error::Data(format!("video {} appears twice in one batch", video.video_id)));
        }
        let slot_key = sample_index(&[epoch, batch_index, slot as u64]);
        let mut rng = RngStream::new(aug.seed, slot_key, PAIR_STEP);
        let (first, second) = sample_pair(&video.images, &mut rng)?;
        let first = resized(first, size)?;
        let second = resized(second, size)?;
        let ka = SampleKey::new(aug.seed, sample_index(&[slot_key, 0]));
        let kb = SampleKey::new(aug.seed, sample_index(&[slot_key, 1]));
        a.extend(aug.apply(&first, ka, BranchRole::First)?.image.pixels.data().iter().map(|v| v / 255.0));
        b.extend(aug.apply(&second, kb, BranchRole::Second)?.image.pixels.data().iter().map(|v| v / 255.0));
        ids.push(video.video_id.clone());
    }
    Ok(PairBatch {
        view_a: Tensor::new(vec![n, 1, size, size], a)?,
        view_b: Tensor::new(vec![n, 1, size, size], b)?,
        video_ids: ids,
    })
}

fn resized(img: &MModeImage, size: usize) -> Result<MModeImage> {
    if img.height() == size && img.width() == size {
        Ok(img.clone())
    } else {
        Ok(img.with_pixels(resize_tensor(&img.pixels, size, size)?))
    }
}
