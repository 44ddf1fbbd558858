//! Synthetic irregular longitudinal image sequences, clip extraction, splits,
//! and the binary dataset container.

mod format;
mod generate;
mod split;

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use generate::{
    generate, generate_sequence, generate_with_truth, variant_flags, GenConfig, SequenceTruth,
};
pub use split::{read_manifest, split_sequences, write_manifest, Split, Splits};

use std::ops::Range;

use crate::encoding::ClipBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One eye's ordered visits.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// Visit times in years, strictly increasing.
    pub timestamps: Vec<f64>,
    /// One `H x W x C` image per visit, values in `[0, 1]`.
    pub images: Vec<Vec<f32>>,
    /// 0 negative, 1 positive; non-decreasing.
    pub labels: Vec<u8>,
    /// Whether the sequence converts from negative to positive.
    pub variant: bool,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sequences: Vec<SequenceSample>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// A window of `length` consecutive visits of one sequence. The first
/// `length - 1` visits are model inputs; the label of each following visit
/// is the target, and the last visit's label is the clip's final target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clip {
    pub sequence: usize,
    pub start: usize,
    pub length: usize,
}

impl Clip {
    pub fn visits(&self) -> Range<usize> {
        self.start..self.start + self.length
    }

    pub fn input_visits(&self) -> Range<usize> {
        self.start..self.start + self.length - 1
    }

    pub fn final_target(&self, ds: &Dataset) -> usize {
        ds.sequences[self.sequence].labels[self.start + self.length - 1] as usize
    }
}

/// Sliding windows `[i, i + length)` for `i = 0, stride, ...` within one
/// sequence; a sequence shorter than `length` yields none.
pub fn extract_clips(seq: &SequenceSample, sequence: usize, length: usize, stride: usize) -> Result<Vec<Clip>> {
    if length < 2 || stride == 0 {
        return Err(Error::config("clip length must be >= 2 and stride >= 1"));
    }
    if seq.len() < length {
        return Ok(Vec::new());
    }
    Ok((0..=seq.len() - length)
        .step_by(stride)
        .map(|start| Clip {
            sequence,
            start,
            length,
        })
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct ClipSet {
    pub clips: Vec<Clip>,
    /// Sequences too short to yield a clip.
    pub skipped: usize,
}

/// Clips of the listed sequences, in order.
pub fn extract_all(ds: &Dataset, sequences: &[usize], length: usize, stride: usize) -> Result<ClipSet> {
    let mut set = ClipSet::default();
    for &i in sequences {
        let seq = ds
            .sequences
            .get(i)
            .ok_or_else(|| Error::data(format!("sequence index {i} out of range")))?;
        let clips = extract_clips(seq, i, length, stride)?;
        if clips.is_empty() {
            set.skipped += 1;
        }
        set.clips.extend(clips);
    }
    if set.skipped > 0 {
        log::warn!("skipped {} sequences shorter than {length} visits", set.skipped);
    }
    Ok(set)
}

/// Assembles model inputs for `clips`.
pub fn make_batch(ds: &Dataset, clips: &[Clip], num_classes: usize) -> Result<ClipBatch> {
    let first = clips.first().ok_or_else(|| Error::data("empty clip batch"))?;
    let steps = first.length - 1;
    if clips.iter().any(|c| c.length != first.length) {
        return Err(Error::data("clips in a batch must share a length"));
    }
    let img = ds.image_len();
    let mut pixels = Vec::with_capacity(clips.len() * steps * img);
    let mut timestamps = Vec::with_capacity(clips.len());
    let mut inputs = Vec::with_capacity(clips.len());
    let mut targets = Vec::with_capacity(clips.len());
    for clip in clips {
        let seq = &ds.sequences[clip.sequence];
        for v in clip.input_visits() {
            pixels.extend(seq.images[v].iter().map(|&p| p as f64));
        }
        timestamps.push(seq.timestamps[clip.input_visits()].to_vec());
        inputs.push(seq.labels[clip.input_visits()].iter().map(|&y| y as usize).collect());
        targets.push(
            seq.labels[clip.start + 1..clip.start + clip.length]
                .iter()
                .map(|&y| y as usize)
                .collect(),
        );
    }
    let images = Tensor::new(
        vec![clips.len(), steps, ds.height, ds.width, ds.channels],
        pixels,
    )?;
    ClipBatch::new(images, timestamps, inputs, targets, num_classes)
}
