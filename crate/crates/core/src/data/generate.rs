use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SequenceSample};
use crate::config::{parse_value, Configurable};
use crate::error::{Error, Result};

/// Parameters of the synthetic longitudinal fundus-like generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_sequences: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Mean of the exponential excess of a sequence length over `min_length`.
    pub mean_extra_length: f64,
    pub image_size: usize,
    pub channels: usize,
    /// Fraction of sequences that convert from negative to positive.
    pub variant_fraction: f64,
    /// Visit gaps are log-uniform in `[gap_min, gap_max]` years.
    pub gap_min: f64,
    pub gap_max: f64,
    /// Standard deviation of the pixel noise before smoothing.
    pub noise: f64,
    /// Cup/disc ratio above which a visit is labelled positive.
    pub ratio_threshold: f64,
    pub clip_length: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_sequences: 405,
            min_length: 6,
            max_length: 28,
            mean_extra_length: 3.1,
            image_size: 64,
            channels: 3,
            variant_fraction: 37.0 / 405.0,
            gap_min: 0.25,
            gap_max: 4.0,
            noise: 0.05,
            ratio_threshold: 0.6,
            clip_length: 6,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.clip_length < 2 {
            return fail("clip_length must be at least 2".into());
        }
        if self.min_length < self.clip_length {
            return fail(format!(
                "min_length {} is shorter than clip_length {}",
                self.min_length, self.clip_length
            ));
        }
        if self.max_length < self.min_length {
            return fail("max_length < min_length".into());
        }
        if !(0.0..=1.0).contains(&self.variant_fraction) {
            return fail("variant_fraction must be in [0, 1]".into());
        }
        if !(self.gap_min > 0.0 && self.gap_max >= self.gap_min) {
            return fail("gaps must satisfy 0 < gap_min <= gap_max".into());
        }
        if self.image_size < 8 || self.channels == 0 {
            return fail("image_size must be >= 8 and channels >= 1".into());
        }
        if !(self.noise >= 0.0) || !(self.mean_extra_length >= 0.0) {
            return fail("noise and mean_extra_length must be non-negative".into());
        }
        if !(0.2..0.9).contains(&self.ratio_threshold) {
            return fail("ratio_threshold must be in [0.2, 0.9)".into());
        }
        Ok(())
    }

    pub fn num_variants(&self) -> usize {
        (self.num_sequences as f64 * self.variant_fraction).round() as usize
    }
}

impl Configurable for GenConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_sequences" => self.num_sequences = parse_value(key, value)?,
            "min_length" => self.min_length = parse_value(key, value)?,
            "max_length" => self.max_length = parse_value(key, value)?,
            "mean_extra_length" => self.mean_extra_length = parse_value(key, value)?,
            "gen_image_size" => self.image_size = parse_value(key, value)?,
            "gen_channels" => self.channels = parse_value(key, value)?,
            "variant_fraction" => self.variant_fraction = parse_value(key, value)?,
            "gap_min" => self.gap_min = parse_value(key, value)?,
            "gap_max" => self.gap_max = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "ratio_threshold" => self.ratio_threshold = parse_value(key, value)?,
            "clip_length" => self.clip_length = parse_value(key, value)?,
            "data_seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Latent disease state behind one generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTruth {
    /// Cup/disc ratio at every visit.
    pub ratios: Vec<f64>,
    /// Index of the first positive visit, for converting sequences.
    pub conversion: Option<usize>,
}

const STREAM_VARIANTS: u64 = u64::MAX;

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Which sequence indices convert; a deterministic function of the config.
pub fn variant_flags(cfg: &GenConfig) -> Vec<bool> {
    let mut rng = sequence_rng(cfg.seed, 0);
    rng.set_stream(STREAM_VARIANTS);
    let mut order: Vec<usize> = (0..cfg.num_sequences).collect();
    order.shuffle(&mut rng);
    let mut flags = vec![false; cfg.num_sequences];
    for &i in order.iter().take(cfg.num_variants()) {
        flags[i] = true;
    }
    flags
}

/// Generates one sequence from its own random stream; identical whether
/// sequences are produced together or one at a time.
pub fn generate_sequence(cfg: &GenConfig, index: usize, variant: bool) -> (SequenceSample, SequenceTruth) {
    let mut rng = sequence_rng(cfg.seed, index);
    let extra = if cfg.mean_extra_length > 0.0 {
        Exp::new(1.0 / cfg.mean_extra_length).expect("positive rate").sample(&mut rng)
    } else {
        0.0
    };
    let len = (cfg.min_length + extra.floor() as usize).min(cfg.max_length);

    let (log_lo, log_hi) = (cfg.gap_min.ln(), cfg.gap_max.ln());
    let mut timestamps = Vec::with_capacity(len);
    let mut t = rng.gen_range(0.0..2.0);
    for v in 0..len {
        if v > 0 {
            let gap = if log_hi > log_lo { rng.gen_range(log_lo..log_hi).exp() } else { cfg.gap_min };
            t += gap;
        }
        timestamps.push(t);
    }

    let thr = cfg.ratio_threshold;
    let (ratios, labels, conversion) = if variant {
        let conversion = rng.gen_range((len / 2).max(1)..len);
        let (before, after) = (timestamps[conversion - 1], timestamps[conversion]);
        let crossing = before + rng.gen_range(0.1..0.9) * (after - before);
        let slope = rng.gen_range(0.04..0.10);
        let ratios: Vec<f64> = timestamps
            .iter()
            .map(|&t| (thr + slope * (t - crossing)).clamp(0.1, 0.9))
            .collect();
        let labels = (0..len).map(|v| u8::from(v >= conversion)).collect();
        (ratios, labels, Some(conversion))
    } else {
        let base = rng.gen_range(0.25..0.45);
        let drift = rng.gen_range(0.0..0.01);
        let ratios = timestamps
            .iter()
            .map(|&t| (base + drift * (t - timestamps[0])).min(thr - 0.05))
            .collect();
        (ratios, vec![0u8; len], None)
    };

    let size = cfg.image_size as f64;
    let center = (
        size / 2.0 + rng.gen_range(-0.05..0.05) * size,
        size / 2.0 + rng.gen_range(-0.05..0.05) * size,
    );
    let disc_radius = rng.gen_range(0.22..0.28) * size;
    let images = ratios
        .iter()
        .map(|&r| render_visit(cfg, &mut rng, center, disc_radius, r))
        .collect();

    let sample = SequenceSample {
        timestamps,
        images,
        labels,
        variant,
    };
    (sample, SequenceTruth { ratios, conversion })
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

const BACKGROUND: [f64; 3] = [0.55, 0.22, 0.12];
const DISC: [f64; 3] = [0.95, 0.78, 0.50];
const CUP: [f64; 3] = [0.60, 0.42, 0.30];

/// A bright disc with a darker concentric cup of radius `ratio * disc_radius`
/// on a smoothed-noise background.
fn render_visit(
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
    center: (f64, f64),
    disc_radius: f64,
    ratio: f64,
) -> Vec<f32> {
    let (n, c) = (cfg.image_size, cfg.channels);
    let jitter = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let (cy, cx) = (center.0 + jitter.0, center.1 + jitter.1);
    let brightness = rng.gen_range(0.9..1.1);
    let cup_radius = ratio * disc_radius;

    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid sigma");
    let raw: Vec<f64> = (0..n * n * c).map(|_| noise.sample(rng)).collect();
    let mut out = Vec::with_capacity(n * n * c);
    for y in 0..n {
        for x in 0..n {
            let dist = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            let disc = smoothstep(disc_radius + 1.0, disc_radius - 1.0, dist);
            let cup = smoothstep(cup_radius + 1.0, cup_radius - 1.0, dist);
            for ch in 0..c {
                let k = ch % 3;
                let base = BACKGROUND[k] + (DISC[k] - BACKGROUND[k]) * disc;
                let value = base + (CUP[k] - base) * cup;
                // 3x3 box-smoothed noise
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                            acc += raw[((yy as usize) * n + xx as usize) * c + ch];
                            cnt += 1.0;
                        }
                    }
                }
                out.push((value * brightness + acc / cnt).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Generates the dataset together with the latent ratios of every sequence.
pub fn generate_with_truth(cfg: &GenConfig) -> Result<(Dataset, Vec<SequenceTruth>)> {
    cfg.validate()?;
    let flags = variant_flags(cfg);
    let (sequences, truth) = flags
        .iter()
        .enumerate()
        .map(|(i, &variant)| generate_sequence(cfg, i, variant))
        .unzip();
    let dataset = Dataset {
        height: cfg.image_size,
        width: cfg.image_size,
        channels: cfg.channels,
        sequences,
    };
    Ok((dataset, truth))
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    Ok(generate_with_truth(cfg)?.0)
}
