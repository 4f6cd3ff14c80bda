//! Deterministic generator of two-stream synthetic untrimmed videos with
//! class-specific temporal patterns, plus dataset disk round-trip.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{
    read_annotations, read_features, write_annotations, write_features, Annotations, FormatError,
    InstanceRecord, VideoRecord,
};
use crate::segments::Segment;
use crate::tensor::{FeatureGrid, Real, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_train_videos: usize,
    pub num_test_videos: usize,
    /// Cells per video.
    pub t_len: usize,
    /// Channels per stream.
    pub num_channels: usize,
    pub num_classes: usize,
    pub mean_instances: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_amplitude: f64,
    /// Write class-specific flank patterns of length s/2 on both sides of
    /// each instance, so context-aware models have something to pick up.
    pub context_cues: bool,
    /// How much of stream A's signal component reappears in stream B.
    pub stream_correlation: f64,
    pub cells_per_second: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_train_videos: 200,
            num_test_videos: 100,
            t_len: 256,
            num_channels: 16,
            num_classes: 3,
            mean_instances: 3.0,
            min_len: 4,
            max_len: 16,
            noise_amplitude: 0.1,
            context_cues: true,
            stream_correlation: 0.8,
            cells_per_second: 10.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible packing: {0}")]
    Infeasible(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample<F> {
    pub id: String,
    pub stream_a: FeatureGrid<F>,
    pub stream_b: FeatureGrid<F>,
    pub annotations: Vec<(Segment, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    pub train: Vec<VideoSample<F>>,
    pub test: Vec<VideoSample<F>>,
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.min_len < 1 || self.max_len < self.min_len || self.max_len > self.t_len {
            return Err(SynthError::InvalidConfig("length bounds out of range".into()));
        }
        if self.num_classes < 1 {
            return Err(SynthError::InvalidConfig("need at least one class".into()));
        }
        if !(0.0..=1.0).contains(&self.stream_correlation) {
            return Err(SynthError::InvalidConfig("stream correlation must be in [0,1]".into()));
        }
        // instances must fit without mandatory overlap (flanks included)
        let worst = (self.mean_instances + 2.0) * (2.0 * self.max_len as f64 + 1.0);
        if worst > self.t_len as f64 {
            return Err(SynthError::Infeasible(format!(
                "{} instances of up to {} cells cannot pack into {} cells",
                self.mean_instances + 2.0,
                self.max_len,
                self.t_len
            )));
        }
        Ok(())
    }
}

/// Class-specific waveform value at offset `u` inside an instance. Each
/// class has a distinct DC level and oscillation period, so the classes
/// stay linearly separable when the noise amplitude is zero.
fn class_waveform(class: usize, u: usize) -> f64 {
    let dc = 1.0 + 0.75 * (class - 1) as f64;
    let period = [4.0, 7.0, 11.0, 5.0, 9.0, 13.0][(class - 1) % 6] + 2.0 * ((class - 1) / 6) as f64;
    dc + (2.0 * std::f64::consts::PI * u as f64 / period).sin()
}

/// Flank cue value for context modeling: class-specific, sign-flipped so it
/// never mimics an in-segment pattern.
fn flank_value(class: usize) -> f64 {
    -(1.0 + 0.75 * (class - 1) as f64)
}

fn generate_video<F: Real>(config: &SynthConfig, id: String, rng_seed: u64) -> VideoSample<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (t_len, d) = (config.t_len, config.num_channels);

    let count_jitter = rng.gen_range(-1i64..=1);
    let count = ((config.mean_instances.round() as i64 + count_jitter).max(0)) as usize;

    let mut placed: Vec<(usize, usize, usize)> = Vec::new(); // (start, len, class)
    for _ in 0..count {
        let mut placed_ok = false;
        for _attempt in 0..200 {
            let len = rng.gen_range(config.min_len..=config.max_len);
            let start = rng.gen_range(0..=t_len - len);
            // keep one flank-length of clearance so cues never overlap
            let margin = len.div_ceil(2) + 1;
            let lo = start.saturating_sub(margin);
            let hi = (start + len + margin).min(t_len);
            if placed.iter().all(|&(s, l, _)| s + l <= lo || s >= hi) {
                let class = rng.gen_range(1..=config.num_classes);
                placed.push((start, len, class));
                placed_ok = true;
                break;
            }
        }
        if !placed_ok {
            // dense video; keep what fit, determinism preserved
            break;
        }
    }
    placed.sort();

    let mut signal = vec![0.0f64; t_len * d];
    for &(start, len, class) in &placed {
        let mut channels: Vec<usize> = (0..d).collect();
        channels.shuffle(&mut rng);
        channels.truncate((d / 2).max(1));
        for u in 0..len {
            let v = class_waveform(class, u);
            for &c in &channels {
                signal[(start + u) * d + c] += v;
            }
        }
        if config.context_cues {
            let flank = (len / 2).max(1);
            let v = flank_value(class);
            for off in 1..=flank {
                if start >= off {
                    for &c in &channels {
                        signal[(start - off) * d + c] += v;
                    }
                }
                let after = start + len + off - 1;
                if after < t_len {
                    for &c in &channels {
                        signal[after * d + c] += v;
                    }
                }
            }
        }
    }

    let noise = config.noise_amplitude;
    let corr = config.stream_correlation;
    let mut a = Tensor::<F>::zeros(t_len, d);
    let mut b = Tensor::<F>::zeros(t_len, d);
    for i in 0..t_len * d {
        let na: f64 = rng.gen_range(-1.0..1.0) * noise;
        let nb: f64 = rng.gen_range(-1.0..1.0) * noise;
        a.data[i] = F::from_f64(signal[i] + na);
        b.data[i] = F::from_f64(corr * signal[i] + nb);
    }

    let annotations = placed
        .iter()
        .map(|&(start, len, class)| (Segment::new(start as f64, (start + len) as f64), class))
        .collect();
    VideoSample {
        id,
        stream_a: FeatureGrid::new(a, config.cells_per_second),
        stream_b: FeatureGrid::new(b, config.cells_per_second),
        annotations,
    }
}

fn video_seed(seed: u64, index: u64) -> u64 {
    // splitmix-style spread so per-video streams are independent
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the train/test split. Fully determined by the config seed;
/// per-video seeds are derived so generation order does not matter.
pub fn generate<F: Real>(config: &SynthConfig) -> Result<Dataset<F>, SynthError> {
    config.validate()?;
    let make = |ids: Vec<(String, u64)>| -> Vec<VideoSample<F>> {
        let gen_one = |(id, s): &(String, u64)| generate_video(config, id.clone(), *s);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            ids.par_iter().map(gen_one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            ids.iter().map(gen_one).collect()
        }
    };
    let train_ids: Vec<(String, u64)> = (0..config.num_train_videos)
        .map(|i| (format!("train_{i:04}"), video_seed(config.seed, i as u64)))
        .collect();
    let test_ids: Vec<(String, u64)> = (0..config.num_test_videos)
        .map(|i| {
            (format!("test_{i:04}"), video_seed(config.seed, (config.num_train_videos + i) as u64))
        })
        .collect();
    Ok(Dataset { train: make(train_ids), test: make(test_ids) })
}

/// Sequential twin of [`generate`]; used by the benchmark suite to compare
/// against the data-parallel path.
pub fn generate_seq<F: Real>(config: &SynthConfig) -> Result<Dataset<F>, SynthError> {
    config.validate()?;
    let make = |ids: Vec<(String, u64)>| -> Vec<VideoSample<F>> {
        ids.iter().map(|(id, s)| generate_video(config, id.clone(), *s)).collect()
    };
    let train_ids: Vec<(String, u64)> = (0..config.num_train_videos)
        .map(|i| (format!("train_{i:04}"), video_seed(config.seed, i as u64)))
        .collect();
    let test_ids: Vec<(String, u64)> = (0..config.num_test_videos)
        .map(|i| {
            (format!("test_{i:04}"), video_seed(config.seed, (config.num_train_videos + i) as u64))
        })
        .collect();
    Ok(Dataset { train: make(train_ids), test: make(test_ids) })
}

pub fn write_split<F: Real>(dir: &Path, videos: &[VideoSample<F>]) -> Result<(), SynthError> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(FormatError::Io)?;
    let ann = Annotations {
        videos: videos
            .iter()
            .map(|v| VideoRecord {
                id: v.id.clone(),
                t_len: v.stream_a.len(),
                cells_per_second: v.stream_a.cells_per_second,
                instances: v
                    .annotations
                    .iter()
                    .map(|(s, c)| InstanceRecord { start: s.start, end: s.end, label: *c })
                    .collect(),
            })
            .collect(),
    };
    write_annotations(&dir.join("annotations.json"), &ann)?;
    for v in videos {
        write_features(&feat_dir.join(format!("{}.a.talf", v.id)), &v.stream_a)?;
        write_features(&feat_dir.join(format!("{}.b.talf", v.id)), &v.stream_b)?;
    }
    Ok(())
}

pub fn read_split<F: Real>(dir: &Path) -> Result<Vec<VideoSample<F>>, SynthError> {
    let ann = read_annotations(&dir.join("annotations.json"))?;
    let feat_dir = dir.join("features");
    let mut videos = Vec::with_capacity(ann.videos.len());
    for v in &ann.videos {
        let stream_a = read_features(&feat_dir.join(format!("{}.a.talf", v.id)))?;
        let stream_b = read_features(&feat_dir.join(format!("{}.b.talf", v.id)))?;
        videos.push(VideoSample {
            id: v.id.clone(),
            stream_a,
            stream_b,
            annotations: v.instances.iter().map(|i| (i.segment(), i.label)).collect(),
        });
    }
    Ok(videos)
}

pub fn write_dataset<F: Real>(dir: &Path, dataset: &Dataset<F>) -> Result<(), SynthError> {
    write_split(&dir.join("train"), &dataset.train)?;
    write_split(&dir.join("test"), &dataset.test)
}

pub fn read_dataset<F: Real>(dir: &Path) -> Result<Dataset<F>, SynthError> {
    Ok(Dataset { train: read_split(&dir.join("train"))?, test: read_split(&dir.join("test"))? })
}
