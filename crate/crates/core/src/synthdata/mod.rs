//! Synthetic stand-in for regional satellite/radar archives.
//!
//! Each region holds a rain-rate movie built from Gaussian storm cells that
//! drift in straight lines, grow and decay. Storm peak intensities follow a
//! Pareto law, so most windows are dry and a few are extreme. Radiance
//! channels are blurred, log-compressed affine views of the rain field
//! (two of them lagged in time) plus hashed noise; they are computed on
//! demand for the requested crop instead of being stored.
//!
//! Seed splitting: region `r` draws its storms from
//! `ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (r + 1)))`.

pub mod format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto, Poisson};
use serde::{Deserialize, Serialize};

pub use format::{read_dataset, write_dataset, FORMAT_VERSION, MAGIC};

use crate::binning::{derive_target, BinSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frames in the window over which `blob_rate` counts storm births.
const RATE_WINDOW: f64 = 20.0;
/// Rain below this rate (mm/h) is reported as zero.
const DETECTION_THRESHOLD: f64 = 0.1;
const MIN_LIFETIME: usize = 10;
const MAX_LIFETIME: usize = 40;
const NOISE_FRACTION: f64 = 0.05;
/// Largest frame lag of any radiance channel.
pub const MAX_LAG: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub regions: usize,
    /// Side of each square region, in pixels.
    pub region_size: usize,
    pub frames_per_region: usize,
    /// Expected storm births per region per 20 frames.
    pub blob_rate: f64,
    /// Pareto shape of storm peak intensity.
    pub intensity_tail: f64,
    /// Pareto scale (smallest peak intensity), mm/h.
    pub intensity_scale: f64,
    /// Peak intensities are capped here, mm/h.
    pub max_intensity: f64,
    pub channels: usize,
    pub input_frames: usize,
    pub target_frames: usize,
    /// Side of the square input and target crops.
    pub crop: usize,
    /// Leading fraction of each region's frames reserved for training.
    pub train_fraction: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Bin count for the labels stored alongside each record.
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            regions: 7,
            region_size: 128,
            frames_per_region: 160,
            blob_rate: 3.0,
            intensity_tail: 1.5,
            intensity_scale: 2.0,
            max_intensity: 150.0,
            channels: 11,
            input_frames: 4,
            target_frames: 16,
            crop: 32,
            train_fraction: 0.75,
            train_samples: 512,
            val_samples: 128,
            n_bins: 64,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn window_frames(&self) -> usize {
        self.input_frames + self.target_frames
    }

    /// First frame of the validation period.
    pub fn split_frame(&self) -> usize {
        (self.frames_per_region as f64 * self.train_fraction).floor() as usize
    }

    /// First frame a validation window may start on. Lagged channels look
    /// back `MAX_LAG` frames, which must not reach the training period.
    pub fn validation_start(&self) -> usize {
        self.split_frame() + MAX_LAG
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.regions == 0 || self.channels == 0 || self.input_frames == 0 || self.target_frames == 0 {
            return bad("regions, channels and frame counts must be positive".into());
        }
        if self.crop == 0 || self.region_size < self.crop {
            return bad(format!("crop {} does not fit region {}", self.crop, self.region_size));
        }
        if !(self.blob_rate >= 0.0) || !(self.intensity_tail > 0.0) || !(self.intensity_scale > 0.0) {
            return bad("blob_rate must be non-negative; tail and scale positive".into());
        }
        if !(self.max_intensity >= self.intensity_scale) {
            return bad("max_intensity must be at least intensity_scale".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        let split = self.split_frame();
        let w = self.window_frames();
        if split < w || self.frames_per_region < self.validation_start() + w {
            return bad(format!(
                "{} frames split at {split} leave no room for {w}-frame windows on both sides",
                self.frames_per_region
            ));
        }
        if self.n_bins < 2 {
            return bad("n_bins must be at least 2".into());
        }
        Ok(())
    }

    /// Input shape `[T, C, H, W]` of the records this config produces.
    pub fn input_shape(&self) -> [usize; 4] {
        [self.input_frames, self.channels, self.crop, self.crop]
    }

    pub fn rain_shape(&self) -> [usize; 3] {
        [self.target_frames, self.crop, self.crop]
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn region_rng(seed: u64, region: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (region as u64 + 1)))
}

#[derive(Clone, Debug)]
struct Storm {
    birth: f64,
    lifetime: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    sigma: f64,
    peak: f64,
}

impl Storm {
    fn intensity(&self, t: f64) -> f64 {
        let age = t - self.birth;
        if age <= 0.0 || age >= self.lifetime {
            0.0
        } else {
            self.peak * (std::f64::consts::PI * age / self.lifetime).sin()
        }
    }
}

/// Per-channel radiance model: blur width, time lag, offset and gain.
#[derive(Clone, Copy, Debug)]
struct ChannelModel {
    sigma: f64,
    lag: usize,
    offset: f64,
    gain: f64,
}

fn channel_models(channels: usize) -> Vec<ChannelModel> {
    (0..channels)
        .map(|c| ChannelModel {
            sigma: 0.5 + 0.3 * (c % 8) as f64,
            // the last two channels see the field one and two frames late
            lag: match channels.saturating_sub(c) {
                1 if channels > 2 => 2,
                2 if channels > 2 => 1,
                _ => 0,
            },
            offset: 200.0 + 10.0 * c as f64,
            gain: if c % 2 == 0 { 5.0 + c as f64 } else { -(5.0 + c as f64) },
        })
        .collect()
}

/// Gaussian kernel truncated at 3σ, normalized.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Rain movies for every region.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    config: GeneratorConfig,
    /// Per region: `frames × size × size` rain rates, mm/h.
    rain: Vec<Vec<f32>>,
    channels: Vec<ChannelModel>,
}

/// Where a sample was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub region: u32,
    /// First input frame; the target frames follow the input frames.
    pub t0: u32,
    pub top: u32,
    pub left: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// One training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// `[T×C×H×W]` radiances.
    pub x_raw: Tensor,
    /// `[T′×H′×W′]` rain rates following the input window, mm/h.
    pub rain: Tensor,
    /// Accumulated rainfall, mm.
    pub y_reg: f64,
    pub label: usize,
    pub origin: SampleOrigin,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<SampleOrigin>,
    pub validation: Vec<SampleOrigin>,
}

impl SyntheticWorld {
    pub fn generate(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let rain = (0..config.regions).map(|r| render_region(config, r)).collect();
        Ok(Self {
            config: config.clone(),
            rain,
            channels: channel_models(config.channels),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn rain_at(&self, region: usize, t: usize, y: usize, x: usize) -> f64 {
        let s = self.config.region_size;
        f64::from(self.rain[region][(t * s + y) * s + x])
    }

    /// Full rain frame `[size×size]`.
    pub fn rain_frame(&self, region: usize, t: usize) -> &[f32] {
        let s = self.config.region_size;
        &self.rain[region][t * s * s..(t + 1) * s * s]
    }

    /// Range of valid first-input frames for a split.
    pub fn start_range(&self, split: Split) -> std::ops::Range<usize> {
        let c = &self.config;
        let w = c.window_frames();
        match split {
            Split::Train => 0..c.split_frame() - w + 1,
            Split::Validation => c.validation_start()..c.frames_per_region - w + 1,
        }
    }

    /// Draws a window: random region, then a random start frame and crop.
    /// Start frames are drawn across the whole split; draws whose window
    /// would run past the end of the split are rejected and redrawn.
    pub fn draw_origin(&self, split: Split, rng: &mut impl Rng) -> Result<SampleOrigin> {
        let c = &self.config;
        let (lo, hi) = match split {
            Split::Train => (0, c.split_frame()),
            Split::Validation => (c.validation_start(), c.frames_per_region),
        };
        let w = c.window_frames();
        for _ in 0..1000 {
            let region = rng.random_range(0..c.regions);
            let t0 = rng.random_range(lo..hi);
            let top = rng.random_range(0..=c.region_size - c.crop);
            let left = rng.random_range(0..=c.region_size - c.crop);
            if t0 + w <= hi {
                return Ok(SampleOrigin {
                    region: region as u32,
                    t0: t0 as u32,
                    top: top as u32,
                    left: left as u32,
                });
            }
        }
        Err(Error::Data(format!("no valid {w}-frame window in {split:?} split")))
    }

    /// `[T′×crop×crop]` rain target for a window.
    pub fn rain_crop(&self, origin: SampleOrigin) -> Tensor {
        let c = &self.config;
        let start = origin.t0 as usize + c.input_frames;
        let mut data = Vec::with_capacity(c.target_frames * c.crop * c.crop);
        for t in start..start + c.target_frames {
            for y in 0..c.crop {
                for x in 0..c.crop {
                    data.push(self.rain_at(origin.region as usize, t, origin.top as usize + y, origin.left as usize + x));
                }
            }
        }
        Tensor::new(&c.rain_shape(), data).expect("crop shape")
    }

    /// `[T×C×crop×crop]` radiances for the input part of a window, rounded
    /// to single precision.
    pub fn radiance_crop(&self, origin: SampleOrigin) -> Tensor {
        let c = &self.config;
        let (crop, size) = (c.crop, c.region_size as isize);
        let region = origin.region as usize;
        let signal_range = (1.0 + c.max_intensity).ln();
        let mut data = Vec::with_capacity(c.input_frames * c.channels * crop * crop);
        for dt in 0..c.input_frames {
            let t = origin.t0 as usize + dt;
            for (ch, model) in self.channels.iter().enumerate() {
                let source_t = t.saturating_sub(model.lag);
                let kernel = gaussian_kernel(model.sigma);
                let half = (kernel.len() / 2) as isize;
                let span = crop + 2 * half as usize;
                // rain with a clamped border, then a separable blur
                let (top, left) = (origin.top as isize - half, origin.left as isize - half);
                let mut rows = vec![0.0; span * crop];
                for yy in 0..span {
                    let sy = (top + yy as isize).clamp(0, size - 1) as usize;
                    for x in 0..crop {
                        let mut acc = 0.0;
                        for (k, w) in kernel.iter().enumerate() {
                            let sx = (left + (x + k) as isize).clamp(0, size - 1) as usize;
                            acc += w * self.rain_at(region, source_t, sy, sx);
                        }
                        rows[yy * crop + x] = acc;
                    }
                }
                for y in 0..crop {
                    for x in 0..crop {
                        let blurred: f64 = kernel.iter().enumerate().map(|(k, w)| w * rows[(y + k) * crop + x]).sum();
                        let key = [
                            self.config.seed,
                            region as u64,
                            t as u64,
                            ch as u64,
                            (origin.top as usize + y) as u64,
                            (origin.left as usize + x) as u64,
                        ];
                        let noise = hashed_unit(&key) * NOISE_FRACTION * model.gain.abs() * signal_range;
                        let v = model.offset + model.gain * blurred.ln_1p() + noise;
                        data.push(f64::from(v as f32));
                    }
                }
            }
        }
        Tensor::new(&c.input_shape(), data).expect("crop shape")
    }

    /// Target of a window without building the radiances.
    pub fn target(&self, origin: SampleOrigin) -> Result<f64> {
        derive_target(&self.rain_crop(origin))
    }

    pub fn record(&self, origin: SampleOrigin, bins: &BinSpec) -> Result<SampleRecord> {
        let rain = self.rain_crop(origin);
        let y_reg = derive_target(&rain)?;
        Ok(SampleRecord {
            x_raw: self.radiance_crop(origin),
            rain,
            y_reg,
            label: bins.to_bin(y_reg),
            origin,
        })
    }

    /// Draws one window from `split` and materializes it.
    pub fn sample_pair(&self, split: Split, rng: &mut impl Rng, bins: &BinSpec) -> Result<SampleRecord> {
        let origin = self.draw_origin(split, rng)?;
        self.record(origin, bins)
    }
}

/// Deterministic value in `[-1, 1)` from a key.
fn hashed_unit(key: &[u64]) -> f64 {
    let h = key.iter().fold(0x243F_6A88_85A3_08D3u64, |acc, &k| splitmix64(acc ^ k));
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn render_region(config: &GeneratorConfig, region: usize) -> Vec<f32> {
    let mut rng = region_rng(config.seed, region);
    let size = config.region_size;
    let frames = config.frames_per_region;
    let span = (frames + MAX_LIFETIME) as f64;
    let expected = config.blob_rate * span / RATE_WINDOW;
    let count = if expected > 0.0 {
        Poisson::new(expected).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let pareto = Pareto::new(config.intensity_scale, config.intensity_tail).expect("valid pareto");
    let margin = size as f64 * 0.25;
    let storms: Vec<Storm> = (0..count)
        .map(|_| Storm {
            birth: rng.random_range(-(MAX_LIFETIME as f64)..frames as f64),
            lifetime: rng.random_range(MIN_LIFETIME as f64..MAX_LIFETIME as f64),
            x: rng.random_range(-margin..size as f64 + margin),
            y: rng.random_range(-margin..size as f64 + margin),
            vx: rng.random_range(-0.6..0.6),
            vy: rng.random_range(-0.6..0.6),
            sigma: rng.random_range(2.0..5.0),
            peak: pareto.sample(&mut rng).min(config.max_intensity),
        })
        .collect();

    let mut field = vec![0.0f64; frames * size * size];
    for storm in &storms {
        for t in 0..frames {
            let amp = storm.intensity(t as f64);
            if amp <= 0.0 {
                continue;
            }
            let age = t as f64 - storm.birth;
            let (cx, cy) = (storm.x + storm.vx * age, storm.y + storm.vy * age);
            let reach = 4.0 * storm.sigma;
            let x_lo = (cx - reach).floor().max(0.0) as usize;
            let x_hi = ((cx + reach).ceil().max(0.0) as usize).min(size);
            let y_lo = (cy - reach).floor().max(0.0) as usize;
            let y_hi = ((cy + reach).ceil().max(0.0) as usize).min(size);
            let inv = 1.0 / (2.0 * storm.sigma * storm.sigma);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    field[(t * size + y) * size + x] += amp * (-d2 * inv).exp();
                }
            }
        }
    }
    field
        .into_iter()
        .map(|v| if v < DETECTION_THRESHOLD { 0.0 } else { v as f32 })
        .collect()
}

/// Train and validation records with the bins their labels refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bins: BinSpec,
    pub train: Vec<SampleRecord>,
    pub validation: Vec<SampleRecord>,
}

impl Dataset {
    /// Draws `config.train_samples` + `config.val_samples` windows (from the
    /// seed after the storm seeds), fixes bins on the training targets and
    /// materializes every record.
    pub fn build(world: &SyntheticWorld) -> Result<Self> {
        let c = world.config();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(c.seed ^ 0x5EED_DA7A));
        let manifest = SplitManifest {
            train: (0..c.train_samples)
                .map(|_| world.draw_origin(Split::Train, &mut rng))
                .collect::<Result<_>>()?,
            validation: (0..c.val_samples)
                .map(|_| world.draw_origin(Split::Validation, &mut rng))
                .collect::<Result<_>>()?,
        };
        Self::from_manifest(world, &manifest, c.n_bins)
    }

    pub fn from_manifest(world: &SyntheticWorld, manifest: &SplitManifest, n_bins: usize) -> Result<Self> {
        if manifest.train.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let targets = manifest
            .train
            .iter()
            .map(|&o| world.target(o))
            .collect::<Result<Vec<_>>>()?;
        let bins = BinSpec::from_targets(&targets, n_bins)?;
        let materialize = |origins: &[SampleOrigin]| {
            origins.iter().map(|&o| world.record(o, &bins)).collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            bins,
            train: materialize(&manifest.train)?,
            validation: materialize(&manifest.validation)?,
        })
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            train: self.train.iter().map(|r| r.origin).collect(),
            validation: self.validation.iter().map(|r| r.origin).collect(),
        }
    }

    /// Rebuilds the bins from the training targets with `n` bins and
    /// relabels every record.
    pub fn relabel(&mut self, n: usize) -> Result<BinSpec> {
        let targets: Vec<f64> = self.train.iter().map(|r| r.y_reg).collect();
        self.bins = BinSpec::from_targets(&targets, n)?;
        for r in self.train.iter_mut().chain(self.validation.iter_mut()) {
            r.label = self.bins.to_bin(r.y_reg);
        }
        Ok(self.bins)
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|r| r.label).collect()
    }

    /// Label counts over the training split.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.bins.n];
        for r in &self.train {
            h[r.label] += 1;
        }
        h
    }

    /// Writes `train.satd`, `validation.satd` and `manifest.json`.
    pub fn save(&self, dir: &std::path::Path, config: &GeneratorConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_dataset(&self.train, &dir.join("train.satd"))?;
        write_dataset(&self.validation, &dir.join("validation.satd"))?;
        let meta = DatasetMeta {
            generator: config.clone(),
            bins: self.bins,
            manifest: self.manifest(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<(Self, GeneratorConfig)> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest.json: {e}")))?;
        let dataset = Self {
            bins: meta.bins,
            train: read_dataset(&dir.join("train.satd"))?,
            validation: read_dataset(&dir.join("validation.satd"))?,
        };
        Ok((dataset, meta.generator))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    generator: GeneratorConfig,
    bins: BinSpec,
    manifest: SplitManifest,
}
