//! Trials, the on-disk dataset format, and a synthetic EEG-like generator.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! MATTDATA\n
//! channels=<usize>\n
//! classes=<usize>\n
//! format_version=1\n
//! n_trials=<usize>\n
//! sampling_rate_hz=<f64>\n
//! timepoints=<usize>\n
//! \0
//! f32 samples, trial-major, then channel-major, then time
//! i32 labels, one per trial
//! ```

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{MattError, Result};
use crate::sampling::{gaussian_matrix, seeded_rng};

pub const DATASET_MAGIC: &[u8] = b"MATTDATA\n";
pub const DATASET_VERSION: u32 = 1;

/// Standard deviation of the white noise added to every synthetic source.
const SOURCE_NOISE: f64 = 0.5;

/// One labeled multichannel segment (channels × timepoints).
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub samples: DMatrix<f64>,
    pub label: usize,
}

impl Trial {
    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn timepoints(&self) -> usize {
        self.samples.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub n_trials: usize,
    pub channels: usize,
    pub timepoints: usize,
    pub classes: usize,
    pub sampling_rate_hz: f64,
    pub format_version: u32,
}

impl DatasetHeader {
    pub fn payload_bytes(&self) -> usize {
        self.n_trials * self.channels * self.timepoints * 4
    }

    fn to_text(&self) -> String {
        // Keys in lexicographic order.
        format!(
            "channels={}\nclasses={}\nformat_version={}\nn_trials={}\nsampling_rate_hz={:?}\ntimepoints={}\n",
            self.channels,
            self.classes,
            self.format_version,
            self.n_trials,
            self.sampling_rate_hz,
            self.timepoints
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MattError::Format(format!("malformed header line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| MattError::Format(format!("header is missing {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| MattError::Format(format!("header field {k} is not an integer")))
        };
        let format_version: u32 = get("format_version")?
            .parse()
            .map_err(|_| MattError::Format("header field format_version is not an integer".into()))?;
        if format_version != DATASET_VERSION {
            return Err(MattError::Format(format!(
                "unsupported format version {format_version} (expected {DATASET_VERSION})"
            )));
        }
        let sampling_rate_hz: f64 = get("sampling_rate_hz")?
            .parse()
            .map_err(|_| MattError::Format("header field sampling_rate_hz is not a number".into()))?;
        Ok(Self {
            n_trials: int("n_trials")?,
            channels: int("channels")?,
            timepoints: int("timepoints")?,
            classes: int("classes")?,
            sampling_rate_hz,
            format_version,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn new(trials: Vec<Trial>, classes: usize, sampling_rate_hz: f64) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| MattError::EmptyInput("dataset has no trials".into()))?;
        let (channels, timepoints) = first.samples.shape();
        for (i, t) in trials.iter().enumerate() {
            if t.samples.shape() != (channels, timepoints) {
                return Err(MattError::Shape(format!(
                    "trial {i} is {}x{}, expected {channels}x{timepoints}",
                    t.channels(),
                    t.timepoints()
                )));
            }
            if t.label >= classes {
                return Err(MattError::Content(format!(
                    "trial {i} has label {} but there are {classes} classes",
                    t.label
                )));
            }
            if !t.samples.iter().all(|x| x.is_finite()) {
                return Err(MattError::NonFinite(format!("trial {i}")));
            }
        }
        Ok(Self {
            header: DatasetHeader {
                n_trials: trials.len(),
                channels,
                timepoints,
                classes,
                sampling_rate_hz,
                format_version: DATASET_VERSION,
            },
            trials,
        })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.classes];
        for t in &self.trials {
            counts[t.label] += 1;
        }
        counts
    }

    /// Same header, different subset of trials.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let trials: Vec<Trial> = indices.iter().map(|&i| self.trials[i].clone()).collect();
        Dataset {
            header: DatasetHeader {
                n_trials: trials.len(),
                ..self.header.clone()
            },
            trials,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(64 + h.payload_bytes() + 4 * h.n_trials);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(h.to_text().as_bytes());
        out.push(0);
        for t in &self.trials {
            for c in 0..h.channels {
                for s in 0..h.timepoints {
                    out.extend_from_slice(&(t.samples[(c, s)] as f32).to_le_bytes());
                }
            }
        }
        for t in &self.trials {
            out.extend_from_slice(&(t.label as i32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(DATASET_MAGIC)
            .ok_or_else(|| MattError::Format("bad magic: not a MAtt dataset".into()))?;
        let nul = rest
            .iter()
            .position(|b| *b == 0)
            .ok_or_else(|| MattError::Format("header terminator not found".into()))?;
        let text = std::str::from_utf8(&rest[..nul])
            .map_err(|_| MattError::Format("header is not UTF-8".into()))?;
        let header = DatasetHeader::parse(text)?;
        let body = &rest[nul + 1..];
        let expected = header.payload_bytes() + 4 * header.n_trials;
        if body.len() != expected {
            return Err(MattError::Length {
                expected,
                actual: body.len(),
            });
        }
        let (payload, labels) = body.split_at(header.payload_bytes());
        let per_trial = header.channels * header.timepoints;
        let mut trials = Vec::with_capacity(header.n_trials);
        for i in 0..header.n_trials {
            let chunk = &payload[i * per_trial * 4..(i + 1) * per_trial * 4];
            let samples = DMatrix::from_row_iterator(
                header.channels,
                header.timepoints,
                chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
            );
            let lb = &labels[i * 4..i * 4 + 4];
            let raw = i32::from_le_bytes([lb[0], lb[1], lb[2], lb[3]]);
            if raw < 0 || raw as usize >= header.classes {
                return Err(MattError::Content(format!(
                    "trial {i} has label {raw} outside 0..{}",
                    header.classes
                )));
            }
            if !samples.iter().all(|x| x.is_finite()) {
                return Err(MattError::Content(format!("trial {i} has non-finite samples")));
            }
            trials.push(Trial {
                samples,
                label: raw as usize,
            });
        }
        Ok(Self { header, trials })
    }
}

pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset.to_bytes())?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    Dataset::from_bytes(&bytes)
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub timepoints: usize,
    pub sampling_rate_hz: f64,
    /// Oscillation frequency of each class, Hz.
    pub freqs: Vec<f64>,
    /// Standard deviation of the sensor noise.
    pub noise: f64,
    pub trials_per_class: usize,
    /// Seeds the per-class mixing matrices.
    pub mixing_seed: u64,
    /// Seeds the trial-level randomness (phases and noise).
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            channels: 8,
            timepoints: 256,
            sampling_rate_hz: 128.0,
            freqs: vec![8.0, 13.0, 21.0],
            noise: 0.5,
            trials_per_class: 60,
            mixing_seed: 7,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 || self.channels < 1 || self.timepoints < 2 || self.trials_per_class < 1 {
            return Err(MattError::Config(
                "classes, channels and trials per class must be positive and timepoints >= 2".into(),
            ));
        }
        if self.freqs.len() != self.classes {
            return Err(MattError::Config(format!(
                "{} frequencies for {} classes",
                self.freqs.len(),
                self.classes
            )));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(MattError::Config("sampling rate must be positive".into()));
        }
        let nyquist = self.sampling_rate_hz / 2.0;
        if let Some(f) = self.freqs.iter().find(|f| !(**f > 0.0 && **f < nyquist)) {
            return Err(MattError::Config(format!(
                "frequency {f} Hz is outside (0, {nyquist}) Hz"
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(MattError::Config("noise level must be non-negative".into()));
        }
        Ok(())
    }

    /// Mixing matrix of class `c`, determined by `mixing_seed` alone.
    pub fn mixing_matrix(&self, class: usize) -> DMatrix<f64> {
        let seed = self
            .mixing_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(class as u64 + 1);
        let mut rng = seeded_rng(seed);
        gaussian_matrix(self.channels, self.channels, 1.0 / (self.channels as f64).sqrt(), &mut rng)
    }
}

/// Draw a dataset: per class `c`, `trial = A_c · sources + noise · N(0, 1)`,
/// where each source is a `f_c` sinusoid with random phase plus white noise.
/// Samples are rounded to `f32` so the in-memory dataset equals its file.
pub fn synth(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let phase = Uniform::new(0.0, 2.0 * PI).expect("valid range");
    let (ch, tp) = (spec.channels, spec.timepoints);
    let mut trials = Vec::with_capacity(spec.classes * spec.trials_per_class);
    for class in 0..spec.classes {
        let mixing = spec.mixing_matrix(class);
        let omega = 2.0 * PI * spec.freqs[class] / spec.sampling_rate_hz;
        for _ in 0..spec.trials_per_class {
            let phases: Vec<f64> = (0..ch).map(|_| phase.sample(&mut rng)).collect();
            let sources = DMatrix::from_fn(ch, tp, |r, t| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (omega * t as f64 + phases[r]).sin() + SOURCE_NOISE * z
            });
            let mut samples = &mixing * sources;
            if spec.noise > 0.0 {
                for x in samples.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += spec.noise * z;
                }
            }
            samples.apply(|x| *x = *x as f32 as f64);
            trials.push(Trial { samples, label: class });
        }
    }
    Dataset::new(trials, spec.classes, spec.sampling_rate_hz)
}
