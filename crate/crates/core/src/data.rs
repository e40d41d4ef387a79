//! Input/output datasets, the two-state benchmark generator, CSV files and
//! split helpers.
//!
//! Random numbers come from ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded with
//! `seed_from_u64`. Inputs are drawn from stream 1 and noise from stream 2 of
//! the same seed, so changing the noise level never changes the input
//! realisation. ChaCha output is specified bit-for-bit, which keeps generated
//! datasets identical across platforms.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Paired input/output record, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct IoDataset<S = f64> {
    pub u: Matrix<S>,
    pub y: Matrix<S>,
    pub name: Option<String>,
}

impl<S: Scalar> IoDataset<S> {
    pub fn new(u: Matrix<S>, y: Matrix<S>) -> Result<Self> {
        if u.rows() != y.rows() {
            return Err(Error::contract(format!(
                "input has {} rows but output has {}",
                u.rows(),
                y.rows()
            )));
        }
        if u.cols() == 0 || y.cols() == 0 {
            return Err(Error::contract("datasets need at least one input and one output channel"));
        }
        if !u.all_finite() || !y.all_finite() {
            return Err(Error::contract("dataset contains non-finite values"));
        }
        Ok(Self { u, y, name: None })
    }

    /// Single-input single-output record from two series.
    pub fn siso(u: Vec<S>, y: Vec<S>) -> Result<Self> {
        let n = u.len();
        let m = y.len();
        Self::new(Matrix::from_vec(n, 1, u)?, Matrix::from_vec(m, 1, y)?)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn len(&self) -> usize {
        self.u.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.u.cols()
    }

    pub fn n_y(&self) -> usize {
        self.y.cols()
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        let take = |m: &Matrix<S>| {
            let c = m.cols();
            Matrix::from_vec(
                range.len(),
                c,
                m.as_slice()[range.start * c..range.end * c].to_vec(),
            )
            .expect("in range")
        };
        Self {
            u: take(&self.u),
            y: take(&self.y),
            name: self.name.clone(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> IoDataset<T> {
        let conv = |m: &Matrix<S>| {
            Matrix::from_vec(
                m.rows(),
                m.cols(),
                m.as_slice().iter().map(|v| T::of(v.to_f64_lossless())).collect(),
            )
            .expect("same shape")
        };
        IoDataset {
            u: conv(&self.u),
            y: conv(&self.y),
            name: self.name.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SimVariant {
    #[default]
    Base,
    LinearProcessNoise,
    NonlinearProcessNoise,
}

/// Process-noise direction before scaling.
pub const GAIN_DIRECTION: [f64; 2] = [1.0, -0.9];

/// Divergence threshold on the state magnitude.
pub const STATE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSystemConfig {
    pub variant: SimVariant,
    pub sigma_k: f64,
    pub sigma_e: f64,
    pub input_range: (f64, f64),
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SimSystemConfig {
    fn default() -> Self {
        Self {
            variant: SimVariant::Base,
            sigma_k: 0.0,
            sigma_e: NOISE_STD_20DB,
            input_range: (-2.0, 2.0),
            n_samples: 10_000,
            seed: 0,
        }
    }
}

/// Output noise level giving roughly 20 dB SNR on the benchmark system.
pub const NOISE_STD_20DB: f64 = 0.082;

impl SimSystemConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.input_range;
        if !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!("input range ({a}, {b}) must satisfy a < b")));
        }
        if !(self.sigma_k >= 0.0) || !(self.sigma_e >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// `sigma_k * K0 / |K0|`.
    pub fn gain(&self) -> [f64; 2] {
        let norm = GAIN_DIRECTION[0].hypot(GAIN_DIRECTION[1]);
        [
            self.sigma_k * GAIN_DIRECTION[0] / norm,
            self.sigma_k * GAIN_DIRECTION[1] / norm,
        ]
    }
}

/// One transition of the two-state benchmark system.
pub fn sim_system_step(x: [f64; 2], u: f64, e: f64, variant: SimVariant, gain: [f64; 2]) -> [f64; 2] {
    let mut next = [
        x[0] / (1.2 + x[1] * x[1]) + 0.4 * x[1],
        x[1] / (1.2 + x[0] * x[0]) + 0.4 * x[0] + u,
    ];
    match variant {
        SimVariant::Base => {}
        SimVariant::LinearProcessNoise => {
            next[0] += gain[0] * e;
            next[1] += gain[1] * e;
        }
        SimVariant::NonlinearProcessNoise => {
            next[0] += gain[0] * x[0] * e;
            next[1] += gain[1] * x[1] * e;
        }
    }
    next
}

/// Generated record together with its noise-free output and the noise.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub dataset: IoDataset<f64>,
    /// First state component, i.e. the output before measurement noise.
    pub clean_output: Vec<f64>,
    pub noise: Vec<f64>,
}

impl SimTrace {
    /// `10 log10(var(clean) / var(noise))`; infinite for a noiseless record.
    pub fn snr_db(&self) -> f64 {
        10.0 * (variance(&self.clean_output) / variance(&self.noise)).log10()
    }
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn simulate_sim_system(config: &SimSystemConfig) -> Result<SimTrace> {
    config.validate()?;
    let (a, b) = config.input_range;
    let mut u_rng = ChaCha8Rng::seed_from_u64(config.seed);
    u_rng.set_stream(1);
    let mut e_rng = ChaCha8Rng::seed_from_u64(config.seed);
    e_rng.set_stream(2);
    let u_dist = Uniform::new(a, b).map_err(|e| Error::Config(e.to_string()))?;
    let e_dist = Normal::new(0.0, config.sigma_e).map_err(|e| Error::Config(e.to_string()))?;
    let gain = config.gain();

    let n = config.n_samples;
    let (mut us, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut clean, mut noise) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut x = [0.0, 0.0];
    for k in 0..n {
        let u = u_dist.sample(&mut u_rng);
        let e = if config.sigma_e > 0.0 {
            e_dist.sample(&mut e_rng)
        } else {
            0.0
        };
        us.push(u);
        ys.push(x[0] + e);
        clean.push(x[0]);
        noise.push(e);
        x = sim_system_step(x, u, e, config.variant, gain);
        if !(x[0].abs() <= STATE_LIMIT && x[1].abs() <= STATE_LIMIT) {
            return Err(Error::Instability { step: k });
        }
    }
    Ok(SimTrace {
        dataset: IoDataset::siso(us, ys)?,
        clean_output: clean,
        noise,
    })
}

pub fn generate_sim_system(config: &SimSystemConfig) -> Result<IoDataset<f64>> {
    Ok(simulate_sim_system(config)?.dataset)
}

pub const TRAIN_SAMPLES: usize = 10_000;
pub const VAL_SAMPLES: usize = 3_000;
pub const TEST_SAMPLES: usize = 10_000;

/// SplitMix64 finaliser, used to derive independent split seeds.
pub fn mix_seed(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: IoDataset<f64>,
    pub val: IoDataset<f64>,
    pub test: IoDataset<f64>,
}

/// Train/validation/test records of the simulation study: 10000/3000/10000
/// samples, independent inputs and noise, noiseless test record.
pub fn paper_splits(seed: u64) -> Result<Splits> {
    splits_for(SimVariant::Base, 0.0, seed)
}

/// Same as [`paper_splits`] for a process-noise variant of strength `sigma_k`.
pub fn splits_for(variant: SimVariant, sigma_k: f64, seed: u64) -> Result<Splits> {
    let template = SimSystemConfig {
        variant,
        sigma_k,
        ..SimSystemConfig::default()
    };
    generate_splits(&template, (TRAIN_SAMPLES, VAL_SAMPLES, TEST_SAMPLES), seed)
}

/// Three independent records from `template` (its `n_samples` and `seed`
/// are replaced). Train and validation use the template's noise level, the
/// test record is noiseless.
pub fn generate_splits(template: &SimSystemConfig, sizes: (usize, usize, usize), seed: u64) -> Result<Splits> {
    let make = |k: u64, n: usize, sigma_e: f64, name: &str| -> Result<IoDataset<f64>> {
        let cfg = SimSystemConfig {
            sigma_e,
            n_samples: n,
            seed: mix_seed(seed.wrapping_mul(3).wrapping_add(k)),
            ..template.clone()
        };
        Ok(generate_sim_system(&cfg)?.named(name))
    };
    Ok(Splits {
        train: make(0, sizes.0, template.sigma_e, "train")?,
        val: make(1, sizes.1, template.sigma_e, "val")?,
        test: make(2, sizes.2, 0.0, "test")?,
    })
}

// ---------------------------------------------------------------------------
// CSV

pub fn csv_header(n_u: usize, n_y: usize) -> Vec<String> {
    (1..=n_u)
        .map(|i| format!("u{i}"))
        .chain((1..=n_y).map(|i| format!("y{i}")))
        .collect()
}

/// Writes `u1..u{n_u},y1..y{n_y}` with shortest round-trip formatting.
pub fn save_csv<S: Scalar>(dataset: &IoDataset<S>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", csv_header(dataset.n_u(), dataset.n_y()).join(",")).map_err(io)?;
    for k in 0..dataset.len() {
        let mut first = true;
        for v in dataset.u.row(k).iter().chain(dataset.y.row(k)) {
            if !first {
                w.write_all(b",").map_err(io)?;
            }
            first = false;
            write!(w, "{}", v.to_f64_lossless()).map_err(io)?;
        }
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_csv<S: Scalar>(path: &Path, n_u: usize, n_y: usize) -> Result<IoDataset<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let expected = csv_header(n_u, n_y);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_owned)
        .collect();
    for (i, name) in expected.iter().enumerate() {
        match header.get(i) {
            Some(h) if h == name => {}
            Some(h) => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("column {} is `{h}`, expected `{name}`", i + 1),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("missing column `{name}`"),
                })
            }
        }
    }
    if header.len() > expected.len() {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected column `{}`", header[expected.len()]),
        });
    }

    let (mut u, mut y) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (i, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{cell}` in column `{}` is not a number", expected[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value in column `{}`", expected[i]),
                });
            }
            if i < n_u {
                u.push(S::of(v));
            } else {
                y.push(S::of(v));
            }
        }
    }
    let n = u.len() / n_u.max(1);
    let ds = IoDataset::new(Matrix::from_vec(n, n_u, u)?, Matrix::from_vec(n, n_y, y)?)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    Ok(IoDataset { name, ..ds })
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("row has {len} fields, expected {expected_len}"),
        _ => e.to_string(),
    };
    Error::Parse { line, message }
}

// ---------------------------------------------------------------------------
// Splits

/// Contiguous train/validation/test blocks taken in order from the start.
pub fn slice_splits<S: Scalar>(
    dataset: &IoDataset<S>,
    train_len: usize,
    val_len: usize,
    test_len: usize,
) -> Result<(IoDataset<S>, IoDataset<S>, IoDataset<S>)> {
    let total = train_len + val_len + test_len;
    let n = dataset.len();
    if total > n {
        return Err(Error::contract(format!(
            "split lengths sum to {total} but the record has {n} samples"
        )));
    }
    if total < n {
        log::warn!("dropping {} trailing samples after the test split", n - total);
    }
    let a = train_len;
    let b = a + val_len;
    Ok((
        dataset.slice(0..a).named("train"),
        dataset.slice(a..b).named("val"),
        dataset.slice(b..total).named("test"),
    ))
}

/// Split sizes used for the 188000-sample Wiener-Hammerstein record.
pub const WIENER_HAMMERSTEIN_SPLITS: (usize, usize, usize) = (80_000, 20_000, 78_000);
