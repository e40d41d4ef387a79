//! The subspace-encoder state-space model.
//!
//! An encoder maps a window of past inputs and outputs to the state
//! estimate at time `t`; the transition and output networks then roll the
//! state forward:
//!
//! ```text
//! x(t|t)    = encoder(u[t-n_b..t-1], y[t-n_a..t])
//! y_hat     = h(x)
//! e_hat     = y - y_hat
//! x_next    = f(x, u)               output error
//!           = f(x, u) + K e_hat     linear innovation
//!           = f(x, u, e_hat)        general innovation
//! ```
//!
//! Everything inside the model works on normalised signals; [`simulate`]
//! and [`kstep_predictions`] take and return data in original units.
//!
//! [`simulate`]: SubnetModel::simulate
//! [`kstep_predictions`]: SubnetModel::kstep_predictions

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamRef, Tape, Var};
use crate::data::IoDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nets::{Activation, Mlp, MlpParams, MlpSpec, MlpVars};
use crate::scalar::Scalar;

pub const BLOCK_ENCODER: usize = 0;
pub const BLOCK_TRANSITION: usize = 1;
pub const BLOCK_OUTPUT: usize = 2;
pub const BLOCK_GAIN: usize = 3;
/// Trainable initial states of the parameter-init baselines.
pub const BLOCK_STATES: usize = 4;
pub const BLOCK_COUNT: usize = 5;

pub fn block_name(block: usize) -> &'static str {
    match block {
        BLOCK_ENCODER => "encoder",
        BLOCK_TRANSITION => "transition",
        BLOCK_OUTPUT => "output",
        BLOCK_GAIN => "innovation gain",
        BLOCK_STATES => "initial states",
        _ => "unknown",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseStructure {
    #[default]
    OutputError,
    LinearInnovation,
    GeneralInnovation,
}

/// How the state of a section (or a simulation) is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StateInit {
    #[default]
    Encoder,
    /// No encoder. Simulations start from the zero state at the first
    /// sample; the first `max(n_a, n_b)` outputs are treated as burn-in.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShape {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub bypass: bool,
}

impl Default for NetShape {
    fn default() -> Self {
        let s = MlpSpec::standard(1, 1);
        Self {
            hidden_layers: s.hidden_layers,
            hidden_width: s.hidden_width,
            activation: s.activation,
            bypass: s.bypass,
        }
    }
}

impl NetShape {
    pub fn spec(&self, input_dim: usize, output_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            output_dim,
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            activation: self.activation,
            bypass: self.bypass,
        }
    }
}

/// Structural hyperparameters; channel counts come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_x: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub noise: NoiseStructure,
    pub state_init: StateInit,
    pub encoder_net: NetShape,
    pub transition_net: NetShape,
    pub output_net: NetShape,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_x: 4,
            n_a: 10,
            n_b: 10,
            noise: NoiseStructure::OutputError,
            state_init: StateInit::Encoder,
            encoder_net: NetShape::default(),
            transition_net: NetShape::default(),
            output_net: NetShape::default(),
        }
    }
}

impl ModelConfig {
    pub fn lag(&self) -> usize {
        self.n_a.max(self.n_b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 {
            return Err(Error::Config("n_x must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn encoder_input_dim(n_u: usize, n_y: usize, n_a: usize, n_b: usize) -> usize {
    n_b * n_u + (n_a + 1) * n_y
}

/// Per-channel affine scaling of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Channels with a smaller standard deviation are rejected as constant.
pub const MIN_CHANNEL_STD: f64 = 1e-12;

impl Normalization {
    pub fn identity(n_u: usize, n_y: usize) -> Self {
        Self {
            u_mean: vec![0.0; n_u],
            u_std: vec![1.0; n_u],
            y_mean: vec![0.0; n_y],
            y_std: vec![1.0; n_y],
        }
    }

    /// Mean and population standard deviation of every channel.
    pub fn fit<S: Scalar>(data: &IoDataset<S>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("cannot fit normalisation on an empty record"));
        }
        let stats = |m: &Matrix<S>, signal: &'static str| -> Result<(Vec<f64>, Vec<f64>)> {
            let n = m.rows() as f64;
            let mut means = Vec::with_capacity(m.cols());
            let mut stds = Vec::with_capacity(m.cols());
            for c in 0..m.cols() {
                let col = (0..m.rows()).map(|r| m[(r, c)].to_f64_lossless());
                let mean = col.clone().sum::<f64>() / n;
                let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                if !(std >= MIN_CHANNEL_STD) {
                    return Err(Error::DegenerateChannel {
                        signal,
                        channel: c,
                        std,
                    });
                }
                means.push(mean);
                stds.push(std);
            }
            Ok((means, stds))
        };
        let (u_mean, u_std) = stats(&data.u, "u")?;
        let (y_mean, y_std) = stats(&data.y, "y")?;
        Ok(Self {
            u_mean,
            u_std,
            y_mean,
            y_std,
        })
    }

    pub fn n_u(&self) -> usize {
        self.u_mean.len()
    }

    pub fn n_y(&self) -> usize {
        self.y_mean.len()
    }

    fn apply<S: Scalar>(m: &Matrix<S>, mean: &[f64], std: &[f64], forward: bool) -> Matrix<S> {
        let mut out = m.clone();
        let c = m.cols();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let x = v.to_f64_lossless();
            let j = i % c;
            *v = S::of(if forward {
                (x - mean[j]) / std[j]
            } else {
                x * std[j] + mean[j]
            });
        }
        out
    }

    pub fn normalize_u<S: Scalar>(&self, u: &Matrix<S>) -> Matrix<S> {
        Self::apply(u, &self.u_mean, &self.u_std, true)
    }

    pub fn normalize_y<S: Scalar>(&self, y: &Matrix<S>) -> Matrix<S> {
        Self::apply(y, &self.y_mean, &self.y_std, true)
    }

    pub fn denormalize_y<S: Scalar>(&self, y: &Matrix<S>) -> Matrix<S> {
        Self::apply(y, &self.y_mean, &self.y_std, false)
    }

    pub fn normalize<S: Scalar>(&self, data: &IoDataset<S>) -> IoDataset<S> {
        IoDataset {
            u: self.normalize_u(&data.u),
            y: self.normalize_y(&data.y),
            name: data.name.clone(),
        }
    }
}

/// One training section: encoder window plus the rolled-out samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<S> {
    /// 0-based index of the first rolled-out sample.
    pub start: usize,
    /// `n_b x n_u`, oldest first.
    pub u_past: Matrix<S>,
    /// `(n_a + 1) x n_y`, oldest first, ending at `start`.
    pub y_past: Matrix<S>,
    /// `T x n_u`.
    pub u: Matrix<S>,
    /// `T x n_y`.
    pub y: Matrix<S>,
}

fn rows<S: Scalar>(m: &Matrix<S>, start: usize, len: usize) -> Matrix<S> {
    let c = m.cols();
    Matrix::from_vec(len, c, m.as_slice()[start * c..(start + len) * c].to_vec()).expect("in range")
}

impl<S: Scalar> Window<S> {
    /// Cuts the section starting at 0-based sample `start` out of a
    /// (normalised) record.
    pub fn from_dataset(data: &IoDataset<S>, start: usize, horizon: usize, n_a: usize, n_b: usize) -> Result<Self> {
        if start < n_a.max(n_b) || start + horizon > data.len() || horizon == 0 {
            return Err(Error::contract(format!(
                "section at {start} with horizon {horizon} does not fit a record of {} samples (lags {n_a}/{n_b})",
                data.len()
            )));
        }
        Ok(Self {
            start,
            u_past: rows(&data.u, start - n_b, n_b),
            y_past: rows(&data.y, start - n_a, n_a + 1),
            u: rows(&data.u, start, horizon),
            y: rows(&data.y, start, horizon),
        })
    }

    pub fn horizon(&self) -> usize {
        self.u.rows()
    }
}

/// Result of a batched rollout; entry `k` of each list is a `B x _` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<S> {
    pub y_hat: Vec<Matrix<S>>,
    /// State used to produce `y_hat[k]`.
    pub states: Vec<Matrix<S>>,
    /// `y - y_hat`; zero in free-run mode.
    pub innovations: Vec<Matrix<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulationMode {
    /// Innovations set to zero; measured outputs only enter through the
    /// encoder window.
    FreeRun,
    /// Innovations computed from the measured outputs at every step.
    TeacherForced,
}

/// Simulated outputs in original units. Rows before `skip` were consumed
/// by the encoder (or the burn-in) and are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation<S> {
    pub y_hat: Matrix<S>,
    pub skip: usize,
}

/// `y_hat(t+k | t)` for every start `t` and `k = 0..=k_max`, original units.
#[derive(Debug, Clone, PartialEq)]
pub struct KStepPredictions<S> {
    pub starts: Vec<usize>,
    pub k_max: usize,
    pub n_y: usize,
    /// Row-major `[start][k][channel]`.
    pub values: Vec<S>,
}

impl<S: Scalar> KStepPredictions<S> {
    pub fn get(&self, start_idx: usize, k: usize) -> &[S] {
        let o = (start_idx * (self.k_max + 1) + k) * self.n_y;
        &self.values[o..o + self.n_y]
    }

    /// Writes `t,k,y_hat,y_measured` (suffixed per channel when `n_y > 1`),
    /// where `t` is the 0-based start and the prediction targets `t + k`.
    pub fn write_csv(&self, measured: &IoDataset<S>, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let mut header = vec!["t".to_string(), "k".to_string()];
        if self.n_y == 1 {
            header.extend(["y_hat".to_string(), "y_measured".to_string()]);
        } else {
            header.extend((1..=self.n_y).map(|c| format!("y_hat{c}")));
            header.extend((1..=self.n_y).map(|c| format!("y_measured{c}")));
        }
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for (i, &t) in self.starts.iter().enumerate() {
            for k in 0..=self.k_max {
                write!(w, "{t},{k}").map_err(io)?;
                for v in self.get(i, k) {
                    write!(w, ",{}", v.to_f64_lossless()).map_err(io)?;
                }
                for v in measured.y.row(t + k) {
                    write!(w, ",{}", v.to_f64_lossless()).map_err(io)?;
                }
                w.write_all(b"\n").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

/// Tape handles of all model parameters.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: Option<MlpVars>,
    pub transition: MlpVars,
    pub output: MlpVars,
    pub gain: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubnetModel<S> {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub noise: NoiseStructure,
    /// `None` for models whose sections start from trainable states.
    pub encoder: Option<Mlp<S>>,
    pub transition: Mlp<S>,
    pub output: Mlp<S>,
    /// `n_x x n_y`, present iff the noise structure is linear innovation.
    pub gain: Option<Matrix<S>>,
    pub normalization: Normalization,
}

impl<S: Scalar> SubnetModel<S> {
    /// Xavier-initialised model. The innovation gain starts at zero.
    pub fn init(config: &ModelConfig, normalization: Normalization, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n_u, n_y, n_x) = (normalization.n_u(), normalization.n_y(), config.n_x);
        if n_u == 0 || n_y == 0 {
            return Err(Error::contract("normalisation has no channels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_spec = config
            .encoder_net
            .spec(encoder_input_dim(n_u, n_y, config.n_a, config.n_b), n_x);
        let encoder = match config.state_init {
            StateInit::Encoder => Some(Mlp::xavier(enc_spec, &mut rng)?),
            StateInit::Zero => None,
        };
        let f_in = transition_input_dim(n_x, n_u, n_y, config.noise);
        let transition = Mlp::xavier(config.transition_net.spec(f_in, n_x), &mut rng)?;
        let output = Mlp::xavier(config.output_net.spec(n_x, n_y), &mut rng)?;
        let gain = (config.noise == NoiseStructure::LinearInnovation).then(|| Matrix::zeros(n_x, n_y));
        Ok(Self {
            n_x,
            n_u,
            n_y,
            n_a: config.n_a,
            n_b: config.n_b,
            noise: config.noise,
            encoder,
            transition,
            output,
            gain,
            normalization,
        })
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.n_x == 0 || self.n_u == 0 || self.n_y == 0 {
            return fail("dimensions must be positive".into());
        }
        if let Some(enc) = &self.encoder {
            let want = (encoder_input_dim(self.n_u, self.n_y, self.n_a, self.n_b), self.n_x);
            if (enc.spec.input_dim, enc.spec.output_dim) != want {
                return fail(format!("encoder dims {:?}, expected {want:?}", (enc.spec.input_dim, enc.spec.output_dim)));
            }
        }
        let want = (transition_input_dim(self.n_x, self.n_u, self.n_y, self.noise), self.n_x);
        let got = (self.transition.spec.input_dim, self.transition.spec.output_dim);
        if got != want {
            return fail(format!("transition dims {got:?}, expected {want:?}"));
        }
        let got = (self.output.spec.input_dim, self.output.spec.output_dim);
        if got != (self.n_x, self.n_y) {
            return fail(format!("output map dims {got:?}, expected {:?}", (self.n_x, self.n_y)));
        }
        match (&self.gain, self.noise) {
            (Some(k), NoiseStructure::LinearInnovation) if k.shape() == (self.n_x, self.n_y) => {}
            (None, NoiseStructure::OutputError | NoiseStructure::GeneralInnovation) => {}
            _ => return fail("innovation gain must be n_x x n_y and present only for linear innovation".into()),
        }
        let nm = &self.normalization;
        if nm.n_u() != self.n_u || nm.n_y() != self.n_y || nm.u_std.len() != self.n_u || nm.y_std.len() != self.n_y {
            return fail("normalisation channel counts do not match the model".into());
        }
        if nm.u_std.iter().chain(&nm.y_std).any(|&s| !(s > 0.0)) {
            return fail("normalisation standard deviations must be positive".into());
        }
        Ok(())
    }

    /// `max(n_a, n_b)`: samples consumed before the first prediction.
    pub fn lag(&self) -> usize {
        self.n_a.max(self.n_b)
    }

    pub fn state_init(&self) -> StateInit {
        if self.encoder.is_some() {
            StateInit::Encoder
        } else {
            StateInit::Zero
        }
    }

    pub fn encoder_input_dim(&self) -> usize {
        encoder_input_dim(self.n_u, self.n_y, self.n_a, self.n_b)
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Parameter blocks with their ids.
    pub fn param_blocks(&self) -> Vec<(usize, &[S])> {
        let mut out = Vec::with_capacity(4);
        if let Some(e) = &self.encoder {
            out.push((BLOCK_ENCODER, e.values()));
        }
        out.push((BLOCK_TRANSITION, self.transition.values()));
        out.push((BLOCK_OUTPUT, self.output.values()));
        if let Some(k) = &self.gain {
            out.push((BLOCK_GAIN, k.as_slice()));
        }
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<(usize, &mut [S])> {
        let mut out = Vec::with_capacity(4);
        if let Some(e) = &mut self.encoder {
            out.push((BLOCK_ENCODER, e.values_mut()));
        }
        out.push((BLOCK_TRANSITION, self.transition.values_mut()));
        out.push((BLOCK_OUTPUT, self.output.values_mut()));
        if let Some(k) = &mut self.gain {
            out.push((BLOCK_GAIN, k.as_mut_slice()));
        }
        out
    }

    fn require_encoder(&self) -> Result<&Mlp<S>> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::contract("model has no encoder (trainable-state initialisation)"))
    }

    /// State estimate from normalised windows: `u_window` is `n_b x n_u`,
    /// `y_window` is `(n_a + 1) x n_y`, both oldest first.
    pub fn encode(&self, u_window: &Matrix<S>, y_window: &Matrix<S>) -> Result<Vec<S>> {
        let enc = self.require_encoder()?;
        if u_window.shape() != (self.n_b, self.n_u) || y_window.shape() != (self.n_a + 1, self.n_y) {
            return Err(Error::contract(format!(
                "encoder windows are {:?} and {:?}, expected {:?} and {:?}",
                u_window.shape(),
                y_window.shape(),
                (self.n_b, self.n_u),
                (self.n_a + 1, self.n_y)
            )));
        }
        let mut input = u_window.as_slice().to_vec();
        input.extend_from_slice(y_window.as_slice());
        enc.forward(&input)
    }

    /// Encoder inputs for sections starting at each of `starts`
    /// (0-based, normalised record), one row per start.
    pub fn encoder_inputs(&self, data: &IoDataset<S>, starts: &[usize]) -> Result<Matrix<S>> {
        let dim = self.encoder_input_dim();
        let (nu, ny) = (self.n_u, self.n_y);
        let mut out = Vec::with_capacity(starts.len() * dim);
        for &t in starts {
            if t < self.lag() || t >= data.len() {
                return Err(Error::contract(format!("no encoder window at sample {t}")));
            }
            out.extend_from_slice(&data.u.as_slice()[(t - self.n_b) * nu..t * nu]);
            out.extend_from_slice(&data.y.as_slice()[(t - self.n_a) * ny..(t + 1) * ny]);
        }
        Matrix::from_vec(starts.len(), dim, out)
    }

    /// One-step innovation handling shared by the plain rollout paths.
    fn transition_batch(&self, x: &Matrix<S>, u: &Matrix<S>, e: &Matrix<S>) -> Result<Matrix<S>> {
        match self.noise {
            NoiseStructure::OutputError => self.transition.forward_batch(&hcat(&[x, u])),
            NoiseStructure::LinearInnovation => {
                let mut next = self.transition.forward_batch(&hcat(&[x, u]))?;
                let k = self.gain.as_ref().expect("validated");
                next.add_inplace(&e.matmul_nt(k));
                Ok(next)
            }
            NoiseStructure::GeneralInnovation => self.transition.forward_batch(&hcat(&[x, u, e])),
        }
    }

    /// Rolls `B` sections forward from `x0` (`B x n_x`) over
    /// `u.len()` steps. With `y` the innovations use the measured outputs,
    /// without it they are zero.
    pub fn rollout_batch(&self, x0: Matrix<S>, u: &[Matrix<S>], y: Option<&[Matrix<S>]>) -> Result<Rollout<S>> {
        let b = x0.rows();
        if x0.cols() != self.n_x {
            return Err(Error::contract(format!("initial state has {} columns, expected {}", x0.cols(), self.n_x)));
        }
        if let Some(y) = y {
            if y.len() != u.len() {
                return Err(Error::contract("input and output sequences differ in length"));
            }
        }
        let steps = u.len();
        let mut out = Rollout {
            y_hat: Vec::with_capacity(steps),
            states: Vec::with_capacity(steps),
            innovations: Vec::with_capacity(steps),
        };
        let mut x = x0;
        for k in 0..steps {
            if u[k].shape() != (b, self.n_u) {
                return Err(Error::contract(format!("input at step {k} has shape {:?}", u[k].shape())));
            }
            let y_hat = self.output.forward_batch(&x)?;
            if !y_hat.all_finite() {
                return Err(Error::divergence("rollout", k));
            }
            let e = match y {
                Some(y) => {
                    let mut e = y[k].clone();
                    for (d, &p) in e.as_mut_slice().iter_mut().zip(y_hat.as_slice()) {
                        *d -= p;
                    }
                    e
                }
                None => Matrix::zeros(b, self.n_y),
            };
            let next = if k + 1 < steps {
                let n = self.transition_batch(&x, &u[k], &e)?;
                if !n.all_finite() {
                    return Err(Error::divergence("rollout", k));
                }
                Some(n)
            } else {
                None
            };
            out.y_hat.push(y_hat);
            out.innovations.push(e);
            out.states.push(std::mem::replace(&mut x, next.unwrap_or_else(|| Matrix::zeros(0, 0))));
        }
        Ok(out)
    }

    /// Encodes the window and rolls out its `T` steps with innovations from
    /// the measured outputs.
    pub fn rollout(&self, window: &Window<S>) -> Result<Rollout<S>> {
        let x0 = self.encode(&window.u_past, &window.y_past)?;
        let x0 = Matrix::from_vec(1, self.n_x, x0)?;
        let t = window.horizon();
        let u: Vec<_> = (0..t).map(|k| rows(&window.u, k, 1)).collect();
        let y: Vec<_> = (0..t).map(|k| rows(&window.y, k, 1)).collect();
        self.rollout_batch(x0, &u, Some(&y))
    }

    /// Simulates a record given in original units.
    pub fn simulate(&self, data: &IoDataset<S>, mode: SimulationMode) -> Result<Simulation<S>> {
        self.check_channels(data)?;
        let n = self.lag();
        if data.len() <= n {
            return Err(Error::contract(format!(
                "record of {} samples is too short for lag {n}",
                data.len()
            )));
        }
        let norm = self.normalization.normalize(data);
        let (first, x0) = match &self.encoder {
            Some(enc) => (n, enc.forward_batch(&self.encoder_inputs(&norm, &[n])?)?),
            None => (0, Matrix::zeros(1, self.n_x)),
        };
        let len = data.len() - first;
        let u: Vec<_> = (first..data.len()).map(|t| rows(&norm.u, t, 1)).collect();
        let y: Vec<_>;
        let y_ref = match mode {
            SimulationMode::FreeRun => None,
            SimulationMode::TeacherForced => {
                y = (first..data.len()).map(|t| rows(&norm.y, t, 1)).collect();
                Some(y.as_slice())
            }
        };
        let r = self.rollout_batch(x0, &u, y_ref)?;
        let mut y_hat = Matrix::zeros(data.len(), self.n_y);
        for k in 0..len {
            let t = first + k;
            if t >= n {
                y_hat.row_mut(t).copy_from_slice(r.y_hat[k].row(0));
            }
        }
        let mut out = self.normalization.denormalize_y(&y_hat);
        for t in 0..n {
            out.row_mut(t).fill(S::zero());
        }
        Ok(Simulation { y_hat: out, skip: n })
    }

    /// Teacher-forced `k`-step predictions from every start
    /// `t in [n, N - 1 - k_max]`.
    pub fn kstep_predictions(&self, data: &IoDataset<S>, k_max: usize) -> Result<KStepPredictions<S>> {
        self.check_channels(data)?;
        let enc = self.require_encoder()?;
        let n = self.lag();
        if data.len() < n + k_max + 1 {
            return Err(Error::contract(format!(
                "record of {} samples is too short for lag {n} and k_max {k_max}",
                data.len()
            )));
        }
        let norm = self.normalization.normalize(data);
        let starts: Vec<usize> = (n..data.len() - k_max).collect();
        let mut values = Vec::with_capacity(starts.len() * (k_max + 1) * self.n_y);
        const CHUNK: usize = 1024;
        for chunk in starts.chunks(CHUNK) {
            let x0 = enc.forward_batch(&self.encoder_inputs(&norm, chunk)?)?;
            let gather = |m: &Matrix<S>, k: usize| {
                let c = m.cols();
                let mut v = Vec::with_capacity(chunk.len() * c);
                for &t in chunk {
                    v.extend_from_slice(m.row(t + k));
                }
                Matrix::from_vec(chunk.len(), c, v).expect("shape")
            };
            let u: Vec<_> = (0..=k_max).map(|k| gather(&norm.u, k)).collect();
            let y: Vec<_> = (0..=k_max).map(|k| gather(&norm.y, k)).collect();
            let r = self.rollout_batch(x0, &u, Some(&y))?;
            let r: Vec<_> = r.y_hat.iter().map(|m| self.normalization.denormalize_y(m)).collect();
            for i in 0..chunk.len() {
                for m in &r {
                    values.extend_from_slice(m.row(i));
                }
            }
        }
        Ok(KStepPredictions {
            starts,
            k_max,
            n_y: self.n_y,
            values,
        })
    }

    pub fn check_channels(&self, data: &IoDataset<S>) -> Result<()> {
        if data.n_u() != self.n_u || data.n_y() != self.n_y {
            return Err(Error::contract(format!(
                "model expects {} inputs and {} outputs, record has {} and {}",
                self.n_u,
                self.n_y,
                data.n_u(),
                data.n_y()
            )));
        }
        Ok(())
    }

    // -- differentiable path ------------------------------------------------

    pub fn register(&self, tape: &mut Tape<S>) -> Result<ModelVars> {
        let encoder = match &self.encoder {
            Some(e) => Some(e.register(tape, BLOCK_ENCODER)?),
            None => None,
        };
        let transition = self.transition.register(tape, BLOCK_TRANSITION)?;
        let output = self.output.register(tape, BLOCK_OUTPUT)?;
        let gain = match &self.gain {
            Some(k) => Some(tape.param(
                ParamRef {
                    block: BLOCK_GAIN,
                    offset: 0,
                    rows: self.n_x,
                    cols: self.n_y,
                },
                k.as_slice(),
            )?),
            None => None,
        };
        Ok(ModelVars {
            encoder,
            transition,
            output,
            gain,
        })
    }

    pub fn encode_tape(&self, tape: &mut Tape<S>, vars: &ModelVars, input: Var) -> Result<Var> {
        let enc = self.require_encoder()?;
        let ev = vars.encoder.as_ref().ok_or_else(|| Error::contract("encoder not registered"))?;
        enc.forward_tape(tape, ev, input)
    }

    /// Differentiable teacher-forced rollout; returns `y_hat` per step.
    /// `starts` labels the rows for divergence diagnostics.
    pub fn rollout_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        x0: Var,
        u: &[Var],
        y: &[Var],
        starts: &[usize],
    ) -> Result<Vec<Var>> {
        let mut x = x0;
        let mut out = Vec::with_capacity(u.len());
        for k in 0..u.len() {
            let y_hat = self.output.forward_tape(tape, &vars.output, x)?;
            if let Some(row) = first_bad_row(tape.value(y_hat)) {
                let at = starts.get(row).map_or(String::from("rollout"), |s| format!("section starting at sample {s}"));
                return Err(Error::divergence(at, k));
            }
            out.push(y_hat);
            if k + 1 == u.len() {
                break;
            }
            x = match self.noise {
                NoiseStructure::OutputError => {
                    let xu = tape.concat(&[x, u[k]])?;
                    self.transition.forward_tape(tape, &vars.transition, xu)?
                }
                NoiseStructure::LinearInnovation => {
                    let e = tape.sub(y[k], y_hat)?;
                    let xu = tape.concat(&[x, u[k]])?;
                    let f = self.transition.forward_tape(tape, &vars.transition, xu)?;
                    let ke = tape.affine(e, vars.gain.expect("registered"), None)?;
                    tape.add(f, ke)?
                }
                NoiseStructure::GeneralInnovation => {
                    let e = tape.sub(y[k], y_hat)?;
                    let xue = tape.concat(&[x, u[k], e])?;
                    self.transition.forward_tape(tape, &vars.transition, xue)?
                }
            };
        }
        Ok(out)
    }
}

pub fn transition_input_dim(n_x: usize, n_u: usize, n_y: usize, noise: NoiseStructure) -> usize {
    match noise {
        NoiseStructure::GeneralInnovation => n_x + n_u + n_y,
        _ => n_x + n_u,
    }
}

fn first_bad_row<S: Scalar>(m: &Matrix<S>) -> Option<usize> {
    (0..m.rows()).find(|&r| m.row(r).iter().any(|v| !v.is_finite()))
}

/// Column-wise concatenation of matrices with equal row counts.
pub(crate) fn hcat<S: Scalar>(parts: &[&Matrix<S>]) -> Matrix<S> {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Matrix::from_vec(rows, cols, out).expect("shape")
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: magic `SUBNETCK`, version byte, u32 LE metadata length, JSON
// metadata, u64 LE value count, then that many f64 LE values: encoder,
// transition and output parameters, gain, and the normalisation vectors
// (u mean, u std, y mean, y std).

const MAGIC: &[u8; 8] = b"SUBNETCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    scalar: String,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    n_a: usize,
    n_b: usize,
    noise: NoiseStructure,
    encoder: Option<MlpSpec>,
    transition: MlpSpec,
    output: MlpSpec,
}

pub fn save_model<S: Scalar>(model: &SubnetModel<S>, path: &Path) -> Result<()> {
    model.validate()?;
    let meta = CheckpointMeta {
        scalar: S::NAME.to_string(),
        n_x: model.n_x,
        n_u: model.n_u,
        n_y: model.n_y,
        n_a: model.n_a,
        n_b: model.n_b,
        noise: model.noise,
        encoder: model.encoder.as_ref().map(|e| e.spec),
        transition: model.transition.spec,
        output: model.output.spec,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut payload: Vec<f64> = Vec::with_capacity(model.param_count() + 2 * (model.n_u + model.n_y));
    for (_, b) in model.param_blocks() {
        payload.extend(b.iter().map(|v| v.to_f64_lossless()));
    }
    let nm = &model.normalization;
    for v in [&nm.u_mean, &nm.u_std, &nm.y_mean, &nm.y_std] {
        payload.extend_from_slice(v);
    }

    let mut bytes = Vec::with_capacity(8 + 1 + 4 + json.len() + 8 + 8 * payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.push(CHECKPOINT_VERSION);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<SubnetModel<S>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

fn decode_model<S: Scalar>(bytes: &[u8]) -> Result<SubnetModel<S>> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    let mut cur = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(corrupt(&format!("truncated {what}")));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8, "magic")? != MAGIC {
        return Err(corrupt("not a model checkpoint"));
    }
    let version = take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = u32::from_le_bytes(take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(take(meta_len, "metadata")?).map_err(|e| corrupt(&format!("metadata: {e}")))?;
    let count = u64::from_le_bytes(take(8, "payload length")?.try_into().expect("8 bytes")) as usize;
    let raw = take(count.checked_mul(8).ok_or_else(|| corrupt("payload length"))?, "payload")?;
    if !cur.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut next = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() != n {
            return Err(corrupt("payload shorter than the metadata requires"));
        }
        Ok(v)
    };
    let cast = |v: Vec<f64>| -> Vec<S> { v.into_iter().map(S::of).collect() };
    let mlp = |spec: MlpSpec, v: Vec<f64>| Mlp::new(spec, MlpParams { values: cast(v) });
    let encoder = match meta.encoder {
        Some(spec) => Some(mlp(spec, next(spec.param_count())?)?),
        None => None,
    };
    let transition = mlp(meta.transition, next(meta.transition.param_count())?)?;
    let output = mlp(meta.output, next(meta.output.param_count())?)?;
    let gain = match meta.noise {
        NoiseStructure::LinearInnovation => Some(Matrix::from_vec(meta.n_x, meta.n_y, cast(next(meta.n_x * meta.n_y)?))?),
        _ => None,
    };
    let normalization = Normalization {
        u_mean: next(meta.n_u)?,
        u_std: next(meta.n_u)?,
        y_mean: next(meta.n_y)?,
        y_std: next(meta.n_y)?,
    };
    if values.next().is_some() {
        return Err(corrupt("payload longer than the metadata requires"));
    }
    let model = SubnetModel {
        n_x: meta.n_x,
        n_u: meta.n_u,
        n_y: meta.n_y,
        n_a: meta.n_a,
        n_b: meta.n_b,
        noise: meta.noise,
        encoder,
        transition,
        output,
        gain,
        normalization,
    };
    model.validate().map_err(|e| corrupt(&e.to_string()))?;
    Ok(model)
}
