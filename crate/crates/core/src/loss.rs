//! Truncated prediction losses over length-`T` sections of a record.
//!
//! A section starting at sample `t` is initialised by the encoder (or by a
//! trainable state) and rolled out for `T` steps. Its loss is
//! `v_t = (1/T) sum_k |y(t+k) - y_hat(t+k|t)|^2`, and a batch loss is the
//! mean of `v_t` over the batch. All functions here expect normalised data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamRef, Tape, Var};
use crate::data::{mix_seed, IoDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{SubnetModel, BLOCK_COUNT, BLOCK_STATES};
use crate::scalar::Scalar;

/// Section starts on a grid of spacing `d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    /// 0-based sample index of the first rolled-out sample of each section.
    pub starts: Vec<usize>,
    pub horizon: usize,
    pub lag: usize,
    pub spacing: usize,
}

impl IndexSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Starts counted from 1, i.e. a subset of `{n+1, ..., N-T+1}`.
    pub fn one_based(&self) -> Vec<usize> {
        self.starts.iter().map(|t| t + 1).collect()
    }
}

/// Every `d`-th section start with a full encoder window and a full
/// horizon: `t = n, n + d, ...` with `t + T <= N` and `n = max(n_a, n_b)`.
pub fn valid_starts(n_samples: usize, horizon: usize, n_a: usize, n_b: usize, spacing: usize) -> Result<IndexSet> {
    if horizon == 0 || spacing == 0 {
        return Err(Error::Config("truncation length and spacing must be at least 1".into()));
    }
    let lag = n_a.max(n_b);
    if n_samples < horizon + lag {
        return Err(Error::EmptyIndexSet {
            samples: n_samples,
            truncation: horizon,
            lag,
        });
    }
    let starts = (lag..=n_samples - horizon).step_by(spacing).collect();
    Ok(IndexSet {
        starts,
        horizon,
        lag,
        spacing,
    })
}

/// Seeded shuffling of an index set into batches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    starts: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(index: &IndexSet, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            starts: index.starts.clone(),
            batch_size,
            seed,
        })
    }

    /// A permutation of all starts for `epoch`, cut into batches of at most
    /// `batch_size` (the last one may be shorter).
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed ^ mix_seed(epoch)));
        let mut order = self.starts.clone();
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.starts.len().div_ceil(self.batch_size)
    }
}

/// Section data gathered from a record, one row per section.
#[derive(Debug, Clone)]
pub struct SectionBatch<S> {
    pub starts: Vec<usize>,
    /// Encoder inputs, `B x encoder_input_dim`; empty without an encoder.
    pub encoder_input: Option<Matrix<S>>,
    pub u: Vec<Matrix<S>>,
    pub y: Vec<Matrix<S>>,
}

impl<S: Scalar> SectionBatch<S> {
    pub fn gather(model: &SubnetModel<S>, data: &IoDataset<S>, starts: &[usize], horizon: usize) -> Result<Self> {
        if let Some(&t) = starts.iter().find(|&&t| t + horizon > data.len()) {
            return Err(Error::contract(format!(
                "section at {t} with horizon {horizon} exceeds {} samples",
                data.len()
            )));
        }
        let encoder_input = match model.encoder {
            Some(_) => Some(model.encoder_inputs(data, starts)?),
            None => None,
        };
        let step = |m: &Matrix<S>, k: usize| {
            let c = m.cols();
            let mut v = Vec::with_capacity(starts.len() * c);
            for &t in starts {
                v.extend_from_slice(m.row(t + k));
            }
            Matrix::from_vec(starts.len(), c, v).expect("shape")
        };
        Ok(Self {
            starts: starts.to_vec(),
            encoder_input,
            u: (0..horizon).map(|k| step(&data.u, k)).collect(),
            y: (0..horizon).map(|k| step(&data.y, k)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    fn rows(&self, range: std::ops::Range<usize>) -> Self {
        let cut = |m: &Matrix<S>| {
            let c = m.cols();
            Matrix::from_vec(range.len(), c, m.as_slice()[range.start * c..range.end * c].to_vec()).expect("shape")
        };
        Self {
            starts: self.starts[range.clone()].to_vec(),
            encoder_input: self.encoder_input.as_ref().map(cut),
            u: self.u.iter().map(cut).collect(),
            y: self.y.iter().map(cut).collect(),
        }
    }
}

/// Trainable initial states, one row per section of an index set.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialStates<S> {
    /// `n_sections x n_x`.
    pub values: Matrix<S>,
    /// Section start -> row of `values`.
    pub starts: Vec<usize>,
}

impl<S: Scalar> InitialStates<S> {
    /// Zero states for every start of `index`.
    pub fn zeros(index: &IndexSet, n_x: usize) -> Self {
        Self {
            values: Matrix::zeros(index.len(), n_x),
            starts: index.starts.clone(),
        }
    }

    pub fn row_of(&self, start: usize) -> Result<usize> {
        self.starts
            .binary_search(&start)
            .map_err(|_| Error::contract(format!("no trainable state for the section at {start}")))
    }
}

/// Loss value and per-block gradients (indexed by block id).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<S> {
    pub loss: S,
    pub grads: Vec<Vec<S>>,
}

/// Batch loss without gradients: mean over sections of `v_t`.
pub fn encoder_loss<S: Scalar>(model: &SubnetModel<S>, data: &IoDataset<S>, starts: &[usize], horizon: usize) -> Result<S> {
    section_loss(model, data, starts, horizon, None)
}

/// Like [`encoder_loss`], with the initial states taken from `states`
/// instead of the encoder.
pub fn section_loss<S: Scalar>(
    model: &SubnetModel<S>,
    data: &IoDataset<S>,
    starts: &[usize],
    horizon: usize,
    states: Option<&InitialStates<S>>,
) -> Result<S> {
    if starts.is_empty() {
        return Err(Error::contract("loss over an empty set of sections"));
    }
    const CHUNK: usize = 1024;
    let mut total = S::zero();
    for chunk in starts.chunks(CHUNK) {
        let b = SectionBatch::gather(model, data, chunk, horizon)?;
        let x0 = initial_state_plain(model, &b, states)?;
        let r = model.rollout_batch(x0, &b.u, Some(&b.y)).map_err(|e| label_divergence(e, chunk))?;
        for (yh, y) in r.y_hat.iter().zip(&b.y) {
            for (p, q) in yh.as_slice().iter().zip(y.as_slice()) {
                let d = *q - *p;
                total += d * d;
            }
        }
    }
    Ok(total / S::of((starts.len() * horizon) as f64))
}

fn label_divergence(e: Error, starts: &[usize]) -> Error {
    match e {
        Error::Divergence { step, .. } if starts.len() == 1 => Error::Divergence {
            context: format!("section starting at sample {}", starts[0]),
            step,
        },
        e => e,
    }
}

fn initial_state_plain<S: Scalar>(model: &SubnetModel<S>, b: &SectionBatch<S>, states: Option<&InitialStates<S>>) -> Result<Matrix<S>> {
    match states {
        Some(st) => {
            let n_x = model.n_x;
            let mut v = Vec::with_capacity(b.len() * n_x);
            for &t in &b.starts {
                v.extend_from_slice(st.values.row(st.row_of(t)?));
            }
            Matrix::from_vec(b.len(), n_x, v)
        }
        None => {
            let enc = model
                .encoder
                .as_ref()
                .ok_or_else(|| Error::contract("model has no encoder; pass trainable states"))?;
            enc.forward_batch(b.encoder_input.as_ref().expect("gathered with encoder"))
        }
    }
}

/// Batch loss and its gradient with respect to every parameter block.
///
/// With `threads > 1` the batch is split into that many contiguous chunks
/// evaluated concurrently; chunk results are added in chunk order, so the
/// result is deterministic for a fixed thread count.
pub fn encoder_loss_grad<S: Scalar>(
    model: &SubnetModel<S>,
    data: &IoDataset<S>,
    starts: &[usize],
    horizon: usize,
    threads: usize,
) -> Result<LossGrad<S>> {
    section_loss_grad(model, data, starts, horizon, None, threads)
}

pub fn section_loss_grad<S: Scalar>(
    model: &SubnetModel<S>,
    data: &IoDataset<S>,
    starts: &[usize],
    horizon: usize,
    states: Option<&InitialStates<S>>,
    threads: usize,
) -> Result<LossGrad<S>> {
    if starts.is_empty() {
        return Err(Error::contract("loss over an empty set of sections"));
    }
    let batch = SectionBatch::gather(model, data, starts, horizon)?;
    let scale = S::one() / S::of((starts.len() * horizon) as f64);
    let threads = threads.clamp(1, starts.len());
    if threads == 1 {
        return batch_loss_grad(model, &batch, states, scale);
    }
    let per = starts.len().div_ceil(threads);
    let parts: Vec<SectionBatch<S>> = (0..starts.len())
        .step_by(per)
        .map(|a| batch.rows(a..(a + per).min(starts.len())))
        .collect();
    let results: Vec<Result<LossGrad<S>>> = std::thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .map(|p| s.spawn(move || batch_loss_grad(model, p, states, scale)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("loss worker panicked")).collect()
    });
    let mut iter = results.into_iter();
    let mut acc = iter.next().expect("at least one chunk")?;
    for r in iter {
        let r = r?;
        acc.loss += r.loss;
        for (a, b) in acc.grads.iter_mut().zip(&r.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
    Ok(acc)
}

/// `scale * sum of squared errors` of one batch, with gradients.
fn batch_loss_grad<S: Scalar>(
    model: &SubnetModel<S>,
    batch: &SectionBatch<S>,
    states: Option<&InitialStates<S>>,
    scale: S,
) -> Result<LossGrad<S>> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    let x0 = match states {
        Some(st) => {
            let p = tape.param(
                ParamRef {
                    block: BLOCK_STATES,
                    offset: 0,
                    rows: st.values.rows(),
                    cols: st.values.cols(),
                },
                st.values.as_slice(),
            )?;
            let rows = batch.starts.iter().map(|&t| st.row_of(t)).collect::<Result<Vec<_>>>()?;
            tape.gather_rows(p, &rows)?
        }
        None => {
            let input = tape.constant(batch.encoder_input.clone().ok_or_else(|| Error::contract("model has no encoder; pass trainable states"))?);
            model.encode_tape(&mut tape, &vars, input)?
        }
    };
    let u: Vec<Var> = batch.u.iter().map(|m| tape.constant(m.clone())).collect();
    let y: Vec<Var> = batch.y.iter().map(|m| tape.constant(m.clone())).collect();
    let y_hat = model.rollout_tape(&mut tape, &vars, x0, &u, &y, &batch.starts)?;
    let mut total: Option<Var> = None;
    for (p, q) in y_hat.iter().zip(&y) {
        let d = tape.sub(*q, *p)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let root = tape.scale(total.expect("horizon >= 1"), scale)?;
    let loss = tape.value(root).as_slice()[0];
    if !loss.is_finite() {
        return Err(Error::divergence("batch loss", batch.horizon()));
    }
    let g = tape.backward(root)?;
    let mut grads = block_buffers(model, states);
    g.accumulate_into(&mut grads);
    Ok(LossGrad { loss, grads })
}

/// Zeroed gradient buffers shaped like the model's parameter blocks.
pub fn block_buffers<S: Scalar>(model: &SubnetModel<S>, states: Option<&InitialStates<S>>) -> Vec<Vec<S>> {
    let mut out = vec![Vec::new(); BLOCK_COUNT];
    for (id, b) in model.param_blocks() {
        out[id] = vec![S::zero(); b.len()];
    }
    if let Some(st) = states {
        out[BLOCK_STATES] = vec![S::zero(); st.values.len()];
    }
    out
}

/// `(1/N) sum_k |y_k - y_hat_k|^2` over the whole record, simulated from
/// the initial state `x1` at the first sample.
pub fn full_prediction_loss<S: Scalar>(model: &SubnetModel<S>, data: &IoDataset<S>, x1: &[S]) -> Result<S> {
    let st = single_state(model, x1)?;
    section_loss(model, data, &[0], data.len(), Some(&st))
}

/// [`full_prediction_loss`] with gradients; the gradient of `x1` is in
/// the [`BLOCK_STATES`] entry.
pub fn full_prediction_loss_grad<S: Scalar>(model: &SubnetModel<S>, data: &IoDataset<S>, x1: &[S]) -> Result<LossGrad<S>> {
    let st = single_state(model, x1)?;
    section_loss_grad(model, data, &[0], data.len(), Some(&st), 1)
}

fn single_state<S: Scalar>(model: &SubnetModel<S>, x1: &[S]) -> Result<InitialStates<S>> {
    if x1.len() != model.n_x {
        return Err(Error::contract(format!("initial state has {} entries, expected {}", x1.len(), model.n_x)));
    }
    Ok(InitialStates {
        values: Matrix::from_vec(1, model.n_x, x1.to_vec())?,
        starts: vec![0],
    })
}
