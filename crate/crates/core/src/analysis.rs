//! Error metrics and the overlap-variance study.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{mix_seed, IoDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::SubnetModel;
use crate::scalar::Scalar;

fn population_std(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// `RMS(y - y_hat) / std(y)` after dropping the first `skip` rows, with the
/// population standard deviation. Several channels are combined as the
/// root mean square of the per-channel values.
pub fn nrms<S: Scalar>(y_measured: &Matrix<S>, y_predicted: &Matrix<S>, skip: usize) -> Result<f64> {
    if y_measured.shape() != y_predicted.shape() {
        return Err(Error::contract(format!(
            "measured {:?} and predicted {:?} outputs differ in shape",
            y_measured.shape(),
            y_predicted.shape()
        )));
    }
    if skip >= y_measured.rows() {
        return Err(Error::contract("nothing left after skipping"));
    }
    let rows = skip..y_measured.rows();
    let mut acc = 0.0;
    for c in 0..y_measured.cols() {
        let y = rows.clone().map(|r| y_measured[(r, c)].to_f64_lossless());
        let sigma = population_std(y.clone());
        if !(sigma > 0.0) {
            return Err(Error::DegenerateChannel {
                signal: "y",
                channel: c,
                std: sigma,
            });
        }
        let mse = rows
            .clone()
            .map(|r| {
                let d = y_measured[(r, c)].to_f64_lossless() - y_predicted[(r, c)].to_f64_lossless();
                d * d
            })
            .sum::<f64>()
            / rows.len() as f64;
        acc += mse / (sigma * sigma);
    }
    Ok((acc / y_measured.cols() as f64).sqrt())
}

/// NRMS of `k`-step-ahead predictions for `k = 0..=k_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KStepProfile {
    pub nrms: Vec<f64>,
    /// Truncation length used in training, marked in the CSV output.
    pub truncation: Option<usize>,
}

impl KStepProfile {
    pub fn k_max(&self) -> usize {
        self.nrms.len() - 1
    }

    /// Columns `k,nrms,truncation` (the last is 1 on the row `k = T`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "k,nrms,truncation").map_err(io)?;
        for (k, v) in self.nrms.iter().enumerate() {
            let mark = u8::from(self.truncation == Some(k));
            writeln!(w, "{k},{v},{mark}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// k-step NRMS over all starts `t` for which `t + k_max` is in range. The
/// output scale is the standard deviation of the measured output after
/// the encoder window.
pub fn kstep_nrms<S: Scalar>(
    model: &SubnetModel<S>,
    data: &IoDataset<S>,
    k_max: usize,
    truncation: Option<usize>,
) -> Result<KStepProfile> {
    let pred = model.kstep_predictions(data, k_max)?;
    let n_y = model.n_y;
    let skip = model.lag();
    let mut sigma2 = Vec::with_capacity(n_y);
    for c in 0..n_y {
        let s = population_std((skip..data.len()).map(|r| data.y[(r, c)].to_f64_lossless()));
        if !(s > 0.0) {
            return Err(Error::DegenerateChannel {
                signal: "y",
                channel: c,
                std: s,
            });
        }
        sigma2.push(s * s);
    }
    let count = pred.starts.len() as f64;
    let mut nrms = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut acc = 0.0;
        for c in 0..n_y {
            let mut se = 0.0;
            for (i, &t) in pred.starts.iter().enumerate() {
                let d = pred.get(i, k)[c].to_f64_lossless() - data.y[(t + k, c)].to_f64_lossless();
                se += d * d;
            }
            acc += se / count / sigma2[c];
        }
        nrms.push((acc / n_y as f64).sqrt());
    }
    Ok(KStepProfile { nrms, truncation })
}

/// Autocorrelation of section losses at lag `t` for truncation `T`.
pub fn section_correlation(t: usize, horizon: usize) -> f64 {
    (1.0 - t as f64 / horizon as f64).max(0.0)
}

/// Variance of the spacing-`d` loss over `m` sections, in units of the
/// variance of a single section loss:
/// `(1/m^2) (m + 2 sum_{t=1}^{m-1} (m - t) R(t d))`.
pub fn g_of_d(d: usize, horizon: usize, m: usize) -> f64 {
    let m_f = m as f64;
    let mut s = m_f;
    for t in 1..m {
        let r = section_correlation(t * d, horizon);
        if r == 0.0 {
            break;
        }
        s += 2.0 * (m - t) as f64 * r;
    }
    s / (m_f * m_f)
}

/// Number of spacing-`d` sections in the overlap study: `N - T + 1 = d m + r`
/// with `0 <= r < d`, so a trailing partial step is dropped.
pub fn section_count(n: usize, horizon: usize, d: usize) -> usize {
    (n - horizon + 1) / d
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapVariance {
    pub horizon: usize,
    pub samples: usize,
    pub trials: usize,
    pub var_d1: f64,
    pub var_dt: f64,
    /// `G(1) / G(T)` for the section counts used.
    pub analytic_ratio: f64,
}

impl OverlapVariance {
    pub fn empirical_ratio(&self) -> f64 {
        self.var_d1 / self.var_dt
    }

    pub fn csv_header() -> &'static str {
        "T,N,trials,var_d1,var_dT,empirical_ratio,analytic_ratio"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.horizon,
            self.samples,
            self.trials,
            self.var_d1,
            self.var_dt,
            self.empirical_ratio(),
            self.analytic_ratio
        )
    }
}

/// Monte-Carlo variance of the spacing-1 and spacing-`T` losses evaluated
/// at the true system, where every section loss is the mean of `T` squared
/// white-noise samples.
pub fn overlap_variance_mc(horizon: usize, samples: usize, trials: usize, seed: u64) -> Result<OverlapVariance> {
    if horizon == 0 || samples < horizon || trials < 2 {
        return Err(Error::contract("need T >= 1, N >= T and at least two trials"));
    }
    let mut v1 = Vec::with_capacity(trials);
    let mut vt = Vec::with_capacity(trials);
    let starts = samples - horizon + 1;
    let mut e2 = vec![0.0; samples];
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed.wrapping_add(trial as u64)));
        for x in e2.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x = e * e;
        }
        let mut window: f64 = e2[..horizon].iter().sum();
        let (mut sum1, mut sumt) = (0.0, 0.0);
        let m_t = section_count(samples, horizon, horizon);
        for t in 0..starts {
            if t > 0 {
                window += e2[t + horizon - 1] - e2[t - 1];
            }
            let v = window / horizon as f64;
            sum1 += v;
            if t % horizon == 0 && t / horizon < m_t {
                sumt += v;
            }
        }
        v1.push(sum1 / starts as f64);
        vt.push(sumt / m_t as f64);
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let g1 = g_of_d(1, horizon, section_count(samples, horizon, 1));
    let gt = g_of_d(horizon, horizon, section_count(samples, horizon, horizon));
    Ok(OverlapVariance {
        horizon,
        samples,
        trials,
        var_d1: var(&v1),
        var_dt: var(&vt),
        analytic_ratio: g1 / gt,
    })
}
