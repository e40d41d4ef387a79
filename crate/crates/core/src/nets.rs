//! Feedforward networks with an optional linear bypass.
//!
//! A network with `q` hidden layers of width `m` computes
//! `z_0 = x`, `z_i = act(W_i z_{i-1} + b_i)` for `i = 1..q`, and returns
//! `W_{q+1} z_q + b_{q+1}`, plus `W_bypass x` when the bypass is enabled.
//! All weights live in one flat vector, layer after layer (`W_i` row-major
//! `fan_out x fan_in`, then `b_i`), with the bypass matrix last.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamRef, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, v: S) -> S {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(S::zero()),
            Activation::Sigmoid => S::one() / (S::one() + (-v).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub bypass: bool,
}

/// Offsets of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl MlpSpec {
    /// Two hidden layers of 64 tanh units with a linear bypass.
    pub fn standard(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_layers: 2,
            hidden_width: 64,
            activation: Activation::Tanh,
            bypass: true,
        }
    }

    pub fn with_dims(self, input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::contract("network dimensions must be at least 1"));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::contract("hidden width must be at least 1"));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.output_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let l = LayerLayout {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += (fan_in + 1) * fan_out;
                l
            })
            .collect()
    }

    /// Offset of the `output_dim x input_dim` bypass matrix.
    pub fn bypass_offset(&self) -> Option<usize> {
        self.bypass.then(|| {
            self.layers()
                .iter()
                .map(|l| (l.fan_in + 1) * l.fan_out)
                .sum()
        })
    }

    pub fn param_count(&self) -> usize {
        let layers: usize = self
            .layers()
            .iter()
            .map(|l| (l.fan_in + 1) * l.fan_out)
            .sum();
        layers + if self.bypass { self.input_dim * self.output_dim } else { 0 }
    }
}

/// Flat parameter storage for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<S> {
    pub values: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    pub spec: MlpSpec,
    pub params: MlpParams<S>,
}

/// Half-width of the Glorot-uniform interval.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases, bypass drawn like a layer.
pub fn init_xavier<S: Scalar>(spec: &MlpSpec, seed: u64) -> Result<MlpParams<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_xavier_with(spec, &mut rng)
}

pub fn init_xavier_with<S: Scalar>(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Result<MlpParams<S>> {
    spec.validate()?;
    let mut values = vec![S::zero(); spec.param_count()];
    let mut fill = |offset: usize, fan_in: usize, fan_out: usize| {
        let bound = xavier_bound(fan_in, fan_out);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for v in &mut values[offset..offset + fan_in * fan_out] {
            *v = S::of(dist.sample(rng));
        }
    };
    for l in spec.layers() {
        fill(l.weight_offset, l.fan_in, l.fan_out);
    }
    if let Some(off) = spec.bypass_offset() {
        fill(off, spec.input_dim, spec.output_dim);
    }
    Ok(MlpParams { values })
}

/// Parameter nodes of one network registered on a tape.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    bypass: Option<Var>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(spec: MlpSpec, params: MlpParams<S>) -> Result<Self> {
        spec.validate()?;
        if params.values.len() != spec.param_count() {
            return Err(Error::contract(format!(
                "network needs {} parameters, got {}",
                spec.param_count(),
                params.values.len()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn xavier(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = init_xavier_with(&spec, rng)?;
        Self::new(spec, params)
    }

    /// All-zero network: outputs zero for every input.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let params = MlpParams {
            values: vec![S::zero(); spec.param_count()],
        };
        Self::new(spec, params)
    }

    pub fn values(&self) -> &[S] {
        &self.params.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.params.values
    }

    fn weight(&self, l: &LayerLayout) -> Matrix<S> {
        let w = &self.params.values[l.weight_offset..l.weight_offset + l.fan_in * l.fan_out];
        Matrix::from_vec(l.fan_out, l.fan_in, w.to_vec()).expect("layout")
    }

    fn bias(&self, l: &LayerLayout) -> &[S] {
        &self.params.values[l.bias_offset..l.bias_offset + l.fan_out]
    }

    /// Evaluates a batch (one sample per row).
    pub fn forward_batch(&self, input: &Matrix<S>) -> Result<Matrix<S>> {
        if input.cols() != self.spec.input_dim {
            return Err(Error::contract(format!(
                "network input has {} columns, expected {}",
                input.cols(),
                self.spec.input_dim
            )));
        }
        let layers = self.spec.layers();
        let last = layers.len() - 1;
        let mut z = input.clone();
        for (i, l) in layers.iter().enumerate() {
            let mut next = z.matmul_nt(&self.weight(l));
            next.add_row_inplace(self.bias(l));
            if i < last {
                let act = self.spec.activation;
                for v in next.as_mut_slice() {
                    *v = act.apply(*v);
                }
            }
            z = next;
        }
        if let Some(off) = self.spec.bypass_offset() {
            let (n_in, n_out) = (self.spec.input_dim, self.spec.output_dim);
            let w = Matrix::from_vec(n_out, n_in, self.params.values[off..off + n_in * n_out].to_vec())?;
            z.add_inplace(&input.matmul_nt(&w));
        }
        Ok(z)
    }

    pub fn forward(&self, input: &[S]) -> Result<Vec<S>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward_batch(&x)?.into_vec())
    }

    /// Registers this network's weights as parameters of `block`.
    pub fn register(&self, tape: &mut Tape<S>, block: usize) -> Result<MlpVars> {
        let mut layers = Vec::new();
        for l in self.spec.layers() {
            let wref = ParamRef {
                block,
                offset: l.weight_offset,
                rows: l.fan_out,
                cols: l.fan_in,
            };
            let bref = ParamRef {
                block,
                offset: l.bias_offset,
                rows: 1,
                cols: l.fan_out,
            };
            let w = tape.param(wref, &self.params.values[wref.range()])?;
            let b = tape.param(bref, &self.params.values[bref.range()])?;
            layers.push((w, b));
        }
        let bypass = match self.spec.bypass_offset() {
            Some(off) => {
                let r = ParamRef {
                    block,
                    offset: off,
                    rows: self.spec.output_dim,
                    cols: self.spec.input_dim,
                };
                Some(tape.param(r, &self.params.values[r.range()])?)
            }
            None => None,
        };
        Ok(MlpVars { layers, bypass })
    }

    /// Differentiable forward pass through registered weights.
    pub fn forward_tape(&self, tape: &mut Tape<S>, vars: &MlpVars, input: Var) -> Result<Var> {
        let last = vars.layers.len() - 1;
        let mut z = input;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            z = tape.affine(z, w, Some(b))?;
            if i < last {
                z = match self.spec.activation {
                    Activation::Tanh => tape.tanh(z)?,
                    Activation::Relu => tape.relu(z)?,
                    Activation::Sigmoid => tape.sigmoid(z)?,
                };
            }
        }
        if let Some(w) = vars.bypass {
            let lin = tape.affine(input, w, None)?;
            z = tape.add(z, lin)?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;

    fn spec(q: usize, m: usize, bypass: bool) -> MlpSpec {
        MlpSpec {
            input_dim: 2,
            output_dim: 1,
            hidden_layers: q,
            hidden_width: m,
            activation: Activation::Tanh,
            bypass,
        }
    }

    #[test]
    fn xavier_bound_for_square_layer() {
        assert_eq!(xavier_bound(3, 3), 1.0);
    }

    #[test]
    fn xavier_respects_bounds_and_zero_biases() {
        let s = MlpSpec {
            input_dim: 3,
            output_dim: 3,
            hidden_layers: 1,
            hidden_width: 3,
            activation: Activation::Tanh,
            bypass: true,
        };
        let p = init_xavier::<f64>(&s, 5).unwrap();
        for l in s.layers() {
            let w = &p.values[l.weight_offset..l.bias_offset];
            assert!(w.iter().all(|v| v.abs() <= 1.0));
            assert!(w.iter().any(|v| *v != 0.0));
            assert!(p.values[l.bias_offset..l.bias_offset + l.fan_out]
                .iter()
                .all(|&b| b == 0.0));
        }
        let off = s.bypass_offset().unwrap();
        assert!(p.values[off..].iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn xavier_is_deterministic() {
        let s = MlpSpec::standard(5, 4);
        let a = init_xavier::<f64>(&s, 42).unwrap();
        let b = init_xavier::<f64>(&s, 42).unwrap();
        assert_eq!(a, b);
        let c = init_xavier::<f64>(&s, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_formula() {
        let s = MlpSpec::standard(5, 4);
        assert_eq!(s.param_count(), 6 * 64 + 65 * 64 + 65 * 4 + 5 * 4);
        assert_eq!(spec(0, 0, false).param_count(), 3);
    }

    #[test]
    fn linear_identity_network() {
        let s = MlpSpec {
            input_dim: 2,
            output_dim: 2,
            hidden_layers: 0,
            hidden_width: 0,
            activation: Activation::Tanh,
            bypass: false,
        };
        let net = Mlp::new(s, MlpParams { values: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0] }).unwrap();
        assert_eq!(net.forward(&[0.25, -3.0]).unwrap(), vec![0.25, -3.0]);
    }

    #[test]
    fn output_bias_only_gives_constant() {
        let s = spec(1, 1, false);
        let mut net = Mlp::<f64>::zeros(s).unwrap();
        let l = s.layers()[1];
        net.values_mut()[l.bias_offset] = 0.3;
        for x in [[0.0, 0.0], [5.0, -2.0], [-1.0, 1.0]] {
            assert_eq!(net.forward(&x).unwrap(), vec![0.3]);
        }
    }

    #[test]
    fn matches_straight_line_recurrence() {
        // Independent reimplementation of the layer recurrence with plain
        // loops, 2 -> 2 -> 2 -> 1, tanh, seed 7.
        let s = spec(2, 2, false);
        let net = Mlp::new(s, init_xavier::<f64>(&s, 7).unwrap()).unwrap();
        let v = net.values();
        let x = [1.0, -1.0];
        let mut idx = 0;
        let mut take = |n: usize| {
            let out = v[idx..idx + n].to_vec();
            idx += n;
            out
        };
        let (w1, b1) = (take(4), take(2));
        let (w2, b2) = (take(4), take(2));
        let (w3, b3) = (take(2), take(1));
        let z1: Vec<f64> = (0..2)
            .map(|j| (w1[2 * j] * x[0] + w1[2 * j + 1] * x[1] + b1[j]).tanh())
            .collect();
        let z2: Vec<f64> = (0..2)
            .map(|j| (w2[2 * j] * z1[0] + w2[2 * j + 1] * z1[1] + b2[j]).tanh())
            .collect();
        let y = w3[0] * z2[0] + w3[1] * z2[1] + b3[0];
        let got = net.forward(&x).unwrap()[0];
        assert!((got - y).abs() < 1e-15, "{got} vs {y}");
    }

    #[test]
    fn bypass_adds_linear_term() {
        let s = spec(1, 3, true);
        let mut net = Mlp::<f64>::zeros(s).unwrap();
        let off = s.bypass_offset().unwrap();
        net.values_mut()[off] = 2.0;
        net.values_mut()[off + 1] = -1.0;
        assert_eq!(net.forward(&[1.5, 0.5]).unwrap(), vec![2.5]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Mlp::<f64>::zeros(spec(1, 3, true)).unwrap();
        assert!(net.forward(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn tape_and_plain_forward_agree_and_gradients_check() {
        for act in [Activation::Tanh, Activation::Sigmoid] {
            let s = MlpSpec {
                activation: act,
                ..MlpSpec::standard(3, 2)
            }
            .with_dims(3, 2);
            let s = MlpSpec { hidden_width: 5, ..s };
            let net = Mlp::new(s, init_xavier::<f64>(&s, 3).unwrap()).unwrap();
            let x = Matrix::from_rows(&[vec![0.2, -0.4, 1.1], vec![1.0, 0.0, -0.3]]).unwrap();
            let plain = net.forward_batch(&x).unwrap();
            let mut t = Tape::new();
            let vars = net.register(&mut t, 0).unwrap();
            let xin = t.constant(x.clone());
            let y = net.forward_tape(&mut t, &vars, xin).unwrap();
            assert_eq!(t.value(y), &plain);

            let report = grad_check(
                |t: &mut Tape<f64>, v: &[f64]| {
                    let n = Mlp::new(s, MlpParams { values: v.to_vec() })?;
                    let vars = n.register(t, 0)?;
                    let xin = t.constant(x.clone());
                    let y = n.forward_tape(t, &vars, xin)?;
                    let y2 = t.square(y)?;
                    t.mean(y2)
                },
                net.values(),
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{act:?}: {}", report.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn zero_weights_tanh_output_equals_output_bias(
            x0 in -10.0f64..10.0, x1 in -10.0f64..10.0, bias in -3.0f64..3.0
        ) {
            let s = spec(2, 4, false);
            let mut net = Mlp::<f64>::zeros(s).unwrap();
            let l = *s.layers().last().unwrap();
            net.values_mut()[l.bias_offset] = bias;
            prop_assert_eq!(net.forward(&[x0, x1]).unwrap()[0], bias);
        }

        #[test]
        fn bounded_slope_on_bounded_box(
            x0 in -2.0f64..2.0, x1 in -2.0f64..2.0, seed in 0u64..50
        ) {
            let s = spec(2, 8, true);
            let net = Mlp::new(s, init_xavier::<f64>(&s, seed).unwrap()).unwrap();
            let h = 1e-4;
            let f0 = net.forward(&[x0, x1]).unwrap()[0];
            let f1 = net.forward(&[x0 + h, x1]).unwrap()[0];
            let f2 = net.forward(&[x0, x1 + h]).unwrap()[0];
            // Crude bound: product of layer operator norms is below this for
            // Glorot weights of this size.
            prop_assert!(((f1 - f0) / h).abs() < 50.0);
            prop_assert!(((f2 - f0) / h).abs() < 50.0);
        }
    }
}
