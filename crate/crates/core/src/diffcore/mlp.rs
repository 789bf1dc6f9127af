use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, ParamId, ParamStore, Real, Tape, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<R: Real>(self, x: R) -> R {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(R::zero()),
            Activation::Sigmoid => x.sigmoid(),
        }
    }

    fn record<R: Real>(self, tape: &mut Tape<R>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Shape of a fully connected network. `layers` counts dense layers, so a
/// one-layer network is a single affine map from input to output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: usize,
    pub hidden: usize,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, layers: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            layers,
            hidden,
            output,
            hidden_activation: Activation::Relu,
            output_activation: Activation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 1, Contract, "an MLP needs at least one layer");
        ensure!(
            self.input >= 1 && self.hidden >= 1 && self.output >= 1,
            Contract,
            "MLP widths must be at least 1 (got {self:?})"
        );
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let i = if l == 0 { self.input } else { self.hidden };
                let o = if l + 1 == self.layers { self.output } else { self.hidden };
                (i, o)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    Glorot,
    Zeros,
}

/// A network whose weights live in a [`ParamStore`]. Weights are stored as
/// `fan_in x fan_out` so a layer computes `x * W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        spec: MlpSpec,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers);
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let weights = match init {
                Init::Zeros => vec![R::zero(); fan_in * fan_out],
                Init::Glorot => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..fan_in * fan_out)
                        .map(|_| R::of(rng.gen_range(-bound..bound)))
                        .collect()
                }
            };
            let w = store.add(format!("{prefix}.{l}.weight"), &[fan_in, fan_out], weights)?;
            let b = store.add(format!("{prefix}.{l}.bias"), &[fan_out], vec![R::zero(); fan_out])?;
            layers.push((w, b));
        }
        Ok(Self { spec, layers })
    }

    /// Records the forward pass of a batch (`n x input`) on the tape.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        ensure!(
            tape.value(x).cols() == self.spec.input,
            Contract,
            "MLP input width {} does not match spec {}",
            tape.value(x).cols(),
            self.spec.input
        );
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.linear(h, wv, Some(bv))?;
            let act = if l + 1 == self.layers.len() {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            h = act.record(tape, h);
        }
        Ok(h)
    }

    /// Batched forward pass without recording.
    pub fn eval<R: Real>(&self, store: &ParamStore<R>, x: &Matrix<R>) -> Result<Matrix<R>> {
        ensure!(
            x.cols() == self.spec.input,
            Contract,
            "MLP input width {} does not match spec {}",
            x.cols(),
            self.spec.input
        );
        let n = x.rows();
        let mut h = x.clone();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = self.spec.layer_dims()[l];
            let mut next = Matrix::zeros(n, fan_out);
            R::gemm(n, fan_in, fan_out, h.as_slice(), false, store.value(w), false, next.as_mut_slice(), false);
            let act = if l + 1 == self.layers.len() {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            let bias = store.value(b);
            for r in 0..n {
                for (y, &bv) in next.row_mut(r).iter_mut().zip(bias) {
                    *y = act.apply(*y + bv);
                }
            }
            h = next;
        }
        Ok(h)
    }

    /// Single-vector forward pass.
    pub fn eval_vec<R: Real>(&self, store: &ParamStore<R>, x: &[R]) -> Result<Vec<R>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.eval(store, &m)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Plain triple-loop forward pass, independent of the gemm kernel.
    fn oracle(store: &ParamStore<f64>, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (l, &(w, b)) in mlp.layers.iter().enumerate() {
            let (fi, fo) = mlp.spec.layer_dims()[l];
            let wv = store.value(w);
            let bv = store.value(b);
            let mut next = vec![0.0; fo];
            for o in 0..fo {
                let mut acc = bv[o];
                for i in 0..fi {
                    acc += h[i] * wv[i * fo + o];
                }
                next[o] = if l + 1 < mlp.layers.len() { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "z", MlpSpec::new(4, 3, 8, 5), Init::Zeros, &mut rng).unwrap();
        let y = mlp.eval_vec(&store, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0; 5]);
    }

    #[test]
    fn identity_single_layer() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "id", MlpSpec::new(3, 1, 1, 3), Init::Zeros, &mut rng).unwrap();
        let w = store.value_mut(mlp.layers[0].0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        assert_eq!(mlp.eval_vec(&store, &[0.3, -7.0, 2.5]).unwrap(), vec![0.3, -7.0, 2.5]);
    }

    #[test]
    fn random_net_matches_loop_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mlp = Mlp::new(&mut store, "r", MlpSpec::new(6, 2, 16, 4), Init::Glorot, &mut rng).unwrap();
        for b in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(b) {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = mlp.eval_vec(&store, &x).unwrap();
            let want = oracle(&store, &mlp, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
            }
            // The recorded path agrees with the direct one.
            let mut tape = Tape::new();
            let xv = tape.constant(Matrix::from_vec(1, 6, x.clone()).unwrap());
            let y = mlp.forward(&mut tape, &store, xv).unwrap();
            assert_eq!(tape.value(y).as_slice(), got.as_slice());
        }
    }

    #[test]
    fn width_mismatch_is_contract_violation() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "m", MlpSpec::new(3, 2, 4, 2), Init::Glorot, &mut rng).unwrap();
        assert!(matches!(
            mlp.eval_vec(&store, &[1.0, 2.0]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(3, 0, 4, 2).validate().is_err());
        assert!(MlpSpec::new(0, 2, 4, 2).validate().is_err());
        assert_eq!(MlpSpec::new(24, 8, 384, 15).layer_dims().len(), 8);
    }
}
