use serde::{Deserialize, Serialize};

use super::{Matrix, Real};
use crate::error::{ensure, Error, Result};

/// Handle to one parameter block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named, shaped array of learnable scalars plus its gradient
/// accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct ParamBlock<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<R>,
    pub grad: Vec<R>,
    pub m: Vec<R>,
    pub v: Vec<R>,
    /// Number of Adam updates applied to this block.
    pub step: u64,
    pub trainable: bool,
}

impl<R: Real> ParamBlock<R> {
    fn new(name: String, shape: Vec<usize>, value: Vec<R>) -> Self {
        let n = value.len();
        Self {
            name,
            shape,
            value,
            grad: vec![R::zero(); n],
            m: vec![R::zero(); n],
            v: vec![R::zero(); n],
            step: 0,
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Row/column view used by the tape: the last axis becomes the columns.
    pub fn matrix_shape(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { self.numel() / cols };
        (rows, cols)
    }
}

/// Gradients produced by one backward pass. Blocks that did not take part in
/// the computation stay `None`, which reads as zero.
#[derive(Clone, Debug)]
pub struct Gradients<R> {
    blocks: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub(crate) fn new(count: usize) -> Self {
        Self {
            blocks: vec![None; count],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, numel: usize, delta: &[R]) {
        if id.0 >= self.blocks.len() {
            self.blocks.resize(id.0 + 1, None);
        }
        let slot = self.blocks[id.0].get_or_insert_with(|| vec![R::zero(); numel]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += *d;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[R]> {
        self.blocks.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .flatten()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Sums another worker's gradients into this one.
    pub fn merge(&mut self, other: &Gradients<R>) {
        for (i, block) in other.blocks.iter().enumerate() {
            if let Some(b) = block {
                self.add(ParamId(i), b.len(), b);
            }
        }
    }
}

/// Storage for every learnable quantity of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    blocks: Vec<ParamBlock<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<R>) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        ensure!(
            value.len() == numel,
            Shape,
            "block {name}: {} values for shape {shape:?}",
            value.len()
        );
        ensure!(
            self.find(&name).is_none(),
            Contract,
            "duplicate parameter block {name}"
        );
        self.blocks
            .push(ParamBlock::new(name, shape.to_vec(), value));
        Ok(ParamId(self.blocks.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock<R> {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut ParamBlock<R> {
        &mut self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[ParamBlock<R>] {
        &self.blocks
    }

    pub fn value(&self, id: ParamId) -> &[R] {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [R] {
        &mut self.blocks[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[R] {
        &self.blocks[id.0].grad
    }

    pub fn matrix(&self, id: ParamId) -> Matrix<R> {
        let b = &self.blocks[id.0];
        let (rows, cols) = b.matrix_shape();
        Matrix::from_vec(rows, cols, b.value.clone()).expect("block shape is consistent")
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.blocks[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(ParamBlock::numel).sum()
    }

    /// Adds `scale * grads` into the per-block accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<R>, scale: R) {
        for (block, g) in self.blocks.iter_mut().zip(&grads.blocks) {
            if let Some(g) = g {
                for (acc, x) in block.grad.iter_mut().zip(g) {
                    *acc += scale * *x;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.iter_mut().for_each(|g| *g = R::zero());
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.grad.iter().all(|g| g.is_finite()))
    }

    /// One Adam update with bias correction at learning rate
    /// `lr_schedule(step)`. Gradient accumulators are cleared afterwards.
    /// Refuses (leaving all state untouched) if any gradient is non-finite.
    pub fn adam_step(&mut self, config: &AdamConfig, step: u64) -> Result<()> {
        config.validate()?;
        if !self.grads_finite() {
            return Err(Error::NonFinite(
                "gradient accumulator holds NaN or Inf; Adam step refused".into(),
            ));
        }
        let lr = R::of(lr_schedule(step, config));
        let (b1, b2, eps) = (R::of(config.beta1), R::of(config.beta2), R::of(config.eps));
        let one = R::one();
        for block in self.blocks.iter_mut().filter(|b| b.trainable) {
            block.step += 1;
            let k = block.step as i32;
            let bc1 = one - b1.powi(k);
            let bc2 = one - b2.powi(k);
            for i in 0..block.value.len() {
                let g = block.grad[i];
                let m = b1 * block.m[i] + (one - b1) * g;
                let v = b2 * block.v[i] + (one - b2) * g * g;
                block.m[i] = m;
                block.v[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                block.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Copies values and optimizer state into another precision.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        let conv = |x: &Vec<R>| x.iter().map(|v| S::of(v.f64())).collect::<Vec<S>>();
        ParamStore {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    value: conv(&b.value),
                    grad: conv(&b.grad),
                    m: conv(&b.m),
                    v: conv(&b.v),
                    step: b.step,
                    trainable: b.trainable,
                })
                .collect(),
        }
    }

    pub(crate) fn push_block(&mut self, block: ParamBlock<R>) {
        self.blocks.push(block);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.1,
            decay_interval: 2000,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Contract, "learning rate must be positive");
        ensure!(
            self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0,
            Contract,
            "Adam betas must lie in (0, 1)"
        );
        ensure!(self.eps > 0.0, Contract, "Adam epsilon must be positive");
        ensure!(
            self.decay_factor > 0.0 && self.decay_factor <= 1.0,
            Contract,
            "decay factor must lie in (0, 1]"
        );
        ensure!(self.decay_interval >= 1, Contract, "decay interval must be at least 1");
        Ok(())
    }
}

/// Step-decayed learning rate: `lr * factor^(step / interval)`.
pub fn lr_schedule(step: u64, config: &AdamConfig) -> f64 {
    let decays = (step / config.decay_interval.max(1)) as i32;
    config.lr * config.decay_factor.powi(decays)
}
