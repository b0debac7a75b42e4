//! Dense row-major tensor value type.
//!
//! Storage is single-precision (`f32`); statistics that need more headroom
//! (Pearson accumulators, inner products, softmax utilities) run in `f64`
//! elsewhere.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional value. `grad`, when present, matches `data` in length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Uniform values in `[lo, hi)`.
    pub fn rand_uniform(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Kaiming-style fan-in scaling: N(0, sqrt(2/fan_in)) via Box-Muller.
    pub fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| (gaussian(rng) * std) as f32).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Accumulate `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 bounded away from 0.
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Shared handle to a trainable tensor. Graphs read the value at node
/// creation and accumulate gradients back through the handle on `backward`.
#[derive(Debug, Clone)]
pub struct Param(pub Rc<RefCell<Tensor>>);

impl Param {
    pub fn new(mut tensor: Tensor) -> Self {
        tensor.requires_grad = true;
        Param(Rc::new(RefCell::new(tensor)))
    }

    /// Non-trainable shared tensor (frozen parameter).
    pub fn frozen(mut tensor: Tensor) -> Self {
        tensor.requires_grad = false;
        Param(Rc::new(RefCell::new(tensor)))
    }

    pub fn value(&self) -> Tensor {
        self.0.borrow().clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().zero_grad();
    }

    /// Gradient snapshot, zeros if no backward has touched this parameter.
    pub fn grad_vec(&self) -> Vec<f32> {
        let t = self.0.borrow();
        t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::kaiming(vec![4, 4], 16, &mut a);
        let tb = Tensor::kaiming(vec![4, 4], 16, &mut b);
        assert_eq!(ta.data, tb.data);
    }
}
