use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;

/// Dense `rows x dim` lookup table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    rows: usize,
    dim: usize,
    pub(crate) data: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Embedding {
            rows,
            dim,
            data: vec![T::zero(); rows * dim],
        }
    }

    /// Entries drawn from N(0, std^2).
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Embedding {
            rows,
            dim,
            data: (0..rows * dim).map(|_| T::lit(normal.sample(rng))).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }
}

/// Fully connected layer `y = W x + b` with `W` stored `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    fan_in: usize,
    fan_out: usize,
    pub(crate) weight: Vec<T>,
    pub(crate) bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            fan_in,
            fan_out,
            weight: vec![T::zero(); fan_in * fan_out],
            bias: vec![T::zero(); fan_out],
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let mut layer = Self::zeros(fan_in, fan_out);
        layer.weight.iter_mut().for_each(|w| *w = T::lit(dist.sample(rng)));
        layer
    }

    /// LeCun-normal weights with std `sqrt(1 / fan_in)`, zero bias.
    pub fn lecun_normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
        let mut layer = Self::zeros(fan_in, fan_out);
        layer.weight.iter_mut().for_each(|w| *w = T::lit(normal.sample(rng)));
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    #[inline]
    pub fn forward_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.fan_in);
        for (o, (row, &b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.fan_in).zip(&self.bias))
        {
            *o = crate::scalar::dot(row, x) + b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_weights_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Dense::<f64>::glorot_uniform(16, 8, &mut rng);
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(layer.weight().iter().all(|w| w.abs() <= bound));
        assert!(layer.weight().iter().any(|w| w.abs() > 0.5 * bound));
        assert!(layer.bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lecun_std_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Dense::<f64>::lecun_normal(64, 200, &mut rng);
        let n = layer.weight().len() as f64;
        let var = layer.weight().iter().map(|w| w * w).sum::<f64>() / n;
        assert!((var - 1.0 / 64.0).abs() < 0.1 / 64.0, "{var}");
    }

    #[test]
    fn dense_forward() {
        let mut layer = Dense::<f64>::zeros(2, 2);
        layer.weight.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        layer.bias.copy_from_slice(&[0.5, -1.0]);
        let mut out = [0.0; 2];
        layer.forward_into(&[1.0, 1.0], &mut out);
        assert_eq!(out, [3.5, 6.0]);
    }
}
