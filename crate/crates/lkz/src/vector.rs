//! Dense real vectors with the Euclidean inner product.
//!
//! All spaces in this crate are finite-dimensional real coordinate spaces;
//! `Vector` is the element type shared by unknowns and data.

use rand::Rng;
use rand_distr::StandardNormal;

/// Element of a finite-dimensional real Hilbert space.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    coords: Vec<f64>,
}

impl Vector {
    pub fn new(coords: Vec<f64>) -> Self {
        assert!(!coords.is_empty(), "vectors must have positive dimension");
        Self { coords }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in dot product");
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in add");
        Self::new(
            self.coords
                .iter()
                .zip(&other.coords)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in sub");
        Self::new(
            self.coords
                .iter()
                .zip(&other.coords)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::new(self.coords.iter().map(|a| a * factor).collect())
    }

    /// Componentwise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in hadamard");
        Self::new(
            self.coords
                .iter()
                .zip(&other.coords)
                .map(|(a, b)| a * b)
                .collect(),
        )
    }

    pub fn dist(&self, other: &Self) -> f64 {
        self.sub(other).norm()
    }

    pub fn dist_sq(&self, other: &Self) -> f64 {
        self.sub(other).norm_sq()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|a| a.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(coords: Vec<f64>) -> Self {
        Self::new(coords)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.coords[i]
    }
}

/// Standard normal draw in the given dimension.
pub(crate) fn gaussian(dim: usize, rng: &mut impl Rng) -> Vector {
    Vector::new((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Unit-norm random direction; resamples degenerate draws.
pub(crate) fn unit_direction(dim: usize, rng: &mut impl Rng) -> Vector {
    loop {
        let g = gaussian(dim, rng);
        let n = g.norm();
        if n > 1e-12 {
            return g.scale(1.0 / n);
        }
    }
}
