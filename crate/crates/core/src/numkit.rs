//! Dense parameter-vector arithmetic, splittable deterministic randomness and
//! a central-difference gradient oracle.

use std::fmt;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("parameter vectors must have positive dimension")]
    EmptyVector,
    #[error("non-finite value produced at index {index}")]
    NonFinite { index: usize },
    #[error("non-finite loss {value} during finite differencing at coordinate {coordinate}")]
    NonFiniteLoss { coordinate: usize, value: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, NumError>;

/// Flat vector of model weights, gradients or updates.
///
/// Every constructor and arithmetic operation rejects NaN/Inf, so a value of
/// this type is always finite and has a fixed, positive dimension.
#[derive(Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ParamVector").field(&self.values).finish()
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NumError::NonFinite { index }),
        None => Ok(()),
    }
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(NumError::EmptyVector);
        }
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    fn same_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(NumError::DimMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, b: f64, other: &ParamVector) -> Result<ParamVector> {
        lin_comb(a, self, b, other)
    }

    pub fn scale(&self, a: f64) -> Result<ParamVector> {
        let values: Vec<f64> = self.values.iter().map(|v| a * v).collect();
        check_finite(&values)?;
        Ok(ParamVector { values })
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        lin_comb(1.0, self, 1.0, other)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        lin_comb(1.0, self, -1.0, other)
    }

    /// In-place `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &ParamVector) -> Result<()> {
        self.same_dim(other)?;
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
        check_finite(&self.values)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.same_dim(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm2(&self) -> f64 {
        norm2(self)
    }

    pub fn norm2_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Element-wise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ParamVector> {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        check_finite(&values)?;
        Ok(ParamVector { values })
    }

    /// Element-wise combination of two vectors of equal dimension.
    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.same_dim(other)?;
        let values: Vec<f64> = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        check_finite(&values)?;
        Ok(ParamVector { values })
    }

    /// Copy with coordinate `i` shifted by `h`.
    pub fn perturbed(&self, i: usize, h: f64) -> ParamVector {
        let mut values = self.values.clone();
        values[i] += h;
        ParamVector { values }
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = NumError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

/// Element-wise `a * u + b * v`.
pub fn lin_comb(a: f64, u: &ParamVector, b: f64, v: &ParamVector) -> Result<ParamVector> {
    u.same_dim(v)?;
    let values: Vec<f64> = u.values.iter().zip(&v.values).map(|(x, y)| a * x + b * y).collect();
    check_finite(&values)?;
    Ok(ParamVector { values })
}

/// Euclidean norm.
pub fn norm2(v: &ParamVector) -> f64 {
    v.norm2_sq().sqrt()
}

/// Central-difference gradient of `loss` at `params`.
///
/// `loss` is evaluated at `params ± h·e_i` for every coordinate; any
/// non-finite evaluation is an error.
pub fn fd_gradient<F, E>(loss: F, params: &ParamVector, h: f64) -> std::result::Result<ParamVector, E>
where
    F: Fn(&ParamVector) -> std::result::Result<f64, E>,
    E: From<NumError>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(NumError::BadStep(h).into());
    }
    let mut grad = Vec::with_capacity(params.dim());
    for i in 0..params.dim() {
        let plus = loss(&params.perturbed(i, h))?;
        let minus = loss(&params.perturbed(i, -h))?;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(NumError::NonFiniteLoss { coordinate: i, value }.into());
            }
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(ParamVector::new(grad)?)
}

/// Relative error `‖a − b‖ / max(1, ‖b‖)` used by the gradient checks.
pub fn relative_error(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    Ok(a.sub(b)?.norm2() / b.norm2().max(1.0))
}

/// A named position in the tree of random streams.
///
/// A stream is identified by a root seed and a path of integers (for example
/// `[purpose, round, client, step]`). The generator for a stream is seeded by
/// hashing the whole path, so any stream can be derived independently of any
/// other without shared mutable state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<u64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            path: Vec::new(),
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Sub-stream one level deeper.
    pub fn child(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        Self {
            root_seed: self.root_seed,
            path,
        }
    }

    /// Sub-stream several levels deeper.
    pub fn descend(&self, indices: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(indices);
        Self {
            root_seed: self.root_seed,
            path,
        }
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut state = splitmix64(self.root_seed);
        for &p in &self.path {
            state = splitmix64(state ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
        }
        state = splitmix64(state ^ self.path.len() as u64);
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        seed
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.seed_bytes())
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..16).prop_flat_map(|n| {
            (
                prop::collection::vec(-1e6f64..1e6, n),
                prop::collection::vec(-1e6f64..1e6, n),
            )
        })
    }

    proptest! {
        #[test]
        fn lin_comb_finite_and_norm_zero_iff_zero((u, v) in vec_pair(), a in -10f64..10.0, b in -10f64..10.0) {
            let u = ParamVector::new(u).unwrap();
            let v = ParamVector::new(v).unwrap();
            let w = lin_comb(a, &u, b, &v).unwrap();
            prop_assert_eq!(w.dim(), u.dim());
            prop_assert!(w.as_slice().iter().all(|x| x.is_finite()));
            prop_assert!(norm2(&w).is_finite());
            prop_assert_eq!(norm2(&w) == 0.0, w.is_zero());
        }

        #[test]
        fn norm_triangle((u, v) in vec_pair()) {
            let u = ParamVector::new(u).unwrap();
            let v = ParamVector::new(v).unwrap();
            let s = u.add(&v).unwrap();
            prop_assert!(norm2(&s) <= norm2(&u) + norm2(&v) + 1e-9 * (1.0 + norm2(&u) + norm2(&v)));
        }
    }
}
