//! Flat-spacetime algebra with metric η = diag(+1, −1, −1, −1).
//!
//! Vectors store contravariant components `(x^0, x^1, x^2, x^3)` with `x^0 = ct`
//! for positions. Faraday tensors store covariant components `F_{μν}`; the
//! electric field sits in `F_{0k} = E_k` and the magnetic field in
//! `F_{ij} = −ε_{ijk} B_k`.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use thiserror::Error;

/// Diagonal of the Minkowski metric.
pub const METRIC: [f64; 4] = [1.0, -1.0, -1.0, -1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MinkowskiError {
    #[error("non-finite component {index} = {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("boost speed |β| = {0} is not below 1")]
    Superluminal(f64),
    #[error("matrix is not antisymmetric: max |F + Fᵀ| = {0:e}")]
    NotAntisymmetric(f64),
}

/// A rank-1 Minkowski object with contravariant components.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct FourVector(pub [f64; 4]);

impl FourVector {
    pub const ZERO: FourVector = FourVector([0.0; 4]);

    pub fn new(x0: f64, x1: f64, x2: f64, x3: f64) -> Self {
        FourVector([x0, x1, x2, x3])
    }

    /// Checked constructor: rejects NaN and infinities.
    pub fn try_new(c: [f64; 4]) -> Result<Self, MinkowskiError> {
        for (index, &value) in c.iter().enumerate() {
            if !value.is_finite() {
                return Err(MinkowskiError::NonFinite { index, value });
            }
        }
        Ok(FourVector(c))
    }

    /// Time-like component and spatial 3-vector.
    pub fn from_parts(x0: f64, x: [f64; 3]) -> Self {
        FourVector([x0, x[0], x[1], x[2]])
    }

    /// 4-velocity `γ(1, β)` for a 3-velocity `v` measured in units of c.
    pub fn velocity_from_beta(beta: [f64; 3]) -> Self {
        let b2 = beta.iter().map(|b| b * b).sum::<f64>();
        let g = 1.0 / (1.0 - b2).sqrt();
        FourVector([g, g * beta[0], g * beta[1], g * beta[2]])
    }

    pub fn spatial(&self) -> [f64; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    /// Covariant components `x_μ = η_{μν} x^ν`.
    pub fn lower(&self) -> [f64; 4] {
        [self.0[0], -self.0[1], -self.0[2], -self.0[3]]
    }

    /// Minkowski square `x·x`.
    pub fn norm_sqr(&self) -> f64 {
        dot(self, self)
    }

    /// Euclidean length of the component array (used for scale-aware tolerances).
    pub fn euclid(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for FourVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for FourVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for FourVector {
    type Output = FourVector;
    fn add(self, o: FourVector) -> FourVector {
        FourVector(std::array::from_fn(|i| self.0[i] + o.0[i]))
    }
}

impl Sub for FourVector {
    type Output = FourVector;
    fn sub(self, o: FourVector) -> FourVector {
        FourVector(std::array::from_fn(|i| self.0[i] - o.0[i]))
    }
}

impl AddAssign for FourVector {
    fn add_assign(&mut self, o: FourVector) {
        for i in 0..4 {
            self.0[i] += o.0[i];
        }
    }
}

impl SubAssign for FourVector {
    fn sub_assign(&mut self, o: FourVector) {
        for i in 0..4 {
            self.0[i] -= o.0[i];
        }
    }
}

impl Neg for FourVector {
    type Output = FourVector;
    fn neg(self) -> FourVector {
        FourVector(self.0.map(|x| -x))
    }
}

impl Mul<f64> for FourVector {
    type Output = FourVector;
    fn mul(self, k: f64) -> FourVector {
        FourVector(self.0.map(|x| x * k))
    }
}

impl Mul<FourVector> for f64 {
    type Output = FourVector;
    fn mul(self, v: FourVector) -> FourVector {
        v * self
    }
}

/// Minkowski inner product `a^0 b^0 − a·b`.
pub fn dot(a: &FourVector, b: &FourVector) -> f64 {
    a.0[0] * b.0[0] - a.0[1] * b.0[1] - a.0[2] * b.0[2] - a.0[3] * b.0[3]
}

/// A pure boost with 3-velocity β (units of c).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Boost {
    beta: [f64; 3],
    gamma: f64,
}

impl Boost {
    pub fn new(beta: [f64; 3]) -> Result<Self, MinkowskiError> {
        let b2: f64 = beta.iter().map(|b| b * b).sum();
        if !b2.is_finite() || b2 >= 1.0 {
            return Err(MinkowskiError::Superluminal(b2.sqrt()));
        }
        Ok(Boost { beta, gamma: 1.0 / (1.0 - b2).sqrt() })
    }

    pub fn beta(&self) -> [f64; 3] {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn inverse(&self) -> Boost {
        Boost { beta: self.beta.map(|b| -b), gamma: self.gamma }
    }

    /// Matrix Λ^μ_ν of the active boost.
    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let [bx, by, bz] = self.beta;
        let g = self.gamma;
        let b2 = bx * bx + by * by + bz * bz;
        let k = if b2 > 0.0 { (g - 1.0) / b2 } else { 0.0 };
        let b = [bx, by, bz];
        let mut m = [[0.0; 4]; 4];
        m[0][0] = g;
        for i in 0..3 {
            m[0][i + 1] = g * b[i];
            m[i + 1][0] = g * b[i];
            for j in 0..3 {
                m[i + 1][j + 1] = k * b[i] * b[j] + if i == j { 1.0 } else { 0.0 };
            }
        }
        m
    }
}

/// Applies `m^μ_ν` to a contravariant vector.
pub fn apply(m: &[[f64; 4]; 4], v: &FourVector) -> FourVector {
    FourVector(std::array::from_fn(|mu| (0..4).map(|nu| m[mu][nu] * v.0[nu]).sum()))
}

/// Actively boosts `v`: a particle at rest acquires velocity β.
pub fn boost(v: &FourVector, b: &Boost) -> FourVector {
    apply(&b.matrix(), v)
}

/// Antisymmetric rank-2 tensor with covariant components `F_{μν}`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct FaradayTensor([[f64; 4]; 4]);

impl FaradayTensor {
    pub const ZERO: FaradayTensor = FaradayTensor([[0.0; 4]; 4]);

    /// Builds a tensor from a matrix that must already be antisymmetric to
    /// within `tol` (absolute); the stored value is the antisymmetric part.
    pub fn from_matrix(m: [[f64; 4]; 4], tol: f64) -> Result<Self, MinkowskiError> {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                let s = m[i][j] + m[j][i];
                if !s.is_finite() {
                    return Err(MinkowskiError::NonFinite { index: 4 * i + j, value: m[i][j] });
                }
                worst = worst.max(s.abs());
            }
        }
        if worst > tol {
            return Err(MinkowskiError::NotAntisymmetric(worst));
        }
        Ok(Self::antisymmetrize(m))
    }

    /// Antisymmetric part `(M − Mᵀ)/2` of any matrix.
    pub fn antisymmetrize(m: [[f64; 4]; 4]) -> Self {
        let mut f = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in (i + 1)..4 {
                let v = 0.5 * (m[i][j] - m[j][i]);
                f[i][j] = v;
                f[j][i] = -v;
            }
        }
        FaradayTensor(f)
    }

    /// Field tensor for electric field `e` and magnetic field `b`.
    pub fn from_fields(e: [f64; 3], b: [f64; 3]) -> Self {
        let mut f = [[0.0; 4]; 4];
        for k in 0..3 {
            f[0][k + 1] = e[k];
            f[k + 1][0] = -e[k];
        }
        // F_{ij} = −ε_{ijk} B_k
        f[1][2] = -b[2];
        f[2][1] = b[2];
        f[2][3] = -b[0];
        f[3][2] = b[0];
        f[3][1] = -b[1];
        f[1][3] = b[1];
        FaradayTensor(f)
    }

    /// Wedge of two contravariant vectors with lowered indices:
    /// `(x∧y)_{μν} = x_μ y_ν − x_ν y_μ`.
    pub fn wedge(x: &FourVector, y: &FourVector) -> Self {
        let xl = x.lower();
        let yl = y.lower();
        let mut f = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in (i + 1)..4 {
                let v = xl[i] * yl[j] - xl[j] * yl[i];
                f[i][j] = v;
                f[j][i] = -v;
            }
        }
        FaradayTensor(f)
    }

    pub fn components(&self) -> &[[f64; 4]; 4] {
        &self.0
    }

    pub fn get(&self, mu: usize, nu: usize) -> f64 {
        self.0[mu][nu]
    }

    pub fn electric(&self) -> [f64; 3] {
        [self.0[0][1], self.0[0][2], self.0[0][3]]
    }

    pub fn magnetic(&self) -> [f64; 3] {
        [-self.0[2][3], -self.0[3][1], -self.0[1][2]]
    }

    pub fn scale(&self, k: f64) -> Self {
        FaradayTensor(self.0.map(|row| row.map(|x| x * k)))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Largest |F_{μν} + F_{νμ}|; zero for every stored tensor.
    pub fn antisymmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((self.0[i][j] + self.0[j][i]).abs());
            }
        }
        worst
    }
}

impl Add for FaradayTensor {
    type Output = FaradayTensor;
    fn add(self, o: FaradayTensor) -> FaradayTensor {
        FaradayTensor(std::array::from_fn(|i| std::array::from_fn(|j| self.0[i][j] + o.0[i][j])))
    }
}

impl AddAssign for FaradayTensor {
    fn add_assign(&mut self, o: FaradayTensor) {
        *self = *self + o;
    }
}

impl Sub for FaradayTensor {
    type Output = FaradayTensor;
    fn sub(self, o: FaradayTensor) -> FaradayTensor {
        FaradayTensor(std::array::from_fn(|i| std::array::from_fn(|j| self.0[i][j] - o.0[i][j])))
    }
}

/// Force contraction `w^μ = η^{μα} F_{αν} u^ν`.
///
/// Sign convention: with `F_{0k} = E_k` and `u = (1, 0, 0, 0)` the spatial
/// part of the result is `+E`. For general `u = γ(1, β)` the spatial part is
/// `γ(E + β × B)`. The equation of motion reads `m0 c du^μ/ds = (q/c) w^μ`.
pub fn contract_force(f: &FaradayTensor, u: &FourVector) -> FourVector {
    let m = f.components();
    FourVector(std::array::from_fn(|mu| {
        let lower: f64 = (0..4).map(|nu| m[mu][nu] * u.0[nu]).sum();
        METRIC[mu] * lower
    }))
}
