//! Per-point forward-mode differentiation of 2D → 3D maps and the
//! spectral quantities derived from their Jacobians.

use std::ops::{Add, Mul, Neg, Sub};

use super::AutodiffError;

/// Floor on `‖f_u × f_v‖` below which a normal is considered undefined.
pub const DEGENERACY_FLOOR: f64 = 1e-12;

/// A scalar carrying its derivatives with respect to `(u, v)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual2 {
    pub value: f64,
    pub grad: [f64; 2],
}

impl Dual2 {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            grad: [0.0, 0.0],
        }
    }

    pub fn scale(self, c: f64) -> Self {
        Self {
            value: self.value * c,
            grad: [self.grad[0] * c, self.grad[1] * c],
        }
    }

    /// LeakyReLU with derivative 1 at exactly 0.
    pub fn leaky_relu(self, slope: f64) -> Self {
        if self.value >= 0.0 {
            self
        } else {
            self.scale(slope)
        }
    }
}

impl Add for Dual2 {
    type Output = Dual2;
    fn add(self, o: Dual2) -> Dual2 {
        Dual2 {
            value: self.value + o.value,
            grad: [self.grad[0] + o.grad[0], self.grad[1] + o.grad[1]],
        }
    }
}

impl Sub for Dual2 {
    type Output = Dual2;
    fn sub(self, o: Dual2) -> Dual2 {
        self + (-o)
    }
}

impl Neg for Dual2 {
    type Output = Dual2;
    fn neg(self) -> Dual2 {
        self.scale(-1.0)
    }
}

impl Mul for Dual2 {
    type Output = Dual2;
    fn mul(self, o: Dual2) -> Dual2 {
        Dual2 {
            value: self.value * o.value,
            grad: [
                self.grad[0] * o.value + self.value * o.grad[0],
                self.grad[1] * o.value + self.value * o.grad[1],
            ],
        }
    }
}

/// A UV point seeded for forward-mode differentiation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualPoint2 {
    pub value: [f64; 2],
    /// Column `j` holds the tangent along input coordinate `j`.
    pub tangents: [[f64; 2]; 2],
}

impl DualPoint2 {
    /// Raw UV input: tangents are the identity.
    pub fn seed(uv: [f64; 2]) -> Self {
        Self {
            value: uv,
            tangents: [[1.0, 0.0], [0.0, 1.0]],
        }
    }

    pub fn components(&self) -> [Dual2; 2] {
        [
            Dual2 {
                value: self.value[0],
                grad: [self.tangents[0][0], self.tangents[0][1]],
            },
            Dual2 {
                value: self.value[1],
                grad: [self.tangents[1][0], self.tangents[1][1]],
            },
        ]
    }
}

/// Jacobian of a 2D → 3D map: columns `∂/∂u` and `∂/∂v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jacobian32 {
    pub fu: [f64; 3],
    pub fv: [f64; 3],
}

impl Jacobian32 {
    pub fn new(fu: [f64; 3], fv: [f64; 3]) -> Self {
        Self { fu, fv }
    }

    /// Entries `(E, F, G)` of the first fundamental form `JᵀJ`.
    pub fn first_fundamental_form(&self) -> (f64, f64, f64) {
        (dot3(self.fu, self.fu), dot3(self.fu, self.fv), dot3(self.fv, self.fv))
    }
}

/// Exact Jacobian of `map` at `uv` by forward-mode propagation.
pub fn jacobian_2d_to_3d<F>(map: F, uv: [f64; 2]) -> Jacobian32
where
    F: Fn([Dual2; 2]) -> [Dual2; 3],
{
    let out = map(DualPoint2::seed(uv).components());
    Jacobian32 {
        fu: [out[0].grad[0], out[1].grad[0], out[2].grad[0]],
        fv: [out[0].grad[1], out[1].grad[1], out[2].grad[1]],
    }
}

/// Eigen-decomposition of the symmetric matrix `[[e, f], [f, g]]`.
///
/// Returns eigenvalues in descending order with matching unit eigenvectors.
/// The discriminant is clamped at zero.
pub fn sym2_eigen(e: f64, f: f64, g: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let mean = 0.5 * (e + g);
    let half_diff = 0.5 * (e - g);
    let disc = (half_diff * half_diff + f * f).max(0.0);
    let root = disc.sqrt();
    let l1 = mean + root;
    let l2 = mean - root;

    let (x, y) = if e >= g { (l1 - g, f) } else { (f, l1 - e) };
    let norm = (x * x + y * y).sqrt();
    let v1 = if norm > 0.0 && norm.is_finite() {
        [x / norm, y / norm]
    } else {
        [1.0, 0.0]
    };
    let v2 = [-v1[1], v1[0]];
    ([l1, l2], [v1, v2])
}

/// Singular values `σ1 ≥ σ2 ≥ 0` of a 3×2 Jacobian.
pub fn singular_values_3x2(j: &Jacobian32) -> (f64, f64) {
    let (e, f, g) = j.first_fundamental_form();
    let ([l1, l2], _) = sym2_eigen(e, f, g);
    (l1.max(0.0).sqrt(), l2.max(0.0).sqrt())
}

/// Unit normal `(f_u × f_v) / ‖f_u × f_v‖`.
pub fn normal_from_jacobian(j: &Jacobian32) -> Result<[f64; 3], AutodiffError> {
    let c = cross3(j.fu, j.fv);
    let norm = dot3(c, c).sqrt();
    if !(norm > DEGENERACY_FLOOR) {
        return Err(AutodiffError::DegenerateJacobian { cross_norm: norm });
    }
    Ok([c[0] / norm, c[1] / norm, c[2] / norm])
}

#[inline]
pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
