//! Linear minimization oracles over each group's unit norm ball.
//!
//! `lmo(g, b)` returns `argmin_{||x|| <= 1} <b, x>` for the group's primal
//! norm. Hidden matrices use the polar factor `U V^T`, approximated by a
//! Newton-Schulz iteration or computed exactly from the Jacobi SVD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, jacobi_svd, Matrix, Vector};
use crate::norms::GroupId;
use crate::param::Param;

/// Coefficients `(a, b, c)` of the quintic map `a x + b x^3 + c x^5`.
pub const QUINTIC_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
pub const DEFAULT_NS_STEPS: usize = 5;

/// Polynomial used by the Newton-Schulz iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsVariant {
    #[default]
    Quintic,
    /// Classic `1.5 x - 0.5 x^3`; converges to the polar factor.
    Cubic,
}

/// Envelope of output singular values for the default quintic, 5-step
/// iteration, keyed by the input condition number.
///
/// Frozen from `cargo run --release --example ns_envelope` (seeds 0..4, sizes
/// 4..256, square and rectangular) with a 2% margin on each side.
pub const NS_ENVELOPE: [(f64, f64, f64); 5] = [
    // (max condition number, min singular value, max singular value)
    (1.0, 0.674377, 1.091935),
    (1e1, 0.668195, 1.157039),
    (1e2, 0.668199, 1.226397),
    (1e3, 0.108950, 1.226366),
    (1e4, 0.012544, 1.226401),
];

/// Returns the pinned `(lo, hi)` envelope for inputs with condition number
/// at most `cond`, or `None` past the swept range.
pub fn ns_envelope(cond: f64) -> Option<(f64, f64)> {
    NS_ENVELOPE
        .iter()
        .find(|(c, _, _)| cond <= *c * (1.0 + 1e-9))
        .map(|&(_, lo, hi)| (lo, hi))
}

/// LMO settings for the Hidden group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmoOptions {
    pub ns_steps: usize,
    pub ns_variant: NsVariant,
    /// Use the exact SVD polar factor instead of Newton-Schulz.
    pub oracle_polar: bool,
}

impl Default for LmoOptions {
    fn default() -> Self {
        Self {
            ns_steps: DEFAULT_NS_STEPS,
            ns_variant: NsVariant::Quintic,
            oracle_polar: false,
        }
    }
}

impl LmoOptions {
    pub fn exact() -> Self {
        Self {
            oracle_polar: true,
            ..Self::default()
        }
    }
}

/// Approximates the polar factor `U V^T` of `a`.
///
/// The input is first divided by its Frobenius norm so every singular value
/// lies in `(0, 1]`. The iteration runs on whichever orientation gives the
/// smaller Gram matrix.
pub fn newton_schulz(a: &Matrix, steps: usize, variant: NsVariant) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::Invalid("newton_schulz needs at least one step".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("newton_schulz input".into()));
    }
    let fro = frobenius_norm(a);
    if fro == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let transposed = a.rows() > a.cols();
    let mut x = if transposed { a.transpose() } else { a.clone() };
    x.data_mut().iter_mut().for_each(|v| *v /= fro);

    for _ in 0..steps {
        let gram = x.gram();
        x = match variant {
            NsVariant::Quintic => {
                let (ca, cb, cc) = QUINTIC_COEFFS;
                let mut poly = gram.matmul(&gram)?.scale(cc);
                poly.axpy(cb, &gram)?;
                let mut next = poly.matmul(&x)?;
                next.axpy(ca, &x)?;
                next
            }
            NsVariant::Cubic => {
                let mut next = gram.matmul(&x)?.scale(-0.5);
                next.axpy(1.5, &x)?;
                next
            }
        };
    }
    Ok(if transposed { x.transpose() } else { x })
}

/// Exact polar factor from the Jacobi SVD. Directions with singular value
/// below `1e-12 * s_max` are dropped, so rank-deficient inputs map to a
/// partial isometry.
pub fn polar_exact(a: &Matrix) -> Result<Matrix> {
    let svd = jacobi_svd(a)?;
    let s = svd.s.data();
    if s[0] == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let keep = s.iter().take_while(|&&v| v > 1e-12 * s[0]).count();
    let (m, n) = a.shape();
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..keep {
                acc += svd.u[(i, k)] * svd.vt[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// `sign` with `sign(0) = 0`.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Linear minimization oracle for group `g`. A zero input yields zero.
pub fn lmo(g: GroupId, b: &Param, opts: &LmoOptions) -> Result<Param> {
    if !g.accepts(b.shape()) {
        return Err(Error::Shape(format!(
            "group {} cannot take shape {}",
            g.name(),
            b.shape()
        )));
    }
    if b.is_zero() {
        return Ok(Param::zeros(b.shape()));
    }
    match (g, b) {
        (GroupId::Hidden, Param::Matrix(m)) => {
            let scale = (m.rows() as f64 / m.cols() as f64).sqrt();
            let polar = if opts.oracle_polar {
                polar_exact(m)?
            } else {
                newton_schulz(m, opts.ns_steps, opts.ns_variant)?
            };
            Ok(Param::Matrix(polar.scale(-scale)))
        }
        (GroupId::EmbeddingHead, Param::Matrix(m)) => {
            let inv = 1.0 / m.cols() as f64;
            Ok(Param::Matrix(m.map(|v| -inv * sign0(v))))
        }
        (GroupId::VectorNorm, Param::Vector(v)) => {
            let scale = (v.dim() as f64).sqrt() / v.norm2();
            Ok(Param::Vector(Vector::new(
                v.data().iter().map(|x| -scale * x).collect(),
            )))
        }
        _ => unreachable!("arity checked above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthonormal;
    use crate::norms::{dual_norm, primal_norm, EmbeddingDual};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn cubic_on_identity_follows_scalar_map() {
        // Oracle: I / sqrt(2) evolves entrywise under x <- 1.5x - 0.5x^3.
        let mut x = 1.0 / 2f64.sqrt();
        for _ in 0..5 {
            x = 1.5 * x - 0.5 * x * x * x;
        }
        let out = newton_schulz(&Matrix::identity(2), 5, NsVariant::Cubic).unwrap();
        assert!((out[(0, 0)] - x).abs() < 1e-14);
        assert!(close(&out, &Matrix::identity(2), 2e-4));
    }

    #[test]
    fn cubic_residual_monotone_towards_orthogonal() {
        let q = random_orthonormal(5, 5, &mut Xoshiro256PlusPlus::seed_from_u64(9));
        let a = q.scale(7.0);
        let mut prev = f64::INFINITY;
        for steps in 1..=12 {
            let out = newton_schulz(&a, steps, NsVariant::Cubic).unwrap();
            let r = frobenius_norm(&out.sub(&q).unwrap());
            assert!(r <= prev + 1e-14, "residual grew at step {steps}: {r} > {prev}");
            prev = r;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn quintic_diag_singular_values_in_envelope() {
        let out = newton_schulz(&Matrix::from_diag(&[2.0, 0.5]), DEFAULT_NS_STEPS, NsVariant::Quintic).unwrap();
        let s = jacobi_svd(&out).unwrap().s;
        let (lo, hi) = ns_envelope(4.0).unwrap();
        for &v in s.data() {
            assert!(v >= lo && v <= hi, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn newton_schulz_rejects_zero_and_preserves_shape() {
        assert!(matches!(
            newton_schulz(&Matrix::zeros(2, 2), 5, NsVariant::Quintic),
            Err(Error::ZeroMatrix)
        ));
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        for (r, c) in [(3, 7), (7, 3)] {
            let out = newton_schulz(&Matrix::gaussian(r, c, &mut rng), 5, NsVariant::Quintic).unwrap();
            assert_eq!(out.shape(), (r, c));
        }
    }

    #[test]
    fn newton_schulz_exact_under_power_of_two_scaling() {
        let a = Matrix::gaussian(6, 4, &mut Xoshiro256PlusPlus::seed_from_u64(3));
        let base = newton_schulz(&a, 5, NsVariant::Quintic).unwrap();
        for c in [0.125, 2.0, 1024.0] {
            assert_eq!(newton_schulz(&a.scale(c), 5, NsVariant::Quintic).unwrap(), base);
        }
    }

    #[test]
    fn newton_schulz_scale_invariant_to_rounding() {
        let a = Matrix::gaussian(6, 4, &mut Xoshiro256PlusPlus::seed_from_u64(3));
        let base = newton_schulz(&a, 5, NsVariant::Quintic).unwrap();
        for c in [1e-3, 7.0, 1e3] {
            let scaled = newton_schulz(&a.scale(c), 5, NsVariant::Quintic).unwrap();
            assert!(close(&scaled, &base, 1e-12));
        }
    }

    #[test]
    fn polar_examples() {
        assert!(close(
            &polar_exact(&Matrix::from_diag(&[3.0, 4.0])).unwrap(),
            &Matrix::identity(2),
            1e-12
        ));
        let rot = Matrix::from_rows(&[[0.0, -2.0], [2.0, 0.0]]);
        let expect = Matrix::from_rows(&[[0.0, -1.0], [1.0, 0.0]]);
        assert!(close(&polar_exact(&rot).unwrap(), &expect, 1e-12));
        let (u, v) = ([0.6, 0.8], [0.8, -0.6]);
        let outer = Matrix::from_rows(&[[u[0] * v[0], u[0] * v[1]], [u[1] * v[0], u[1] * v[1]]]);
        assert!(close(&polar_exact(&outer).unwrap(), &outer, 1e-12));
    }

    #[test]
    fn lmo_examples() {
        let exact = LmoOptions::exact();
        let b = Param::Matrix(Matrix::from_diag(&[2.0, 0.5]));
        let out = lmo(GroupId::Hidden, &b, &exact).unwrap();
        assert!(close(out.as_matrix().unwrap(), &Matrix::identity(2).scale(-1.0), 1e-12));

        let b = Param::Matrix(Matrix::from_rows(&[[2.0, -3.0], [0.0, 1.0]]));
        let out = lmo(GroupId::EmbeddingHead, &b, &exact).unwrap();
        assert_eq!(out.data(), &[-0.5, 0.5, 0.0, -0.5]);

        let b = Param::Vector(Vector::new(vec![3.0, 4.0]));
        let out = lmo(GroupId::VectorNorm, &b, &exact).unwrap();
        let r2 = 2f64.sqrt();
        assert!((out.data()[0] + 0.6 * r2).abs() < 1e-12);
        assert!((out.data()[1] + 0.8 * r2).abs() < 1e-12);
    }

    #[test]
    fn lmo_zero_and_shape_errors() {
        let opts = LmoOptions::default();
        let z = Param::zeros(crate::param::Shape::Matrix(3, 2));
        assert_eq!(lmo(GroupId::Hidden, &z, &opts).unwrap(), z);
        let v = Param::Vector(Vector::new(vec![1.0, 2.0]));
        assert!(matches!(lmo(GroupId::Hidden, &v, &opts), Err(Error::Shape(_))));
    }

    #[test]
    fn lmo_unit_norm_pairing_and_sign_flip() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(77);
        let opts = LmoOptions::exact();
        for g in GroupId::ALL {
            for _ in 0..50 {
                let shape = match g {
                    GroupId::VectorNorm => crate::param::Shape::Vector(6),
                    _ => crate::param::Shape::Matrix(5, 3),
                };
                let b = Param::gaussian(shape, &mut rng);
                let o = lmo(g, &b, &opts).unwrap();
                assert!((primal_norm(g, &o).unwrap() - 1.0).abs() < 1e-9);
                let dual = dual_norm(g, &b, EmbeddingDual::Default).unwrap();
                assert!((b.dot(&o).unwrap() + dual).abs() <= 1e-9 * dual);
                assert_eq!(lmo(g, &b.scale(-1.0), &opts).unwrap(), o.scale(-1.0));
            }
        }
    }
}
