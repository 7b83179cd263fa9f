//! Per-group norms.
//!
//! | group          | primal norm                  | dual norm                          |
//! |----------------|------------------------------|------------------------------------|
//! | Hidden         | RMS -> RMS operator norm     | `sqrt(d_out/d_in) * nuclear`       |
//! | EmbeddingHead  | 1 -> inf operator-style norm | `(1/d_in) * sum |x_ij|` (default)  |
//! | VectorNorm     | RMS norm                     | `sqrt(d) * ||x||_2`                |
//!
//! The default EmbeddingHead dual is the exact dual of the norm whose unit-ball
//! extreme point is `-(1/d_in) sign(W)`. The max-column-sum (1 -> 1 induced)
//! variant is available through [`EmbeddingDual::Alternate`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, singular_values, Matrix, Vector};
use crate::param::{Param, Shape};

/// Parameter group; selects the norm, its dual and the LMO.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupId {
    Hidden,
    EmbeddingHead,
    VectorNorm,
}

impl GroupId {
    pub const ALL: [GroupId; 3] = [GroupId::Hidden, GroupId::EmbeddingHead, GroupId::VectorNorm];

    pub fn name(&self) -> &'static str {
        match self {
            GroupId::Hidden => "hidden",
            GroupId::EmbeddingHead => "embedding_head",
            GroupId::VectorNorm => "vector_norm",
        }
    }

    /// Whether `shape` has the arity this group expects.
    pub fn accepts(&self, shape: Shape) -> bool {
        matches!(
            (self, shape),
            (GroupId::Hidden | GroupId::EmbeddingHead, Shape::Matrix(..)) | (GroupId::VectorNorm, Shape::Vector(_))
        )
    }
}

/// Which dual norm the EmbeddingHead group reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingDual {
    /// `(1/d_in) * entrywise l1`; pairs exactly with the sign LMO.
    #[default]
    Default,
    /// Max absolute column sum.
    Alternate,
}

pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.iter().sum())
}

/// `(1/sqrt(d)) * ||w||_2`
pub fn rms_norm(w: &Vector) -> f64 {
    w.norm2() / (w.dim() as f64).sqrt()
}

fn expect_matrix(g: GroupId, x: &Param) -> Result<&Matrix> {
    x.as_matrix()
        .ok_or_else(|| Error::Shape(format!("group {} expects a matrix, got shape {}", g.name(), x.shape())))
}

fn expect_vector(g: GroupId, x: &Param) -> Result<&Vector> {
    x.as_vector()
        .ok_or_else(|| Error::Shape(format!("group {} expects a vector, got shape {}", g.name(), x.shape())))
}

/// Dual norm of `x` under group `g`'s geometry.
pub fn dual_norm(g: GroupId, x: &Param, embedding: EmbeddingDual) -> Result<f64> {
    match g {
        GroupId::Hidden => {
            let m = expect_matrix(g, x)?;
            let scale = (m.rows() as f64 / m.cols() as f64).sqrt();
            Ok(scale * nuclear_norm(m)?)
        }
        GroupId::EmbeddingHead => {
            let m = expect_matrix(g, x)?;
            match embedding {
                EmbeddingDual::Default => {
                    let l1: f64 = m.data().iter().map(|v| v.abs()).sum();
                    Ok(l1 / m.cols() as f64)
                }
                EmbeddingDual::Alternate => Ok((0..m.cols())
                    .map(|j| (0..m.rows()).map(|i| m[(i, j)].abs()).sum::<f64>())
                    .fold(0.0, f64::max)),
            }
        }
        GroupId::VectorNorm => {
            let v = expect_vector(g, x)?;
            Ok((v.dim() as f64).sqrt() * v.norm2())
        }
    }
}

/// Primal norm whose unit ball the group's LMO searches.
///
/// Hidden: `sqrt(d_in/d_out) * spectral`; EmbeddingHead: `d_in * max|x_ij|`;
/// VectorNorm: RMS norm.
pub fn primal_norm(g: GroupId, x: &Param) -> Result<f64> {
    match g {
        GroupId::Hidden => {
            let m = expect_matrix(g, x)?;
            let scale = (m.cols() as f64 / m.rows() as f64).sqrt();
            Ok(scale * singular_values(m)?[0])
        }
        GroupId::EmbeddingHead => {
            let m = expect_matrix(g, x)?;
            Ok(m.cols() as f64 * m.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
        }
        GroupId::VectorNorm => Ok(rms_norm(expect_vector(g, x)?)),
    }
}

/// Frobenius norm of a matrix or Euclidean norm of a vector.
pub fn euclidean_norm(x: &Param) -> f64 {
    match x {
        Param::Matrix(m) => frobenius_norm(m),
        Param::Vector(v) => v.norm2(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::jacobi_svd;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn m(rows: &[[f64; 2]]) -> Param {
        Param::Matrix(Matrix::from_rows(rows))
    }

    #[test]
    fn nuclear_examples() {
        assert!((nuclear_norm(&Matrix::from_diag(&[3.0, 4.0])).unwrap() - 7.0).abs() < 1e-12);
        let u = [0.6, 0.8];
        let v = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let outer = Matrix::from_rows(&[[u[0] * v[0], u[0] * v[1]], [u[1] * v[0], u[1] * v[1]]]);
        assert!((nuclear_norm(&outer).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nuclear_matches_svd_sum() {
        let a = Matrix::gaussian(6, 4, &mut Xoshiro256PlusPlus::seed_from_u64(64));
        let s: f64 = jacobi_svd(&a).unwrap().s.data().iter().sum();
        assert_eq!(nuclear_norm(&a).unwrap(), s);
    }

    #[test]
    fn dual_norm_examples() {
        let d = EmbeddingDual::Default;
        let hidden = dual_norm(GroupId::Hidden, &m(&[[3.0, 0.0], [0.0, 4.0]]), d).unwrap();
        assert!((hidden - 7.0).abs() < 1e-12);
        let x = m(&[[1.0, -2.0], [3.0, 4.0]]);
        assert_eq!(dual_norm(GroupId::EmbeddingHead, &x, d).unwrap(), 5.0);
        assert_eq!(
            dual_norm(GroupId::EmbeddingHead, &x, EmbeddingDual::Alternate).unwrap(),
            6.0
        );
        let v = Param::Vector(Vector::new(vec![3.0, 4.0]));
        assert!((dual_norm(GroupId::VectorNorm, &v, d).unwrap() - 2f64.sqrt() * 5.0).abs() < 1e-12);
    }

    #[test]
    fn dual_norm_rejects_wrong_arity() {
        let v = Param::Vector(Vector::new(vec![1.0]));
        assert!(matches!(
            dual_norm(GroupId::Hidden, &v, EmbeddingDual::Default),
            Err(Error::Shape(_))
        ));
        let mat = m(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(dual_norm(GroupId::VectorNorm, &mat, EmbeddingDual::Default).is_err());
    }

    #[test]
    fn rms_examples() {
        assert!((rms_norm(&Vector::new(vec![3.0, 4.0])) - 5.0 / 2f64.sqrt()).abs() < 1e-12);
        for d in [1, 5, 17] {
            assert!((rms_norm(&Vector::new(vec![1.0; d])) - 1.0).abs() < 1e-15);
        }
        assert_eq!(rms_norm(&Vector::zeros(4)), 0.0);
    }

    #[test]
    fn zero_input_has_zero_dual() {
        for g in GroupId::ALL {
            let shape = if g == GroupId::VectorNorm {
                Shape::Vector(3)
            } else {
                Shape::Matrix(3, 2)
            };
            assert_eq!(dual_norm(g, &Param::zeros(shape), EmbeddingDual::Default).unwrap(), 0.0);
        }
    }

    fn shape_for(g: GroupId) -> Shape {
        match g {
            GroupId::VectorNorm => Shape::Vector(5),
            _ => Shape::Matrix(4, 3),
        }
    }

    #[test]
    fn triangle_inequality_seeded() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1000);
        for g in GroupId::ALL {
            for _ in 0..1000 {
                let x = Param::gaussian(shape_for(g), &mut rng);
                let y = Param::gaussian(shape_for(g), &mut rng);
                let lhs = dual_norm(g, &x.add(&y).unwrap(), EmbeddingDual::Default).unwrap();
                let rhs = dual_norm(g, &x, EmbeddingDual::Default).unwrap()
                    + dual_norm(g, &y, EmbeddingDual::Default).unwrap();
                assert!(lhs <= rhs * (1.0 + 1e-12), "{g:?}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn nuclear_frobenius_sandwich() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        for (r, c) in [(2, 2), (5, 3), (3, 7)] {
            let a = Matrix::gaussian(r, c, &mut rng);
            let nuc = nuclear_norm(&a).unwrap();
            let fro = frobenius_norm(&a);
            assert!(nuc >= fro - 1e-12);
            assert!(fro >= nuc / (r.min(c) as f64).sqrt() - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn homogeneity(seed in any::<u64>(), c in -50.0f64..50.0, gi in 0usize..3) {
            let g = GroupId::ALL[gi];
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let x = Param::gaussian(shape_for(g), &mut rng);
            for dual in [EmbeddingDual::Default, EmbeddingDual::Alternate] {
                let base = dual_norm(g, &x, dual).unwrap();
                let scaled = dual_norm(g, &x.scale(c), dual).unwrap();
                prop_assert!((scaled - c.abs() * base).abs() <= 1e-12 * (1.0 + c.abs() * base) * 10.0);
            }
        }
    }
}
