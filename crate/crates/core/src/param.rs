//! A layer's parameter block: either a weight matrix or a vector.

use crate::error::{Error, Result};
use crate::linalg::{dot_slices, Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub enum Param {
    Matrix(Matrix),
    Vector(Vector),
}

/// Shape of a parameter block: `(d_out, d_in)` or `(d,)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum Shape {
    Matrix(usize, usize),
    Vector(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Matrix(r, c) => r * c,
            Shape::Vector(d) => d,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Matrix(r, c) => write!(f, "{r}x{c}"),
            Shape::Vector(d) => write!(f, "{d}"),
        }
    }
}

impl Param {
    pub fn zeros(shape: Shape) -> Self {
        match shape {
            Shape::Matrix(r, c) => Param::Matrix(Matrix::zeros(r, c)),
            Shape::Vector(d) => Param::Vector(Vector::zeros(d)),
        }
    }

    pub fn from_flat(shape: Shape, data: Vec<f64>) -> Result<Self> {
        match shape {
            Shape::Matrix(r, c) => Ok(Param::Matrix(Matrix::from_vec(r, c, data)?)),
            Shape::Vector(d) => {
                if data.len() != d {
                    return Err(Error::Shape(format!("vector of dim {d} got {} entries", data.len())));
                }
                Ok(Param::Vector(Vector::new(data)))
            }
        }
    }

    pub fn gaussian<R: rand::Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        match shape {
            Shape::Matrix(r, c) => Param::Matrix(Matrix::gaussian(r, c, rng)),
            Shape::Vector(d) => Param::Vector(Vector::gaussian(d, rng)),
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            Param::Matrix(m) => Shape::Matrix(m.rows(), m.cols()),
            Param::Vector(v) => Shape::Vector(v.dim()),
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            Param::Matrix(m) => m.data(),
            Param::Vector(v) => v.data(),
        }
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Param::Matrix(m) => m.data_mut(),
            Param::Vector(v) => v.data_mut(),
        }
    }

    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            Param::Matrix(m) => Some(m),
            Param::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&Vector> {
        match self {
            Param::Vector(v) => Some(v),
            Param::Matrix(_) => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    pub fn has_nan(&self) -> bool {
        self.data().iter().any(|x| x.is_nan())
    }

    pub fn is_zero(&self) -> bool {
        self.data().iter().all(|&x| x == 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Param {
        let mut out = self.clone();
        out.data_mut().iter_mut().for_each(|x| *x = f(*x));
        out
    }

    pub fn scale(&self, c: f64) -> Param {
        self.map(|x| c * x)
    }

    fn check_shape(&self, other: &Param) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{} vs {}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Param) -> Result<Param> {
        self.check_shape(other)?;
        let mut out = self.clone();
        out.data_mut().iter_mut().zip(other.data()).for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    pub fn add(&self, other: &Param) -> Result<Param> {
        self.check_shape(other)?;
        let mut out = self.clone();
        out.data_mut().iter_mut().zip(other.data()).for_each(|(a, b)| *a += b);
        Ok(out)
    }

    /// `self += c * x`
    pub fn axpy(&mut self, c: f64, x: &Param) -> Result<()> {
        self.check_shape(x)?;
        self.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += c * b);
        Ok(())
    }

    /// Euclidean (Frobenius) inner product.
    pub fn dot(&self, other: &Param) -> Result<f64> {
        self.check_shape(other)?;
        Ok(dot_slices(self.data(), other.data()))
    }

    pub fn frobenius(&self) -> f64 {
        dot_slices(self.data(), self.data()).sqrt()
    }
}

impl From<Matrix> for Param {
    fn from(m: Matrix) -> Self {
        Param::Matrix(m)
    }
}

impl From<Vector> for Param {
    fn from(v: Vector) -> Self {
        Param::Vector(v)
    }
}
