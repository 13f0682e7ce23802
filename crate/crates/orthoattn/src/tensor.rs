//! Minimal dense tensor: row-major `f64` storage plus the handful of
//! operations the attention math needs.
//!
//! Reductions accumulate strictly left to right in storage order, with no
//! reassociation, so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// I.i.d. standard-normal entries drawn from `rng`.
    pub fn randn(rng: &mut Rng, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.standard_normal()).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterpret with a new shape of equal volume.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// self += alpha * other, elementwise.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "axpy {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty shape list".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::InvalidShape(format!("zero dimension in {shape:?}")));
        }
        n = n.checked_mul(d).ok_or_else(|| {
            Error::InvalidShape(format!("shape {shape:?} overflows usize"))
        })?;
    }
    Ok(n)
}

/// Standard matrix product of two 2-D tensors.
///
/// Each output element accumulates over the inner dimension in index
/// order, so the result is bitwise deterministic.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul needs 2-D operands, got {ash:?} and {bsh:?}"
        )));
    }
    let (m, k) = (ash[0], ash[1]);
    let (k2, n) = (bsh[0], bsh[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims: {ash:?} x {bsh:?}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Matrix-vector product: (m x k) * (k,) -> (m,).
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let ash = a.shape();
    if ash.len() != 2 || ash[1] != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "matvec {:?} x vector of {}",
            ash,
            x.len()
        )));
    }
    let (m, k) = (ash[0], ash[1]);
    let mut out = vec![0.0; m];
    for i in 0..m {
        out[i] = dot_slices(&a.data[i * k..(i + 1) * k], x);
    }
    Ok(out)
}

/// Inner product of two flat tensors, accumulated left to right.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "dot lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_slices(&a.data, &b.data))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn zeros_has_expected_volume() {
        let t = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        assert_eq!(Tensor::zeros(&[1]).unwrap().len(), 1);
        assert_eq!(Tensor::zeros(&[3, 2, 2]).unwrap().len(), 12);
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(matches!(
            Tensor::zeros(&[]),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::zeros(&[2, 0]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(&mut Rng::from_seed(0), &[4]).unwrap();
        let b = Tensor::randn(&mut Rng::from_seed(0), &[4]).unwrap();
        assert_eq!(a.data(), b.data());
        let c = Tensor::randn(&mut Rng::from_seed(1), &[4]).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn randn_moments_near_standard_normal() {
        // Law-of-large-numbers oracle: n = 10000 gives se(mean) = 0.01 and
        // se(var) ~ 0.014, well inside the asserted windows.
        let t = Tensor::randn(&mut Rng::from_seed(0), &[10000]).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = Rng::from_seed(42);
        let a = Tensor::randn(&mut rng, &[5, 7]).unwrap();
        let b = Tensor::randn(&mut rng, &[7, 3]).unwrap();
        let c = matmul(&a, &b).unwrap();
        // Independent oracle: naive i-j-k loops.
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for k in 0..7 {
                    want += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                let got = c.data()[i * 3 + j];
                assert!((got - want).abs() <= 1e-12, "({i},{j}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[4, 2]).unwrap();
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn dot_basics() {
        let e1 = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let e2 = Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(dot(&e1, &e2).unwrap(), 0.0);
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(dot(&a, &b).unwrap(), 11.0);
        assert!(dot(&e1, &a).is_err());
    }

    #[test]
    fn dot_matches_naive_sum_on_length_64() {
        let mut rng = Rng::from_seed(9);
        let a = Tensor::randn(&mut rng, &[64]).unwrap();
        let b = Tensor::randn(&mut rng, &[64]).unwrap();
        let mut want = 0.0;
        for k in 0..64 {
            want += a.data()[k] * b.data()[k];
        }
        assert!((dot(&a, &b).unwrap() - want).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn dot_is_symmetric(len in 1usize..32, seed in 0u64..500) {
            let mut rng = Rng::from_seed(seed);
            let a = Tensor::randn(&mut rng, &[len]).unwrap();
            let b = Tensor::randn(&mut rng, &[len]).unwrap();
            // Fixed left-to-right accumulation makes symmetry exact.
            prop_assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
        }

        #[test]
        fn seeded_pipelines_are_bitwise_identical(seed in 0u64..500) {
            let run = |s: u64| {
                let mut rng = Rng::from_seed(s);
                let a = Tensor::randn(&mut rng, &[4, 6]).unwrap();
                let b = Tensor::randn(&mut rng, &[6, 3]).unwrap();
                matmul(&a, &b).unwrap()
            };
            let (a, b) = (run(seed), run(seed));
            prop_assert_eq!(a.data(), b.data());
        }

        #[test]
        fn public_ops_keep_values_finite(seed in 0u64..200) {
            let mut rng = Rng::from_seed(seed);
            let a = Tensor::randn(&mut rng, &[3, 5]).unwrap();
            let b = Tensor::randn(&mut rng, &[5, 2]).unwrap();
            prop_assert!(a.all_finite() && b.all_finite());
            prop_assert!(matmul(&a, &b).unwrap().all_finite());
        }
    }
}
