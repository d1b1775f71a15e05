use super::kernels;
use super::rng::RngState;
use crate::error::{contract, Error, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(contract(format!("tensor extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| std * rng.normal()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor; a rank-1 tensor is one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            [c] => Ok((1, c)),
            _ => Err(contract(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: kernels::matmul_nn(&self.data, &other.data, m, k, n),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
        })
    }

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len().max(1) {
            return Err(contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if self.shape.is_empty() {
            return Ok(Tensor::scalar(1.0));
        }
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.clone();
        let mut lane = vec![0.0; extent];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * extent + j) * inner + i;
                for (j, slot) in lane.iter_mut().enumerate() {
                    *slot = self.data[at(j)];
                }
                kernels::softmax_in_place(&mut lane);
                for (j, &v) in lane.iter().enumerate() {
                    out.data[at(j)] = v;
                }
            }
        }
        Ok(out)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(contract(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect())
}

/// Inverted dropout; identity at inference time or when `rate == 0`.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut RngState, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(contract(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data.iter_mut().zip(mask) {
        *v *= m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_b_is_b() {
        let mut rng = RngState::new(1);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(Tensor::identity(3).matmul(&b).unwrap(), b);
    }

    #[test]
    fn one_by_one_product() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngState::new(2);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(brute_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(t.softmax(0).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let got = x.softmax(0).unwrap();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((got.data()[i] - v.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_columns() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![1.0, -5.0]]).unwrap();
        let s = x.softmax(0).unwrap();
        assert_eq!(s.get2(0, 0), 0.5);
        assert!((s.get2(0, 1) + s.get2(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn dropout_identities() {
        let mut rng = RngState::new(4);
        let x = Tensor::randn(&[10, 10], 1.0, &mut rng);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, &mut rng, false).unwrap(), x);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_keep_fraction() {
        let mut rng = RngState::new(9);
        let x = Tensor::filled(&[100_000], 1.0);
        let y = dropout(&x, 0.5, &mut rng, true).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
