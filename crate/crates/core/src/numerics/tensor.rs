use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// Row count when viewed as a matrix; vectors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    // four output rows per pass so each row of b is loaded once per block
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = b[r * cols + c];
        }
    }
    t
}

/// a [m,k] times b^T where b is [n,k].
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_raw(a, &transpose_raw(b, n, k), m, k, n)
}

/// a^T times b where a is [m,k] and b is [m,n]; result [k,n].
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_raw(&transpose_raw(a, m, k), b, k, m, n)
}

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::dim(format!("{what} must be 2-D, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Plain matrix product without gradient tracking.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "lhs")?;
    let (k2, n) = as_matrix(b, "rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("inner dimensions disagree: {m}x{k} times {k2}x{n}")));
    }
    Tensor::matrix(m, n, matmul_raw(&a.data, &b.data, m, k, n))
}

fn max_and_rest(xs: &[f64]) -> (f64, f64) {
    let (arg, max) = xs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, v)| if v > am { (i, v) } else { (ai, am) });
    let rest = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, x)| (x - max).exp())
        .sum::<f64>();
    (max, rest)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let (max, rest) = max_and_rest(xs);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + rest.ln_1p()
}

/// `-log softmax(xs)[t]`, arranged to avoid cancellation when `xs[t]` dominates.
pub(crate) fn neg_log_softmax_at(xs: &[f64], t: usize) -> f64 {
    let (max, rest) = max_and_rest(xs);
    (max - xs[t]) + rest.ln_1p()
}

/// Numerically stable softmax of a single row.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// `-log softmax(logits)[target]` for a logit vector.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    if logits.rows() != 1 {
        return Err(Error::dim(format!("logits must be a vector, got {:?}", logits.shape)));
    }
    if target >= logits.len() {
        return Err(Error::arg(format!("target {target} out of range for {} logits", logits.len())));
    }
    Ok(neg_log_softmax_at(&logits.data, target))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::dim(format!("mse shapes differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    if a.is_empty() {
        return Err(Error::dim("mse of empty tensors"));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i, &v).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn bad_shape_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let u = Tensor::vector(vec![0.3; 4]);
        for t in 0..4 {
            assert!((softmax_cross_entropy(&u, t).unwrap() - 4f64.ln()).abs() < 1e-12);
        }
        let l = Tensor::vector(vec![10.0, -10.0]);
        // ln(1 + e^-20) evaluated independently
        let expected = (-20f64).exp().ln_1p();
        let got = softmax_cross_entropy(&l, 0).unwrap();
        assert!((got - expected).abs() < 1e-18);
        assert!((got - 2.06e-9).abs() < 1e-11);

        let dom = Tensor::vector(vec![0.0, 30.0, 0.0]);
        let v = softmax_cross_entropy(&dom, 1).unwrap();
        assert!(v > 0.0 && v < 1e-12);
        assert!(matches!(softmax_cross_entropy(&dom, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn mse_values() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert!(mse(&a, &Tensor::vector(vec![1.0])).is_err());
    }
}
