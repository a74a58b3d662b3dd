use super::{counter, numel_of, BackwardRule, Tensor};
use crate::error::{Error, Result};

/// Adapts a closure into a [`BackwardRule`].
pub struct FnRule<F>(pub F);

impl<F> BackwardRule for FnRule<F>
where
    F: Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync,
{
    fn backward(&self, inputs: &[Tensor], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        (self.0)(inputs, output, grad)
    }
}

/// Wraps a closure as a backward rule for [`Tensor::from_op`].
pub fn rule<F>(f: F) -> FnRule<F>
where
    F: Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync,
{
    FnRule(f)
}

/// `c (+)= op(a) · op(b)`, with `a` logically `m×k` and `b` logically `k×n`.
/// Transposed operands are read through strides, never copied.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // row-major (or transposed row-major) layouts inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            rule(|_, _, g| vec![Some(g.to_vec())]),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            zip_map(self.data(), other.data(), |x, y| x + y),
            vec![self.clone(), other.clone()],
            rule(|_, _, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            zip_map(self.data(), other.data(), |x, y| x - y),
            vec![self.clone(), other.clone()],
            rule(|_, _, g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            zip_map(self.data(), other.data(), |x, y| x * y),
            vec![self.clone(), other.clone()],
            rule(|inputs, _, g| {
                let (a, b) = (&inputs[0], &inputs[1]);
                vec![
                    a.requires_grad()
                        .then(|| zip_map(g, b.data(), |g, y| g * y)),
                    b.requires_grad()
                        .then(|| zip_map(g, a.data(), |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            self.data().iter().map(|v| v * factor).collect(),
            vec![self.clone()],
            rule(move |_, _, g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            self.data().iter().map(|v| v + value).collect(),
            vec![self.clone()],
            rule(|_, _, g| vec![Some(g.to_vec())]),
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![self.data().iter().sum()],
            vec![self.clone()],
            rule(move |_, _, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            self.data().iter().map(|&v| v.max(0.0)).collect(),
            vec![self.clone()],
            rule(|inputs, _, g| {
                vec![Some(zip_map(g, inputs[0].data(), |g, x| {
                    if x > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    /// Logistic function.
    pub fn sigmoid(&self) -> Tensor {
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            self.data().iter().map(|&v| logistic(v)).collect(),
            vec![self.clone()],
            rule(|_, out, g| vec![Some(zip_map(g, out, |g, y| g * y * (1.0 - y)))]),
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[p, q], &[q2, r]) = (self.shape(), other.shape()) else {
            return Err(Error::dim(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        };
        if q != q2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![0.0; p * r];
        gemm(
            p,
            q,
            r,
            self.data(),
            false,
            other.data(),
            false,
            &mut out,
            false,
        );
        counter::add((p * q * r) as u64);
        Ok(Tensor::from_op(
            "matmul",
            vec![p, r],
            out,
            vec![self.clone(), other.clone()],
            rule(move |inputs, _, g| {
                let (a, b) = (&inputs[0], &inputs[1]);
                let da = a.requires_grad().then(|| {
                    let mut da = vec![0.0; p * q];
                    gemm(p, r, q, g, false, b.data(), true, &mut da, false);
                    da
                });
                let db = b.requires_grad().then(|| {
                    let mut db = vec![0.0; q * r];
                    gemm(q, p, r, a.data(), true, g, false, &mut db, false);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let &[rows, cols] = self.shape() else {
            return Err(Error::dim(format!(
                "transpose needs rank 2, got {:?}",
                self.shape()
            )));
        };
        Ok(Tensor::from_op(
            "transpose",
            vec![cols, rows],
            transpose_data(self.data(), rows, cols),
            vec![self.clone()],
            rule(move |_, _, g| vec![Some(transpose_data(g, cols, rows))]),
        ))
    }

    /// Softmax along `axis`, computed in max-subtracted form.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0.0; self.numel()];
        let x = self.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| x[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            rule(move |_, y, g| {
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `out[i] = self[indices[i]]` over flat storage.
    pub fn gather(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != indices.len() {
            return Err(Error::dim(format!(
                "gather: {} indices cannot fill shape {shape:?}",
                indices.len()
            )));
        }
        let n = self.numel();
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let data = indices.iter().map(|&i| self.data()[i]).collect();
        Ok(Tensor::from_op(
            "gather",
            shape.to_vec(),
            data,
            vec![self.clone()],
            rule(move |_, _, g| {
                let mut dx = vec![0.0; n];
                for (&i, &gv) in indices.iter().zip(g) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `out[indices[i]] += self[i]`, starting from zeros of `shape`.
    pub fn scatter_add(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        if indices.len() != self.numel() {
            return Err(Error::dim(format!(
                "scatter_add: {} indices for {} elements",
                indices.len(),
                self.numel()
            )));
        }
        let n = numel_of(shape);
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!(
                "scatter index {bad} out of range for shape {shape:?}"
            )));
        }
        let mut out = vec![0.0; n];
        for (&i, &v) in indices.iter().zip(self.data()) {
            out[i] += v;
        }
        Ok(Tensor::from_op(
            "scatter_add",
            shape.to_vec(),
            out,
            vec![self.clone()],
            rule(move |_, _, g| vec![Some(indices.iter().map(|&i| g[i]).collect())]),
        ))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[1..] != tail {
                return Err(Error::dim(format!(
                    "concat: trailing extents {:?} and {:?} differ",
                    first.shape(),
                    p.shape()
                )));
            }
            lead += p.shape()[0];
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(numel_of(&shape));
        let sizes: Vec<usize> = parts.iter().map(Tensor::numel).collect();
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            rule(move |_, _, g| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let part = g[offset..offset + s].to_vec();
                        offset += s;
                        Some(part)
                    })
                    .collect()
            }),
        ))
    }

    /// Multiplies every row of an `n×c` tensor element-wise by a length-`c` vector.
    pub fn mul_rows(&self, v: &Tensor) -> Result<Tensor> {
        let (n, c) = rows_and_vector("mul_rows", self, v)?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(v.data()).for_each(|(a, b)| *a *= b);
        }
        Ok(Tensor::from_op(
            "mul_rows",
            vec![n, c],
            out,
            vec![self.clone(), v.clone()],
            rule(move |inputs, _, g| {
                let (a, v) = (&inputs[0], &inputs[1]);
                let da = a.requires_grad().then(|| {
                    let mut da = g.to_vec();
                    for row in da.chunks_mut(c) {
                        row.iter_mut().zip(v.data()).for_each(|(x, y)| *x *= y);
                    }
                    da
                });
                let dv = v.requires_grad().then(|| {
                    let mut dv = vec![0.0; c];
                    for (grow, arow) in g.chunks(c).zip(a.data().chunks(c)) {
                        for j in 0..c {
                            dv[j] += grow[j] * arow[j];
                        }
                    }
                    dv
                });
                vec![da, dv]
            }),
        ))
    }

    /// Adds a length-`c` vector to every row of an `n×c` tensor.
    pub fn add_rows(&self, v: &Tensor) -> Result<Tensor> {
        let (n, c) = rows_and_vector("add_rows", self, v)?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
        }
        Ok(Tensor::from_op(
            "add_rows",
            vec![n, c],
            out,
            vec![self.clone(), v.clone()],
            rule(move |inputs, _, g| {
                let dv = inputs[1].requires_grad().then(|| {
                    let mut dv = vec![0.0; c];
                    for grow in g.chunks(c) {
                        dv.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                    dv
                });
                vec![Some(g.to_vec()), dv]
            }),
        ))
    }
}

fn rows_and_vector(op: &str, t: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let &[n, c] = t.shape() else {
        return Err(Error::dim(format!(
            "{op} needs a rank-2 tensor, got {:?}",
            t.shape()
        )));
    };
    if v.numel() != c {
        return Err(Error::dim(format!(
            "{op}: vector of shape {:?} does not match {c} columns",
            v.shape()
        )));
    }
    Ok((n, c))
}

pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
