use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) const NO_SOURCE: usize = usize::MAX;

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::structural(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn mat<T: Scalar>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor { shape: vec![rows, cols], data }
}

pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(mismatch("matmul", &a.shape, &b.shape));
    }
    let mut c = vec![T::zero(); m * n];
    gemm(&a.data, false, &b.data, false, m, k, n, T::zero(), &mut c);
    Ok(mat(m, n, c))
}

pub(crate) fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = x.dims2()?;
    let (k2, n) = w.dims2()?;
    if k != k2 {
        return Err(mismatch("linear", &x.shape, &w.shape));
    }
    if b.numel() != n {
        return Err(mismatch("linear bias", &w.shape, &b.shape));
    }
    let mut c = Vec::with_capacity(m * n);
    for _ in 0..m {
        c.extend_from_slice(&b.data);
    }
    gemm(&x.data, false, &w.data, false, m, k, n, T::one(), &mut c);
    Ok(mat(m, n, c))
}

pub(crate) fn zip<T: Scalar>(
    op: &str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(mismatch(op, &a.shape, &b.shape));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub(crate) fn map<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

pub(crate) fn add_row<T: Scalar>(a: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = a.dims2()?;
    if r.numel() != c {
        return Err(mismatch("add_row", &a.shape, &r.shape));
    }
    let mut out = a.clone();
    for row in out.data.chunks_mut(c.max(1)) {
        row.iter_mut().zip(&r.data).for_each(|(x, &y)| *x = *x + y);
    }
    Ok(out)
}

/// Sum over rows, giving one value per column.
pub(crate) fn col_sum<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    let c = g.cols();
    let mut out = vec![T::zero(); c];
    for row in g.data.chunks(c.max(1)) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
    }
    out
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::structural("concat of zero tensors"));
    }
    let dims: Vec<(usize, usize)> = parts.iter().map(|p| p.dims2()).collect::<Result<_>>()?;
    match axis {
        0 => {
            let c = dims[0].1;
            if let Some(i) = dims.iter().position(|d| d.1 != c) {
                return Err(mismatch("concat rows", &parts[0].shape, &parts[i].shape));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
            Ok(mat(rows, c, data))
        }
        1 => {
            let r = dims[0].0;
            if let Some(i) = dims.iter().position(|d| d.0 != r) {
                return Err(mismatch("concat cols", &parts[0].shape, &parts[i].shape));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for (p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&p.data[i * d.1..(i + 1) * d.1]);
                }
            }
            Ok(mat(r, cols, data))
        }
        _ => Err(Error::structural(format!("concat axis {axis} not supported for matrices"))),
    }
}

/// Splits a gradient of a concatenation back into per-part gradients.
pub(crate) fn split<T: Scalar>(g: &Tensor<T>, dims: &[(usize, usize)], axis: usize) -> Vec<Tensor<T>> {
    let mut out = Vec::with_capacity(dims.len());
    if axis == 0 {
        let c = g.cols();
        let mut start = 0;
        for &(r, _) in dims {
            out.push(mat(r, c, g.data[start * c..(start + r) * c].to_vec()));
            start += r;
        }
    } else {
        let (r, total) = (g.rows(), g.cols());
        let mut off = 0;
        for &(_, c) in dims {
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                data.extend_from_slice(&g.data[i * total + off..i * total + off + c]);
            }
            out.push(mat(r, c, data));
            off += c;
        }
    }
    out
}

pub(crate) fn gather<T: Scalar>(a: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = a.dims2()?;
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= n {
            return Err(Error::structural(format!("gather index {i} out of {n} rows")));
        }
        data.extend_from_slice(&a.data[i * c..(i + 1) * c]);
    }
    Ok(mat(idx.len(), c, data))
}

pub(crate) fn scatter_add<T: Scalar>(g: &Tensor<T>, idx: &[usize], n: usize) -> Tensor<T> {
    let c = g.cols();
    let mut out = vec![T::zero(); n * c];
    for (r, &i) in idx.iter().enumerate() {
        let dst = &mut out[i * c..(i + 1) * c];
        dst.iter_mut().zip(&g.data[r * c..(r + 1) * c]).for_each(|(o, &x)| *o = *o + x);
    }
    mat(n, c, out)
}

/// Per-segment column-wise max. Empty segments give 0. Also returns, for
/// every output entry, the source row it came from (lowest row on ties).
pub(crate) fn scatter_max<T: Scalar>(
    a: &Tensor<T>,
    seg: &[usize],
    n: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (m, c) = a.dims2()?;
    if seg.len() != m {
        return Err(Error::structural(format!(
            "scatter_max: {} segment ids for {m} rows",
            seg.len()
        )));
    }
    let mut out = vec![T::zero(); n * c];
    let mut arg = vec![NO_SOURCE; n * c];
    for (r, &s) in seg.iter().enumerate() {
        if s >= n {
            return Err(Error::structural(format!("segment id {s} out of {n}")));
        }
        let src = &a.data[r * c..(r + 1) * c];
        for j in 0..c {
            let o = s * c + j;
            if arg[o] == NO_SOURCE || src[j] > out[o] {
                out[o] = src[j];
                arg[o] = r;
            }
        }
    }
    Ok((mat(n, c, out), arg))
}

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    let (r, c) = x.dims2()?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(mismatch("layer_norm", &x.shape, &gamma.shape));
    }
    let cf = T::from_usize(c).expect("width fits");
    let mut y = Vec::with_capacity(r * c);
    let mut xhat = Vec::with_capacity(r * c);
    let mut rstd = Vec::with_capacity(r);
    for row in x.data.chunks(c.max(1)).take(r) {
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / cf;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / cf;
        let rs = (var + T::ln_eps()).sqrt().recip();
        rstd.push(rs);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * rs;
            xhat.push(h);
            y.push(h * gamma.data[j] + beta.data[j]);
        }
    }
    Ok((mat(r, c, y), LayerNormSaved { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    g: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &LayerNormSaved<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (r, c) = (g.rows(), g.cols());
    let cf = T::from_usize(c).expect("width fits");
    let mut dx = Vec::with_capacity(r * c);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut gh = vec![T::zero(); c];
    for i in 0..r {
        let gr = &g.data[i * c..(i + 1) * c];
        let hr = &saved.xhat[i * c..(i + 1) * c];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..c {
            dgamma[j] = dgamma[j] + gr[j] * hr[j];
            dbeta[j] = dbeta[j] + gr[j];
            gh[j] = gr[j] * gamma.data[j];
            s1 = s1 + gh[j];
            s2 = s2 + gh[j] * hr[j];
        }
        let (m1, m2) = (s1 / cf, s2 / cf);
        for j in 0..c {
            dx.push(saved.rstd[i] * (gh[j] - m1 - hr[j] * m2));
        }
    }
    (mat(r, c, dx), dgamma, dbeta)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub(crate) fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape != b.shape {
        return Err(mismatch("mse", &a.shape, &b.shape));
    }
    if a.numel() == 0 {
        return Err(Error::structural("mse of empty tensors"));
    }
    let s = a.data.iter().zip(&b.data).fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
    Ok(s / T::from_usize(a.numel()).expect("count fits"))
}
