//! Elementwise, reduction, and small linear-algebra operations.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{strides_of, Tensor};

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "{op}: axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    Ok(())
}

// Binary ops return `Result` on shape mismatch, so they stay inherent methods
// rather than operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let id = self.id();
        let y_saved = Rc::clone(&y);
        self.tape().push_op(
            y,
            &[id],
            Box::new(move |g, sink| {
                let slot = sink.slot(id);
                for (((s, &gi), &xi), &yi) in
                    slot.iter_mut().zip(g).zip(x.data()).zip(y_saved.data())
                {
                    *s += gi * df(xi, yi);
                }
            }),
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// ln(1 + e^x), evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(move |x| factor * x, move |_, _| factor)
    }

    pub fn add_scalar(self, offset: f64) -> Var<'t> {
        self.unary(move |x| x + offset, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        check_same_shape(&a, &b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_raw(a.shape().to_vec(), data);
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().push_op(
            Rc::new(out),
            &[ia, ib],
            Box::new(move |g, sink| {
                sink.accumulate(ia, g);
                sink.accumulate(ib, g);
            }),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        check_same_shape(&a, &b, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_raw(a.shape().to_vec(), data);
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().push_op(
            Rc::new(out),
            &[ia, ib],
            Box::new(move |g, sink| {
                sink.accumulate(ia, g);
                if sink.wants(ib) {
                    for (s, gi) in sink.slot(ib).iter_mut().zip(g) {
                        *s -= gi;
                    }
                }
            }),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        check_same_shape(&a, &b, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_raw(a.shape().to_vec(), data);
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().push_op(
            Rc::new(out),
            &[ia, ib],
            Box::new(move |g, sink| {
                if sink.wants(ia) {
                    for ((s, gi), bi) in sink.slot(ia).iter_mut().zip(g).zip(b.data()) {
                        *s += gi * bi;
                    }
                }
                if sink.wants(ib) {
                    for ((s, gi), ai) in sink.slot(ib).iter_mut().zip(g).zip(a.data()) {
                        *s += gi * ai;
                    }
                }
            }),
        ))
    }

    /// Elementwise product with a fixed tensor.
    pub fn mul_const(self, constant: &Tensor) -> Result<Var<'t>> {
        self.mul(self.tape().constant(constant.clone()))
    }

    pub fn add_const(self, constant: &Tensor) -> Result<Var<'t>> {
        self.add(self.tape().constant(constant.clone()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let id = self.id();
        Ok(self.tape().push_op(
            Rc::new(out),
            &[id],
            Box::new(move |g, sink| sink.accumulate(id, g)),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let total = compensated_sum(x.data());
        let id = self.id();
        self.tape().push_op(
            Rc::new(Tensor::scalar(total)),
            &[id],
            Box::new(move |g, sink| {
                for s in sink.slot(id) {
                    *s += g[0];
                }
            }),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        for &a in axes {
            check_axis(&shape, a, "sum_axes")?;
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
        let out_strides = strides_of(&out_shape);
        // Stride of each input axis in the output index (0 for reduced axes).
        let mut mapped = vec![0usize; shape.len()];
        for (k, &d) in keep.iter().enumerate() {
            mapped[d] = out_strides[k];
        }
        let index_map = Rc::new(flat_index_map(&shape, &mapped));
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_numel];
        for (v, &o) in x.data().iter().zip(index_map.iter()) {
            out[o] += v;
        }
        let id = self.id();
        Ok(self.tape().push_op(
            Rc::new(Tensor::from_raw(out_shape, out)),
            &[id],
            Box::new(move |g, sink| {
                for (s, &o) in sink.slot(id).iter_mut().zip(index_map.iter()) {
                    *s += g[o];
                }
            }),
        ))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        for &a in axes {
            check_axis(&shape, a, "mean_axes")?;
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    /// Euclidean norm of all entries. The gradient at the zero vector is taken as zero.
    pub fn l2_norm(self) -> Var<'t> {
        let x = self.value();
        let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let id = self.id();
        self.tape().push_op(
            Rc::new(Tensor::scalar(norm)),
            &[id],
            Box::new(move |g, sink| {
                if norm == 0.0 {
                    return;
                }
                for (s, xi) in sink.slot(id).iter_mut().zip(x.data()) {
                    *s += g[0] * xi / norm;
                }
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis(&shape, axis, "softmax")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|k| x.data()[base + k * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x.data()[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    total += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= total;
                }
            }
        }
        let y = Rc::new(Tensor::from_raw(shape, out));
        let y_saved = Rc::clone(&y);
        let id = self.id();
        Ok(self.tape().push_op(
            y,
            &[id],
            Box::new(move |g, sink| {
                let y = y_saved.data();
                let slot = sink.slot(id);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|k| g[base + k * inner] * y[base + k * inner])
                            .sum();
                        for k in 0..len {
                            let at = base + k * inner;
                            slot[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            }),
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base_shape = values[0].shape().to_vec();
        check_axis(&base_shape, axis, "concat")?;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let s = v.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {:?} incompatible with {:?}",
                    s, base_shape
                )));
            }
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total_width: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total_width);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = widths.iter().sum::<usize>() / inner;
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        let ids_saved = ids.clone();
        Ok(first.tape().push_op(
            Rc::new(Tensor::from_raw(out_shape, out)),
            &ids,
            Box::new(move |g, sink| {
                let mut offset = 0;
                for (&id, &w) in ids_saved.iter().zip(&widths) {
                    if sink.wants(id) {
                        let slot = sink.slot(id);
                        for o in 0..outer {
                            let src = &g[o * total_width + offset..o * total_width + offset + w];
                            for (s, gi) in slot[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *s += gi;
                            }
                        }
                    }
                    offset += w;
                }
            }),
        ))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: cannot multiply {:?} by {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        let (ia, ib) = (self.id(), other.id());
        Ok(self.tape().push_op(
            Rc::new(Tensor::from_raw(vec![m, n], out)),
            &[ia, ib],
            Box::new(move |g, sink| {
                if sink.wants(ia) {
                    // dA = G · Bᵀ
                    let slot = sink.slot(ia);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * b.data()[p * n + j];
                            }
                            slot[i * k + p] += acc;
                        }
                    }
                }
                if sink.wants(ib) {
                    // dB = Aᵀ · G
                    let slot = sink.slot(ib);
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a.data()[i * k + p];
                            for j in 0..n {
                                slot[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }),
        ))
    }

    pub fn transpose2d(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::shape(format!("transpose2d on shape {:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let id = self.id();
        Ok(self.tape().push_op(
            Rc::new(Tensor::from_raw(vec![c, r], out)),
            &[id],
            Box::new(move |g, sink| {
                let slot = sink.slot(id);
                for i in 0..r {
                    for j in 0..c {
                        slot[i * c + j] += g[j * r + i];
                    }
                }
            }),
        ))
    }

    /// Cosine similarity between every row of a `[rows, k]` matrix and a `[k]`
    /// vector. Rows whose norm product is at most `eps` yield 0 with zero gradient.
    pub fn cosine_rows(self, vector: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&vector)?;
        let (m, v) = (self.value(), vector.value());
        if m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.shape()[0] {
            return Err(Error::shape(format!(
                "cosine_rows: matrix {:?} vs vector {:?}",
                m.shape(),
                v.shape()
            )));
        }
        let (rows, k) = (m.shape()[0], m.shape()[1]);
        let v_norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut out = vec![0.0; rows];
        let mut row_norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &m.data()[r * k..(r + 1) * k];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row_norms[r] = norm;
            if norm * v_norm > eps {
                let dot: f64 = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
                out[r] = dot / (norm * v_norm);
            }
        }
        let out = Rc::new(Tensor::from_raw(vec![rows], out));
        let cos = Rc::clone(&out);
        let (im, iv) = (self.id(), vector.id());
        Ok(self.tape().push_op(
            out,
            &[im, iv],
            Box::new(move |g, sink| {
                let want_m = sink.wants(im);
                let want_v = sink.wants(iv);
                let mut dv = vec![0.0; k];
                for r in 0..rows {
                    let norm = row_norms[r];
                    if norm * v_norm <= eps {
                        continue;
                    }
                    let c = cos.data()[r];
                    let row = &m.data()[r * k..(r + 1) * k];
                    let scale = g[r] / (norm * v_norm);
                    if want_m {
                        let slot = &mut sink.slot(im)[r * k..(r + 1) * k];
                        for ((s, &vi), &ri) in slot.iter_mut().zip(v.data()).zip(row) {
                            *s += scale * vi - g[r] * c * ri / (norm * norm);
                        }
                    }
                    if want_v {
                        for ((d, &vi), &ri) in dv.iter_mut().zip(v.data()).zip(row) {
                            *d += scale * ri - g[r] * c * vi / (v_norm * v_norm);
                        }
                    }
                }
                if want_v {
                    sink.accumulate(iv, &dv);
                }
            }),
        ))
    }

    /// Euclidean distances between all pairs of rows of a `[rows, k]` matrix.
    /// Coincident rows have zero gradient.
    pub fn pairwise_distances(self) -> Result<Var<'t>> {
        let m = self.value();
        if m.rank() != 2 {
            return Err(Error::shape(format!(
                "pairwise_distances on shape {:?}",
                m.shape()
            )));
        }
        let (rows, k) = (m.shape()[0], m.shape()[1]);
        let mut out = vec![0.0; rows * rows];
        for a in 0..rows {
            for b in (a + 1)..rows {
                let d = (0..k)
                    .map(|j| {
                        let t = m.data()[a * k + j] - m.data()[b * k + j];
                        t * t
                    })
                    .sum::<f64>()
                    .sqrt();
                out[a * rows + b] = d;
                out[b * rows + a] = d;
            }
        }
        let out = Rc::new(Tensor::from_raw(vec![rows, rows], out));
        let dist = Rc::clone(&out);
        let id = self.id();
        Ok(self.tape().push_op(
            out,
            &[id],
            Box::new(move |g, sink| {
                let slot = sink.slot(id);
                for a in 0..rows {
                    for b in 0..rows {
                        let d = dist.data()[a * rows + b];
                        if a == b || d == 0.0 {
                            continue;
                        }
                        // Entry (a, b) moves row a along (row_a - row_b) / d.
                        let coeff = g[a * rows + b] / d;
                        for j in 0..k {
                            let diff = m.data()[a * k + j] - m.data()[b * k + j];
                            slot[a * k + j] += coeff * diff;
                            slot[b * k + j] -= coeff * diff;
                        }
                    }
                }
            }),
        ))
    }

    /// Mean binary cross-entropy of predictions in (0, 1) against a fixed
    /// target. Predictions are clamped to `[eps, 1 - eps]`; clamped entries pass
    /// no gradient.
    pub fn binary_cross_entropy(self, target: &Tensor, eps: f64) -> Result<Var<'t>> {
        let p = self.value();
        check_same_shape(&p, target, "binary_cross_entropy")?;
        let n = p.numel() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pi, &ti)| {
                let q = pi.clamp(eps, 1.0 - eps);
                -(ti * q.ln() + (1.0 - ti) * (1.0 - q).ln())
            })
            .sum();
        let target = target.clone();
        let id = self.id();
        Ok(self.tape().push_op(
            Rc::new(Tensor::scalar(total / n)),
            &[id],
            Box::new(move |g, sink| {
                let slot = sink.slot(id);
                for ((s, &pi), &ti) in slot.iter_mut().zip(p.data()).zip(target.data()) {
                    if pi <= eps || pi >= 1.0 - eps {
                        continue;
                    }
                    *s += g[0] * (pi - ti) / (pi * (1.0 - pi)) / n;
                }
            }),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// (product of dims before axis, axis length, product of dims after axis)
/// Neumaier summation: error bounded by a few ulp of the result, independent of length.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For every flat input index, the flat output index under `mapped_strides`.
fn flat_index_map(shape: &[usize], mapped_strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; shape.len()];
    let mut current = 0usize;
    for _ in 0..numel {
        map.push(current);
        for d in (0..shape.len()).rev() {
            counter[d] += 1;
            current += mapped_strides[d];
            if counter[d] < shape[d] {
                break;
            }
            current -= mapped_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}
