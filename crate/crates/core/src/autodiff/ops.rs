//! Forward definitions of every recorded operation.

use super::real::Real;
use super::scalar::{mish, sigmoid, softplus};
use super::tape::{GruSaved, Op, PairDims, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Additive logit used to exclude a slot from a softmax or a sigmoid gate.
pub const MASK_VALUE: f64 = -10000.0;

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::Shape(msg)
}

fn same_graph<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(
        std::ptr::eq(a.graph, b.graph),
        "operands belong to different computation records"
    );
}

impl<'g, T: Real> Var<'g, T> {
    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let out = self.value().map(f);
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(out, op, needs)
    }

    fn zip(self, other: Var<'g, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>, AutodiffError> {
        same_graph(&self, &other);
        let out = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() {
                return Err(shape_err(format!(
                    "elementwise operands differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(a.shape(), data)?
        };
        let needs = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(out, op, needs))
    }

    /// `x W + b` over the trailing axis: `x [.., in]`, `W [in, out]`, `b [out]`.
    pub fn affine(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>, AutodiffError> {
        same_graph(&self, &w);
        let out = {
            let x = self.value();
            let wv = w.value();
            if wv.shape().len() != 2 || x.last_dim() != wv.shape()[0] {
                return Err(shape_err(format!(
                    "affine input {:?} does not match weights {:?}",
                    x.shape(),
                    wv.shape()
                )));
            }
            let (rows, din, dout) = (x.rows(), wv.shape()[0], wv.shape()[1]);
            let mut y = vec![T::zero(); rows * dout];
            if let Some(b) = &b {
                same_graph(&self, b);
                let bv = b.value();
                if bv.len() != dout {
                    return Err(shape_err(format!("bias {:?} for output width {dout}", bv.shape())));
                }
                for row in y.chunks_mut(dout) {
                    row.copy_from_slice(bv.data());
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            T::gemm(rows, din, dout, x.data(), false, wv.data(), false, beta, &mut y);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = dout;
            Tensor::from_vec(&shape, y)?
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let needs = self.graph.needs(&ids);
        Ok(self.graph.push(
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            needs,
        ))
    }

    /// Batched product `[batch, m, k] x [batch, k, n] -> [batch, m, n]`.
    pub fn bmm(self, other: Var<'g, T>) -> Result<Var<'g, T>, AutodiffError> {
        same_graph(&self, &other);
        let (out, batch, m, k, n) = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(shape_err(format!("bmm operands {sa:?} x {sb:?}")));
            }
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut c = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    T::zero(),
                    &mut c[i * m * n..(i + 1) * m * n],
                );
            }
            (Tensor::from_vec(&[batch, m, n], c)?, batch, m, k, n)
        };
        let needs = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(
            out,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>, AutodiffError> {
        self.zip(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>, AutodiffError> {
        self.zip(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>, AutodiffError> {
        self.zip(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    /// `x * tanh(softplus(x))`.
    pub fn mish(self) -> Var<'g, T> {
        self.unary(Op::Mish(self.id), mish)
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.unary(
            Op::LeakyRelu(self.id, slope),
            move |x| if x > T::zero() { x } else { x * slope },
        )
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(Op::Log(self.id), |x| x.ln())
    }

    pub fn sum(self) -> Var<'g, T> {
        let s = self.value().sum();
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id), needs)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>, AutodiffError> {
        let out = self.value().clone().reshaped(shape)?;
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(out, Op::Reshape(self.id), needs))
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn narrow_last(self, start: usize, len: usize) -> Result<Var<'g, T>, AutodiffError> {
        let out = {
            let a = self.value();
            let c = a.last_dim();
            if start + len > c {
                return Err(shape_err(format!("narrow {start}+{len} past width {c}")));
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for row in a.data().chunks(c) {
                data.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_vec(&shape, data)?
        };
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(out, Op::NarrowLast { a: self.id, start }, needs))
    }

    /// Rows of the `[rows, width]` view picked by `index`, reshaped to `shape`.
    pub fn gather_rows(self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'g, T>, AutodiffError> {
        let out = {
            let a = self.value();
            let c = a.last_dim();
            let rows = a.rows();
            let mut data = Vec::with_capacity(index.len() * c);
            for &r in &index {
                if r >= rows {
                    return Err(shape_err(format!("row {r} out of {rows}")));
                }
                data.extend_from_slice(&a.data()[r * c..(r + 1) * c]);
            }
            Tensor::from_vec(shape, data)?
        };
        if out.last_dim() != self.value().last_dim() {
            return Err(shape_err("gather_rows must keep the trailing width".into()));
        }
        let needs = self.graph.needs(&[self.id]);
        Ok(self.graph.push(out, Op::GatherRows { a: self.id, index }, needs))
    }

    /// Softmax over the trailing axis with slots flagged in `excluded`
    /// (same length as the tensor) shifted by [`MASK_VALUE`].
    pub fn masked_softmax(self, excluded: Option<&[bool]>) -> Result<Var<'g, T>, AutodiffError> {
        let mut logits = self;
        if let Some(mask) = excluded {
            let (shape, c) = {
                let v = self.value();
                if mask.len() != v.len() {
                    return Err(shape_err(format!("mask of {} for tensor of {}", mask.len(), v.len())));
                }
                (v.shape().to_vec(), v.last_dim())
            };
            if mask.chunks(c).any(|row| row.iter().all(|&m| m)) {
                return Err(AutodiffError::DegenerateRow);
            }
            let add: Vec<T> = mask
                .iter()
                .map(|&m| if m { T::from_f64(MASK_VALUE) } else { T::zero() })
                .collect();
            let add = self.graph.constant(Tensor::from_vec(&shape, add)?);
            logits = self.add(add)?;
        }
        Ok(logits.softmax_last())
    }

    pub fn softmax_last(self) -> Var<'g, T> {
        let out = {
            let a = self.value();
            let c = a.last_dim();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(c) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            Tensor::from_vec(a.shape(), data).expect("same shape")
        };
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(out, Op::Softmax(self.id), needs)
    }

    /// Same-time multi-head scores `k_i^t . q_j^t * scale`, one per
    /// (sample, i, j, head, step).
    pub fn same_time_scores(self, queries: Var<'g, T>, dims: PairDims, scale: T) -> Result<Var<'g, T>, AutodiffError> {
        same_graph(&self, &queries);
        let out = {
            let k = self.value();
            let q = queries.value();
            if k.len() != dims.value_len() || q.len() != dims.value_len() {
                return Err(shape_err(format!("pair attention layout {dims:?} vs {:?}", k.shape())));
            }
            let PairDims {
                steps,
                batch,
                agents: n,
                heads,
                head_dim: dh,
            } = dims;
            let w = dims.width();
            let mut s = vec![T::zero(); dims.score_len()];
            let (kd, qd) = (k.data(), q.data());
            for t in 0..steps {
                for b in 0..batch {
                    let base = (t * batch + b) * n * w;
                    for i in 0..n {
                        for j in 0..n {
                            for m in 0..heads {
                                let ki = &kd[base + i * w + m * dh..base + i * w + (m + 1) * dh];
                                let qj = &qd[base + j * w + m * dh..base + j * w + (m + 1) * dh];
                                let dot: T = ki.iter().zip(qj).map(|(&a, &c)| a * c).sum();
                                s[(((b * n + i) * n + j) * heads + m) * steps + t] = dot * scale;
                            }
                        }
                    }
                }
            }
            self.graph.count_scores(dims.score_len() as u64);
            Tensor::from_vec(&[batch, n, n, heads, steps], s)?
        };
        let needs = self.graph.needs(&[self.id, queries.id]);
        Ok(self.graph.push(
            out,
            Op::SameTimeScores {
                keys: self.id,
                queries: queries.id,
                dims,
                scale,
            },
            needs,
        ))
    }

    /// `out[b,i,j,head] = sum_t weights[b,i,j,head,t] * values[t,b,j,head]`.
    pub fn time_weighted_sum(self, values: Var<'g, T>, dims: PairDims) -> Result<Var<'g, T>, AutodiffError> {
        same_graph(&self, &values);
        let out = {
            let wt = self.value();
            let v = values.value();
            if wt.len() != dims.score_len() || v.len() != dims.value_len() {
                return Err(shape_err(format!("time-weighted sum layout {dims:?}")));
            }
            let PairDims {
                steps,
                batch,
                agents: n,
                heads,
                head_dim: dh,
            } = dims;
            let w = dims.width();
            let mut o = vec![T::zero(); batch * n * n * w];
            let (wd, vd) = (wt.data(), v.data());
            for b in 0..batch {
                for i in 0..n {
                    for j in 0..n {
                        for m in 0..heads {
                            let orow = ((b * n + i) * n + j) * w + m * dh;
                            let wrow = (((b * n + i) * n + j) * heads + m) * steps;
                            for t in 0..steps {
                                let a = wd[wrow + t];
                                let vrow = ((t * batch + b) * n + j) * w + m * dh;
                                for d in 0..dh {
                                    o[orow + d] += a * vd[vrow + d];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_vec(&[batch, n, n, w], o)?
        };
        let needs = self.graph.needs(&[self.id, values.id]);
        Ok(self.graph.push(
            out,
            Op::TimeWeightedSum {
                weights: self.id,
                values: values.id,
                dims,
            },
            needs,
        ))
    }

    /// Gaussian negative log-likelihood
    /// `scale * sum(0.5 ln(2 var) + (target - mean)^2 / (2 var))`.
    pub fn gaussian_nll(self, mean: Var<'g, T>, var: Var<'g, T>, scale: T) -> Result<Var<'g, T>, AutodiffError> {
        same_graph(&self, &mean);
        same_graph(&self, &var);
        let total = {
            let y = self.value();
            let mu = mean.value();
            let s2 = var.value();
            if y.shape() != mu.shape() || y.shape() != s2.shape() {
                return Err(shape_err(format!(
                    "nll operands {:?} {:?} {:?}",
                    y.shape(),
                    mu.shape(),
                    s2.shape()
                )));
            }
            let half = T::from_f64(0.5);
            let two = T::from_f64(2.0);
            let mut acc = T::zero();
            for ((&y, &m), &v) in y.data().iter().zip(mu.data()).zip(s2.data()) {
                if !(v > T::zero()) {
                    return Err(AutodiffError::Domain(format!("variance {v} is not positive")));
                }
                let r = y - m;
                acc += half * (two * v).ln() + r * r / (two * v);
            }
            acc * scale
        };
        let needs = self.graph.needs(&[self.id, mean.id, var.id]);
        Ok(self.graph.push(
            Tensor::scalar(total),
            Op::GaussianNll {
                target: self.id,
                mean: mean.id,
                var: var.id,
                scale,
            },
            needs,
        ))
    }
}

/// Concatenation along the trailing axis; all parts share their leading shape.
pub fn concat_last<'g, T: Real>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>, AutodiffError> {
    let g = parts
        .first()
        .ok_or_else(|| shape_err("concat of nothing".into()))?
        .graph;
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        let lead = &vals[0].shape()[..vals[0].shape().len() - 1];
        for v in &vals {
            if v.rows() != rows || &v.shape()[..v.shape().len() - 1] != lead {
                return Err(shape_err(format!("concat {:?} with {:?}", vals[0].shape(), v.shape())));
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::from_vec(&shape, data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = g.needs(&ids);
    Ok(g.push(out, Op::ConcatLast(ids), needs))
}

/// Stacks equally shaped parts along a new leading axis.
pub fn stack<'g, T: Real>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>, AutodiffError> {
    let g = parts.first().ok_or_else(|| shape_err("stack of nothing".into()))?.graph;
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let shape0 = vals[0].shape().to_vec();
        let mut data = Vec::with_capacity(vals.len() * vals[0].len());
        for v in &vals {
            if v.shape() != shape0.as_slice() {
                return Err(shape_err(format!("stack {shape0:?} with {:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![vals.len()];
        shape.extend(shape0);
        Tensor::from_vec(&shape, data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = g.needs(&ids);
    Ok(g.push(out, Op::Stack(ids), needs))
}

/// One fused GRU update on `[rows, in]` inputs and `[rows, hidden]` state.
///
/// Weight columns are laid out `[reset | update | candidate]`:
/// `r = sig(x Wr + br + h Ur + cr)`, `z = sig(x Wz + bz + h Uz + cz)`,
/// `n = tanh(x Wn + bn + r * (h Un + cn))`, `h' = (1 - z) n + z h`.
pub fn gru_cell<'g, T: Real>(
    x: Var<'g, T>,
    h: Var<'g, T>,
    w_ih: Var<'g, T>,
    w_hh: Var<'g, T>,
    b_ih: Var<'g, T>,
    b_hh: Var<'g, T>,
) -> Result<Var<'g, T>, AutodiffError> {
    let g = x.graph;
    for v in [&h, &w_ih, &w_hh, &b_ih, &b_hh] {
        same_graph(&x, v);
    }
    let (out, r, z, n, ghn) = {
        let (xv, hv, wi, wh, bi, bh) = (
            x.value(),
            h.value(),
            w_ih.value(),
            w_hh.value(),
            b_ih.value(),
            b_hh.value(),
        );
        let rows = xv.rows();
        let din = xv.last_dim();
        let hid = hv.last_dim();
        let ok = hv.rows() == rows
            && wi.shape() == [din, 3 * hid]
            && wh.shape() == [hid, 3 * hid]
            && bi.len() == 3 * hid
            && bh.len() == 3 * hid;
        if !ok {
            return Err(shape_err(format!(
                "gru x {:?} h {:?} w_ih {:?} w_hh {:?}",
                xv.shape(),
                hv.shape(),
                wi.shape(),
                wh.shape()
            )));
        }
        let h3 = 3 * hid;
        let mut gi = vec![T::zero(); rows * h3];
        let mut gh = vec![T::zero(); rows * h3];
        for row in gi.chunks_mut(h3) {
            row.copy_from_slice(bi.data());
        }
        for row in gh.chunks_mut(h3) {
            row.copy_from_slice(bh.data());
        }
        T::gemm(rows, din, h3, xv.data(), false, wi.data(), false, T::one(), &mut gi);
        T::gemm(rows, hid, h3, hv.data(), false, wh.data(), false, T::one(), &mut gh);
        let mut r = vec![T::zero(); rows * hid];
        let mut z = vec![T::zero(); rows * hid];
        let mut n = vec![T::zero(); rows * hid];
        let mut ghn = vec![T::zero(); rows * hid];
        let mut out = vec![T::zero(); rows * hid];
        let hd = hv.data();
        for row in 0..rows {
            let gir = &gi[row * h3..(row + 1) * h3];
            let ghr = &gh[row * h3..(row + 1) * h3];
            for c in 0..hid {
                let k = row * hid + c;
                let rv = sigmoid(gir[c] + ghr[c]);
                let zv = sigmoid(gir[hid + c] + ghr[hid + c]);
                let hn = ghr[2 * hid + c];
                let nv = (gir[2 * hid + c] + rv * hn).tanh();
                r[k] = rv;
                z[k] = zv;
                n[k] = nv;
                ghn[k] = hn;
                out[k] = (T::one() - zv) * nv + zv * hd[k];
            }
        }
        (Tensor::from_vec(hv.shape(), out)?, r, z, n, ghn)
    };
    let needs = g.needs(&[x.id, h.id, w_ih.id, w_hh.id, b_ih.id, b_hh.id]);
    Ok(g.push(
        out,
        Op::Gru(Box::new(GruSaved {
            x: x.id,
            h: h.id,
            w_ih: w_ih.id,
            w_hh: w_hh.id,
            b_ih: b_ih.id,
            b_hh: b_hh.id,
            r,
            z,
            n,
            ghn,
        })),
        needs,
    ))
}
