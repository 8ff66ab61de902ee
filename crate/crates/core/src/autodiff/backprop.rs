//! Vector-Jacobian products for every [`Op`].

use super::real::Real;
use super::scalar::{mish_grad, sigmoid};
use super::tape::{Node, Op, PairDims};
use super::tensor::Tensor;

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], into: usize, from: usize, g: Tensor<T>) {
    assert!(
        into < from,
        "cycle in computation record: node {from} consumes node {into}"
    );
    if !nodes[into].needs_grad {
        return;
    }
    match &mut grads[into] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn like<T: Real>(node: &Node<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::from_vec(node.value.shape(), data).expect("gradient shaped like its value")
}

fn elementwise<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    a: usize,
    g: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) {
    if !nodes[a].needs_grad {
        return;
    }
    let x = nodes[a].value.data();
    let y = nodes[id].value.data();
    let data = g.data().iter().zip(x).zip(y).map(|((&g, &x), &y)| f(g, x, y)).collect();
    let t = like(&nodes[a], data);
    accumulate(nodes, grads, a, id, t);
}

pub(crate) fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[id];
    let one = T::one();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Linear { x, w, b } => {
            let (x, w) = (*x, *w);
            let wv = &nodes[w].value;
            let (din, dout) = (wv.shape()[0], wv.shape()[1]);
            let rows = g.len() / dout;
            if nodes[x].needs_grad {
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(rows, dout, din, g.data(), false, wv.data(), true, T::zero(), &mut dx);
                accumulate(nodes, grads, x, id, like(&nodes[x], dx));
            }
            if nodes[w].needs_grad {
                let mut dw = vec![T::zero(); din * dout];
                T::gemm(
                    din,
                    rows,
                    dout,
                    nodes[x].value.data(),
                    true,
                    g.data(),
                    false,
                    T::zero(),
                    &mut dw,
                );
                accumulate(nodes, grads, w, id, like(&nodes[w], dw));
            }
            if let Some(b) = *b {
                if nodes[b].needs_grad {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(nodes, grads, b, id, like(&nodes[b], db));
                }
            }
        }
        &Op::BatchMatMul { a, b, batch, m, k, n } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            if nodes[a].needs_grad {
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        true,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                accumulate(nodes, grads, a, id, like(&nodes[a], da));
            }
            if nodes[b].needs_grad {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        true,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        false,
                        T::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                accumulate(nodes, grads, b, id, like(&nodes[b], db));
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, id, g.clone());
            accumulate(nodes, grads, b, id, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, id, g.clone());
            if nodes[b].needs_grad {
                accumulate(nodes, grads, b, id, g.map(|v| -v));
            }
        }
        &Op::Mul(a, b) => {
            if nodes[a].needs_grad {
                let d = g
                    .data()
                    .iter()
                    .zip(nodes[b].value.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                accumulate(nodes, grads, a, id, like(&nodes[a], d));
            }
            if nodes[b].needs_grad {
                let d = g
                    .data()
                    .iter()
                    .zip(nodes[a].value.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                accumulate(nodes, grads, b, id, like(&nodes[b], d));
            }
        }
        &Op::Scale(a, s) => {
            if nodes[a].needs_grad {
                accumulate(nodes, grads, a, id, g.map(|v| v * s));
            }
        }
        &Op::Sigmoid(a) => elementwise(nodes, grads, id, a, g, |g, _, y| g * y * (one - y)),
        &Op::Tanh(a) => elementwise(nodes, grads, id, a, g, |g, _, y| g * (one - y * y)),
        &Op::Mish(a) => elementwise(nodes, grads, id, a, g, |g, x, _| g * mish_grad(x)),
        &Op::Softplus(a) => elementwise(nodes, grads, id, a, g, |g, x, _| g * sigmoid(x)),
        &Op::LeakyRelu(a, slope) => elementwise(
            nodes,
            grads,
            id,
            a,
            g,
            |g, x, _| if x > T::zero() { g } else { g * slope },
        ),
        &Op::Sqrt(a) => elementwise(nodes, grads, id, a, g, |g, _, y| g / (y + y)),
        &Op::Exp(a) => elementwise(nodes, grads, id, a, g, |g, _, y| g * y),
        &Op::Log(a) => elementwise(nodes, grads, id, a, g, |g, x, _| g / x),
        Op::ConcatLast(parts) => {
            let widths: Vec<usize> = parts.iter().map(|&p| nodes[p].value.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if nodes[p].needs_grad {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, id, like(&nodes[p], d));
                }
                offset += w;
            }
        }
        &Op::NarrowLast { a, start } => {
            if nodes[a].needs_grad {
                let c = nodes[a].value.last_dim();
                let w = node.value.last_dim();
                let mut d = vec![T::zero(); nodes[a].value.len()];
                for (r, row) in g.data().chunks(w).enumerate() {
                    d[r * c + start..r * c + start + w].copy_from_slice(row);
                }
                accumulate(nodes, grads, a, id, like(&nodes[a], d));
            }
        }
        Op::Stack(parts) => {
            let each = g.len() / parts.len();
            for (k, &p) in parts.iter().enumerate() {
                if nodes[p].needs_grad {
                    let d = g.data()[k * each..(k + 1) * each].to_vec();
                    accumulate(nodes, grads, p, id, like(&nodes[p], d));
                }
            }
        }
        &Op::Reshape(a) => {
            if nodes[a].needs_grad {
                accumulate(nodes, grads, a, id, like(&nodes[a], g.data().to_vec()));
            }
        }
        Op::GatherRows { a, index } => {
            let a = *a;
            if nodes[a].needs_grad {
                let c = nodes[a].value.last_dim();
                let mut d = vec![T::zero(); nodes[a].value.len()];
                for (k, &r) in index.iter().enumerate() {
                    for (dst, &src) in d[r * c..(r + 1) * c].iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *dst += src;
                    }
                }
                accumulate(nodes, grads, a, id, like(&nodes[a], d));
            }
        }
        &Op::Softmax(a) => {
            if nodes[a].needs_grad {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut d = vec![T::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.data().chunks(c)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = yv * (gv - dot);
                    }
                }
                accumulate(nodes, grads, a, id, like(&nodes[a], d));
            }
        }
        &Op::SameTimeScores {
            keys,
            queries,
            dims,
            scale,
        } => same_time_scores_backward(nodes, grads, id, keys, queries, dims, scale, g),
        &Op::TimeWeightedSum { weights, values, dims } => {
            time_weighted_sum_backward(nodes, grads, id, weights, values, dims, g)
        }
        Op::Gru(s) => {
            let hv = &nodes[s.h].value;
            let xv = &nodes[s.x].value;
            let hid = hv.last_dim();
            let din = xv.last_dim();
            let rows = hv.rows();
            let h3 = 3 * hid;
            let mut dgi = vec![T::zero(); rows * h3];
            let mut dgh = vec![T::zero(); rows * h3];
            let mut dh = vec![T::zero(); rows * hid];
            let hd = hv.data();
            for row in 0..rows {
                for c in 0..hid {
                    let k = row * hid + c;
                    let gv = g.data()[k];
                    let (r, z, n, hn) = (s.r[k], s.z[k], s.n[k], s.ghn[k]);
                    let dn = gv * (one - z);
                    let dz = gv * (hd[k] - n);
                    dh[k] = gv * z;
                    let dan = dn * (one - n * n);
                    let dr = dan * hn;
                    let dar = dr * r * (one - r);
                    let daz = dz * z * (one - z);
                    let base = row * h3;
                    dgi[base + c] = dar;
                    dgi[base + hid + c] = daz;
                    dgi[base + 2 * hid + c] = dan;
                    dgh[base + c] = dar;
                    dgh[base + hid + c] = daz;
                    dgh[base + 2 * hid + c] = dan * r;
                }
            }
            if nodes[s.x].needs_grad {
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(
                    rows,
                    h3,
                    din,
                    &dgi,
                    false,
                    nodes[s.w_ih].value.data(),
                    true,
                    T::zero(),
                    &mut dx,
                );
                accumulate(nodes, grads, s.x, id, like(&nodes[s.x], dx));
            }
            if nodes[s.h].needs_grad {
                T::gemm(
                    rows,
                    h3,
                    hid,
                    &dgh,
                    false,
                    nodes[s.w_hh].value.data(),
                    true,
                    T::one(),
                    &mut dh,
                );
                accumulate(nodes, grads, s.h, id, like(&nodes[s.h], dh));
            }
            if nodes[s.w_ih].needs_grad {
                let mut dw = vec![T::zero(); din * h3];
                T::gemm(din, rows, h3, xv.data(), true, &dgi, false, T::zero(), &mut dw);
                accumulate(nodes, grads, s.w_ih, id, like(&nodes[s.w_ih], dw));
            }
            if nodes[s.w_hh].needs_grad {
                let mut dw = vec![T::zero(); hid * h3];
                T::gemm(hid, rows, h3, hd, true, &dgh, false, T::zero(), &mut dw);
                accumulate(nodes, grads, s.w_hh, id, like(&nodes[s.w_hh], dw));
            }
            for (bias, src) in [(s.b_ih, &dgi), (s.b_hh, &dgh)] {
                if nodes[bias].needs_grad {
                    let mut db = vec![T::zero(); h3];
                    for row in src.chunks(h3) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(nodes, grads, bias, id, like(&nodes[bias], db));
                }
            }
        }
        &Op::GaussianNll {
            target,
            mean,
            var,
            scale,
        } => {
            let gs = g.data()[0] * scale;
            let y = nodes[target].value.data();
            let mu = nodes[mean].value.data();
            let s2 = nodes[var].value.data();
            let half = T::from_f64(0.5);
            let dmu: Vec<T> = y
                .iter()
                .zip(mu)
                .zip(s2)
                .map(|((&y, &m), &v)| gs * (m - y) / v)
                .collect();
            if nodes[var].needs_grad {
                let dv = y
                    .iter()
                    .zip(mu)
                    .zip(s2)
                    .map(|((&y, &m), &v)| {
                        let r = y - m;
                        gs * (half / v - r * r * half / (v * v))
                    })
                    .collect();
                accumulate(nodes, grads, var, id, like(&nodes[var], dv));
            }
            if nodes[target].needs_grad {
                let dy = dmu.iter().map(|&v| -v).collect();
                accumulate(nodes, grads, target, id, like(&nodes[target], dy));
            }
            if nodes[mean].needs_grad {
                accumulate(nodes, grads, mean, id, like(&nodes[mean], dmu));
            }
        }
        &Op::SumAll(a) => {
            if nodes[a].needs_grad {
                accumulate(nodes, grads, a, id, Tensor::full(nodes[a].value.shape(), g.data()[0]));
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn same_time_scores_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    keys: usize,
    queries: usize,
    dims: PairDims,
    scale: T,
    g: &Tensor<T>,
) {
    let PairDims {
        steps,
        batch,
        agents: n,
        heads,
        head_dim: dh,
    } = dims;
    let w = dims.width();
    let (kd, qd) = (nodes[keys].value.data(), nodes[queries].value.data());
    let mut dk = vec![T::zero(); kd.len()];
    let mut dq = vec![T::zero(); qd.len()];
    for t in 0..steps {
        for b in 0..batch {
            let base = (t * batch + b) * n * w;
            for i in 0..n {
                for j in 0..n {
                    for m in 0..heads {
                        let gs = g.data()[(((b * n + i) * n + j) * heads + m) * steps + t] * scale;
                        let ki = base + i * w + m * dh;
                        let qj = base + j * w + m * dh;
                        for d in 0..dh {
                            dk[ki + d] += gs * qd[qj + d];
                            dq[qj + d] += gs * kd[ki + d];
                        }
                    }
                }
            }
        }
    }
    if nodes[keys].needs_grad {
        accumulate(nodes, grads, keys, id, like(&nodes[keys], dk));
    }
    if nodes[queries].needs_grad {
        accumulate(nodes, grads, queries, id, like(&nodes[queries], dq));
    }
}

fn time_weighted_sum_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    weights: usize,
    values: usize,
    dims: PairDims,
    g: &Tensor<T>,
) {
    let PairDims {
        steps,
        batch,
        agents: n,
        heads,
        head_dim: dh,
    } = dims;
    let w = dims.width();
    let (wd, vd) = (nodes[weights].value.data(), nodes[values].value.data());
    let mut dw = vec![T::zero(); wd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    for b in 0..batch {
        for i in 0..n {
            for j in 0..n {
                for m in 0..heads {
                    let grow = ((b * n + i) * n + j) * w + m * dh;
                    let wrow = (((b * n + i) * n + j) * heads + m) * steps;
                    for t in 0..steps {
                        let vrow = ((t * batch + b) * n + j) * w + m * dh;
                        let a = wd[wrow + t];
                        let mut acc = T::zero();
                        for d in 0..dh {
                            let gv = g.data()[grow + d];
                            acc += gv * vd[vrow + d];
                            dv[vrow + d] += gv * a;
                        }
                        dw[wrow + t] = acc;
                    }
                }
            }
        }
    }
    if nodes[weights].needs_grad {
        accumulate(nodes, grads, weights, id, like(&nodes[weights], dw));
    }
    if nodes[values].needs_grad {
        accumulate(nodes, grads, values, id, like(&nodes[values], dv));
    }
}
