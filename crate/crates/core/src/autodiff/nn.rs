//! Parameterized building blocks: affine maps, Mish MLPs and the recurrent cells.

use rand::Rng;

use super::ops::gru_cell;
use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tape::{Graph, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn uniform_init<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[d_in, d_out], d_in));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform_init(rng, &[d_out], d_in)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>, AutodiffError> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        x.affine(w, b)
    }
}

/// Affine layers with Mish between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, rng, &format!("{name}.{i}"), d[0], d[1], true))
            .collect();
        Self { layers }
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        mut x: Var<'g, T>,
    ) -> Result<Var<'g, T>, AutodiffError> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = x.mish();
            }
        }
        Ok(x)
    }
}

/// Input-to-hidden and hidden-to-hidden maps for the reset, update and
/// candidate gates, stored as column blocks `[reset | update | candidate]`.
#[derive(Clone, Debug)]
pub struct GruCellParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruCellParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let h3 = 3 * hidden;
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform_init(rng, &[d_in, h3], d_in)),
            w_hh: store.add(format!("{name}.w_hh"), uniform_init(rng, &[hidden, h3], hidden)),
            b_ih: store.add(format!("{name}.b_ih"), uniform_init(rng, &[h3], d_in)),
            b_hh: store.add(format!("{name}.b_hh"), uniform_init(rng, &[h3], hidden)),
            d_in,
            hidden,
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        h_prev: Var<'g, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>, AutodiffError> {
        gru_cell(
            x,
            h_prev,
            g.param(store, self.w_ih),
            g.param(store, self.w_hh),
            g.param(store, self.b_ih),
            g.param(store, self.b_hh),
        )
    }
}

/// LSTM cell with column blocks `[input | forget | candidate | output]`,
/// composed from elementary recorded ops.
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let h4 = 4 * hidden;
        Self {
            w_ih: store.add(format!("{name}.w_ih"), uniform_init(rng, &[d_in, h4], d_in)),
            w_hh: store.add(format!("{name}.w_hh"), uniform_init(rng, &[hidden, h4], hidden)),
            b: store.add(format!("{name}.b"), uniform_init(rng, &[h4], hidden)),
            d_in,
            hidden,
        }
    }

    /// One step from `(h, c)`; returns the new `(h, c)`.
    pub fn forward<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        state: (Var<'g, T>, Var<'g, T>),
        x: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>), AutodiffError> {
        let (h, c) = state;
        let z = x
            .affine(g.param(store, self.w_ih), Some(g.param(store, self.b)))?
            .add(h.affine(g.param(store, self.w_hh), None)?)?;
        let k = self.hidden;
        let i = z.narrow_last(0, k)?.sigmoid();
        let f = z.narrow_last(k, k)?.sigmoid();
        let cand = z.narrow_last(2 * k, k)?.tanh();
        let o = z.narrow_last(3 * k, k)?.sigmoid();
        let c = f.mul(c)?.add(i.mul(cand)?)?;
        let h = o.mul(c.tanh())?;
        Ok((h, c))
    }
}
