//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value is a 2-D array; column vectors are `[n, 1]`, scalars `[1, 1]`.
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! visits each node after all of its consumers.

use std::f64::consts::FRAC_1_SQRT_2;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{Gradients, ParamId, ParamStore};
use super::Real;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Equal-sized token groups that attend only within themselves: `count`
/// groups of `q_len` query rows and `k_len` key/value rows, stored contiguously.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segments {
    pub count: usize,
    pub q_len: usize,
    pub k_len: usize,
}

impl Segments {
    pub fn single(q_len: usize, k_len: usize) -> Self {
        Self {
            count: 1,
            q_len,
            k_len,
        }
    }
}

#[derive(Debug)]
struct AttnCache<T> {
    /// Row-softmaxed queries, per head block of columns.
    q_soft: Array2<T>,
    /// Token-softmaxed keys, per head block of columns.
    k_soft: Array2<T>,
    /// `K~^T V` per (segment, head), each `dh x dh`.
    context: Vec<Array2<T>>,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulCol(Var, Var),
    /// Holds the elementwise derivative when recording.
    Gelu(Var, Option<Array2<T>>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Segments,
        cache: AttnCache<T>,
    },
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    RepeatRows(Var, usize),
    Mse(Var, Array2<T>),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    /// `None` for parameters, whose values live in the store.
    value: Option<Array2<T>>,
}

/// One forward evaluation. Parameters are read from the borrowed store.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    recording: bool,
}

const LN_EPS: f64 = 1e-5;

fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn softmax_rows_inplace<T: Real>(mut a: ndarray::ArrayViewMut2<T>) {
    for mut row in a.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn softmax_cols_inplace<T: Real>(mut a: ndarray::ArrayViewMut2<T>) {
    for mut col in a.columns_mut() {
        let max = col.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        col.mapv_inplace(|v| v / sum);
    }
}

/// Backward of a row softmax: `y * (dy - sum(dy * y))` per row.
fn softmax_rows_backward<T: Real>(y: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
    let mut dx = Array2::zeros(y.dim());
    Zip::from(dx.rows_mut())
        .and(y.rows())
        .and(dy.rows())
        .for_each(|mut dx, y, dy| {
            let dot: T = y.iter().zip(dy.iter()).map(|(&a, &b)| a * b).sum();
            Zip::from(&mut dx)
                .and(&y)
                .and(&dy)
                .for_each(|d, &y, &g| *d = y * (g - dot));
        });
    dx
}

fn softmax_cols_backward<T: Real>(y: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
    softmax_rows_backward(y.t(), dy.t()).reversed_axes()
}

impl<'s, T: Real> Graph<'s, T> {
    /// Graph that records enough state for [`Graph::backward`].
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Forward-only graph; `backward` on it is a state error.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Option<Array2<T>>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id).view(),
            (_, Some(val)) => val.view(),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(Op::Input, Some(value))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), None)
    }

    fn check(&self, cond: bool, what: impl FnOnce() -> String) -> Result<()> {
        if cond {
            Ok(())
        } else {
            Err(Error::Contract(what()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa.1 == sb.0, || format!("matmul {sa:?} x {sb:?}"))?;
        let out = self.value(a).dot(&self.value(b));
        Ok(self.push(Op::MatMul(a, b), Some(out)))
    }

    /// `a + bias` with a `[1, m]` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        self.check(sb.0 == 1 && sa.1 == sb.1, || format!("add_row {sa:?} + {sb:?}"))?;
        let out = &self.value(a) + &self.value(bias);
        Ok(self.push(Op::AddRow(a, bias), Some(out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa == sb, || format!("add {sa:?} + {sb:?}"))?;
        let out = &self.value(a) + &self.value(b);
        Ok(self.push(Op::Add(a, b), Some(out)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa == sb, || format!("sub {sa:?} - {sb:?}"))?;
        let out = &self.value(a) - &self.value(b);
        Ok(self.push(Op::Sub(a, b), Some(out)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        self.push(Op::Scale(a, c), Some(out))
    }

    /// `a * c` with a `[n, 1]` column broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(c));
        self.check(sc.1 == 1 && sa.0 == sc.0, || format!("mul_col {sa:?} * {sc:?}"))?;
        let out = &self.value(a) * &self.value(c);
        Ok(self.push(Op::MulCol(a, c), Some(out)))
    }

    /// Gaussian-error linear unit, exact erf form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if !self.recording {
            let out = x.mapv(gelu);
            return self.push(Op::Gelu(a, None), Some(out));
        }
        let mut out = Array2::zeros(x.dim());
        let mut deriv = Array2::zeros(x.dim());
        Zip::from(&mut out)
            .and(&mut deriv)
            .and(&x)
            .for_each(|o, d, &x| {
                let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(FRAC_1_SQRT_2PI);
                *o = x * cdf;
                *d = cdf + x * pdf;
            });
        self.push(Op::Gelu(a, Some(deriv)), Some(out))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        softmax_rows_inplace(out.view_mut());
        self.push(Op::SoftmaxRows(a), Some(out))
    }

    /// Per-row standardisation followed by learned `gamma`/`beta` (`[1, d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        self.check(sg == (1, sx.1) && sb == sg, || {
            format!("layer_norm {sx:?} with gamma {sg:?} beta {sb:?}")
        })?;
        let d = T::of(sx.1 as f64);
        let mut xhat = self.value(x).to_owned();
        let mut inv_std = Vec::with_capacity(sx.0);
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Some(out),
        ))
    }

    /// Multi-head linear attention without projections.
    ///
    /// Per segment and head: queries are softmaxed over the head's features,
    /// keys over the segment's tokens, and the output is `Q~ (K~^T V)`.
    pub fn linear_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Segments,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        self.check(
            heads > 0
                && sq.1 == sk.1
                && sk == sv
                && sq.1 % heads == 0
                && sq.0 == segs.count * segs.q_len
                && sk.0 == segs.count * segs.k_len
                && segs.k_len > 0,
            || format!("linear_attention q {sq:?} k {sk:?} v {sv:?} heads {heads} {segs:?}"),
        )?;
        let d = sq.1;
        let dh = d / heads;
        let mut q_soft = self.value(q).to_owned();
        let mut k_soft = self.value(k).to_owned();
        let vv = self.value(v);
        let mut out = Array2::<T>::zeros(sq);
        let mut context = Vec::with_capacity(segs.count * heads);
        for s in 0..segs.count {
            let (q0, q1) = (s * segs.q_len, (s + 1) * segs.q_len);
            let (k0, k1) = (s * segs.k_len, (s + 1) * segs.k_len);
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                softmax_rows_inplace(q_soft.slice_mut(s![q0..q1, c0..c1]));
                softmax_cols_inplace(k_soft.slice_mut(s![k0..k1, c0..c1]));
                let ctx = k_soft
                    .slice(s![k0..k1, c0..c1])
                    .t()
                    .dot(&vv.slice(s![k0..k1, c0..c1]));
                let o = q_soft.slice(s![q0..q1, c0..c1]).dot(&ctx);
                out.slice_mut(s![q0..q1, c0..c1]).assign(&o);
                context.push(ctx);
            }
        }
        Ok(self.push(
            Op::LinearAttention {
                q,
                k,
                v,
                heads,
                segs,
                cache: AttnCache {
                    q_soft,
                    k_soft,
                    context,
                },
            },
            Some(out),
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check(sa.0 == sb.0, || format!("concat_cols {sa:?} | {sb:?}"))?;
        let out = ndarray::concatenate(Axis(1), &[self.value(a), self.value(b)])
            .expect("row counts checked");
        Ok(self.push(Op::ConcatCols(a, b), Some(out)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        self.check(start + len <= sa.1, || {
            format!("slice_cols {start}..{} of {sa:?}", start + len)
        })?;
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(Op::SliceCols(a, start), Some(out)))
    }

    /// Repeats each row `reps` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, reps: usize) -> Var {
        let va = self.value(a);
        let (n, m) = va.dim();
        let mut out = Array2::zeros((n * reps, m));
        for (i, row) in va.rows().into_iter().enumerate() {
            for r in 0..reps {
                out.row_mut(i * reps + r).assign(&row);
            }
        }
        self.push(Op::RepeatRows(a, reps), Some(out))
    }

    /// Mean over all entries of `(a - target)^2`, as a `[1, 1]` node.
    pub fn mse(&mut self, a: Var, target: Array2<T>) -> Result<Var> {
        let sa = self.shape(a);
        self.check(sa == target.dim(), || {
            format!("mse {sa:?} vs target {:?}", target.dim())
        })?;
        let n = T::of(target.len() as f64);
        let loss = Zip::from(&self.value(a))
            .and(&target)
            .fold(T::zero(), |acc, &p, &t| acc + (p - t) * (p - t))
            / n;
        Ok(self.push(Op::Mse(a, target), Some(Array2::from_elem((1, 1), loss))))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&v| v * v).sum::<T>();
        self.push(Op::SumSquares(a), Some(Array2::from_elem((1, 1), s)))
    }

    /// Reverse sweep from a scalar node; returns gradients of every parameter
    /// reached (unreached parameters have no entry).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::State(
                "backward called on a forward-only graph".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("loss node is not on this graph".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Array2<T>>> = (0..self.store.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc<T: Real>(slot: &mut Option<Array2<T>>, delta: Array2<T>) {
            match slot {
                Some(g) => *g += &delta,
                None => *slot = Some(delta),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => acc(&mut param_grads[id.0], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[b.0], gb);
                    acc(&mut grads[a.0], g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[b.0], g.clone());
                    acc(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[b.0], g.mapv(|v| -v));
                    acc(&mut grads[a.0], g);
                }
                Op::Scale(a, c) => acc(&mut grads[a.0], g.mapv(|v| v * *c)),
                Op::MulCol(a, c) => {
                    let va = self.value(*a);
                    let vc = self.value(*c);
                    let gc = (&g * &va).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g * &vc;
                    acc(&mut grads[c.0], gc);
                    acc(&mut grads[a.0], ga);
                }
                Op::Gelu(a, deriv) => {
                    let mut ga = g;
                    let deriv = deriv.as_ref().expect("recorded gelu keeps its derivative");
                    ga.zip_mut_with(deriv, |d, &s| *d *= s);
                    acc(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    acc(&mut grads[a.0], softmax_rows_backward(y.view(), g.view()));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.value(*gamma);
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gxhat = &g * &vg;
                    let d = T::of(xhat.ncols() as f64);
                    let mut gx = Array2::zeros(xhat.dim());
                    Zip::from(gx.rows_mut())
                        .and(gxhat.rows())
                        .and(xhat.rows())
                        .and(inv_std.as_slice())
                        .for_each(|mut gx, gxh, xh, &inv| {
                            let mean_g = gxh.sum() / d;
                            let mean_gx =
                                gxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
                            Zip::from(&mut gx).and(&gxh).and(&xh).for_each(|o, &a, &b| {
                                *o = inv * (a - mean_g - b * mean_gx);
                            });
                        });
                    acc(&mut grads[beta.0], gbeta);
                    acc(&mut grads[gamma.0], ggamma);
                    acc(&mut grads[x.0], gx);
                }
                Op::LinearAttention {
                    q,
                    k,
                    v,
                    heads,
                    segs,
                    cache,
                } => {
                    let vv = self.value(*v);
                    let d = vv.ncols();
                    let dh = d / heads;
                    let mut gq = Array2::<T>::zeros(cache.q_soft.dim());
                    let mut gk = Array2::<T>::zeros(cache.k_soft.dim());
                    let mut gv = Array2::<T>::zeros(vv.dim());
                    for s in 0..segs.count {
                        let (q0, q1) = (s * segs.q_len, (s + 1) * segs.q_len);
                        let (k0, k1) = (s * segs.k_len, (s + 1) * segs.k_len);
                        for h in 0..*heads {
                            let (c0, c1) = (h * dh, (h + 1) * dh);
                            let ctx = &cache.context[s * heads + h];
                            let go = g.slice(s![q0..q1, c0..c1]);
                            let qs = cache.q_soft.slice(s![q0..q1, c0..c1]);
                            let ks = cache.k_soft.slice(s![k0..k1, c0..c1]);
                            let vs = vv.slice(s![k0..k1, c0..c1]);
                            let g_qs = go.dot(&ctx.t());
                            let g_ctx = qs.t().dot(&go);
                            let g_ks = vs.dot(&g_ctx.t());
                            let g_vs = ks.dot(&g_ctx);
                            gq.slice_mut(s![q0..q1, c0..c1])
                                .assign(&softmax_rows_backward(qs, g_qs.view()));
                            gk.slice_mut(s![k0..k1, c0..c1])
                                .assign(&softmax_cols_backward(ks, g_ks.view()));
                            gv.slice_mut(s![k0..k1, c0..c1]).assign(&g_vs);
                        }
                    }
                    acc(&mut grads[v.0], gv);
                    acc(&mut grads[k.0], gk);
                    acc(&mut grads[q.0], gq);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.shape(*a).1;
                    acc(&mut grads[b.0], g.slice(s![.., na..]).to_owned());
                    acc(&mut grads[a.0], g.slice(s![.., ..na]).to_owned());
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads[a.0], ga);
                }
                Op::RepeatRows(a, reps) => {
                    let (n, m) = self.shape(*a);
                    let mut ga = Array2::zeros((n, m));
                    for (r, row) in g.rows().into_iter().enumerate() {
                        let mut dst = ga.row_mut(r / reps);
                        dst += &row;
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::Mse(a, target) => {
                    let scale = g[[0, 0]] * T::of(2.0 / target.len() as f64);
                    let ga = (&self.value(*a) - target).mapv(|v| v * scale);
                    acc(&mut grads[a.0], ga);
                }
                Op::SumSquares(a) => {
                    let scale = g[[0, 0]] * T::of(2.0);
                    acc(&mut grads[a.0], self.value(*a).mapv(|v| v * scale));
                }
            }
        }
        Ok(Gradients(param_grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_the_value() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add(
            "p",
            &[2, 3],
            Array2::from_shape_vec((2, 3), vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap(),
        );
        let unused = store.filled("unused", &[2], 1.0);
        let mut g = Graph::new(&store);
        let pv = g.param(p);
        let loss = g.sum_squares(pv);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &store.value(p).mapv(|v| 2.0 * v));
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_on_inference_graph_is_state_error() {
        let mut store = ParamStore::<f64>::new();
        let p = store.filled("p", &[1], 2.0);
        let mut g = Graph::inference(&store);
        let pv = g.param(p);
        let loss = g.sum_squares(pv);
        assert!(matches!(g.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::<f64>::new();
        let p = store.filled("p", &[3], 2.0);
        let mut g = Graph::new(&store);
        let pv = g.param(p);
        assert!(matches!(g.backward(pv), Err(Error::State(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(Array2::zeros((2, 3)));
        let b = g.input(Array2::zeros((2, 3)));
        assert!(matches!(g.matmul(a, b), Err(Error::Contract(_))));
        let c = g.input(Array2::zeros((3, 3)));
        assert!(matches!(g.add(a, c), Err(Error::Contract(_))));
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.158_655_253_931_457).abs() < 1e-12);
    }
}
