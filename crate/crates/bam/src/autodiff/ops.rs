//! Differentiable operations on tape variables.
//!
//! Elementwise ops broadcast with trailing-axis alignment; gradients are
//! sum-reduced back to each operand's shape. Heavier kernels (contraction,
//! batched matmul, fused attention, eigendecomposition) capture shared
//! handles to their inputs and recompute cheap intermediates in the
//! backward pass instead of storing them.

use std::rc::Rc;

use ndarray::{concatenate, Array2, Array3, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};

use super::tape::{BackwardFn, Var};
use super::Real;

/// Numpy-style broadcast result shape; panics with both shapes on mismatch.
fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        if da == db || da == 1 || db == 1 {
            out.push(da.max(db));
        } else {
            panic!("shape mismatch in {op}: {a:?} vs {b:?}");
        }
    }
    out
}

/// Sums a gradient over broadcast axes until it matches `target`.
fn reduce_to_shape<F: Real>(mut g: ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Contiguous row-major copy of a dynamic array as a typed 3-d array.
fn to_array3<F: Real>(a: &ArrayD<F>, dims: (usize, usize, usize)) -> Array3<F> {
    let flat: Vec<F> = a.iter().copied().collect();
    Array3::from_shape_vec(dims, flat).expect("dimension product checked by caller")
}

fn to_array2<F: Real>(a: &ArrayD<F>, dims: (usize, usize)) -> Array2<F> {
    let flat: Vec<F> = a.iter().copied().collect();
    Array2::from_shape_vec(dims, flat).expect("dimension product checked by caller")
}

fn into_dyn_shape<F: Real>(a: impl IntoIterator<Item = F>, shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_shape_vec(IxDyn(shape), a.into_iter().collect())
        .expect("dimension product checked by caller")
}

impl<'t, F: Real> Var<'t, F> {
    fn binary_elementwise(
        self,
        rhs: Var<'t, F>,
        op: &'static str,
        fwd: fn(F, F) -> F,
        dfda: fn(F, F) -> F,
        dfdb: fn(F, F) -> F,
    ) -> Var<'t, F> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        let shape = broadcast_shape(a.shape(), b.shape(), op);
        let av = a
            .broadcast(IxDyn(&shape))
            .expect("broadcast_shape validated");
        let bv = b
            .broadcast(IxDyn(&shape))
            .expect("broadcast_shape validated");
        let mut out = ArrayD::zeros(IxDyn(&shape));
        Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = fwd(x, y));
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (ac, bc) = (a.clone(), b.clone());
        let back: BackwardFn<F> = Box::new(move |g| {
            let av = ac.broadcast(g.raw_dim()).expect("validated in forward");
            let bv = bc.broadcast(g.raw_dim()).expect("validated in forward");
            let mut da = g.clone();
            Zip::from(&mut da)
                .and(&av)
                .and(&bv)
                .for_each(|d, &x, &y| *d *= dfda(x, y));
            let mut db = g.clone();
            Zip::from(&mut db)
                .and(&av)
                .and(&bv)
                .for_each(|d, &x, &y| *d *= dfdb(x, y));
            vec![reduce_to_shape(da, &sa), reduce_to_shape(db, &sb)]
        });
        self.tape
            .push_node(Rc::new(out), vec![self.index, rhs.index], Some(back))
    }

    fn unary_elementwise(
        self,
        fwd: impl Fn(F) -> F,
        dydx: impl Fn(F, F) -> F + 'static,
    ) -> Var<'t, F> {
        let a = self.value();
        let out = Rc::new(a.mapv(&fwd));
        let oc = out.clone();
        let back: BackwardFn<F> = Box::new(move |g| {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(&*a)
                .and(&*oc)
                .for_each(|dd, &x, &y| *dd *= dydx(x, y));
            vec![d]
        });
        self.tape.push_node(out, vec![self.index], Some(back))
    }

    pub fn relu(self) -> Var<'t, F> {
        self.unary_elementwise(
            |x| x.max(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.unary_elementwise(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn exp(self) -> Var<'t, F> {
        self.unary_elementwise(|x| x.exp(), |_, y| y)
    }

    pub fn log(self) -> Var<'t, F> {
        self.unary_elementwise(|x| x.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(self) -> Var<'t, F> {
        self.unary_elementwise(|x| x.sqrt(), |_, y| F::one() / (F::cast(2.0) * y))
    }

    pub fn recip(self) -> Var<'t, F> {
        self.unary_elementwise(|x| F::one() / x, |_, y| -(y * y))
    }

    pub fn powi(self, n: i32) -> Var<'t, F> {
        self.unary_elementwise(
            move |x| x.powi(n),
            move |x, _| F::cast(f64::from(n)) * x.powi(n - 1),
        )
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(self, lo: F, hi: F) -> Var<'t, F> {
        self.unary_elementwise(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn clamp_min(self, lo: F) -> Var<'t, F> {
        self.unary_elementwise(
            move |x| x.max(lo),
            move |x, _| if x >= lo { F::one() } else { F::zero() },
        )
    }

    pub fn add_scalar(self, s: F) -> Var<'t, F> {
        self.unary_elementwise(move |x| x + s, |_, _| F::one())
    }

    pub fn mul_scalar(self, s: F) -> Var<'t, F> {
        self.unary_elementwise(move |x| x * s, move |_, _| s)
    }

    /// A new leaf sharing this node's value; gradients do not flow past it.
    pub fn detach(self) -> Var<'t, F> {
        self.tape.push_node(self.value(), Vec::new(), None)
    }

    pub fn sum_all(self) -> Var<'t, F> {
        let a = self.value();
        let total = a.iter().fold(F::zero(), |acc, &v| acc + v);
        let shape = a.shape().to_vec();
        let back: BackwardFn<F> = Box::new(move |g| {
            let gv = *g.iter().next().expect("scalar gradient");
            vec![ArrayD::from_elem(IxDyn(&shape), gv)]
        });
        self.tape.push_node(
            Rc::new(ArrayD::from_elem(IxDyn(&[]), total)),
            vec![self.index],
            Some(back),
        )
    }

    pub fn mean_all(self) -> Var<'t, F> {
        let n = self.value().len();
        self.sum_all().mul_scalar(F::one() / F::cast(n as f64))
    }

    pub fn sum_axis(self, axis: usize) -> Var<'t, F> {
        let a = self.value();
        assert!(
            axis < a.ndim(),
            "sum_axis {axis} out of range for shape {:?}",
            a.shape()
        );
        let out = a.sum_axis(Axis(axis));
        let shape = a.shape().to_vec();
        let back: BackwardFn<F> = Box::new(move |g| {
            let expanded = g.clone().insert_axis(Axis(axis));
            vec![expanded
                .broadcast(IxDyn(&shape))
                .expect("axis re-inserted")
                .to_owned()]
        });
        self.tape
            .push_node(Rc::new(out), vec![self.index], Some(back))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t, F> {
        let n = self.value().shape()[axis];
        self.sum_axis(axis).mul_scalar(F::one() / F::cast(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let a = self.value();
        let new_len: usize = shape.iter().product();
        assert_eq!(
            a.len(),
            new_len,
            "reshape from {:?} to {shape:?} changes the element count",
            a.shape()
        );
        let out = into_dyn_shape(a.iter().copied(), shape);
        let orig = a.shape().to_vec();
        let back: BackwardFn<F> = Box::new(move |g| vec![into_dyn_shape(g.iter().copied(), &orig)]);
        self.tape
            .push_node(Rc::new(out), vec![self.index], Some(back))
    }

    pub fn permute_axes(self, perm: &[usize]) -> Var<'t, F> {
        let a = self.value();
        let nd = a.ndim();
        let mut seen = vec![false; nd];
        assert_eq!(perm.len(), nd, "permutation length vs rank {nd}");
        for &p in perm {
            assert!(p < nd && !seen[p], "invalid axis permutation {perm:?}");
            seen[p] = true;
        }
        let out = a
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0usize; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let back: BackwardFn<F> = Box::new(move |g| {
            vec![g
                .view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .into_owned()]
        });
        self.tape
            .push_node(Rc::new(out), vec![self.index], Some(back))
    }

    /// Swaps the trailing two axes.
    pub fn transpose_last2(self) -> Var<'t, F> {
        let nd = self.value().ndim();
        assert!(nd >= 2, "transpose_last2 needs rank >= 2");
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute_axes(&perm)
    }

    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Var<'t, F> {
        let a = self.value();
        assert!(
            axis < a.ndim() && start + len <= a.shape()[axis],
            "slice {start}..{} on axis {axis} of shape {:?}",
            start + len,
            a.shape()
        );
        let out = a
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let shape = a.shape().to_vec();
        let back: BackwardFn<F> = Box::new(move |g| {
            let mut d = ArrayD::zeros(IxDyn(&shape));
            d.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![d]
        });
        self.tape
            .push_node(Rc::new(out), vec![self.index], Some(back))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'t, F> {
        let a = self.value();
        assert!(a.ndim() >= 1, "softmax needs at least one axis");
        let last = Axis(a.ndim() - 1);
        let mut out = (*a).clone();
        for mut lane in out.lanes_mut(last) {
            let mx = lane.fold(F::neg_infinity(), |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - mx).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let out = Rc::new(out);
        let oc = out.clone();
        let back: BackwardFn<F> = Box::new(move |g| {
            let mut d = g.clone();
            let last = Axis(d.ndim() - 1);
            for (mut dl, yl) in d.lanes_mut(last).into_iter().zip(oc.lanes(last)) {
                let dot = dl
                    .iter()
                    .zip(yl.iter())
                    .fold(F::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                for (di, &yi) in dl.iter_mut().zip(yl.iter()) {
                    *di = yi * (*di - dot);
                }
            }
            vec![d]
        });
        self.tape.push_node(out, vec![self.index], Some(back))
    }

    /// Contraction over the last axis with a matrix: `[..., K] x [K, L] ->
    /// [..., L]`.
    pub fn contract_last(self, w: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&w);
        let a = self.value();
        let b = w.value();
        assert_eq!(
            b.ndim(),
            2,
            "contract_last weight must be a matrix, got {:?}",
            b.shape()
        );
        let k = b.shape()[0];
        let l = b.shape()[1];
        assert!(
            a.ndim() >= 1 && a.shape()[a.ndim() - 1] == k,
            "contract_last shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let lead: Vec<usize> = a.shape()[..a.ndim() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let a2 = to_array2(&a, (rows, k));
        let b2 = b
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rank 2 checked");
        let out2 = a2.dot(&b2);
        let mut out_shape = lead.clone();
        out_shape.push(l);
        let out = into_dyn_shape(out2.iter().copied(), &out_shape);
        let (ac, bc) = (a.clone(), b.clone());
        let sa = a.shape().to_vec();
        let back: BackwardFn<F> = Box::new(move |g| {
            let g2 = to_array2(g, (rows, l));
            let a2 = to_array2(&ac, (rows, k));
            let b2 = bc
                .view()
                .into_dimensionality::<Ix2>()
                .expect("rank 2 checked");
            let da2 = g2.dot(&b2.t());
            let db = a2.t().dot(&g2);
            vec![into_dyn_shape(da2.iter().copied(), &sa), db.into_dyn()]
        });
        self.tape
            .push_node(Rc::new(out), vec![self.index, w.index], Some(back))
    }

    /// Batched matrix multiply: `[B..., n, k] x [B..., k, m] -> [B..., n, m]`
    /// with identical leading batch axes (a batch of one reduces to a plain
    /// matrix product).
    pub fn batched_matmul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert!(
            a.ndim() >= 2 && a.ndim() == b.ndim(),
            "batched_matmul rank mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let nd = a.ndim();
        assert!(
            a.shape()[..nd - 2] == b.shape()[..nd - 2] && a.shape()[nd - 1] == b.shape()[nd - 2],
            "batched_matmul shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let lead: Vec<usize> = a.shape()[..nd - 2].to_vec();
        let batch: usize = lead.iter().product();
        let (n, k) = (a.shape()[nd - 2], a.shape()[nd - 1]);
        let m = b.shape()[nd - 1];
        let a3 = to_array3(&a, (batch, n, k));
        let b3 = to_array3(&b, (batch, k, m));
        let mut out3 = Array3::zeros((batch, n, m));
        for i in 0..batch {
            let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
            out3.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let mut out_shape = lead.clone();
        out_shape.extend([n, m]);
        let out = into_dyn_shape(out3.iter().copied(), &out_shape);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let back: BackwardFn<F> = Box::new(move |g| {
            let g3 = to_array3(g, (batch, n, m));
            let mut da3 = Array3::zeros((batch, n, k));
            let mut db3 = Array3::zeros((batch, k, m));
            for i in 0..batch {
                let gi = g3.index_axis(Axis(0), i);
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                da3.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                db3.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
            }
            vec![
                into_dyn_shape(da3.iter().copied(), &sa),
                into_dyn_shape(db3.iter().copied(), &sb),
            ]
        });
        self.tape
            .push_node(Rc::new(out), vec![self.index, rhs.index], Some(back))
    }

    /// Expands `[..., d]` into `[..., d, d]` diagonal matrices.
    pub fn diag_embed(self) -> Var<'t, F> {
        let a = self.value();
        assert!(a.ndim() >= 1, "diag_embed needs at least one axis");
        let d = a.shape()[a.ndim() - 1];
        let lead: Vec<usize> = a.shape()[..a.ndim() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let a2 = to_array2(&a, (rows, d));
        let mut out3 = Array3::zeros((rows, d, d));
        for i in 0..rows {
            for j in 0..d {
                out3[[i, j, j]] = a2[[i, j]];
            }
        }
        let mut out_shape = lead.clone();
        out_shape.extend([d, d]);
        let out = into_dyn_shape(out3.iter().copied(), &out_shape);
        let sa = a.shape().to_vec();
        let back: BackwardFn<F> = Box::new(move |g| {
            let g3 = to_array3(g, (rows, d, d));
            let mut da = Array2::zeros((rows, d));
            for i in 0..rows {
                for j in 0..d {
                    da[[i, j]] = g3[[i, j, j]];
                }
            }
            vec![into_dyn_shape(da.iter().copied(), &sa)]
        });
        self.tape
            .push_node(Rc::new(out), vec![self.index], Some(back))
    }

    /// Extracts the diagonals of `[..., d, d]` as `[..., d]`.
    pub fn diag_part(self) -> Var<'t, F> {
        let a = self.value();
        let nd = a.ndim();
        assert!(
            nd >= 2 && a.shape()[nd - 1] == a.shape()[nd - 2],
            "diag_part needs trailing square axes, got {:?}",
            a.shape()
        );
        let d = a.shape()[nd - 1];
        let lead: Vec<usize> = a.shape()[..nd - 2].to_vec();
        let rows: usize = lead.iter().product();
        let a3 = to_array3(&a, (rows, d, d));
        let mut out2 = Array2::zeros((rows, d));
        for i in 0..rows {
            for j in 0..d {
                out2[[i, j]] = a3[[i, j, j]];
            }
        }
        let mut out_shape = lead.clone();
        out_shape.push(d);
        let out = into_dyn_shape(out2.iter().copied(), &out_shape);
        let sa = a.shape().to_vec();
        let back: BackwardFn<F> = Box::new(move |g| {
            let g2 = to_array2(g, (rows, d));
            let mut da = Array3::zeros((rows, d, d));
            for i in 0..rows {
                for j in 0..d {
                    da[[i, j, j]] = g2[[i, j]];
                }
            }
            vec![into_dyn_shape(da.iter().copied(), &sa)]
        });
        self.tape
            .push_node(Rc::new(out), vec![self.index], Some(back))
    }
}

/// Concatenates along `axis`. All parts must share the other axis lengths.
pub fn concat<'t, F: Real>(axis: usize, parts: &[Var<'t, F>]) -> Var<'t, F> {
    assert!(!parts.is_empty(), "concat of zero parts");
    let tape = parts[0].tape;
    for p in &parts[1..] {
        parts[0].same_tape(p);
    }
    let values: Vec<Rc<ArrayD<F>>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = concatenate(Axis(axis), &views)
        .unwrap_or_else(|e| panic!("concat shape mismatch on axis {axis}: {e}"));
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let back: BackwardFn<F> = Box::new(move |g| {
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = g
                    .slice_axis(Axis(axis), Slice::from(start..start + len))
                    .to_owned();
                start += len;
                piece
            })
            .collect()
    });
    let parents = parts.iter().map(|p| p.index).collect();
    tape.push_node(Rc::new(out), parents, Some(back))
}

/// Fused scaled-dot-product attention: `softmax(K Qᵀ / sqrt(c)) V` with
/// shapes `K, Q: [B, n, c]` and `V: [B, n, cv]`. The `n x n` attention
/// matrix exists only one batch element at a time and is recomputed in the
/// backward pass, bounding memory for large `n`.
pub fn scaled_dot_attention<'t, F: Real>(
    k: Var<'t, F>,
    q: Var<'t, F>,
    v: Var<'t, F>,
) -> Var<'t, F> {
    k.same_tape(&q);
    k.same_tape(&v);
    let (kv, qv, vv) = (k.value(), q.value(), v.value());
    assert!(
        kv.ndim() == 3 && qv.shape() == kv.shape() && vv.ndim() == 3,
        "attention expects [B, n, c] inputs, got K {:?}, Q {:?}, V {:?}",
        kv.shape(),
        qv.shape(),
        vv.shape()
    );
    let (batch, n, c) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
    assert!(
        vv.shape()[0] == batch && vv.shape()[1] == n,
        "attention V batch/rows mismatch: K {:?} vs V {:?}",
        kv.shape(),
        vv.shape()
    );
    let cv = vv.shape()[2];
    let scale = F::one() / F::cast((c as f64).sqrt());
    let k3 = Rc::new(to_array3(&kv, (batch, n, c)));
    let q3 = Rc::new(to_array3(&qv, (batch, n, c)));
    let v3 = Rc::new(to_array3(&vv, (batch, n, cv)));

    let attention_rows = |b: usize| -> Array2<F> {
        let mut s = k3
            .index_axis(Axis(0), b)
            .dot(&q3.index_axis(Axis(0), b).t());
        s.mapv_inplace(|x| x * scale);
        for mut row in s.rows_mut() {
            let mx = row.fold(F::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - mx).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        s
    };

    let mut out3 = Array3::zeros((batch, n, cv));
    for b in 0..batch {
        let a = attention_rows(b);
        out3.index_axis_mut(Axis(0), b)
            .assign(&a.dot(&v3.index_axis(Axis(0), b)));
    }
    let out = into_dyn_shape(out3.iter().copied(), &[batch, n, cv]);

    let (k3b, q3b, v3b) = (k3.clone(), q3.clone(), v3.clone());
    let back: BackwardFn<F> = Box::new(move |g| {
        let g3 = to_array3(g, (batch, n, cv));
        let mut dk = Array3::zeros((batch, n, c));
        let mut dq = Array3::zeros((batch, n, c));
        let mut dv = Array3::zeros((batch, n, cv));
        for b in 0..batch {
            // Recompute this element's attention matrix.
            let mut s = k3b
                .index_axis(Axis(0), b)
                .dot(&q3b.index_axis(Axis(0), b).t());
            s.mapv_inplace(|x| x * scale);
            for mut row in s.rows_mut() {
                let mx = row.fold(F::neg_infinity(), |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - mx).exp());
                let total = row.sum();
                row.mapv_inplace(|x| x / total);
            }
            let a = s;
            let gb = g3.index_axis(Axis(0), b);
            dv.index_axis_mut(Axis(0), b).assign(&a.t().dot(&gb));
            let mut ds = gb.dot(&v3b.index_axis(Axis(0), b).t());
            // Softmax backward per row: dS = A ∘ (dA − rowsum(dA ∘ A)).
            for (mut ds_row, a_row) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot = ds_row
                    .iter()
                    .zip(a_row.iter())
                    .fold(F::zero(), |acc, (&d, &w)| acc + d * w);
                for (d, &w) in ds_row.iter_mut().zip(a_row.iter()) {
                    *d = w * (*d - dot);
                }
            }
            ds.mapv_inplace(|x| x * scale);
            dk.index_axis_mut(Axis(0), b)
                .assign(&ds.dot(&q3b.index_axis(Axis(0), b)));
            dq.index_axis_mut(Axis(0), b)
                .assign(&ds.t().dot(&k3b.index_axis(Axis(0), b)));
        }
        vec![
            into_dyn_shape(dk.iter().copied(), &[batch, n, c]),
            into_dyn_shape(dq.iter().copied(), &[batch, n, c]),
            into_dyn_shape(dv.iter().copied(), &[batch, n, cv]),
        ]
    });
    k.tape
        .push_node(Rc::new(out), vec![k.index, q.index, v.index], Some(back))
}

/// Layer normalization over the last axis with learnable gain and bias:
/// composite of primitive ops, so its gradient needs no bespoke kernel.
pub fn layer_norm<'t, F: Real>(
    x: Var<'t, F>,
    gain: Var<'t, F>,
    bias: Var<'t, F>,
    eps: F,
) -> Var<'t, F> {
    let nd = x.value().ndim();
    let mut keep = x.value().shape().to_vec();
    keep[nd - 1] = 1;
    let mean = x.mean_axis(nd - 1).reshape(&keep);
    let centered = x - mean;
    let var = (centered * centered).mean_axis(nd - 1).reshape(&keep);
    let normalized = centered / (var.add_scalar(eps)).sqrt();
    normalized * gain + bias
}

impl<'t, F: Real> std::ops::Add for Var<'t, F> {
    type Output = Var<'t, F>;

    fn add(self, rhs: Self) -> Self::Output {
        self.binary_elementwise(rhs, "add", |a, b| a + b, |_, _| F::one(), |_, _| F::one())
    }
}

impl<'t, F: Real> std::ops::Sub for Var<'t, F> {
    type Output = Var<'t, F>;

    fn sub(self, rhs: Self) -> Self::Output {
        self.binary_elementwise(rhs, "sub", |a, b| a - b, |_, _| F::one(), |_, _| -F::one())
    }
}

impl<'t, F: Real> std::ops::Mul for Var<'t, F> {
    type Output = Var<'t, F>;

    fn mul(self, rhs: Self) -> Self::Output {
        self.binary_elementwise(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }
}

impl<'t, F: Real> std::ops::Div for Var<'t, F> {
    type Output = Var<'t, F>;

    fn div(self, rhs: Self) -> Self::Output {
        self.binary_elementwise(
            rhs,
            "div",
            |a, b| a / b,
            |_, b| F::one() / b,
            |a, b| -a / (b * b),
        )
    }
}

impl<'t, F: Real> std::ops::Neg for Var<'t, F> {
    type Output = Var<'t, F>;

    fn neg(self) -> Self::Output {
        self.mul_scalar(-F::one())
    }
}
