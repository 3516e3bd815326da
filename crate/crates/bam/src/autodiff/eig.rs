//! Symmetric eigendecomposition: cyclic Jacobi solver plus the reverse-mode
//! adjoint, packaged as a single tape node whose output stacks the
//! eigenvector matrix on top of the eigenvalue row.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};

use super::tape::{BackwardFn, Var};
use super::{DiffError, Real};

const MAX_SWEEPS: usize = 64;
/// Eigenvalue-gap denominators in the adjoint are bounded away from zero.
const GAP_GUARD: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns `(u, lambda)` with eigenvalues ascending, eigenvectors in the
/// columns of `u`, and each column's largest-magnitude entry made positive
/// so the factorization is deterministic. The input is symmetrized as
/// `(S + Sᵀ)/2` first.
pub fn eigh<F: Real>(s: ArrayView2<'_, F>) -> Result<(Array2<F>, Array1<F>), DiffError> {
    let d = s.nrows();
    assert_eq!(
        d,
        s.ncols(),
        "eigh needs a square matrix, got {:?}",
        s.shape()
    );
    assert!(d >= 1, "eigh needs a non-empty matrix");
    if s.iter().any(|v| !v.is_finite()) {
        return Err(DiffError::EigNonFiniteInput);
    }
    let mut a = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            a[[i, j]] = (s[[i, j]] + s[[j, i]]) / F::cast(2.0);
        }
    }
    let mut u = Array2::eye(d);
    let norm = a.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt();
    let tol = norm * F::epsilon() * F::cast(d as f64) + F::min_positive_value();

    let off_norm = |m: &Array2<F>| -> F {
        let mut acc = F::zero();
        for p in 0..d {
            for q in 0..d {
                if p != q {
                    acc += m[[p, q]] * m[[p, q]];
                }
            }
        }
        acc.sqrt()
    };

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let apq = a[[p, q]];
                if apq.abs() <= tol / F::cast((d * d) as f64).max(F::min_positive_value()) {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (F::cast(2.0) * apq);
                let t = {
                    let sign = if theta >= F::zero() {
                        F::one()
                    } else {
                        -F::one()
                    };
                    sign / (theta.abs() + (theta * theta + F::one()).sqrt())
                };
                let c = F::one() / (t * t + F::one()).sqrt();
                let sn = t * c;
                // A <- Jᵀ A J for the rotation J in the (p, q) plane.
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                a[[p, p]] = app - t * apq;
                a[[q, q]] = aqq + t * apq;
                a[[p, q]] = F::zero();
                a[[q, p]] = F::zero();
                for i in 0..d {
                    if i != p && i != q {
                        let aip = a[[i, p]];
                        let aiq = a[[i, q]];
                        a[[i, p]] = c * aip - sn * aiq;
                        a[[p, i]] = a[[i, p]];
                        a[[i, q]] = sn * aip + c * aiq;
                        a[[q, i]] = a[[i, q]];
                    }
                }
                for i in 0..d {
                    let uip = u[[i, p]];
                    let uiq = u[[i, q]];
                    u[[i, p]] = c * uip - sn * uiq;
                    u[[i, q]] = sn * uip + c * uiq;
                }
            }
        }
    }
    if !converged && off_norm(&a) > tol {
        return Err(DiffError::EigNonConvergence {
            sweeps: MAX_SWEEPS,
            off_norm: off_norm(&a).to_f64(),
        });
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        a[[i, i]]
            .partial_cmp(&a[[j, j]])
            .expect("eigenvalues are finite")
    });
    let mut values = Array1::zeros(d);
    let mut vectors = Array2::zeros((d, d));
    for (new_col, &old_col) in order.iter().enumerate() {
        values[new_col] = a[[old_col, old_col]];
        let mut largest = F::zero();
        let mut flip = false;
        for i in 0..d {
            let entry = u[[i, old_col]];
            if entry.abs() > largest {
                largest = entry.abs();
                flip = entry < F::zero();
            }
        }
        for i in 0..d {
            let entry = u[[i, old_col]];
            vectors[[i, new_col]] = if flip { -entry } else { entry };
        }
    }
    Ok((vectors, values))
}

/// Differentiable batched symmetric eigendecomposition.
///
/// Input `[..., d, d]` (each trailing matrix symmetrized internally);
/// output `[..., d+1, d]` where rows `0..d` hold the eigenvector matrix `U`
/// (eigenvectors in columns, eigenvalues ascending) and row `d` holds the
/// eigenvalues. Use [`eig_vectors`] / [`eig_values`] to split the pack.
///
/// The adjoint is the standard symmetric-eig pullback
/// `dS = U (diag(dλ) + F ∘ (Uᵀ dU)) Uᵀ` symmetrized, with the eigenvalue
/// gaps in `F_ij = 1/(λ_j − λ_i)` guarded at `1e-10`.
pub fn sym_eig_packed<'t, F: Real>(s: Var<'t, F>) -> Result<Var<'t, F>, DiffError> {
    let value = s.value();
    let nd = value.ndim();
    assert!(
        nd >= 2 && value.shape()[nd - 1] == value.shape()[nd - 2],
        "sym_eig needs trailing square axes, got {:?}",
        value.shape()
    );
    let d = value.shape()[nd - 1];
    let lead: Vec<usize> = value.shape()[..nd - 2].to_vec();
    let batch: usize = lead.iter().product();

    let flat: Vec<F> = value.iter().copied().collect();
    let mut packed = Vec::with_capacity(batch * (d + 1) * d);
    let mut factors: Vec<(Array2<F>, Array1<F>)> = Vec::with_capacity(batch);
    for b in 0..batch {
        let matrix = ArrayView2::from_shape((d, d), &flat[b * d * d..(b + 1) * d * d])
            .expect("contiguous slice");
        let (u, lambda) = eigh(matrix)?;
        packed.extend(u.iter().copied());
        packed.extend(lambda.iter().copied());
        factors.push((u, lambda));
    }
    let mut out_shape = lead.clone();
    out_shape.extend([d + 1, d]);
    let out = ArrayD::from_shape_vec(IxDyn(&out_shape), packed).expect("sized above");

    let in_shape = value.shape().to_vec();
    let back: BackwardFn<F> = Box::new(move |g| {
        let gflat: Vec<F> = g.iter().copied().collect();
        let stride = (d + 1) * d;
        let mut ds_all = Vec::with_capacity(batch * d * d);
        for (b, (u, lambda)) in factors.iter().enumerate() {
            let gb = &gflat[b * stride..(b + 1) * stride];
            let du = ArrayView2::from_shape((d, d), &gb[..d * d]).expect("packed layout");
            let dlambda = &gb[d * d..];
            // M = Uᵀ dU, then G = F ∘ M with guarded gaps, plus diag(dλ).
            let m = u.t().dot(&du);
            let mut core = Array2::zeros((d, d));
            for i in 0..d {
                for j in 0..d {
                    if i == j {
                        core[[i, j]] = dlambda[i];
                    } else {
                        let gap = (lambda[j] - lambda[i]).to_f64();
                        let guarded = if gap.abs() < GAP_GUARD {
                            if gap < 0.0 {
                                -GAP_GUARD
                            } else {
                                GAP_GUARD
                            }
                        } else {
                            gap
                        };
                        core[[i, j]] = m[[i, j]] / F::cast(guarded);
                    }
                }
            }
            let ds = u.dot(&core).dot(&u.t());
            for i in 0..d {
                for j in 0..d {
                    ds_all.push((ds[[i, j]] + ds[[j, i]]) / F::cast(2.0));
                }
            }
        }
        vec![ArrayD::from_shape_vec(IxDyn(&in_shape), ds_all).expect("sized above")]
    });
    Ok(s.tape().push_node(Rc::new(out), vec![s.index], Some(back)))
}

/// Slices the eigenvector block `[..., d, d]` out of a packed result.
pub fn eig_vectors<'t, F: Real>(packed: Var<'t, F>) -> Var<'t, F> {
    let shape = packed.shape();
    let nd = shape.len();
    let d = shape[nd - 1];
    packed.slice_axis(nd - 2, 0, d)
}

/// Slices the eigenvalue row `[..., d]` out of a packed result.
pub fn eig_values<'t, F: Real>(packed: Var<'t, F>) -> Var<'t, F> {
    let shape = packed.shape();
    let nd = shape.len();
    let d = shape[nd - 1];
    let sliced = packed.slice_axis(nd - 2, d, 1);
    let mut squeezed: Vec<usize> = shape[..nd - 2].to_vec();
    squeezed.push(d);
    sliced.reshape(&squeezed)
}
