//! Dense numeric kernels shared by forward ops and backward rules.
//! Inner loops operate on sliced rows so LLVM can drop bounds checks.

use crate::real::Real;

/// c += a @ b for row-major 2-D blocks: a is (m,k), b is (k,n), c is (m,n).
pub fn matmul_nn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// c += a @ b^T: a is (m,k), b is (n,k), c is (m,n).
pub fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c += a^T @ b: a is (k,m) read transposed, b is (k,n), c is (m,n).
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &ali) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ali * bv;
            }
        }
    }
}

/// Numerically stable softmax over each row of length `cols`, in place.
pub fn softmax_rows<F: Real>(vals: &mut [F], cols: usize) {
    debug_assert_eq!(vals.len() % cols, 0);
    for row in vals.chunks_exact_mut(cols) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// log-softmax over each row, in place: x - (max + ln sum exp(x - max)).
pub fn log_softmax_rows<F: Real>(vals: &mut [F], cols: usize) {
    debug_assert_eq!(vals.len() % cols, 0);
    for row in vals.chunks_exact_mut(cols) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for &v in row.iter() {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-form GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Transpose axes `ax0 < ax1` of a row-major tensor, returning new data.
pub fn transpose_axes<F: Real>(vals: &[F], shape: &[usize], ax0: usize, ax1: usize) -> Vec<F> {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);

    let stride = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![1usize; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            st[i] = st[i + 1] * s[i + 1];
        }
        st
    };
    let in_stride = stride(shape);
    let out_stride = stride(&out_shape);

    let mut out = vec![F::zero(); vals.len()];
    // Walk output coordinates; map back by swapping the two axes.
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for (d, st) in out_stride.iter().enumerate() {
            idx[d] = rem / st;
            rem %= st;
        }
        idx.swap(ax0, ax1);
        let mut src = 0usize;
        for (d, st) in in_stride.iter().enumerate() {
            src += idx[d] * st;
        }
        *slot = vals[src];
    }
    out
}
