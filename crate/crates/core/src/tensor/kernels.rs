//! Inner loops for the matrix ops. Written so that the optimizer can
//! vectorize them without reassociating floating-point sums: the axpy forms
//! accumulate element-wise in a fixed order and `dot` keeps eight fixed
//! partial sums, so results are identical from run to run. Every entry of a
//! `matmul_acc` product is summed in the same order whatever the shape.

use super::Real;

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let k4 = k - k % 4;
    if n == 1 {
        // Same summation order as the general path below.
        for (i, o) in out.iter_mut().enumerate().take(m) {
            let arow = &a[i * k..(i + 1) * k];
            for p in (0..k4).step_by(4) {
                *o += (arow[p] * b[p] + arow[p + 1] * b[p + 1])
                    + (arow[p + 2] * b[p + 2] + arow[p + 3] * b[p + 3]);
            }
            for p in k4..k {
                *o += arow[p] * b[p];
            }
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for p in (0..k4).step_by(4) {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            axpy4(orow, [a0, a1, a2, a3], [b0, b1, b2, b3]);
        }
        for p in k4..k {
            axpy(orow, arow[p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_nt_acc<T: Real>(
    g: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    if n == 1 {
        for i in 0..m {
            axpy(&mut out[i * k..(i + 1) * k], g[i], &b[..k]);
        }
        return;
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_tn_acc<T: Real>(
    a: &[T],
    g: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    if n == 1 {
        for i in 0..m {
            axpy(&mut out[..k], g[i], &a[i * k..(i + 1) * k]);
        }
        return;
    }
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        let g0 = &g[i * n..(i + 1) * n];
        let g1 = &g[(i + 1) * n..(i + 2) * n];
        let g2 = &g[(i + 2) * n..(i + 3) * n];
        let g3 = &g[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let c = [
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            ];
            axpy4(&mut out[p * n..(p + 1) * n], c, [g0, g1, g2, g3]);
        }
    }
    for i in m4..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(&mut out[p * n..(p + 1) * n], a[i * k + p], grow);
        }
    }
}

/// `out += c * x`
#[inline]
fn axpy<T: Real>(out: &mut [T], c: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += c * v;
    }
}

/// `out += c0*x0 + c1*x1 + c2*x2 + c3*x3`, summed pairwise per element.
#[inline]
fn axpy4<T: Real>(out: &mut [T], c: [T; 4], x: [&[T]; 4]) {
    let n = out.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        out[j] += (c[0] * x0[j] + c[1] * x1[j]) + (c[2] * x2[j] + c[3] * x3[j]);
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
