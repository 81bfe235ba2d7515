//! Matrix product dispatch shared by the forward and backward passes.

use crate::element::Element;

/// Below this many multiply-adds the packing
/// cost of the blocked kernel outweighs its speed.
const SMALL_GEMM: usize = 1 << 17;

/// Row and column strides of a matrix inside its buffer.
pub(crate) type Strides = (usize, usize);

/// `c = a @ b`, or `c += a @ b` when `accumulate`, for `m x k` and `k x n`
/// operands with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<E: Element>(
    (m, k, n): (usize, usize, usize),
    a: &[E],
    sa: Strides,
    b: &[E],
    sb: Strides,
    c: &mut [E],
    sc: Strides,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if m * k * n <= SMALL_GEMM {
        return small(m, k, n, a, sa, b, sb, c, sc, accumulate);
    }
    let beta = if accumulate { E::one() } else { E::zero() };
    let end = |(r, cs): Strides, rows: usize, cols: usize| (rows - 1) * r + (cols - 1) * cs + 1;
    assert!(a.len() >= end(sa, m, k) && b.len() >= end(sb, k, n) && c.len() >= end(sc, m, n));
    // SAFETY: the assertion above keeps every strided access in bounds, and
    // `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Row-update kernel on a contiguous copy of `b`, so the inner loop runs
/// over unit-stride slices.
#[allow(clippy::too_many_arguments)]
fn small<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    sa: Strides,
    b: &[E],
    sb: Strides,
    c: &mut [E],
    sc: Strides,
    accumulate: bool,
) {
    let packed;
    let b = if sb == (n, 1) {
        &b[..k * n]
    } else {
        packed = (0..k * n).map(|q| b[(q / n) * sb.0 + (q % n) * sb.1]).collect::<Vec<E>>();
        &packed[..]
    };
    let mut row = vec![E::zero(); n];
    for i in 0..m {
        let direct = sc.1 == 1;
        let out: &mut [E] = if direct { &mut c[i * sc.0..i * sc.0 + n] } else { &mut row };
        if !(direct && accumulate) {
            out.fill(E::zero());
        }
        for p in 0..k {
            let av = a[i * sa.0 + p * sa.1];
            for (o, &bv) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
        if !direct {
            for (j, &v) in row.iter().enumerate() {
                let dst = &mut c[i * sc.0 + j * sc.1];
                *dst = if accumulate { *dst + v } else { v };
            }
        }
    }
}
