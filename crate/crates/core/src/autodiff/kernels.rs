//! Plane-level kernels shared by the 3x3 convolution and its transpose.
//!
//! All planes are `h x w` row-major slices. A shift `(dr, dc)` pairs
//! destination position `(i, j)` with source position `(i + dr, j + dc)`;
//! out-of-range source positions contribute nothing (zero padding).

use crate::scalar::Scalar;

fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// `dst[i, j] += a * src[i + dr, j + dc]`.
///
/// `src_rows` optionally marks which source rows hold any nonzero value so
/// that all-zero rows (common after unpooling) are skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn shift_axpy<S: Scalar>(
    dst: &mut [S],
    src: &[S],
    a: S,
    h: usize,
    w: usize,
    dr: isize,
    dc: isize,
    src_rows: Option<&[bool]>,
) {
    if a == S::zero() {
        return;
    }
    let (i0, i1) = valid_range(h, dr);
    let (j0, j1) = valid_range(w, dc);
    if j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let r = (i as isize + dr) as usize;
        if let Some(rows) = src_rows {
            if !rows[r] {
                continue;
            }
        }
        let s0 = (r * w) as isize + j0 as isize + dc;
        let s = &src[s0 as usize..s0 as usize + (j1 - j0)];
        let d = &mut dst[i * w + j0..i * w + j1];
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv += a * sv;
        }
    }
}

/// `sum_{i,j} a[i, j] * b[i + dr, j + dc]`, skipping rows of `a` flagged empty.
pub(crate) fn shift_dot<S: Scalar>(
    a: &[S],
    b: &[S],
    h: usize,
    w: usize,
    dr: isize,
    dc: isize,
    a_rows: Option<&[bool]>,
) -> S {
    let (i0, i1) = valid_range(h, dr);
    let (j0, j1) = valid_range(w, dc);
    let mut acc = S::zero();
    if j0 >= j1 {
        return acc;
    }
    for i in i0..i1 {
        if let Some(rows) = a_rows {
            if !rows[i] {
                continue;
            }
        }
        let r = (i as isize + dr) as usize;
        let s0 = ((r * w) as isize + j0 as isize + dc) as usize;
        let av = &a[i * w + j0..i * w + j1];
        let bv = &b[s0..s0 + (j1 - j0)];
        for (&x, &y) in av.iter().zip(bv) {
            acc += x * y;
        }
    }
    acc
}

/// Per-row nonzero flags of a stack of planes.
pub(crate) fn nonzero_rows<S: Scalar>(data: &[S], w: usize) -> Vec<bool> {
    data.chunks(w).map(|row| row.iter().any(|v| *v != S::zero())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_axpy_matches_definition() {
        let (h, w) = (3, 4);
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        for dr in -1..=1 {
            for dc in -1..=1 {
                let mut dst = vec![0.0; 12];
                shift_axpy(&mut dst, &src, 2.0, h, w, dr, dc, None);
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let (r, c) = (i + dr, j + dc);
                        let want = if r >= 0 && r < h as isize && c >= 0 && c < w as isize {
                            2.0 * src[(r * w as isize + c) as usize]
                        } else {
                            0.0
                        };
                        assert_eq!(dst[(i * w as isize + j) as usize], want);
                    }
                }
            }
        }
    }

    #[test]
    fn shift_dot_matches_definition() {
        let (h, w) = (2, 3);
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, -1.0, 2.0, 1.0, 0.0, 3.0];
        // dr=1, dc=-1: pairs a[0,1]*b[1,0] + a[0,2]*b[1,1]
        assert_eq!(shift_dot(&a, &b, h, w, 1, -1, None), 2.0 * 1.0 + 3.0 * 0.0);
    }
}
