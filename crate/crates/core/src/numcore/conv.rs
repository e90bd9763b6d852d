use super::Real;
use crate::error::{dim_err, Result};

/// One-cell halo rule for a 2-D plane.
#[derive(Clone, Debug, PartialEq)]
pub enum Padding<T: Real = f64> {
    Periodic,
    Replicate,
    Zero,
    /// Prescribed halo values, ordered top row (w+2), bottom row (w+2),
    /// left column (h), right column (h).
    Halo(Vec<T>),
}

impl<T: Real> Padding<T> {
    pub fn halo_len(h: usize, w: usize) -> usize {
        2 * (w + 2) + 2 * h
    }
}

/// Pads an `h x w` plane to `(h+2) x (w+2)`.
pub fn pad_plane<T: Real>(src: &[T], h: usize, w: usize, mode: &Padding<T>) -> Result<Vec<T>> {
    if h == 0 || w == 0 || src.len() != h * w {
        return Err(dim_err(format!(
            "pad of {} values as a {}x{} plane",
            src.len(),
            h,
            w
        )));
    }
    if let Padding::Halo(v) = mode {
        if v.len() != Padding::<T>::halo_len(h, w) {
            return Err(dim_err(format!(
                "halo has {} values, plane {}x{} needs {}",
                v.len(),
                h,
                w,
                Padding::<T>::halo_len(h, w)
            )));
        }
    }
    let pw = w + 2;
    let mut out = vec![T::zero(); (h + 2) * pw];
    for i in 0..h {
        out[(i + 1) * pw + 1..(i + 1) * pw + 1 + w].copy_from_slice(&src[i * w..(i + 1) * w]);
    }
    match mode {
        Padding::Zero => {}
        Padding::Halo(v) => {
            out[..pw].copy_from_slice(&v[..pw]);
            out[(h + 1) * pw..].copy_from_slice(&v[pw..2 * pw]);
            for i in 0..h {
                out[(i + 1) * pw] = v[2 * pw + i];
                out[(i + 1) * pw + w + 1] = v[2 * pw + h + i];
            }
        }
        Padding::Periodic | Padding::Replicate => {
            for pi in 0..h + 2 {
                for pj in 0..w + 2 {
                    if pi >= 1 && pi <= h && pj >= 1 && pj <= w {
                        continue;
                    }
                    let (si, sj) = halo_source(pi, pj, h, w, mode);
                    out[pi * pw + pj] = src[si * w + sj];
                }
            }
        }
    }
    Ok(out)
}

/// Interior cell feeding padded cell `(pi, pj)` for periodic/replicate halos.
fn halo_source<T: Real>(pi: usize, pj: usize, h: usize, w: usize, mode: &Padding<T>) -> (usize, usize) {
    let map = |p: usize, n: usize| -> usize {
        let periodic = matches!(mode, Padding::Periodic);
        if p == 0 {
            if periodic {
                n - 1
            } else {
                0
            }
        } else if p == n + 1 {
            if periodic {
                0
            } else {
                n - 1
            }
        } else {
            p - 1
        }
    };
    (map(pi, h), map(pj, w))
}

/// Adjoint of [`pad_plane`]: folds a padded gradient back onto the plane.
pub(crate) fn pad_plane_adjoint<T: Real>(
    grad_padded: &[T],
    h: usize,
    w: usize,
    mode: &Padding<T>,
    grad_src: &mut [T],
) {
    let pw = w + 2;
    for i in 0..h {
        for j in 0..w {
            grad_src[i * w + j] += grad_padded[(i + 1) * pw + j + 1];
        }
    }
    if matches!(mode, Padding::Periodic | Padding::Replicate) {
        for pi in 0..h + 2 {
            for pj in 0..w + 2 {
                if pi >= 1 && pi <= h && pj >= 1 && pj <= w {
                    continue;
                }
                let (si, sj) = halo_source(pi, pj, h, w, mode);
                grad_src[si * w + sj] += grad_padded[pi * pw + pj];
            }
        }
    }
}

/// Valid 3x3 cross-correlation: field `[c, hh, ww]`, kernel `[co, c, 3, 3]`,
/// output `[co, hh-2, ww-2]`.
pub fn correlate_valid<T: Real>(
    field: &[T],
    c: usize,
    hh: usize,
    ww: usize,
    kernel: &[T],
    co: usize,
) -> Result<Vec<T>> {
    if hh < 3 || ww < 3 || field.len() != c * hh * ww || kernel.len() != co * c * 9 {
        return Err(dim_err(format!(
            "conv of field [{}, {}, {}] ({} values) with kernel of {} values",
            c,
            hh,
            ww,
            field.len(),
            kernel.len()
        )));
    }
    let (h, w) = (hh - 2, ww - 2);
    let mut out = vec![T::zero(); co * h * w];
    for o in 0..co {
        for ci in 0..c {
            let plane = &field[ci * hh * ww..(ci + 1) * hh * ww];
            let k = &kernel[(o * c + ci) * 9..(o * c + ci + 1) * 9];
            let dst = &mut out[o * h * w..(o + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for di in 0..3 {
                        let row = (i + di) * ww + j;
                        acc += k[di * 3] * plane[row]
                            + k[di * 3 + 1] * plane[row + 1]
                            + k[di * 3 + 2] * plane[row + 2];
                    }
                    dst[i * w + j] += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`correlate_valid`] with respect to field and kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_valid_adjoint<T: Real>(
    field: &[T],
    c: usize,
    hh: usize,
    ww: usize,
    kernel: &[T],
    co: usize,
    grad_out: &[T],
    grad_field: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
) {
    let (h, w) = (hh - 2, ww - 2);
    if let Some(gf) = grad_field {
        for o in 0..co {
            let go = &grad_out[o * h * w..(o + 1) * h * w];
            for ci in 0..c {
                let k = &kernel[(o * c + ci) * 9..(o * c + ci + 1) * 9];
                let gp = &mut gf[ci * hh * ww..(ci + 1) * hh * ww];
                for i in 0..h {
                    for j in 0..w {
                        let g = go[i * w + j];
                        for di in 0..3 {
                            for dj in 0..3 {
                                gp[(i + di) * ww + j + dj] += k[di * 3 + dj] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gk) = grad_kernel {
        for o in 0..co {
            let go = &grad_out[o * h * w..(o + 1) * h * w];
            for ci in 0..c {
                let plane = &field[ci * hh * ww..(ci + 1) * hh * ww];
                for di in 0..3 {
                    for dj in 0..3 {
                        let mut acc = T::zero();
                        for i in 0..h {
                            for j in 0..w {
                                acc += go[i * w + j] * plane[(i + di) * ww + j + dj];
                            }
                        }
                        gk[(o * c + ci) * 9 + di * 3 + dj] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_single_cell() {
        let p = pad_plane(&[7.0], 1, 1, &Padding::Periodic).unwrap();
        assert_eq!(p, vec![7.0; 9]);
    }

    #[test]
    fn zero_rim() {
        let p = pad_plane(&[1.0, 2.0, 3.0, 4.0], 2, 2, &Padding::Zero).unwrap();
        #[rustfmt::skip]
        let want = vec![
            0., 0., 0., 0.,
            0., 1., 2., 0.,
            0., 3., 4., 0.,
            0., 0., 0., 0.,
        ];
        assert_eq!(p, want);
    }

    #[test]
    fn replicate_duplicates_edges() {
        // ramp f[i][j] = 3i + j
        let src: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let p = pad_plane(&src, 3, 3, &Padding::Replicate).unwrap();
        for pi in 0..5usize {
            for pj in 0..5usize {
                let si = pi.saturating_sub(1).min(2);
                let sj = pj.saturating_sub(1).min(2);
                assert_eq!(p[pi * 5 + pj], src[si * 3 + sj], "({pi},{pj})");
            }
        }
    }

    #[test]
    fn halo_length_checked() {
        let err = pad_plane(&[0.0; 4], 2, 2, &Padding::Halo(vec![0.0; 3]));
        assert!(err.is_err());
        let ok = pad_plane(&[0.0; 4], 2, 2, &Padding::Halo((0..12).map(|v| v as f64).collect()))
            .unwrap();
        assert_eq!(&ok[..4], &[0., 1., 2., 3.]);
        assert_eq!(&ok[12..], &[4., 5., 6., 7.]);
        assert_eq!(ok[4], 8.0);
        assert_eq!(ok[7], 10.0);
    }

    #[test]
    fn pad_adjoint_matches_dot_product() {
        // <pad(x), y> == <x, pad^T(y)> for the linear modes
        let h = 3;
        let w = 4;
        let x: Vec<f64> = (0..h * w).map(|v| (v as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..(h + 2) * (w + 2)).map(|v| (v as f64 * 0.91).cos()).collect();
        for mode in [Padding::Periodic, Padding::Replicate, Padding::Zero] {
            let px = pad_plane(&x, h, w, &mode).unwrap();
            let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut aty = vec![0.0; h * w];
            pad_plane_adjoint(&y, h, w, &mode, &mut aty);
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{mode:?}");
        }
    }
}
