//! 3D spectral transforms over `[b, c, d, h, w]` feature volumes.
//!
//! The forward transform is the unnormalized real-input FFT along the three
//! spatial axes, stored as a half-spectrum along the width axis
//! (`wh = w/2 + 1` bins; the remaining bins are redundant by Hermitian
//! symmetry). The inverse carries the `1/(d*h*w)` factor. Both directions
//! come with their exact adjoints, which is what reverse-mode
//! differentiation of the spectral path requires:
//!
//! * `rfft3_adjoint` maps a cotangent on (R, I) back to the input volume by
//!   zero-extending the half-spectrum (no Hermitian doubling) and running an
//!   unnormalized inverse transform;
//! * `irfft3_adjoint` maps a cotangent on the reconstructed volume to (R, I)
//!   via a forward transform scaled by `weight(kw)/(d*h*w)`, where
//!   `weight` is 2 for bins that stand in for a conjugate pair and 1 for the
//!   self-conjugate width columns.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::tensor::Array;

/// Number of stored width bins for a spatial width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of a stored width bin in the full spectrum.
pub fn hermitian_weight(kw: usize, w: usize) -> f64 {
    if kw == 0 || (w % 2 == 0 && kw == w / 2) {
        1.0
    } else {
        2.0
    }
}

fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, matches!(direction, FftDirection::Inverse));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(key)
        .or_insert_with(|| FftPlanner::new().plan_fft(n, direction))
        .clone()
}

/// In-place unnormalized complex FFT along all three axes of a `[d, h, w]`
/// volume stored row-major.
fn fft3_inplace(buf: &mut [Complex64], d: usize, h: usize, w: usize, direction: FftDirection) {
    debug_assert_eq!(buf.len(), d * h * w);
    if w > 1 {
        let p = plan(w, direction);
        for row in buf.chunks_exact_mut(w) {
            p.process(row);
        }
    }
    if h > 1 {
        let p = plan(h, direction);
        let mut line = vec![Complex64::default(); h];
        for kd in 0..d {
            for kw in 0..w {
                for kh in 0..h {
                    line[kh] = buf[(kd * h + kh) * w + kw];
                }
                p.process(&mut line);
                for kh in 0..h {
                    buf[(kd * h + kh) * w + kw] = line[kh];
                }
            }
        }
    }
    if d > 1 {
        let p = plan(d, direction);
        let mut line = vec![Complex64::default(); d];
        for kh in 0..h {
            for kw in 0..w {
                for kd in 0..d {
                    line[kd] = buf[(kd * h + kh) * w + kw];
                }
                p.process(&mut line);
                for kd in 0..d {
                    buf[(kd * h + kh) * w + kw] = line[kd];
                }
            }
        }
    }
}

fn spatial_dims(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 5, "expected [b, c, d, h, w], got {shape:?}");
    (shape[0] * shape[1], shape[2], shape[3], shape[4])
}

/// Forward real transform: `[b, c, d, h, w]` -> `[2, b, c, d, h, wh]` with
/// the real part at index 0 and the imaginary part at index 1 along axis 0.
pub fn rfft3(x: &Array) -> Array {
    let (bc, d, h, w) = spatial_dims(x.shape());
    let wh = half_width(w);
    let vol = d * h * w;
    let volh = d * h * wh;
    let mut out_shape = vec![2];
    out_shape.extend_from_slice(x.shape());
    out_shape[5] = wh;
    let mut out = Array::zeros(&out_shape);
    let n = bc * volh;
    let (re_plane, im_plane) = out.data_mut().split_at_mut(n);
    let xdata = x.data();
    re_plane
        .par_chunks_mut(volh)
        .zip(im_plane.par_chunks_mut(volh))
        .enumerate()
        .for_each(|(i, (re, im))| {
            let src = &xdata[i * vol..(i + 1) * vol];
            let mut buf: Vec<Complex64> = src.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft3_inplace(&mut buf, d, h, w, FftDirection::Forward);
            for kd in 0..d {
                for kh in 0..h {
                    for kw in 0..wh {
                        let c = buf[(kd * h + kh) * w + kw];
                        re[(kd * h + kh) * wh + kw] = c.re;
                        im[(kd * h + kh) * wh + kw] = c.im;
                    }
                }
            }
        });
    out
}

/// Hermitian extension of one half-spectrum volume into a full complex grid.
fn extend_half(re: &[f64], im: &[f64], d: usize, h: usize, w: usize) -> Vec<Complex64> {
    let wh = half_width(w);
    let mut buf = vec![Complex64::default(); d * h * w];
    for kd in 0..d {
        for kh in 0..h {
            for kw in 0..wh {
                buf[(kd * h + kh) * w + kw] =
                    Complex64::new(re[(kd * h + kh) * wh + kw], im[(kd * h + kh) * wh + kw]);
            }
            // Mirror bins conjugate the entry at the negated frequency triple.
        }
    }
    for kd in 0..d {
        let md = (d - kd) % d;
        for kh in 0..h {
            let mh = (h - kh) % h;
            for kw in wh..w {
                let mw = w - kw;
                let src = buf[(md * h + mh) * w + mw];
                buf[(kd * h + kh) * w + kw] = src.conj();
            }
        }
    }
    buf
}

/// Inverse transform from a stacked half-spectrum back to a real volume of
/// spatial width `w`. Carries the `1/(d*h*w)` normalization.
pub fn irfft3(s: &Array, w: usize) -> Array {
    let shape = s.shape();
    assert_eq!(shape.len(), 6, "expected [2, b, c, d, h, wh], got {shape:?}");
    assert_eq!(shape[0], 2);
    let (b, c, d, h, wh) = (shape[1], shape[2], shape[3], shape[4], shape[5]);
    assert_eq!(half_width(w), wh, "width {w} inconsistent with {wh} stored bins");
    let bc = b * c;
    let vol = d * h * w;
    let volh = d * h * wh;
    let n = bc * volh;
    let (re_plane, im_plane) = s.data().split_at(n);
    let scale = 1.0 / vol as f64;
    let mut out = Array::zeros(&[b, c, d, h, w]);
    out.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(i, dst)| {
            let re = &re_plane[i * volh..(i + 1) * volh];
            let im = &im_plane[i * volh..(i + 1) * volh];
            let mut buf = extend_half(re, im, d, h, w);
            fft3_inplace(&mut buf, d, h, w, FftDirection::Inverse);
            for (o, v) in dst.iter_mut().zip(&buf) {
                *o = v.re * scale;
            }
        });
    out
}

/// Adjoint of `rfft3`: cotangent on the stacked (R, I) output back to the
/// input volume of width `w`.
pub fn rfft3_adjoint(g: &Array, w: usize) -> Array {
    let shape = g.shape();
    assert_eq!(shape.len(), 6);
    assert_eq!(shape[0], 2);
    let (b, c, d, h, wh) = (shape[1], shape[2], shape[3], shape[4], shape[5]);
    assert_eq!(half_width(w), wh);
    let bc = b * c;
    let vol = d * h * w;
    let volh = d * h * wh;
    let n = bc * volh;
    let (re_plane, im_plane) = g.data().split_at(n);
    let mut out = Array::zeros(&[b, c, d, h, w]);
    out.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(i, dst)| {
            let re = &re_plane[i * volh..(i + 1) * volh];
            let im = &im_plane[i * volh..(i + 1) * volh];
            // Zero extension: stored bins only, no Hermitian doubling.
            let mut buf = vec![Complex64::default(); vol];
            for kd in 0..d {
                for kh in 0..h {
                    for kw in 0..wh {
                        buf[(kd * h + kh) * w + kw] =
                            Complex64::new(re[(kd * h + kh) * wh + kw], im[(kd * h + kh) * wh + kw]);
                    }
                }
            }
            fft3_inplace(&mut buf, d, h, w, FftDirection::Inverse);
            for (o, v) in dst.iter_mut().zip(&buf) {
                *o = v.re;
            }
        });
    out
}

/// Adjoint of `irfft3`: cotangent on the real volume to a stacked (R, I)
/// cotangent over the half-spectrum.
pub fn irfft3_adjoint(gy: &Array) -> Array {
    let (bc, d, h, w) = spatial_dims(gy.shape());
    let wh = half_width(w);
    let vol = d * h * w;
    let volh = d * h * wh;
    let mut out_shape = vec![2];
    out_shape.extend_from_slice(gy.shape());
    out_shape[5] = wh;
    let mut out = Array::zeros(&out_shape);
    let n = bc * volh;
    let scale = 1.0 / vol as f64;
    let (re_plane, im_plane) = out.data_mut().split_at_mut(n);
    let gdata = gy.data();
    re_plane
        .par_chunks_mut(volh)
        .zip(im_plane.par_chunks_mut(volh))
        .enumerate()
        .for_each(|(i, (re, im))| {
            let src = &gdata[i * vol..(i + 1) * vol];
            let mut buf: Vec<Complex64> = src.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft3_inplace(&mut buf, d, h, w, FftDirection::Forward);
            for kd in 0..d {
                for kh in 0..h {
                    for kw in 0..wh {
                        let wgt = hermitian_weight(kw, w) * scale;
                        let cv = buf[(kd * h + kh) * w + kw];
                        re[(kd * h + kh) * wh + kw] = wgt * cv.re;
                        im[(kd * h + kh) * wh + kw] = wgt * cv.im;
                    }
                }
            }
        });
    out
}
