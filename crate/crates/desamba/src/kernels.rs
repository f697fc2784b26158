//! Dense compute kernels behind the tape ops: grouped 3D convolution,
//! linear maps, and the channel-wise normalizers.
//!
//! Parallelism rule used throughout the crate: rayon only ever splits work
//! across *independent output regions*; every reduction runs in a fixed
//! sequential order. Results are therefore bitwise identical regardless of
//! thread count.

use rayon::prelude::*;

use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
}

pub fn conv3d_out_shape(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> [usize; 5] {
    let (b, ci) = (x_shape[0], x_shape[1]);
    let co = w_shape[0];
    assert_eq!(
        ci,
        w_shape[1] * spec.groups,
        "conv input channels {} incompatible with weight {:?} groups {}",
        ci,
        w_shape,
        spec.groups
    );
    assert_eq!(co % spec.groups, 0, "out channels not divisible by groups");
    let mut out = [b, co, 0, 0, 0];
    for a in 0..3 {
        let i = x_shape[2 + a];
        let k = w_shape[2 + a];
        let span = i + 2 * spec.pad[a];
        assert!(span >= k, "kernel {k} exceeds padded extent {span}");
        out[2 + a] = (span - k) / spec.stride[a] + 1;
    }
    out
}

fn is_pointwise(w_shape: &[usize], spec: &ConvSpec) -> bool {
    w_shape[2..] == [1, 1, 1] && spec.stride == [1, 1, 1] && spec.pad == [0, 0, 0]
}

/// Pointwise (1x1x1, stride 1) convolution as a channel matmul over the
/// whole contiguous volume.
fn pointwise_forward(x: &Array, w: &Array, bias: Option<&Array>, spec: &ConvSpec) -> Array {
    let [bn, ci, id, ih, iw] = x.dims5();
    let co = w.shape()[0];
    let cig = w.shape()[1];
    let co_per_g = co / spec.groups;
    let vol = id * ih * iw;
    let mut y = Array::zeros(&[bn, co, id, ih, iw]);
    let xd = x.data();
    let wd = w.data();
    y.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(bco, slab)| {
            let b = bco / co;
            let oc = bco % co;
            let g = oc / co_per_g;
            if let Some(bias) = bias {
                slab.fill(bias.data()[oc]);
            }
            for icg in 0..cig {
                let ic = g * cig + icg;
                let wv = wd[oc * cig + icg];
                if wv == 0.0 {
                    continue;
                }
                let xvol = &xd[(b * ci + ic) * vol..(b * ci + ic + 1) * vol];
                for (o, &v) in slab.iter_mut().zip(xvol) {
                    *o += wv * v;
                }
            }
        });
    y
}

fn pointwise_back_input(gy: &Array, w: &Array, x_shape: &[usize], spec: &ConvSpec) -> Array {
    let [bn, co, id, ih, iw] = gy.dims5();
    let _ = bn;
    let ci = x_shape[1];
    let cig = w.shape()[1];
    let co_per_g = co / spec.groups;
    let vol = id * ih * iw;
    let mut dx = Array::zeros(x_shape);
    let gd = gy.data();
    let wd = w.data();
    dx.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(bic, slab)| {
            let b = bic / ci;
            let ic = bic % ci;
            let g = ic / cig;
            let icg = ic % cig;
            for ocg in 0..co_per_g {
                let oc = g * co_per_g + ocg;
                let wv = wd[oc * cig + icg];
                if wv == 0.0 {
                    continue;
                }
                let gvol = &gd[(b * co + oc) * vol..(b * co + oc + 1) * vol];
                for (o, &v) in slab.iter_mut().zip(gvol) {
                    *o += wv * v;
                }
            }
        });
    dx
}

fn pointwise_back_weight(gy: &Array, x: &Array, w_shape: &[usize], spec: &ConvSpec) -> Array {
    let [bn, co, id, ih, iw] = gy.dims5();
    let ci = x.shape()[1];
    let cig = w_shape[1];
    let co_per_g = co / spec.groups;
    let vol = id * ih * iw;
    let mut dw = Array::zeros(w_shape);
    let gd = gy.data();
    let xd = x.data();
    dw.data_mut()
        .par_chunks_mut(cig)
        .enumerate()
        .for_each(|(oc, row)| {
            let g = oc / co_per_g;
            for b in 0..bn {
                let gvol = &gd[(b * co + oc) * vol..(b * co + oc + 1) * vol];
                for (icg, out) in row.iter_mut().enumerate() {
                    let ic = g * cig + icg;
                    let xvol = &xd[(b * ci + ic) * vol..(b * ci + ic + 1) * vol];
                    let mut acc = 0.0;
                    for (&gv, &xv) in gvol.iter().zip(xvol) {
                        acc += gv * xv;
                    }
                    *out += acc;
                }
            }
        });
    dw
}

/// Copy one `[d, h, w]` volume into a zero-padded buffer.
fn pad_volume(src: &[f64], d: usize, h: usize, w: usize, pd: usize, ph: usize, pw: usize) -> (Vec<f64>, usize, usize) {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let dp = d + 2 * pd;
    let mut out = vec![0.0; dp * hp * wp];
    for z in 0..d {
        for y in 0..h {
            let s = (z * h + y) * w;
            let o = ((z + pd) * hp + (y + ph)) * wp + pw;
            out[o..o + w].copy_from_slice(&src[s..s + w]);
        }
    }
    (out, hp, wp)
}

/// Stride-1 convolution through a padded buffer: no bounds checks in the
/// accumulation loops.
fn stride1_forward(x: &Array, w: &Array, bias: Option<&Array>, spec: &ConvSpec) -> Array {
    let [_bn, ci, id, ih, iw] = x.dims5();
    let ws = w.shape();
    let (co, cig, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let out_shape = conv3d_out_shape(x.shape(), ws, spec);
    let [_, _, od, oh, ow] = out_shape;
    let [pd, ph, pw] = spec.pad;
    let co_per_g = co / spec.groups;
    let mut y = Array::zeros(&out_shape);
    let xd = x.data();
    let wd = w.data();
    let out_vol = od * oh * ow;
    y.data_mut()
        .par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(bco, slab)| {
            let b = bco / co;
            let oc = bco % co;
            let g = oc / co_per_g;
            if let Some(bias) = bias {
                slab.fill(bias.data()[oc]);
            }
            for icg in 0..cig {
                let ic = g * cig + icg;
                let xvol = &xd[((b * ci + ic) * id * ih * iw)..][..id * ih * iw];
                let (xp, hp, wp) = pad_volume(xvol, id, ih, iw, pd, ph, pw);
                let wbase = (oc * cig + icg) * kd * kh * kw;
                // Row-centric: each output row stays cache-hot across all
                // kernel taps.
                for oz in 0..od {
                    for oy in 0..oh {
                        let dst = (oz * oh + oy) * ow;
                        let yrow = &mut slab[dst..dst + ow];
                        for zk in 0..kd {
                            for yk in 0..kh {
                                let src = ((oz + zk) * hp + (oy + yk)) * wp;
                                let wrow = &wd[wbase + (zk * kh + yk) * kw..][..kw];
                                for (xk, &wv) in wrow.iter().enumerate() {
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let xrow = &xp[src + xk..src + xk + ow];
                                    for (o, &v) in yrow.iter_mut().zip(xrow) {
                                        *o += wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

fn stride1_back_input(gy: &Array, w: &Array, x_shape: &[usize], spec: &ConvSpec) -> Array {
    let [bn, co, od, oh, ow] = gy.dims5();
    let _ = bn;
    let ws = w.shape();
    let (cig, kd, kh, kw) = (ws[1], ws[2], ws[3], ws[4]);
    let (ci, id, ih, iw) = (x_shape[1], x_shape[2], x_shape[3], x_shape[4]);
    let [pd, ph, pw] = spec.pad;
    let co_per_g = co / spec.groups;
    let mut dx = Array::zeros(x_shape);
    let gd = gy.data();
    let wd = w.data();
    let in_vol = id * ih * iw;
    // dx = correlation of gy (padded by k-1-p) with the flipped kernel.
    let (qd, qh, qw) = (kd - 1 - pd, kh - 1 - ph, kw - 1 - pw);
    dx.data_mut()
        .par_chunks_mut(in_vol)
        .enumerate()
        .for_each(|(bic, slab)| {
            let b = bic / ci;
            let ic = bic % ci;
            let g = ic / cig;
            let icg = ic % cig;
            for ocg in 0..co_per_g {
                let oc = g * co_per_g + ocg;
                let gvol = &gd[((b * co + oc) * od * oh * ow)..][..od * oh * ow];
                let (gp, hp, wp) = pad_volume(gvol, od, oh, ow, qd, qh, qw);
                let wbase = (oc * cig + icg) * kd * kh * kw;
                for iz in 0..id {
                    for iy in 0..ih {
                        let dst = (iz * ih + iy) * iw;
                        let xrow = &mut slab[dst..dst + iw];
                        for zk in 0..kd {
                            for yk in 0..kh {
                                let src = ((iz + zk) * hp + (iy + yk)) * wp;
                                // Flipped taps.
                                let wrow = &wd[wbase
                                    + ((kd - 1 - zk) * kh + (kh - 1 - yk)) * kw..][..kw];
                                for xk in 0..kw {
                                    let wv = wrow[kw - 1 - xk];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let grow = &gp[src + xk..src + xk + iw];
                                    for (o, &v) in xrow.iter_mut().zip(grow) {
                                        *o += wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

fn stride1_back_weight(gy: &Array, x: &Array, w_shape: &[usize], spec: &ConvSpec) -> Array {
    let [bn, co, od, oh, ow] = gy.dims5();
    let [_, ci, id, ih, iw] = x.dims5();
    let (cig, kd, kh, kw) = (w_shape[1], w_shape[2], w_shape[3], w_shape[4]);
    let [pd, ph, pw] = spec.pad;
    let co_per_g = co / spec.groups;
    let mut dw = Array::zeros(w_shape);
    let gd = gy.data();
    let xd = x.data();
    let wslab = cig * kd * kh * kw;
    dw.data_mut()
        .par_chunks_mut(wslab)
        .enumerate()
        .for_each(|(oc, slab)| {
            let g = oc / co_per_g;
            for b in 0..bn {
                let gvol = &gd[((b * co + oc) * od * oh * ow)..][..od * oh * ow];
                for icg in 0..cig {
                    let ic = g * cig + icg;
                    let xvol = &xd[((b * ci + ic) * id * ih * iw)..][..id * ih * iw];
                    let (xp, hp, wp) = pad_volume(xvol, id, ih, iw, pd, ph, pw);
                    // Local tap accumulators stay cache-hot while the
                    // volumes stream once.
                    let mut local = vec![0.0; kd * kh * kw];
                    for oz in 0..od {
                        for oy in 0..oh {
                            let grow = &gvol[(oz * oh + oy) * ow..][..ow];
                            for zk in 0..kd {
                                for yk in 0..kh {
                                    let src = ((oz + zk) * hp + (oy + yk)) * wp;
                                    let lrow = &mut local[(zk * kh + yk) * kw..][..kw];
                                    for (xk, slot) in lrow.iter_mut().enumerate() {
                                        let xrow = &xp[src + xk..src + xk + ow];
                                        let mut acc = 0.0;
                                        for (&gv, &xv) in grow.iter().zip(xrow) {
                                            acc += gv * xv;
                                        }
                                        *slot += acc;
                                    }
                                }
                            }
                        }
                    }
                    let dst = &mut slab[icg * kd * kh * kw..][..kd * kh * kw];
                    for (o, &v) in dst.iter_mut().zip(&local) {
                        *o += v;
                    }
                }
            }
        });
    dw
}

fn is_stride1(w_shape: &[usize], spec: &ConvSpec) -> bool {
    spec.stride == [1, 1, 1]
        && spec.pad[0] < w_shape[2]
        && spec.pad[1] < w_shape[3]
        && spec.pad[2] < w_shape[4]
}

pub fn conv3d_forward(x: &Array, w: &Array, bias: Option<&Array>, spec: &ConvSpec) -> Array {
    if is_pointwise(w.shape(), spec) {
        return pointwise_forward(x, w, bias, spec);
    }
    if is_stride1(w.shape(), spec) {
        return stride1_forward(x, w, bias, spec);
    }
    let [_bn, ci, id, ih, iw] = x.dims5();
    let ws = w.shape();
    let (co, cig, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let out_shape = conv3d_out_shape(x.shape(), ws, spec);
    let [_, _, od, oh, ow] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3], out_shape[4]];
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let co_per_g = co / spec.groups;
    let mut y = Array::zeros(&out_shape);
    let xd = x.data();
    let wd = w.data();
    let out_vol = od * oh * ow;
    y.data_mut()
        .par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(bco, slab)| {
            let b = bco / co;
            let oc = bco % co;
            let g = oc / co_per_g;
            if let Some(bias) = bias {
                slab.fill(bias.data()[oc]);
            }
            for icg in 0..cig {
                let ic = g * cig + icg;
                let xvol = &xd[((b * ci + ic) * id * ih * iw)..][..id * ih * iw];
                for zk in 0..kd {
                    for yk in 0..kh {
                        for xk in 0..kw {
                            let wv = wd[((((oc * cig) + icg) * kd + zk) * kh + yk) * kw + xk];
                            if wv == 0.0 {
                                continue;
                            }
                            for oz in 0..od {
                                let iz = (oz * sd + zk) as isize - pd as isize;
                                if iz < 0 || iz >= id as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = (oy * sh + yk) as isize - ph as isize;
                                    if iy < 0 || iy >= ih as isize {
                                        continue;
                                    }
                                    let xrow_base = (iz as usize * ih + iy as usize) * iw;
                                    let yrow_base = (oz * oh + oy) * ow;
                                    if sw == 1 {
                                        // ix = ox + xk - pw; clip ox to keep ix in range.
                                        let shift = xk as isize - pw as isize;
                                        let lo = (-shift).max(0) as usize;
                                        let hi = ((iw as isize - shift).min(ow as isize)).max(0)
                                            as usize;
                                        if lo >= hi {
                                            continue;
                                        }
                                        let xrow = &xvol
                                            [xrow_base + (lo as isize + shift) as usize..]
                                            [..hi - lo];
                                        let yrow = &mut slab[yrow_base + lo..yrow_base + hi];
                                        for (o, &v) in yrow.iter_mut().zip(xrow) {
                                            *o += wv * v;
                                        }
                                    } else {
                                        for ox in 0..ow {
                                            let ix = (ox * sw + xk) as isize - pw as isize;
                                            if ix < 0 || ix >= iw as isize {
                                                continue;
                                            }
                                            slab[yrow_base + ox] +=
                                                wv * xvol[xrow_base + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

pub fn conv3d_back_input(
    gy: &Array,
    w: &Array,
    x_shape: &[usize],
    spec: &ConvSpec,
) -> Array {
    if is_pointwise(w.shape(), spec) {
        return pointwise_back_input(gy, w, x_shape, spec);
    }
    if is_stride1(w.shape(), spec) {
        return stride1_back_input(gy, w, x_shape, spec);
    }
    let [bn, co, od, oh, ow] = gy.dims5();
    let ws = w.shape();
    let (cig, kd, kh, kw) = (ws[1], ws[2], ws[3], ws[4]);
    let (ci, id, ih, iw) = (x_shape[1], x_shape[2], x_shape[3], x_shape[4]);
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let co_per_g = co / spec.groups;
    let _ = bn;
    let mut dx = Array::zeros(x_shape);
    let gd = gy.data();
    let wd = w.data();
    let in_vol = id * ih * iw;
    dx.data_mut()
        .par_chunks_mut(in_vol)
        .enumerate()
        .for_each(|(bic, slab)| {
            let b = bic / ci;
            let ic = bic % ci;
            let g = ic / cig;
            let icg = ic % cig;
            for ocg in 0..co_per_g {
                let oc = g * co_per_g + ocg;
                let gvol = &gd[((b * co + oc) * od * oh * ow)..][..od * oh * ow];
                for zk in 0..kd {
                    for yk in 0..kh {
                        for xk in 0..kw {
                            let wv = wd[((((oc * cig) + icg) * kd + zk) * kh + yk) * kw + xk];
                            if wv == 0.0 {
                                continue;
                            }
                            for iz in 0..id {
                                let tz = iz as isize + pd as isize - zk as isize;
                                if tz < 0 || tz % sd as isize != 0 {
                                    continue;
                                }
                                let oz = (tz / sd as isize) as usize;
                                if oz >= od {
                                    continue;
                                }
                                for iy in 0..ih {
                                    let ty = iy as isize + ph as isize - yk as isize;
                                    if ty < 0 || ty % sh as isize != 0 {
                                        continue;
                                    }
                                    let oy = (ty / sh as isize) as usize;
                                    if oy >= oh {
                                        continue;
                                    }
                                    let grow_base = (oz * oh + oy) * ow;
                                    let xrow_base = (iz * ih + iy) * iw;
                                    if sw == 1 {
                                        // ox = ix + pw - xk; clip ix so ox stays valid.
                                        let shift = pw as isize - xk as isize;
                                        let lo = (-shift).max(0) as usize;
                                        let hi = ((ow as isize - shift).min(iw as isize)).max(0)
                                            as usize;
                                        if lo >= hi {
                                            continue;
                                        }
                                        let grow = &gvol
                                            [grow_base + (lo as isize + shift) as usize..]
                                            [..hi - lo];
                                        let xrow = &mut slab[xrow_base + lo..xrow_base + hi];
                                        for (o, &v) in xrow.iter_mut().zip(grow) {
                                            *o += wv * v;
                                        }
                                    } else {
                                        for ix in 0..iw {
                                            let tx = ix as isize + pw as isize - xk as isize;
                                            if tx < 0 || tx % sw as isize != 0 {
                                                continue;
                                            }
                                            let ox = (tx / sw as isize) as usize;
                                            if ox >= ow {
                                                continue;
                                            }
                                            slab[xrow_base + ix] += wv * gvol[grow_base + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

pub fn conv3d_back_weight(gy: &Array, x: &Array, w_shape: &[usize], spec: &ConvSpec) -> Array {
    if is_pointwise(w_shape, spec) {
        return pointwise_back_weight(gy, x, w_shape, spec);
    }
    if is_stride1(w_shape, spec) {
        return stride1_back_weight(gy, x, w_shape, spec);
    }
    let [bn, co, od, oh, ow] = gy.dims5();
    let [_, ci, id, ih, iw] = x.dims5();
    let (cig, kd, kh, kw) = (w_shape[1], w_shape[2], w_shape[3], w_shape[4]);
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let co_per_g = co / spec.groups;
    let mut dw = Array::zeros(w_shape);
    let gd = gy.data();
    let xd = x.data();
    let wslab = cig * kd * kh * kw;
    dw.data_mut()
        .par_chunks_mut(wslab)
        .enumerate()
        .for_each(|(oc, slab)| {
            let g = oc / co_per_g;
            for b in 0..bn {
                let gvol = &gd[((b * co + oc) * od * oh * ow)..][..od * oh * ow];
                for icg in 0..cig {
                    let ic = g * cig + icg;
                    let xvol = &xd[((b * ci + ic) * id * ih * iw)..][..id * ih * iw];
                    for zk in 0..kd {
                        for yk in 0..kh {
                            for xk in 0..kw {
                                let mut acc = 0.0;
                                for oz in 0..od {
                                    let iz = (oz * sd + zk) as isize - pd as isize;
                                    if iz < 0 || iz >= id as isize {
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let iy = (oy * sh + yk) as isize - ph as isize;
                                        if iy < 0 || iy >= ih as isize {
                                            continue;
                                        }
                                        let grow_base = (oz * oh + oy) * ow;
                                        let xrow_base =
                                            (iz as usize * ih + iy as usize) * iw;
                                        if sw == 1 {
                                            let shift = xk as isize - pw as isize;
                                            let lo = (-shift).max(0) as usize;
                                            let hi = ((iw as isize - shift).min(ow as isize))
                                                .max(0)
                                                as usize;
                                            if lo >= hi {
                                                continue;
                                            }
                                            let grow = &gvol[grow_base + lo..grow_base + hi];
                                            let xrow = &xvol
                                                [xrow_base + (lo as isize + shift) as usize..]
                                                [..hi - lo];
                                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                                acc += gv * xv;
                                            }
                                        } else {
                                            for ox in 0..ow {
                                                let ix =
                                                    (ox * sw + xk) as isize - pw as isize;
                                                if ix < 0 || ix >= iw as isize {
                                                    continue;
                                                }
                                                acc += gvol[grow_base + ox]
                                                    * xvol[xrow_base + ix as usize];
                                            }
                                        }
                                    }
                                }
                                slab[((icg * kd + zk) * kh + yk) * kw + xk] += acc;
                            }
                        }
                    }
                }
            }
        });
    dw
}

pub fn conv3d_back_bias(gy: &Array) -> Array {
    let [bn, co, od, oh, ow] = gy.dims5();
    let vol = od * oh * ow;
    let gd = gy.data();
    let mut db = Array::zeros(&[co]);
    for b in 0..bn {
        for (oc, out) in db.data_mut().iter_mut().enumerate() {
            let base = (b * co + oc) * vol;
            let mut acc = 0.0;
            for v in &gd[base..base + vol] {
                acc += v;
            }
            *out += acc;
        }
    }
    db
}

/// `y[b, m] = w[m, :] . x[b, :] + bias[m]`
pub fn linear_forward(x: &Array, w: &Array, bias: Option<&Array>) -> Array {
    let [bn, nin] = x.dims2();
    let [nout, win] = w.dims2();
    assert_eq!(nin, win, "linear shape mismatch: x {:?} w {:?}", x.shape(), w.shape());
    let mut y = Array::zeros(&[bn, nout]);
    let xd = x.data();
    let wd = w.data();
    y.data_mut()
        .par_chunks_mut(nout)
        .enumerate()
        .for_each(|(b, row)| {
            let xrow = &xd[b * nin..(b + 1) * nin];
            for (m, out) in row.iter_mut().enumerate() {
                let wrow = &wd[m * nin..(m + 1) * nin];
                let mut acc = match bias {
                    Some(bias) => bias.data()[m],
                    None => 0.0,
                };
                for (a, b) in wrow.iter().zip(xrow) {
                    acc += a * b;
                }
                *out = acc;
            }
        });
    y
}

pub fn linear_back_input(gy: &Array, w: &Array) -> Array {
    let [bn, nout] = gy.dims2();
    let [_, nin] = w.dims2();
    let mut dx = Array::zeros(&[bn, nin]);
    let gd = gy.data();
    let wd = w.data();
    dx.data_mut()
        .par_chunks_mut(nin)
        .enumerate()
        .for_each(|(b, row)| {
            for m in 0..nout {
                let gv = gd[b * nout + m];
                if gv == 0.0 {
                    continue;
                }
                let wrow = &wd[m * nin..(m + 1) * nin];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += gv * wv;
                }
            }
        });
    dx
}

pub fn linear_back_weight(gy: &Array, x: &Array) -> Array {
    let [bn, nout] = gy.dims2();
    let [_, nin] = x.dims2();
    let mut dw = Array::zeros(&[nout, nin]);
    let gd = gy.data();
    let xd = x.data();
    dw.data_mut()
        .par_chunks_mut(nin)
        .enumerate()
        .for_each(|(m, row)| {
            for b in 0..bn {
                let gv = gd[b * nout + m];
                if gv == 0.0 {
                    continue;
                }
                let xrow = &xd[b * nin..(b + 1) * nin];
                for (o, &xv) in row.iter_mut().zip(xrow) {
                    *o += gv * xv;
                }
            }
        });
    dw
}

pub fn linear_back_bias(gy: &Array) -> Array {
    let [bn, nout] = gy.dims2();
    let mut db = Array::zeros(&[nout]);
    let gd = gy.data();
    for b in 0..bn {
        for (m, out) in db.data_mut().iter_mut().enumerate() {
            *out += gd[b * nout + m];
        }
    }
    db
}

/// Split a `[b, c, ...]` shape into (batch, channels, flattened spatial).
pub fn bcs(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [b, c], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product::<usize>().max(1))
}

/// Layer normalization over the channel axis at every (batch, voxel) site.
/// Returns (y, mean, inv_std) with the stats shaped `[b, spatial]`.
pub fn layer_norm_ch_forward(
    x: &Array,
    gamma: &Array,
    beta: &Array,
    eps: f64,
) -> (Array, Array, Array) {
    let (b, c, sp) = bcs(x.shape());
    let mut y = Array::zeros(x.shape());
    let mut mean = Array::zeros(&[b, sp]);
    let mut inv_std = Array::zeros(&[b, sp]);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mean_d = mean.data_mut();
    let inv_d = inv_std.data_mut();
    // Stats first (sequential fill), then the normalized write in parallel.
    for bi in 0..b {
        for p in 0..sp {
            let mut mu = 0.0;
            for ci in 0..c {
                mu += xd[(bi * c + ci) * sp + p];
            }
            mu /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let dv = xd[(bi * c + ci) * sp + p] - mu;
                var += dv * dv;
            }
            var /= c as f64;
            mean_d[bi * sp + p] = mu;
            inv_d[bi * sp + p] = 1.0 / (var + eps).sqrt();
        }
    }
    let mean_r = &*mean_d;
    let inv_r = &*inv_d;
    y.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(bc_idx, row)| {
            let bi = bc_idx / c;
            let ci = bc_idx % c;
            let xrow = &xd[bc_idx * sp..(bc_idx + 1) * sp];
            let (g, be) = (gd[ci], bd[ci]);
            for p in 0..sp {
                row[p] = g * (xrow[p] - mean_r[bi * sp + p]) * inv_r[bi * sp + p] + be;
            }
        });
    (y, mean, inv_std)
}

/// Backward of `layer_norm_ch_forward`; returns (dx, dgamma, dbeta).
pub fn layer_norm_ch_backward(
    gy: &Array,
    x: &Array,
    gamma: &Array,
    mean: &Array,
    inv_std: &Array,
) -> (Array, Array, Array) {
    let (b, c, sp) = bcs(x.shape());
    let xd = x.data();
    let gd = gy.data();
    let gam = gamma.data();
    let mean_d = mean.data();
    let inv_d = inv_std.data();
    let mut dx = Array::zeros(x.shape());
    let mut dgamma = Array::zeros(&[c]);
    let mut dbeta = Array::zeros(&[c]);
    // Per-(b, p) jacobian; channel loops sequential.
    let cinv = 1.0 / c as f64;
    let dxd = dx.data_mut();
    for bi in 0..b {
        for p in 0..sp {
            let mu = mean_d[bi * sp + p];
            let inv = inv_d[bi * sp + p];
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for ci in 0..c {
                let xhat = (xd[(bi * c + ci) * sp + p] - mu) * inv;
                let gi = gd[(bi * c + ci) * sp + p] * gam[ci];
                mean_g += gi;
                mean_gx += gi * xhat;
            }
            mean_g *= cinv;
            mean_gx *= cinv;
            for ci in 0..c {
                let idx = (bi * c + ci) * sp + p;
                let xhat = (xd[idx] - mu) * inv;
                let gi = gd[idx] * gam[ci];
                dxd[idx] = inv * (gi - mean_g - xhat * mean_gx);
                dgamma.data_mut()[ci] += gd[idx] * xhat;
                dbeta.data_mut()[ci] += gd[idx];
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Global response normalization (ConvNeXtV2 form):
/// `gx[b,c] = ||x[b,c,:]||_2`, `nx = gx / (mean_c gx + eps)`,
/// `y = gamma_c * x * nx + beta_c + x`. Returns (y, gx, nx).
pub fn grn_forward(x: &Array, gamma: &Array, beta: &Array, eps: f64) -> (Array, Array, Array) {
    let (b, c, sp) = bcs(x.shape());
    let xd = x.data();
    let mut gx = Array::zeros(&[b, c]);
    gx.data_mut().par_iter_mut().enumerate().for_each(|(bc_idx, out)| {
        let row = &xd[bc_idx * sp..(bc_idx + 1) * sp];
        let mut acc = 0.0;
        for v in row {
            acc += v * v;
        }
        *out = acc.sqrt();
    });
    let mut nx = Array::zeros(&[b, c]);
    for bi in 0..b {
        let mut mu = 0.0;
        for ci in 0..c {
            mu += gx.data()[bi * c + ci];
        }
        mu = mu / c as f64 + eps;
        for ci in 0..c {
            nx.data_mut()[bi * c + ci] = gx.data()[bi * c + ci] / mu;
        }
    }
    let gam = gamma.data();
    let bet = beta.data();
    let nxd = nx.data();
    let mut y = Array::zeros(x.shape());
    y.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(bc_idx, row)| {
            let ci = bc_idx % c;
            let scale = gam[ci] * nxd[bc_idx];
            let xrow = &xd[bc_idx * sp..(bc_idx + 1) * sp];
            for p in 0..sp {
                row[p] = scale * xrow[p] + bet[ci] + xrow[p];
            }
        });
    (y, gx, nx)
}

/// Backward of `grn_forward`; returns (dx, dgamma, dbeta).
pub fn grn_backward(
    gy: &Array,
    x: &Array,
    gamma: &Array,
    gx: &Array,
    nx: &Array,
    eps: f64,
) -> (Array, Array, Array) {
    let (b, c, sp) = bcs(x.shape());
    let xd = x.data();
    let gd = gy.data();
    let gam = gamma.data();
    let gxd = gx.data();
    let nxd = nx.data();
    let mut dgamma = Array::zeros(&[c]);
    let mut dbeta = Array::zeros(&[c]);
    // Per-(b,c) reductions in parallel (disjoint writes), then the gamma and
    // beta accumulations in fixed order.
    let mut sums: Vec<(f64, f64)> = vec![(0.0, 0.0); b * c];
    sums.par_iter_mut().enumerate().for_each(|(bc_idx, slot)| {
        let base = bc_idx * sp;
        let mut acc_dyx = 0.0;
        let mut acc_dy = 0.0;
        for p in 0..sp {
            acc_dyx += gd[base + p] * xd[base + p];
            acc_dy += gd[base + p];
        }
        *slot = (acc_dyx, acc_dy);
    });
    let mut dnx = vec![0.0; b * c];
    for bi in 0..b {
        for ci in 0..c {
            let (acc_dyx, acc_dy) = sums[bi * c + ci];
            dnx[bi * c + ci] = gam[ci] * acc_dyx;
            dgamma.data_mut()[ci] += acc_dyx * nxd[bi * c + ci];
            dbeta.data_mut()[ci] += acc_dy;
        }
    }
    // Through nx -> gx: nx_c = gx_c / (mean_c gx + eps).
    let mut dgx = vec![0.0; b * c];
    for bi in 0..b {
        let mut mu = 0.0;
        for ci in 0..c {
            mu += gxd[bi * c + ci];
        }
        let denom = mu / c as f64 + eps;
        let mut s = 0.0;
        for ci in 0..c {
            s += dnx[bi * c + ci] * gxd[bi * c + ci];
        }
        let correction = s / (denom * denom * c as f64);
        for ci in 0..c {
            dgx[bi * c + ci] = dnx[bi * c + ci] / denom - correction;
        }
    }
    let mut dx = Array::zeros(x.shape());
    let dgx_r = &dgx;
    dx.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(bc_idx, row)| {
            let ci = bc_idx % c;
            let scale = gam[ci] * nxd[bc_idx] + 1.0;
            let base = bc_idx * sp;
            let gxv = gxd[bc_idx];
            let gx_term = if gxv > 0.0 { dgx_r[bc_idx] / gxv } else { 0.0 };
            for p in 0..sp {
                row[p] = gd[base + p] * scale + xd[base + p] * gx_term;
            }
        });
    (dx, dgamma, dbeta)
}

/// Per-channel standardization over the spatial axes with a zero-variance
/// guard: `y = (x - mean) / max(std, eps)`. Returns (y, mean, std).
pub fn channel_std_forward(x: &Array, eps: f64) -> (Array, Array, Array) {
    let (b, c, sp) = bcs(x.shape());
    let xd = x.data();
    let mut mean = Array::zeros(&[b, c]);
    let mut std = Array::zeros(&[b, c]);
    for bc_idx in 0..b * c {
        let row = &xd[bc_idx * sp..(bc_idx + 1) * sp];
        let mu = row.iter().sum::<f64>() / sp as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / sp as f64;
        mean.data_mut()[bc_idx] = mu;
        std.data_mut()[bc_idx] = var.sqrt();
    }
    let mean_d = mean.data();
    let std_d = std.data();
    let mut y = Array::zeros(x.shape());
    y.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(bc_idx, row)| {
            let mu = mean_d[bc_idx];
            let denom = std_d[bc_idx].max(eps);
            let xrow = &xd[bc_idx * sp..(bc_idx + 1) * sp];
            for p in 0..sp {
                row[p] = (xrow[p] - mu) / denom;
            }
        });
    (y, mean, std)
}

/// Backward of `channel_std_forward`.
pub fn channel_std_backward(gy: &Array, y: &Array, std: &Array, eps: f64) -> Array {
    let (b, c, sp) = bcs(y.shape());
    let _ = (b, c);
    let gd = gy.data();
    let yd = y.data();
    let std_d = std.data();
    let mut dx = Array::zeros(y.shape());
    dx.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(bc_idx, row)| {
            let sigma = std_d[bc_idx];
            let grow = &gd[bc_idx * sp..(bc_idx + 1) * sp];
            let yrow = &yd[bc_idx * sp..(bc_idx + 1) * sp];
            let mean_g = grow.iter().sum::<f64>() / sp as f64;
            if sigma > eps {
                let mean_gy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / sp as f64;
                for p in 0..sp {
                    row[p] = (grow[p] - mean_g - yrow[p] * mean_gy) / sigma;
                }
            } else {
                // Guarded branch: denominator is the constant eps.
                for p in 0..sp {
                    row[p] = (grow[p] - mean_g) / eps;
                }
            }
        });
    dx
}
