//! Dense 3D convolution and pooling kernels.
//!
//! All kernels operate on flat f64 slices in NCDHW layout and are written so
//! the innermost loop runs over the contiguous W axis (a strided saxpy or dot
//! product), which LLVM vectorizes. Parallel variants split work into
//! independent output chunks — one (batch, channel) plane per task for
//! forward/input-grad, one output channel per task for weight-grad — and
//! never share accumulators, so parallel and sequential results are bitwise
//! identical.

use crate::error::{Error, Result};
use crate::par;

/// Geometry of one grouped 3D convolution. Weight layout is
/// (out_ch, in_ch/groups, kd, kh, kw); no bias anywhere in this crate's
/// convolutions (normalization follows them).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
    pub in_dhw: (usize, usize, usize),
}

impl ConvGeom {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_ch == 0 || self.out_ch == 0 || self.batch == 0 {
            return Err(Error::shape("conv geometry has a zero extent".to_string()));
        }
        if self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::shape(format!(
                "channels ({} in, {} out) not divisible by {} groups",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        let (kd, kh, kw) = self.kernel;
        let (sd, sh, sw) = self.stride;
        if kd == 0 || kh == 0 || kw == 0 || sd == 0 || sh == 0 || sw == 0 {
            return Err(Error::shape("conv kernel and stride extents must be positive".to_string()));
        }
        let (od, oh, ow) = self.out_dhw();
        if od == 0 || oh == 0 || ow == 0 {
            return Err(Error::shape(format!(
                "conv input {:?} too small for kernel {:?} stride {:?} pad {:?}",
                self.in_dhw, self.kernel, self.stride, self.pad
            )));
        }
        Ok(())
    }

    pub fn out_dhw(&self) -> (usize, usize, usize) {
        let ext = |i: usize, k: usize, s: usize, p: usize| (i + 2 * p).saturating_sub(k) / s + 1;
        (
            ext(self.in_dhw.0, self.kernel.0, self.stride.0, self.pad.0),
            ext(self.in_dhw.1, self.kernel.1, self.stride.1, self.pad.1),
            ext(self.in_dhw.2, self.kernel.2, self.stride.2, self.pad.2),
        )
    }

    pub fn weight_len(&self) -> usize {
        let (kd, kh, kw) = self.kernel;
        self.out_ch * (self.in_ch / self.groups) * kd * kh * kw
    }

    pub fn in_len(&self) -> usize {
        let (d, h, w) = self.in_dhw;
        self.batch * self.in_ch * d * h * w
    }

    pub fn out_len(&self) -> usize {
        let (d, h, w) = self.out_dhw();
        self.batch * self.out_ch * d * h * w
    }
}

/// Output positions `o` in `[lo, hi)` for which `o*stride + k - pad` lands
/// inside `[0, in_extent)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let lo = if off < 0 { ((-off) as usize).div_ceil(stride) } else { 0 };
    let top = in_extent as isize - off;
    if top <= 0 {
        return (0, 0);
    }
    let hi = ((top - 1) as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

macro_rules! conv_forward_body {
    ($chunk_runner:path, $x:ident, $w:ident, $g:ident, $out:ident) => {{
        let (kd_n, kh_n, kw_n) = $g.kernel;
        let (sd, sh, sw) = $g.stride;
        let (pd, ph, pw) = $g.pad;
        let (d, h, w_ext) = $g.in_dhw;
        let (od_n, oh_n, ow_n) = $g.out_dhw();
        let icg_n = $g.in_ch / $g.groups;
        let ocg_n = $g.out_ch / $g.groups;
        let in_plane = d * h * w_ext;
        let out_plane = od_n * oh_n * ow_n;
        let w_per_oc = icg_n * kd_n * kh_n * kw_n;

        $chunk_runner($out, out_plane, |idx, chunk| {
            let n = idx / $g.out_ch;
            let oc = idx % $g.out_ch;
            let grp = oc / ocg_n;
            chunk.fill(0.0);
            for icg in 0..icg_n {
                let ic = grp * icg_n + icg;
                let xc = &$x[(n * $g.in_ch + ic) * in_plane..][..in_plane];
                for kd in 0..kd_n {
                    let (od_lo, od_hi) = valid_range(kd, pd, sd, d, od_n);
                    for kh in 0..kh_n {
                        let (oh_lo, oh_hi) = valid_range(kh, ph, sh, h, oh_n);
                        let wk = &$w[oc * w_per_oc + (icg * kd_n + kd) * kh_n * kw_n + kh * kw_n..][..kw_n];
                        for od in od_lo..od_hi {
                            let id = (od * sd + kd) as isize - pd as isize;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * sh + kh) as isize - ph as isize;
                                let xrow = &xc[(id as usize * h + ih as usize) * w_ext..][..w_ext];
                                let orow = &mut chunk[(od * oh_n + oh) * ow_n..][..ow_n];
                                for kw in 0..kw_n {
                                    let wv = wk[kw];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let off = kw as isize - pw as isize;
                                    let (lo, hi) = valid_range(kw, pw, sw, w_ext, ow_n);
                                    if sw == 1 {
                                        let xs = &xrow[(lo as isize + off) as usize..];
                                        for (o, xv) in orow[lo..hi].iter_mut().zip(xs) {
                                            *o += wv * xv;
                                        }
                                    } else {
                                        for ow in lo..hi {
                                            let iw = (ow * sw) as isize + off;
                                            orow[ow] += wv * xrow[iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }};
}

/// out = conv3d(x, w). `out` is fully overwritten.
pub fn conv3d_forward(x: &[f64], w: &[f64], g: &ConvGeom, out: &mut [f64]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(w.len(), g.weight_len());
    debug_assert_eq!(out.len(), g.out_len());
    conv_forward_body!(par::for_each_chunk_mut, x, w, g, out)
}

/// Sequential twin of [`conv3d_forward`] for benchmarking.
pub fn conv3d_forward_seq(x: &[f64], w: &[f64], g: &ConvGeom, out: &mut [f64]) {
    conv_forward_body!(par::for_each_chunk_mut_seq, x, w, g, out)
}

macro_rules! conv_input_grad_body {
    ($chunk_runner:path, $dy:ident, $w:ident, $g:ident, $dx:ident) => {{
        let (kd_n, kh_n, kw_n) = $g.kernel;
        let (sd, sh, sw) = $g.stride;
        let (pd, ph, pw) = $g.pad;
        let (d, h, w_ext) = $g.in_dhw;
        let (od_n, oh_n, ow_n) = $g.out_dhw();
        let icg_n = $g.in_ch / $g.groups;
        let ocg_n = $g.out_ch / $g.groups;
        let in_plane = d * h * w_ext;
        let out_plane = od_n * oh_n * ow_n;
        let w_per_oc = icg_n * kd_n * kh_n * kw_n;

        $chunk_runner($dx, in_plane, |idx, chunk| {
            let n = idx / $g.in_ch;
            let ic = idx % $g.in_ch;
            let grp = ic / icg_n;
            let icg = ic % icg_n;
            chunk.fill(0.0);
            for ocg in 0..ocg_n {
                let oc = grp * ocg_n + ocg;
                let dyc = &$dy[(n * $g.out_ch + oc) * out_plane..][..out_plane];
                for kd in 0..kd_n {
                    let (od_lo, od_hi) = valid_range(kd, pd, sd, d, od_n);
                    for kh in 0..kh_n {
                        let (oh_lo, oh_hi) = valid_range(kh, ph, sh, h, oh_n);
                        let wk = &$w[oc * w_per_oc + (icg * kd_n + kd) * kh_n * kw_n + kh * kw_n..][..kw_n];
                        for od in od_lo..od_hi {
                            let id = (od * sd + kd) as isize - pd as isize;
                            for oh in oh_lo..oh_hi {
                                let ih = (oh * sh + kh) as isize - ph as isize;
                                let dxrow = &mut chunk[(id as usize * h + ih as usize) * w_ext..][..w_ext];
                                let dyrow = &dyc[(od * oh_n + oh) * ow_n..][..ow_n];
                                for kw in 0..kw_n {
                                    let wv = wk[kw];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let off = kw as isize - pw as isize;
                                    let (lo, hi) = valid_range(kw, pw, sw, w_ext, ow_n);
                                    if sw == 1 {
                                        let start = (lo as isize + off) as usize;
                                        for (xg, dyv) in dxrow[start..].iter_mut().zip(&dyrow[lo..hi]) {
                                            *xg += wv * dyv;
                                        }
                                    } else {
                                        for ow in lo..hi {
                                            let iw = (ow * sw) as isize + off;
                                            dxrow[iw as usize] += wv * dyrow[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }};
}

/// dx = dConv/dx applied to dy. `dx` is fully overwritten.
pub fn conv3d_input_grad(dy: &[f64], w: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), g.out_len());
    debug_assert_eq!(w.len(), g.weight_len());
    debug_assert_eq!(dx.len(), g.in_len());
    conv_input_grad_body!(par::for_each_chunk_mut, dy, w, g, dx)
}

pub fn conv3d_input_grad_seq(dy: &[f64], w: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    conv_input_grad_body!(par::for_each_chunk_mut_seq, dy, w, g, dx)
}

macro_rules! conv_weight_grad_body {
    ($chunk_runner:path, $x:ident, $dy:ident, $g:ident, $dw:ident) => {{
        let (kd_n, kh_n, kw_n) = $g.kernel;
        let (sd, sh, sw) = $g.stride;
        let (pd, ph, pw) = $g.pad;
        let (d, h, w_ext) = $g.in_dhw;
        let (od_n, oh_n, ow_n) = $g.out_dhw();
        let icg_n = $g.in_ch / $g.groups;
        let ocg_n = $g.out_ch / $g.groups;
        let in_plane = d * h * w_ext;
        let out_plane = od_n * oh_n * ow_n;
        let w_per_oc = icg_n * kd_n * kh_n * kw_n;

        $chunk_runner($dw, w_per_oc, |oc, chunk| {
            let grp = oc / ocg_n;
            chunk.fill(0.0);
            for n in 0..$g.batch {
                let dyc = &$dy[(n * $g.out_ch + oc) * out_plane..][..out_plane];
                for icg in 0..icg_n {
                    let ic = grp * icg_n + icg;
                    let xc = &$x[(n * $g.in_ch + ic) * in_plane..][..in_plane];
                    for kd in 0..kd_n {
                        let (od_lo, od_hi) = valid_range(kd, pd, sd, d, od_n);
                        for kh in 0..kh_n {
                            let (oh_lo, oh_hi) = valid_range(kh, ph, sh, h, oh_n);
                            let wk = &mut chunk[(icg * kd_n + kd) * kh_n * kw_n + kh * kw_n..][..kw_n];
                            for od in od_lo..od_hi {
                                let id = (od * sd + kd) as isize - pd as isize;
                                for oh in oh_lo..oh_hi {
                                    let ih = (oh * sh + kh) as isize - ph as isize;
                                    let xrow = &xc[(id as usize * h + ih as usize) * w_ext..][..w_ext];
                                    let dyrow = &dyc[(od * oh_n + oh) * ow_n..][..ow_n];
                                    for kw in 0..kw_n {
                                        let off = kw as isize - pw as isize;
                                        let (lo, hi) = valid_range(kw, pw, sw, w_ext, ow_n);
                                        let mut acc = 0.0;
                                        if sw == 1 {
                                            let xs = &xrow[(lo as isize + off) as usize..];
                                            for (dyv, xv) in dyrow[lo..hi].iter().zip(xs) {
                                                acc += dyv * xv;
                                            }
                                        } else {
                                            for ow in lo..hi {
                                                let iw = (ow * sw) as isize + off;
                                                acc += dyrow[ow] * xrow[iw as usize];
                                            }
                                        }
                                        wk[kw] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }};
}

/// dw = dConv/dw accumulated over the batch. `dw` is fully overwritten.
pub fn conv3d_weight_grad(x: &[f64], dy: &[f64], g: &ConvGeom, dw: &mut [f64]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(dy.len(), g.out_len());
    debug_assert_eq!(dw.len(), g.weight_len());
    conv_weight_grad_body!(par::for_each_chunk_mut, x, dy, g, dw)
}

pub fn conv3d_weight_grad_seq(x: &[f64], dy: &[f64], g: &ConvGeom, dw: &mut [f64]) {
    conv_weight_grad_body!(par::for_each_chunk_mut_seq, x, dy, g, dw)
}

// ── Max pooling ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub ch: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
    pub in_dhw: (usize, usize, usize),
}

impl PoolGeom {
    pub fn out_dhw(&self) -> (usize, usize, usize) {
        let ext = |i: usize, k: usize, s: usize, p: usize| (i + 2 * p).saturating_sub(k) / s + 1;
        (
            ext(self.in_dhw.0, self.kernel.0, self.stride.0, self.pad.0),
            ext(self.in_dhw.1, self.kernel.1, self.stride.1, self.pad.1),
            ext(self.in_dhw.2, self.kernel.2, self.stride.2, self.pad.2),
        )
    }

    pub fn in_len(&self) -> usize {
        let (d, h, w) = self.in_dhw;
        self.batch * self.ch * d * h * w
    }

    pub fn out_len(&self) -> usize {
        let (d, h, w) = self.out_dhw();
        self.batch * self.ch * d * h * w
    }
}

/// Max pool over each window; `argmax` records the winning flat index within
/// the (n, c) input plane so the backward pass can scatter without re-scanning.
/// Padding positions count as -inf (never win on finite input).
pub fn maxpool3d_forward(x: &[f64], g: &PoolGeom, out: &mut [f64], argmax: &mut [usize]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(out.len(), g.out_len());
    debug_assert_eq!(argmax.len(), g.out_len());
    let (kd_n, kh_n, kw_n) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.pad;
    let (d, h, w_ext) = g.in_dhw;
    let (od_n, oh_n, ow_n) = g.out_dhw();
    let in_plane = d * h * w_ext;
    let out_plane = od_n * oh_n * ow_n;

    // One (n, c) plane per task; out and argmax chunks correspond 1:1.
    let planes: Vec<(usize, Vec<(f64, usize)>)> = par::map_indexed(g.batch * g.ch, |idx| {
        let xc = &x[idx * in_plane..][..in_plane];
        let mut vals = Vec::with_capacity(out_plane);
        for od in 0..od_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for kd in 0..kd_n {
                        let id = (od * sd + kd) as isize - pd as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for kh in 0..kh_n {
                            let ih = (oh * sh + kh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..kw_n {
                                let iw = (ow * sw + kw) as isize - pw as isize;
                                if iw < 0 || iw >= w_ext as isize {
                                    continue;
                                }
                                let at = (id as usize * h + ih as usize) * w_ext + iw as usize;
                                if xc[at] > best {
                                    best = xc[at];
                                    best_at = at;
                                }
                            }
                        }
                    }
                    vals.push((best, best_at));
                }
            }
        }
        (idx, vals)
    });
    for (idx, vals) in planes {
        for (j, (v, a)) in vals.into_iter().enumerate() {
            out[idx * out_plane + j] = v;
            argmax[idx * out_plane + j] = a;
        }
    }
}

/// Scatter dy back through the recorded argmax. `dx` is fully overwritten.
pub fn maxpool3d_backward(dy: &[f64], argmax: &[usize], g: &PoolGeom, dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), g.out_len());
    debug_assert_eq!(dx.len(), g.in_len());
    let (d, h, w_ext) = g.in_dhw;
    let (od_n, oh_n, ow_n) = g.out_dhw();
    let in_plane = d * h * w_ext;
    let out_plane = od_n * oh_n * ow_n;
    par::for_each_chunk_mut(dx, in_plane, |idx, chunk| {
        chunk.fill(0.0);
        let dyc = &dy[idx * out_plane..][..out_plane];
        let amc = &argmax[idx * out_plane..][..out_plane];
        for (dyv, &at) in dyc.iter().zip(amc) {
            chunk[at] += dyv;
        }
    });
}

/// (N, C, D, H, W) -> (N, C) spatial-temporal mean.
pub fn global_avg_pool(x: &[f64], batch: usize, ch: usize, plane: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), batch * ch * plane);
    debug_assert_eq!(out.len(), batch * ch);
    let inv = 1.0 / plane as f64;
    for (i, o) in out.iter_mut().enumerate() {
        let xc = &x[i * plane..][..plane];
        *o = xc.iter().sum::<f64>() * inv;
    }
}

pub fn global_avg_pool_backward(dy: &[f64], batch: usize, ch: usize, plane: usize, dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), batch * ch);
    debug_assert_eq!(dx.len(), batch * ch * plane);
    let inv = 1.0 / plane as f64;
    for (i, &g) in dy.iter().enumerate() {
        let v = g * inv;
        for xv in &mut dx[i * plane..(i + 1) * plane] {
            *xv = v;
        }
    }
}
