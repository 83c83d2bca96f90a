//! Forward and backward kernels for the differentiable operations.
//!
//! These are plain functions over [`Tensor`] values; [`crate::autodiff`]
//! records them on a tape and calls the matching backward kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rectangular window of a C×H×W map.
#[derive(Clone, Copy, Debug)]
struct Window {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

/// Geometry shared by every (kernel-row, kernel-col) tap of a windowed conv.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    win_in: Window,
    win_out: Window,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl ConvGeom {
    fn padded_dims(&self) -> (usize, usize) {
        (self.win_in.h + 2 * self.pad.0, self.win_in.w + 2 * self.pad.1)
    }

    /// Start of output row `oy` (window-relative) of channel `co`.
    #[inline]
    fn out_row(&self, co: usize, oy: usize) -> usize {
        (co * self.out_h + self.win_out.y0 + oy) * self.out_w + self.win_out.x0
    }

    /// The input window of every channel, zero-padded on all sides.
    fn pad_window<T: Scalar>(&self, x: &[T], cin: usize) -> Vec<T> {
        let (hp, wp) = self.padded_dims();
        let mut buf = vec![T::zero(); cin * hp * wp];
        for ci in 0..cin {
            for y in 0..self.win_in.h {
                let src = (ci * self.in_h + self.win_in.y0 + y) * self.in_w + self.win_in.x0;
                let dst = (ci * hp + y + self.pad.0) * wp + self.pad.1;
                buf[dst..dst + self.win_in.w].copy_from_slice(&x[src..src + self.win_in.w]);
            }
        }
        buf
    }
}

/// `acc[ox] += w · row[ox · stride]`.
#[inline]
fn axpy<T: Scalar>(acc: &mut [T], w: T, row: &[T], stride: usize) {
    if stride == 1 {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += w * v;
        }
    } else {
        for (a, &v) in acc.iter_mut().zip(row.iter().step_by(stride)) {
            *a += w * v;
        }
    }
}

/// `Σ_ox a[ox] · row[ox · stride]`, accumulated left to right onto `init`.
#[inline]
fn dot_onto<T: Scalar>(init: T, a: &[T], row: &[T], stride: usize) -> T {
    let mut acc = init;
    if stride == 1 {
        for (&u, &v) in a.iter().zip(row) {
            acc += u * v;
        }
    } else {
        for (&u, &v) in a.iter().zip(row.iter().step_by(stride)) {
            acc += u * v;
        }
    }
    acc
}

// Stride-1 windows are computed in the padded row pitch `wp`: output (oy, ox)
// lives at `oy·wp + ox`, so every kernel tap is one contiguous axpy of
// length `(oh − 1)·wp + ow`. The `wp − ow` trailing columns of each row are
// scratch and never read back.

fn conv_window_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    k: &[T],
    b: &[T],
    cout: usize,
    g: &ConvGeom,
    out: &mut [T],
) {
    let (kh, kw) = (g.kh, g.kw);
    let (hp, wp) = g.padded_dims();
    let (oh, ow) = (g.win_out.h, g.win_out.w);
    let (sh, sw) = g.stride;
    let xp = g.pad_window(x, cin);
    let pitch = if sh == 1 && sw == 1 { wp } else { ow };
    let span = (oh - 1) * pitch + ow;
    let mut acc = vec![T::zero(); oh * pitch];
    for co in 0..cout {
        acc.fill(b[co]);
        for ci in 0..cin {
            let kbase = (co * cin + ci) * kh * kw;
            for i in 0..kh {
                for j in 0..kw {
                    let wv = k[kbase + i * kw + j];
                    if pitch == wp {
                        let r = (ci * hp + i) * wp + j;
                        axpy(&mut acc[..span], wv, &xp[r..r + span], 1);
                    } else {
                        for oy in 0..oh {
                            let r = (ci * hp + oy * sh + i) * wp + j;
                            axpy(&mut acc[oy * ow..(oy + 1) * ow], wv, &xp[r..], sw);
                        }
                    }
                }
            }
        }
        for oy in 0..oh {
            let o = g.out_row(co, oy);
            out[o..o + ow].copy_from_slice(&acc[oy * pitch..oy * pitch + ow]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_window_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    k: &[T],
    cout: usize,
    g: &ConvGeom,
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    mut grad_k: Option<&mut [T]>,
    mut grad_b: Option<&mut [T]>,
) {
    let (kh, kw) = (g.kh, g.kw);
    let (hp, wp) = g.padded_dims();
    let (oh, ow) = (g.win_out.h, g.win_out.w);
    let (sh, sw) = g.stride;
    let xp = g.pad_window(x, cin);
    let dense = sh == 1 && sw == 1;
    let pitch = if dense { wp } else { ow };
    let span = (oh - 1) * pitch + ow;
    let mut gxp = grad_x.as_ref().map(|_| vec![T::zero(); cin * hp * wp]);
    // Scratch columns stay zero so they add nothing to either gradient.
    let mut go = vec![T::zero(); oh * pitch];
    for co in 0..cout {
        for oy in 0..oh {
            let o = g.out_row(co, oy);
            go[oy * pitch..oy * pitch + ow].copy_from_slice(&grad_out[o..o + ow]);
        }
        if let Some(gb) = grad_b.as_deref_mut() {
            gb[co] += go.iter().fold(T::zero(), |a, &v| a + v);
        }
        for ci in 0..cin {
            let kbase = (co * cin + ci) * kh * kw;
            for i in 0..kh {
                for j in 0..kw {
                    let wv = k[kbase + i * kw + j];
                    if let Some(gxp) = gxp.as_mut() {
                        if dense {
                            let r = (ci * hp + i) * wp + j;
                            axpy(&mut gxp[r..r + span], wv, &go[..span], 1);
                        } else {
                            for oy in 0..oh {
                                let r = (ci * hp + oy * sh + i) * wp + j;
                                let src = &go[oy * ow..(oy + 1) * ow];
                                for (d, &v) in gxp[r..].iter_mut().step_by(sw).zip(src) {
                                    *d += wv * v;
                                }
                            }
                        }
                    }
                    if let Some(gk) = grad_k.as_deref_mut() {
                        let kacc = if dense {
                            let r = (ci * hp + i) * wp + j;
                            dot_onto(T::zero(), &go[..span], &xp[r..r + span], 1)
                        } else {
                            (0..oh).fold(T::zero(), |a, oy| {
                                let r = (ci * hp + oy * sh + i) * wp + j;
                                dot_onto(a, &go[oy * ow..(oy + 1) * ow], &xp[r..], sw)
                            })
                        };
                        gk[kbase + i * kw + j] += kacc;
                    }
                }
            }
        }
    }
    if let (Some(gx), Some(gxp)) = (grad_x, gxp) {
        for ci in 0..cin {
            for y in 0..g.win_in.h {
                let dst = (ci * g.in_h + g.win_in.y0 + y) * g.in_w + g.win_in.x0;
                let src = (ci * hp + y + g.pad.0) * wp + g.pad.1;
                for (d, &v) in gx[dst..dst + g.win_in.w].iter_mut().zip(&gxp[src..src + g.win_in.w]) {
                    *d += v;
                }
            }
        }
    }
}

/// Output spatial extent of a convolution, requiring exact division.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::shape(format!(
            "non-integral output size: ({padded} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvShapes {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

fn conv_shapes<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<ConvShapes> {
    let (cin, h, w) = input.as_chw()?;
    let [cout, kcin, kh, kw] = kernels.shape()[..] else {
        return Err(Error::shape(format!(
            "kernels must be C_out×C_in×k_h×k_w, got {:?}",
            kernels.shape()
        )));
    };
    if kcin != cin {
        return Err(Error::shape(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    Ok(ConvShapes { cin, h, w, cout, kh, kw })
}

/// 2-D cross-correlation of a C_in×H×W map.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let s = conv_shapes(input, kernels, bias)?;
    let oh = conv_out_dim(s.h, s.kh, stride.0, padding.0)?;
    let ow = conv_out_dim(s.w, s.kw, stride.1, padding.1)?;
    let g = ConvGeom {
        in_h: s.h,
        in_w: s.w,
        out_h: oh,
        out_w: ow,
        win_in: Window { y0: 0, x0: 0, h: s.h, w: s.w },
        win_out: Window { y0: 0, x0: 0, h: oh, w: ow },
        kh: s.kh,
        kw: s.kw,
        stride,
        pad: padding,
    };
    let mut out = vec![T::zero(); s.cout * oh * ow];
    conv_window_forward(input.data(), s.cin, kernels.data(), bias.data(), s.cout, &g, &mut out);
    Ok(Tensor::from_raw(vec![s.cout, oh, ow], out))
}

/// Gradients of [`conv2d`] with respect to (input, kernels, bias).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (cin, h, w) = input.as_chw().expect("validated in forward");
    let [cout, _, kh, kw] = kernels.shape()[..] else { unreachable!() };
    let (_, oh, ow) = grad_out.as_chw().expect("validated in forward");
    let g = ConvGeom {
        in_h: h,
        in_w: w,
        out_h: oh,
        out_w: ow,
        win_in: Window { y0: 0, x0: 0, h, w },
        win_out: Window { y0: 0, x0: 0, h: oh, w: ow },
        kh,
        kw,
        stride,
        pad: padding,
    };
    let mut gx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut gk = Tensor::zeros(kernels.shape());
    let mut gb = Tensor::zeros(&[cout]);
    conv_window_backward(
        input.data(),
        cin,
        kernels.data(),
        cout,
        &g,
        grad_out.data(),
        gx.as_mut().map(|t| t.data_mut()),
        Some(gk.data_mut()),
        Some(gb.data_mut()),
    );
    (gx, gk, gb)
}

struct GridShapes {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    cell_h: usize,
    cell_w: usize,
}

fn grid_shapes<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    grid: usize,
    padding: (usize, usize),
) -> Result<GridShapes> {
    let (cin, h, w) = input.as_chw()?;
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::shape(format!(
            "{h}×{w} map is not divisible into a {grid}×{grid} grid"
        )));
    }
    let [cells, cout, kcin, kh, kw] = kernels.shape()[..] else {
        return Err(Error::shape(format!(
            "grid kernels must be cells×C_out×C_in×k_h×k_w, got {:?}",
            kernels.shape()
        )));
    };
    if cells != grid * grid || kcin != cin {
        return Err(Error::shape(format!(
            "grid kernels {:?} incompatible with {grid}×{grid} grid over {cin} channels",
            kernels.shape()
        )));
    }
    if bias.shape() != [cells, cout] {
        return Err(Error::shape(format!(
            "grid bias shape {:?}, expected [{cells}, {cout}]",
            bias.shape()
        )));
    }
    if kh != 2 * padding.0 + 1 || kw != 2 * padding.1 + 1 {
        return Err(Error::shape(format!(
            "grid conv needs size-preserving kernels, got {kh}×{kw} with padding {padding:?}"
        )));
    }
    Ok(GridShapes {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        cell_h: h / grid,
        cell_w: w / grid,
    })
}

impl GridShapes {
    fn geom(&self, grid: usize, cell: usize, padding: (usize, usize)) -> ConvGeom {
        let (gy, gx) = (cell / grid, cell % grid);
        let win = Window {
            y0: gy * self.cell_h,
            x0: gx * self.cell_w,
            h: self.cell_h,
            w: self.cell_w,
        };
        ConvGeom {
            in_h: self.h,
            in_w: self.w,
            out_h: self.h,
            out_w: self.w,
            win_in: win,
            win_out: win,
            kh: self.kh,
            kw: self.kw,
            stride: (1, 1),
            pad: padding,
        }
    }
}

/// Patch-wise convolution: the map is split into a `grid`×`grid` array of
/// cells and each cell is convolved, with zero padding at the cell border, by
/// its own kernel bank. Cells are indexed row-major.
pub fn grid_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    grid: usize,
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let s = grid_shapes(input, kernels, bias, grid, padding)?;
    let bank = s.cout * s.cin * s.kh * s.kw;
    let mut out = vec![T::zero(); s.cout * s.h * s.w];
    for cell in 0..grid * grid {
        let g = s.geom(grid, cell, padding);
        conv_window_forward(
            input.data(),
            s.cin,
            &kernels.data()[cell * bank..(cell + 1) * bank],
            &bias.data()[cell * s.cout..(cell + 1) * s.cout],
            s.cout,
            &g,
            &mut out,
        );
    }
    Ok(Tensor::from_raw(vec![s.cout, s.h, s.w], out))
}

pub fn grid_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    grid: usize,
    padding: (usize, usize),
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let s = grid_shapes(input, kernels, bias, grid, padding).expect("validated in forward");
    let bank = s.cout * s.cin * s.kh * s.kw;
    let mut gx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut gk = Tensor::zeros(kernels.shape());
    let mut gb = Tensor::zeros(bias.shape());
    for cell in 0..grid * grid {
        let g = s.geom(grid, cell, padding);
        conv_window_backward(
            input.data(),
            s.cin,
            &kernels.data()[cell * bank..(cell + 1) * bank],
            s.cout,
            &g,
            grad_out.data(),
            gx.as_mut().map(|t| t.data_mut()),
            Some(&mut gk.data_mut()[cell * bank..(cell + 1) * bank]),
            Some(&mut gb.data_mut()[cell * s.cout..(cell + 1) * s.cout]),
        );
    }
    (gx, gk, gb)
}

/// 2×2 max pooling with stride 2. Returns the pooled map and, for every output
/// cell, the flat input index that won; ties go to the first cell in
/// row-major order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.as_chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "2×2 max-pool needs even spatial dims, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_raw(vec![c, oh, ow], out), arg))
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.as_chw()?;
    let n = T::from_usize(h * w).unwrap();
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) / n)
        .collect();
    Ok(Tensor::from_raw(vec![c], out))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = a.as_matrix()?;
    let (k2, m) = b.as_matrix()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_raw(vec![n, m], out))
}

/// `x · wᵀ + b` for x: n×in, w: out×in, b: out.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin) = x.as_matrix()?;
    let (fout, win) = w.as_matrix()?;
    if fin != win || b.shape() != [fout] {
        return Err(Error::shape(format!(
            "linear: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(n * fout);
    for i in 0..n {
        let xr = &xd[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let wr = &wd[o * fin..(o + 1) * fin];
            let dot = xr.iter().zip(wr).fold(bd[o], |acc, (&a, &b)| acc + a * b);
            out.push(dot);
        }
    }
    Ok(Tensor::from_raw(vec![n, fout], out))
}

/// Multiplies every channel of a C×H×W map by an H×W map.
pub fn broadcast_mul_channelwise<T: Scalar>(map: &Tensor<T>, feat: &Tensor<T>) -> Result<Tensor<T>> {
    let (mh, mw) = map.as_matrix()?;
    let (c, h, w) = feat.as_chw()?;
    if (mh, mw) != (h, w) {
        return Err(Error::shape(format!(
            "map {:?} does not match feature plane {h}×{w}",
            map.shape()
        )));
    }
    let m = map.data();
    let mut out = Vec::with_capacity(c * h * w);
    for plane in feat.data().chunks_exact(h * w) {
        out.extend(plane.iter().zip(m).map(|(&f, &a)| f * a));
    }
    Ok(Tensor::from_raw(vec![c, h, w], out))
}

/// Logistic function, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    if s.is_nan() {
        return s;
    }
    // Rounded toward the interior: finite results always lie in the open (0, 1).
    s.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::lit(2.0))
}
