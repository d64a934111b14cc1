//! Forward and backward kernels for every primitive the network uses.
//!
//! The forward functions are usable on plain tensors; [`crate::graph::Graph`]
//! records them and calls the matching backward kernels. All reductions run
//! sequentially in a fixed order, so results are bit-reproducible.

use crate::tensor::{Result, Scalar, Shape, Tensor, TensorError};

/// Border handling for 3×3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Mirror without repeating the edge pixel.
    Reflect,
    Zero,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let k = weight.h;
    if weight.w != k || !(k == 1 || k == 3) {
        return Err(TensorError::Unsupported {
            op: "conv2d",
            detail: format!("kernel must be 1x1 or 3x3, got {}x{}", weight.h, weight.w),
        });
    }
    if !(stride == 1 || stride == 2) {
        return Err(TensorError::Unsupported {
            op: "conv2d",
            detail: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    if weight.c != input.c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "input has {} channels but kernel {} expects {}",
                input.c, weight, weight.c
            ),
        });
    }
    if let Some(b) = bias {
        if b.numel() != weight.n {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {b} does not match {} output channels", weight.n),
            });
        }
    }
    let pad = k / 2;
    if padding == Padding::Reflect && pad > 0 && (input.h <= pad || input.w <= pad) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("reflect padding needs spatial extents > {pad}, got {input}"),
        });
    }
    let ph = input.h + 2 * pad;
    let pw = input.w + 2 * pad;
    if ph < k || pw < k {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input {input} smaller than kernel"),
        });
    }
    Ok(ConvGeom {
        n: input.n,
        cin: input.c,
        cout: weight.n,
        k,
        stride,
        pad,
        h: input.h,
        w: input.w,
        ph,
        pw,
        oh: (ph - k) / stride + 1,
        ow: (pw - k) / stride + 1,
    })
}

/// Maps a padded coordinate back to its source coordinate, if any.
fn source_coord(p: usize, pad: usize, len: usize, padding: Padding) -> Option<usize> {
    let i = p as isize - pad as isize;
    let len = len as isize;
    if (0..len).contains(&i) {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Reflect => {
            let r = if i < 0 { -i } else { 2 * (len - 1) - i };
            Some(r as usize)
        }
    }
}

/// Padded copy of every (n, c) plane.
fn pad_input<T: Scalar>(input: &Tensor<T>, g: &ConvGeom, padding: Padding) -> Vec<T> {
    if g.pad == 0 {
        return input.data().to_vec();
    }
    let rows: Vec<Option<usize>> = (0..g.ph)
        .map(|p| source_coord(p, g.pad, g.h, padding))
        .collect();
    let cols: Vec<Option<usize>> = (0..g.pw)
        .map(|p| source_coord(p, g.pad, g.w, padding))
        .collect();
    let mut out = vec![T::zero(); g.n * g.cin * g.ph * g.pw];
    for (plane_idx, dst) in out.chunks_mut(g.ph * g.pw).enumerate() {
        let src = &input.data()[plane_idx * g.h * g.w..(plane_idx + 1) * g.h * g.w];
        for (py, row) in rows.iter().enumerate() {
            let Some(sy) = row else { continue };
            let dst_row = &mut dst[py * g.pw..(py + 1) * g.pw];
            let src_row = &src[sy * g.w..(sy + 1) * g.w];
            for (px, col) in cols.iter().enumerate() {
                if let Some(sx) = col {
                    dst_row[px] = src_row[*sx];
                }
            }
        }
    }
    out
}

/// 2-D convolution (cross-correlation) with a square 1×1 or 3×3 kernel.
///
/// `weight` has shape `[Cout, Cin, k, k]`; `bias` holds `Cout` values in any
/// 4-D layout. 3×3 kernels pad by one pixel on each side.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(
        input.shape(),
        weight.shape(),
        bias.map(|b| b.shape()),
        stride,
        padding,
    )?;
    let padded = pad_input(input, &g, padding);
    let out_shape = Shape::new(g.n, g.cout, g.oh, g.ow)?;
    let mut out = vec![T::zero(); out_shape.numel()];
    let wd = weight.data();
    let kk = g.k * g.k;
    let in_plane = g.ph * g.pw;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.cout {
            let dst = &mut out[(n * g.cout + co) * out_plane..][..out_plane];
            if let Some(b) = bias {
                dst.fill(b.data()[co]);
            }
            for ci in 0..g.cin {
                let src = &padded[(n * g.cin + ci) * in_plane..][..in_plane];
                let wk = &wd[(co * g.cin + ci) * kk..][..kk];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        for oy in 0..g.oh {
                            let srow = &src[(oy * g.stride + ky) * g.pw..][..g.pw];
                            let drow = &mut dst[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                for (d, &s) in drow.iter_mut().zip(&srow[kx..kx + g.ow]) {
                                    *d = *d + wv * s;
                                }
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    *d = *d + wv * srow[ox * g.stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input.shape(), weight.shape(), None, stride, padding)?;
    let (need_input, need_weight, need_bias) = need;
    let kk = g.k * g.k;
    let in_plane = g.ph * g.pw;
    let out_plane = g.oh * g.ow;
    let go = grad_out.data();
    let wd = weight.data();

    let bias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                for &v in &go[(n * g.cout + co) * out_plane..][..out_plane] {
                    *acc = *acc + v;
                }
            }
        }
        db
    });

    let weight_grad = if need_weight {
        let padded = pad_input(input, &g, padding);
        let mut dw = vec![T::zero(); weight.numel()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let mut acc = T::zero();
                        for n in 0..g.n {
                            let src = &padded[(n * g.cin + ci) * in_plane..][..in_plane];
                            let gp = &go[(n * g.cout + co) * out_plane..][..out_plane];
                            for oy in 0..g.oh {
                                let srow = &src[(oy * g.stride + ky) * g.pw..][..g.pw];
                                let grow = &gp[oy * g.ow..][..g.ow];
                                if g.stride == 1 {
                                    for (&gv, &s) in grow.iter().zip(&srow[kx..kx + g.ow]) {
                                        acc = acc + gv * s;
                                    }
                                } else {
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        acc = acc + gv * srow[ox * g.stride + kx];
                                    }
                                }
                            }
                        }
                        dw[(co * g.cin + ci) * kk + ky * g.k + kx] = acc;
                    }
                }
            }
        }
        Some(Tensor::new(weight.shape(), dw)?)
    } else {
        None
    };

    let input_grad = if need_input {
        let mut dpad = vec![T::zero(); g.n * g.cin * in_plane];
        for n in 0..g.n {
            for ci in 0..g.cin {
                let dst = &mut dpad[(n * g.cin + ci) * in_plane..][..in_plane];
                for co in 0..g.cout {
                    let gp = &go[(n * g.cout + co) * out_plane..][..out_plane];
                    let wk = &wd[(co * g.cin + ci) * kk..][..kk];
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = wk[ky * g.k + kx];
                            for oy in 0..g.oh {
                                let drow = &mut dst[(oy * g.stride + ky) * g.pw..][..g.pw];
                                let grow = &gp[oy * g.ow..][..g.ow];
                                if g.stride == 1 {
                                    for (d, &gv) in drow[kx..kx + g.ow].iter_mut().zip(grow) {
                                        *d = *d + wv * gv;
                                    }
                                } else {
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        let d = &mut drow[ox * g.stride + kx];
                                        *d = *d + wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(unpad_grad(&dpad, &g, padding, input.shape())?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    })
}

/// Folds a gradient over the padded input back onto the source pixels.
fn unpad_grad<T: Scalar>(
    dpad: &[T],
    g: &ConvGeom,
    padding: Padding,
    shape: Shape,
) -> Result<Tensor<T>> {
    if g.pad == 0 {
        return Tensor::new(shape, dpad.to_vec());
    }
    let rows: Vec<Option<usize>> = (0..g.ph)
        .map(|p| source_coord(p, g.pad, g.h, padding))
        .collect();
    let cols: Vec<Option<usize>> = (0..g.pw)
        .map(|p| source_coord(p, g.pad, g.w, padding))
        .collect();
    let mut dx = vec![T::zero(); shape.numel()];
    for (plane_idx, src) in dpad.chunks(g.ph * g.pw).enumerate() {
        let dst = &mut dx[plane_idx * g.h * g.w..(plane_idx + 1) * g.h * g.w];
        for (py, row) in rows.iter().enumerate() {
            let Some(sy) = row else { continue };
            for (px, col) in cols.iter().enumerate() {
                if let Some(sx) = col {
                    let d = &mut dst[sy * g.w + sx];
                    *d = *d + src[py * g.pw + px];
                }
            }
        }
    }
    Tensor::new(shape, dx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient is passed only where the input is strictly positive.
pub(crate) fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("shape preserved")
}

pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 2 {
        return Err(TensorError::Unsupported {
            op: "upsample_nearest",
            detail: format!("factor must be at least 2, got {factor}"),
        });
    }
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor)?;
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in input.data().chunks(s.plane()) {
        for y in 0..out_shape.h {
            let row = &plane[(y / factor) * s.w..][..s.w];
            for x in 0..out_shape.w {
                out.push(row[x / factor]);
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(
    input_shape: Shape,
    factor: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let os = grad_out.shape();
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (dst, src) in dx
        .chunks_mut(input_shape.plane())
        .zip(grad_out.data().chunks(os.plane()))
    {
        for y in 0..os.h {
            for x in 0..os.w {
                let d = &mut dst[(y / factor) * input_shape.w + x / factor];
                *d = *d + src[y * os.w + x];
            }
        }
    }
    Tensor::new(input_shape, dx).expect("shape preserved")
}

/// Softmax over the last axis (W) of every row, with row-max subtraction.
pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let w = scores.shape().w;
    let mut out = scores.data().to_vec();
    for row in out.chunks_mut(w) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(scores.shape(), out).expect("shape preserved")
}

pub(crate) fn softmax_rows_backward<T: Scalar>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let w = output.shape().w;
    let mut dx = Vec::with_capacity(output.numel());
    for (y, g) in output.data().chunks(w).zip(grad_out.data().chunks(w)) {
        let dot = y
            .iter()
            .zip(g)
            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
        dx.extend(y.iter().zip(g).map(|(&yv, &gv)| yv * (gv - dot)));
    }
    Tensor::new(output.shape(), dx).expect("shape preserved")
}

/// Population mean and variance of one plane, accumulated sequentially.
fn plane_moments<T: Scalar>(plane: &[T]) -> (T, T) {
    let count = T::from_usize(plane.len()).expect("plane length fits");
    let mean = plane.iter().fold(T::zero(), |a, &v| a + v) / count;
    let var = plane.iter().fold(T::zero(), |a, &v| {
        let d = v - mean;
        a + d * d
    }) / count;
    (mean, var)
}

/// Output of [`mean_var_normalize`] plus the per-(n, c) inverse std it used.
pub struct Normalized<T> {
    pub output: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-sample, per-channel standardisation over spatial positions:
/// `(x - mean) / sqrt(var + eps)`.
pub fn mean_var_normalize<T: Scalar>(input: &Tensor<T>, eps: T) -> Normalized<T> {
    let p = input.shape().plane();
    let mut out = Vec::with_capacity(input.numel());
    let mut inv_std = Vec::with_capacity(input.numel() / p);
    for plane in input.data().chunks(p) {
        let (mean, var) = plane_moments(plane);
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        out.extend(plane.iter().map(|&v| (v - mean) * is));
    }
    Normalized {
        output: Tensor::new(input.shape(), out).expect("shape preserved"),
        inv_std,
    }
}

pub(crate) fn mean_var_normalize_backward<T: Scalar>(
    output: &Tensor<T>,
    inv_std: &[T],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let p = output.shape().plane();
    let count = T::from_usize(p).expect("plane length fits");
    let mut dx = Vec::with_capacity(output.numel());
    for ((y, g), &is) in output
        .data()
        .chunks(p)
        .zip(grad_out.data().chunks(p))
        .zip(inv_std)
    {
        let mean_g = g.iter().fold(T::zero(), |a, &v| a + v) / count;
        let mean_gy = y.iter().zip(g).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv) / count;
        dx.extend(
            y.iter()
                .zip(g)
                .map(|(&yv, &gv)| is * (gv - mean_g - yv * mean_gy)),
        );
    }
    Tensor::new(output.shape(), dx).expect("shape preserved")
}

/// Per-sample, per-channel mean and std (`sqrt(var + eps)`) as `[N, C, 1, 1]`.
pub fn channel_stats<T: Scalar>(input: &Tensor<T>, eps: T) -> (Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let stat_shape = Shape { h: 1, w: 1, ..s };
    let (mu, sigma): (Vec<T>, Vec<T>) = input
        .data()
        .chunks(s.plane())
        .map(|plane| {
            let (m, v) = plane_moments(plane);
            (m, (v + eps).sqrt())
        })
        .unzip();
    (
        Tensor::new(stat_shape, mu).expect("stat shape"),
        Tensor::new(stat_shape, sigma).expect("stat shape"),
    )
}

pub(crate) fn channel_mean_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let p = input_shape.plane();
    let count = T::from_usize(p).expect("plane length fits");
    let mut dx = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g / count, p));
    }
    Tensor::new(input_shape, dx).expect("shape preserved")
}

pub(crate) fn channel_std_backward<T: Scalar>(
    input: &Tensor<T>,
    sigma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let p = input.shape().plane();
    let count = T::from_usize(p).expect("plane length fits");
    let mut dx = Vec::with_capacity(input.numel());
    for ((plane, &sd), &g) in input
        .data()
        .chunks(p)
        .zip(sigma.data())
        .zip(grad_out.data())
    {
        let (mean, _) = plane_moments(plane);
        let scale = g / (count * sd);
        dx.extend(plane.iter().map(|&v| (v - mean) * scale));
    }
    Tensor::new(input.shape(), dx).expect("shape preserved")
}

/// Batched matrix product over the trailing (H, W) axes: `[N, C, m, k] x [N, C, k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("{sa} x {sb}"),
        });
    }
    let (m, k, n) = (sa.h, sa.w, sb.w);
    let out_shape = Shape::new(sa.n, sa.c, m, n)?;
    let mut out = vec![T::zero(); out_shape.numel()];
    for ((am, bm), om) in a
        .data()
        .chunks(m * k)
        .zip(b.data().chunks(k * n))
        .zip(out.chunks_mut(m * n))
    {
        matmul_into(am, bm, om, m, k, n);
    }
    Tensor::new(out_shape, out)
}

/// `out[m, n] += a[m, k] * b[k, n]`.
fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Swaps the H and W axes of every (n, c) plane.
pub fn transpose_last2<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let out_shape = Shape {
        h: s.w,
        w: s.h,
        ..s
    };
    let mut out = Vec::with_capacity(input.numel());
    for plane in input.data().chunks(s.plane()) {
        for x in 0..s.w {
            for y in 0..s.h {
                out.push(plane[y * s.w + x]);
            }
        }
    }
    Tensor::new(out_shape, out).expect("shape preserved")
}

type GradPair<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: (bool, bool),
) -> Result<GradPair<T>> {
    let da = if need.0 {
        Some(matmul(grad_out, &transpose_last2(b))?)
    } else {
        None
    };
    let db = if need.1 {
        Some(matmul(&transpose_last2(a), grad_out)?)
    } else {
        None
    };
    Ok((da, db))
}
