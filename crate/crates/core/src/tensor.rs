//! Dense NCHW tensors and the handful of kernels the networks need.

use std::fmt::Debug;

use num_traits::Float;

/// Scalar type a network can run in. `f32` is the default; `f64` is used for
/// finite-difference checks.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a * b + beta * c` for row/column-strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(span(m, k, rsa, csa) <= a.len());
                debug_assert!(span(k, n, rsb, csb) <= b.len());
                debug_assert!(span(m, n, rsc, csc) <= c.len());
                // SAFETY: the asserted spans keep every strided access inside the slices.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Shape of a batch of feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(shape.numel(), data.len(), "data length does not match {shape}");
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(shape.numel(), self.shape.numel());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single image `b` of the batch, as a 1-image tensor.
    pub fn image(&self, b: usize) -> Self {
        let len = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[b * len..(b + 1) * len].to_vec(),
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// Stacks equally shaped single-image tensors into one batch.
    pub fn stack(items: &[Tensor<T>]) -> Self {
        assert!(!items.is_empty());
        let s = items[0].shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            assert_eq!((t.shape.c, t.shape.h, t.shape.w), (s.c, s.h, s.w));
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Tensor {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        }
    }
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }
}

/// Unfolds the channels `[c0, c0 + cg)` of every image into a
/// `(cg * k * k) x (n * ho * wo)` column matrix.
fn im2col<T: Real>(x: &Tensor<T>, g: &ConvGeometry, c0: usize, cg: usize, col: &mut Vec<T>) {
    let s = x.shape;
    let (ho, wo) = (g.out_extent(s.h), g.out_extent(s.w));
    let k = g.kernel;
    let cols = s.n * ho * wo;
    col.clear();
    col.resize(cg * k * k * cols, T::zero());
    let pad = g.padding as isize;
    for ci in 0..cg {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..s.n {
                    let plane = &x.data[((n * s.c) + c0 + ci) * s.h * s.w..][..s.h * s.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride) as isize + ky as isize - pad;
                        let dst = &mut dst_row[(n * ho + oy) * wo..][..wo];
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * s.w..][..s.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < s.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeometry, c0: usize, cg: usize, dx: &mut Tensor<T>) {
    let s = dx.shape;
    let (ho, wo) = (g.out_extent(s.h), g.out_extent(s.w));
    let k = g.kernel;
    let cols = s.n * ho * wo;
    let pad = g.padding as isize;
    for ci in 0..cg {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..s.n {
                    let base = ((n * s.c) + c0 + ci) * s.h * s.w;
                    for oy in 0..ho {
                        let iy = (oy * g.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src = &src_row[(n * ho + oy) * wo..][..wo];
                        let dst = &mut dx.data[base + iy as usize * s.w..][..s.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < s.w as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.padding == 0
}

/// Direct convolution. `weight` has shape `(out, in / groups, k, k)`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let s = x.shape;
    assert_eq!(s.c, g.in_channels, "conv input channels");
    assert_eq!(weight.shape, g.weight_shape(), "conv weight shape");
    let (ho, wo) = (g.out_extent(s.h), g.out_extent(s.w));
    let out_shape = Shape::new(s.n, g.out_channels, ho, wo);
    let mut y = Tensor::zeros(out_shape);
    let cg_in = g.in_channels / g.groups;
    let cg_out = g.out_channels / g.groups;
    let kk = g.patch_len();
    let hw = ho * wo;
    let mut col = Vec::new();
    let mut tmp = Vec::new();
    for grp in 0..g.groups {
        let w = &weight.data[grp * cg_out * kk..(grp + 1) * cg_out * kk];
        if is_pointwise(g) {
            // Columns are the input planes themselves, one GEMM per image.
            for n in 0..s.n {
                let xin = &x.data[(n * s.c + grp * cg_in) * hw..][..cg_in * hw];
                let yout = &mut y.data[(n * g.out_channels + grp * cg_out) * hw..][..cg_out * hw];
                T::gemm(
                    cg_out, cg_in, hw, T::one(), w, kk as isize, 1, xin, hw as isize, 1,
                    T::zero(), yout, hw as isize, 1,
                );
            }
            continue;
        }
        im2col(x, g, grp * cg_in, cg_in, &mut col);
        let cols = s.n * hw;
        tmp.clear();
        tmp.resize(cg_out * cols, T::zero());
        T::gemm(
            cg_out, kk, cols, T::one(), w, kk as isize, 1, &col, cols as isize, 1, T::zero(),
            &mut tmp, cols as isize, 1,
        );
        for n in 0..s.n {
            for co in 0..cg_out {
                let src = &tmp[co * cols + n * hw..][..hw];
                let dst = &mut y.data[(n * g.out_channels + grp * cg_out + co) * hw..][..hw];
                dst.copy_from_slice(src);
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..s.n {
            for co in 0..g.out_channels {
                let bv = b.data[co];
                for v in &mut y.data[(n * g.out_channels + co) * hw..][..hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeometry,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let s = x.shape;
    let ys = dy.shape;
    let hw = ys.h * ys.w;
    let cg_in = g.in_channels / g.groups;
    let cg_out = g.out_channels / g.groups;
    let kk = g.patch_len();
    let mut dw = Tensor::zeros(weight.shape);
    let mut dx = want_dx.then(|| Tensor::zeros(s));
    let mut db = Tensor::zeros(Shape::new(1, g.out_channels, 1, 1));
    for n in 0..ys.n {
        for co in 0..g.out_channels {
            let plane = &dy.data[(n * g.out_channels + co) * hw..][..hw];
            db.data[co] = db.data[co] + plane.iter().copied().sum::<T>();
        }
    }
    let mut col = Vec::new();
    let mut dyp = Vec::new();
    for grp in 0..g.groups {
        let w = &weight.data[grp * cg_out * kk..(grp + 1) * cg_out * kk];
        let dwg = &mut dw.data[grp * cg_out * kk..(grp + 1) * cg_out * kk];
        if is_pointwise(g) {
            for n in 0..s.n {
                let xin = &x.data[(n * s.c + grp * cg_in) * hw..][..cg_in * hw];
                let dyn_ = &dy.data[(n * g.out_channels + grp * cg_out) * hw..][..cg_out * hw];
                // dW += dY * X^T
                T::gemm(
                    cg_out, hw, cg_in, T::one(), dyn_, hw as isize, 1, xin, 1, hw as isize,
                    T::one(), dwg, kk as isize, 1,
                );
                if let Some(dx) = dx.as_mut() {
                    let dxn = &mut dx.data[(n * s.c + grp * cg_in) * hw..][..cg_in * hw];
                    // dX = W^T * dY
                    T::gemm(
                        cg_in, cg_out, hw, T::one(), w, 1, kk as isize, dyn_, hw as isize, 1,
                        T::zero(), dxn, hw as isize, 1,
                    );
                }
            }
            continue;
        }
        let cols = s.n * hw;
        dyp.clear();
        dyp.resize(cg_out * cols, T::zero());
        for n in 0..s.n {
            for co in 0..cg_out {
                let src = &dy.data[(n * g.out_channels + grp * cg_out + co) * hw..][..hw];
                dyp[co * cols + n * hw..][..hw].copy_from_slice(src);
            }
        }
        im2col(x, g, grp * cg_in, cg_in, &mut col);
        T::gemm(
            cg_out, cols, kk, T::one(), &dyp, cols as isize, 1, &col, 1, cols as isize,
            T::one(), dwg, kk as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                kk, cg_out, cols, T::one(), w, 1, kk as isize, &dyp, cols as isize, 1,
                T::zero(), &mut col, cols as isize, 1,
            );
            col2im(&col, g, grp * cg_in, cg_in, dx);
        }
    }
    (dx, dw, db)
}

/// Per-axis sampling table for bilinear resizing with half-pixel centers
/// (the `align_corners = false` convention).
#[derive(Debug, Clone)]
pub(crate) struct AxisWeights<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<T>,
}

impl<T: Real> AxisWeights<T> {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            lo.push(i0);
            hi.push(i1);
            w_hi.push(T::from_f64(frac));
        }
        AxisWeights { lo, hi, w_hi }
    }
}

pub fn resize_bilinear<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape;
    if s.h == h && s.w == w {
        return x.clone();
    }
    let ay = AxisWeights::<T>::new(s.h, h);
    let ax = AxisWeights::<T>::new(s.w, w);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    // Lerp form keeps constant inputs exactly constant.
    let lerp = |a: T, b: T, f: T| a + (b - a) * f;
    for p in 0..s.n * s.c {
        let src = &x.data[p * s.h * s.w..][..s.h * s.w];
        let dst = &mut y.data[p * h * w..][..h * w];
        for oy in 0..h {
            let (r0, r1, fy) = (ay.lo[oy] * s.w, ay.hi[oy] * s.w, ay.w_hi[oy]);
            let row = &mut dst[oy * w..][..w];
            for (ox, d) in row.iter_mut().enumerate() {
                let (c0, c1, fx) = (ax.lo[ox], ax.hi[ox], ax.w_hi[ox]);
                let top = lerp(src[r0 + c0], src[r0 + c1], fx);
                let bot = lerp(src[r1 + c0], src[r1 + c1], fx);
                *d = lerp(top, bot, fy);
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`]: scatters `dy` back onto an `in_h x in_w` grid.
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let s = dy.shape;
    if s.h == in_h && s.w == in_w {
        return dy.clone();
    }
    let ay = AxisWeights::<T>::new(in_h, s.h);
    let ax = AxisWeights::<T>::new(in_w, s.w);
    let mut dx = Tensor::zeros(Shape::new(s.n, s.c, in_h, in_w));
    let one = T::one();
    for p in 0..s.n * s.c {
        let src = &dy.data[p * s.h * s.w..][..s.h * s.w];
        let dst = &mut dx.data[p * in_h * in_w..][..in_h * in_w];
        for oy in 0..s.h {
            let (r0, r1, fy) = (ay.lo[oy] * in_w, ay.hi[oy] * in_w, ay.w_hi[oy]);
            for ox in 0..s.w {
                let (c0, c1, fx) = (ax.lo[ox], ax.hi[ox], ax.w_hi[ox]);
                let g = src[oy * s.w + ox];
                let gt = g * (one - fy);
                let gb = g * fy;
                dst[r0 + c0] = dst[r0 + c0] + gt * (one - fx);
                dst[r0 + c1] = dst[r0 + c1] + gt * fx;
                dst[r1 + c0] = dst[r1 + c0] + gb * (one - fx);
                dst[r1 + c1] = dst[r1 + c1] + gb * fx;
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let s0 = xs[0].shape;
    let c: usize = xs.iter().map(|t| t.shape.c).sum();
    for t in xs {
        assert_eq!((t.shape.n, t.shape.h, t.shape.w), (s0.n, s0.h, s0.w), "concat extents");
    }
    let hw = s0.plane();
    let mut data = Vec::with_capacity(s0.n * c * hw);
    for n in 0..s0.n {
        for t in xs {
            let len = t.shape.c * hw;
            data.extend_from_slice(&t.data[n * len..(n + 1) * len]);
        }
    }
    Tensor::from_vec(Shape::new(s0.n, c, s0.h, s0.w), data)
}

/// Gathers channels `idx` (in order) into a new tensor.
pub fn select_channels<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let s = x.shape;
    let hw = s.plane();
    let mut data = Vec::with_capacity(s.n * idx.len() * hw);
    for n in 0..s.n {
        for &c in idx {
            data.extend_from_slice(&x.data[(n * s.c + c) * hw..][..hw]);
        }
    }
    Tensor::from_vec(Shape::new(s.n, idx.len(), s.h, s.w), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Textbook six-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
        let s = x.shape();
        let (ho, wo) = (g.out_extent(s.h), g.out_extent(s.w));
        let cg_in = g.in_channels / g.groups;
        let cg_out = g.out_channels / g.groups;
        let mut y = Tensor::zeros(Shape::new(s.n, g.out_channels, ho, wo));
        for n in 0..s.n {
            for co in 0..g.out_channels {
                let grp = co / cg_out;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cg_in {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    acc += x.at(n, grp * cg_in + ci, iy as usize, ix as usize)
                                        * w.at(co, ci, ky, kx);
                                }
                            }
                        }
                        let i = ((n * g.out_channels + co) * ho + oy) * wo + ox;
                        y.data_mut()[i] = acc;
                    }
                }
            }
        }
        y
    }

    fn geometries() -> Vec<ConvGeometry> {
        let mk = |i, o, k, s, p, g| ConvGeometry {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: s,
            padding: p,
            groups: g,
        };
        vec![
            mk(3, 5, 3, 1, 1, 1),
            mk(4, 6, 3, 2, 1, 1),
            mk(4, 4, 3, 2, 1, 4),
            mk(6, 4, 1, 1, 0, 1),
            mk(6, 4, 1, 2, 0, 2),
        ]
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (i, g) in geometries().iter().enumerate() {
            let x = random(Shape::new(2, g.in_channels, 7, 9), i as u64);
            let w = random(g.weight_shape(), 100 + i as u64);
            let fast = conv2d(&x, &w, None, g);
            let slow = naive_conv(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> is bilinear, so <dy, conv(dx_dir)> == <conv^T dy, dx_dir>.
        for (i, g) in geometries().iter().enumerate() {
            let x = random(Shape::new(2, g.in_channels, 6, 5), 10 + i as u64);
            let w = random(g.weight_shape(), 20 + i as u64);
            let y = conv2d(&x, &w, None, g);
            let dy = random(y.shape(), 30 + i as u64);
            let (dx, dw, _) = conv2d_backward(&x, &w, &dy, g, true);
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let lhs = dot(&dy, &y);
            assert!((dot(&dx.unwrap(), &x) - lhs).abs() < 1e-9);
            assert!((dot(&dw, &w) - lhs).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::full(Shape::new(1, 2, 5, 7), 3.25f64);
        for (h, w) in [(10, 14), (3, 2), (16, 16), (1, 1)] {
            let y = resize_bilinear(&x, h, w);
            assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = random(Shape::new(2, 3, 5, 7), 1);
        for (h, w) in [(11, 13), (3, 2), (5, 14)] {
            let y = resize_bilinear(&x, h, w);
            let dy = random(y.shape(), 2);
            let dx = resize_bilinear_backward(&dy, 5, 7);
            let a: f64 = dy.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
            let b: f64 = dx.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_two_x_matches_half_pixel_convention() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0f64, 1.0]);
        let y = resize_bilinear(&x, 1, 4);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }
}
