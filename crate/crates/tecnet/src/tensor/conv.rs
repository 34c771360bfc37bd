//! 2-D convolution and transposed convolution with stride, dilation and zero
//! padding. Cross-correlation semantics (no kernel flip). Forward and
//! backward passes lower to im2col/col2im plus GEMM; batch items are
//! processed in parallel with per-item buffers so results are bit-identical
//! to the sequential order.

use rayon::prelude::*;

use super::{make_output, Element, OpBackward, Tensor, TensorError, TensorResult};

/// Geometry of one convolution: odd square-ish kernel, stride, dilation,
/// zero padding. `output_padding` only affects the transposed direction,
/// where it grows the output edge so stride-2 upsampling chains land on
/// exact sizes (9 -> 18 -> 36 -> 72).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation: 1,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn validate(&self) -> TensorResult<()> {
        for (what, v) in [
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("dilation", self.dilation),
        ] {
            if v == 0 {
                return Err(TensorError::InvalidConvSpec {
                    reason: format!("{what} must be positive"),
                });
            }
        }
        if self.kernel_h % 2 == 0 || self.kernel_w % 2 == 0 {
            return Err(TensorError::InvalidConvSpec {
                reason: format!(
                    "kernel extents must be odd, got {}x{}",
                    self.kernel_h, self.kernel_w
                ),
            });
        }
        Ok(())
    }

    fn out_extent_1d(&self, input: usize, kernel: usize) -> TensorResult<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(TensorError::EmptyConvOutput {
                input,
                kernel,
                stride: self.stride,
                dilation: self.dilation,
                padding: self.padding,
            });
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output extent of the forward convolution:
    /// `floor((in + 2p - d*(k-1) - 1) / stride) + 1`.
    pub fn out_hw(&self, h: usize, w: usize) -> TensorResult<(usize, usize)> {
        self.validate()?;
        Ok((
            self.out_extent_1d(h, self.kernel_h)?,
            self.out_extent_1d(w, self.kernel_w)?,
        ))
    }

    fn transpose_extent_1d(&self, input: usize, kernel: usize) -> TensorResult<usize> {
        let base = (input - 1) * self.stride + self.dilation * (kernel - 1) + 1 + self.output_padding;
        if base < 2 * self.padding + 1 {
            return Err(TensorError::EmptyConvOutput {
                input,
                kernel,
                stride: self.stride,
                dilation: self.dilation,
                padding: self.padding,
            });
        }
        Ok(base - 2 * self.padding)
    }

    /// Output extent of the transposed convolution:
    /// `(in-1)*stride - 2p + d*(k-1) + 1 + output_padding`.
    pub fn transpose_out_hw(&self, h: usize, w: usize) -> TensorResult<(usize, usize)> {
        self.validate()?;
        if h == 0 || w == 0 {
            return Err(TensorError::EmptyInput("conv2d_transpose"));
        }
        if self.output_padding >= self.stride {
            return Err(TensorError::InvalidConvSpec {
                reason: format!(
                    "output_padding {} must be smaller than stride {}",
                    self.output_padding, self.stride
                ),
            });
        }
        Ok((
            self.transpose_extent_1d(h, self.kernel_h)?,
            self.transpose_extent_1d(w, self.kernel_w)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im
//
// Column layout: cols[(c*kh + ki)*kw + kj][oy*ow + ox], i.e. one row per
// (channel, kernel tap) and one column per sampled position. The sampled
// image coordinate for position (oy, ox) and tap (ki, kj) is
// (oy*stride - padding + ki*dilation, ox*stride - padding + kj*dilation);
// out-of-range taps read as zero (gather) or are dropped (scatter).
// ---------------------------------------------------------------------------

pub(crate) fn im2col_into<E: Element>(
    img: &[E],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(img.len(), channels * h * w);
    debug_assert_eq!(cols.len(), channels * spec.kernel_h * spec.kernel_w * oh * ow);
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let n = oh * ow;
    let mut row = 0usize;
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let dst = &mut cols[row * n..(row + 1) * n];
                row += 1;
                let kyoff = ki as isize * d - p;
                let kxoff = kj as isize * d - p;
                for oy in 0..oh {
                    let iy = oy as isize * s + kyoff;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(E::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kxoff;
                        *out = if ix >= 0 && ix < w as isize {
                            srow[ix as usize]
                        } else {
                            E::zero()
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<E: Element>(
    cols: &[E],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    img: &mut [E],
) {
    debug_assert_eq!(img.len(), channels * h * w);
    debug_assert_eq!(cols.len(), channels * spec.kernel_h * spec.kernel_w * oh * ow);
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let n = oh * ow;
    let mut row = 0usize;
    for c in 0..channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let src = &cols[row * n..(row + 1) * n];
                row += 1;
                let kyoff = ki as isize * d - p;
                let kxoff = kj as isize * d - p;
                for oy in 0..oh {
                    let iy = oy as isize * s + kyoff;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = ox as isize * s + kxoff;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

// Row-major GEMM helpers. `a` is m x k, `b` is k x n, `c` is m x n; the
// `_t` variants read the underlying buffer transposed.

pub(crate) fn gemm_nn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    E::gemm(
        m, k, n,
        E::one(),
        a, k as isize, 1,
        b, n as isize, 1,
        beta,
        c, n as isize, 1,
    );
}

pub(crate) fn gemm_tn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    // a buffer is k x m row-major, used as its transpose (m x k)
    E::gemm(
        m, k, n,
        E::one(),
        a, 1, m as isize,
        b, n as isize, 1,
        beta,
        c, n as isize, 1,
    );
}

pub(crate) fn gemm_nt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], beta: E, c: &mut [E]) {
    // b buffer is n x k row-major, used as its transpose (k x n)
    E::gemm(
        m, k, n,
        E::one(),
        a, k as isize, 1,
        b, 1, k as isize,
        beta,
        c, n as isize, 1,
    );
}

// ---------------------------------------------------------------------------
// Dimension checks
// ---------------------------------------------------------------------------

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn check_conv_dims<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
    transpose: bool,
) -> TensorResult<ConvDims> {
    let ishape = input.shape();
    if ishape.len() != 4 {
        return Err(TensorError::Rank {
            expected: 4,
            shape: ishape.to_vec(),
        });
    }
    let kshape = kernel.shape();
    if kshape.len() != 4 {
        return Err(TensorError::Rank {
            expected: 4,
            shape: kshape.to_vec(),
        });
    }
    if kshape[2] != spec.kernel_h {
        return Err(TensorError::AxisMismatch {
            axis: "kernel height",
            left: kshape[2],
            right: spec.kernel_h,
        });
    }
    if kshape[3] != spec.kernel_w {
        return Err(TensorError::AxisMismatch {
            axis: "kernel width",
            left: kshape[3],
            right: spec.kernel_w,
        });
    }
    // conv kernels are [Cout, Cin, kh, kw]; transposed kernels [Cin, Cout, kh, kw]
    let (kin, kout) = if transpose {
        (kshape[0], kshape[1])
    } else {
        (kshape[1], kshape[0])
    };
    if kin != ishape[1] {
        return Err(TensorError::AxisMismatch {
            axis: "input channels",
            left: ishape[1],
            right: kin,
        });
    }
    if bias.shape() != [kout] {
        return Err(TensorError::AxisMismatch {
            axis: "bias channels",
            left: bias.numel(),
            right: kout,
        });
    }
    let (oh, ow) = if transpose {
        spec.transpose_out_hw(ishape[2], ishape[3])?
    } else {
        spec.out_hw(ishape[2], ishape[3])?
    };
    Ok(ConvDims {
        batch: ishape[0],
        cin: ishape[1],
        h: ishape[2],
        w: ishape[3],
        cout: kout,
        oh,
        ow,
    })
}

// ---------------------------------------------------------------------------
// Forward kernels (per whole batch, parallel over items)
// ---------------------------------------------------------------------------

fn conv_forward<E: Element>(
    x: &[E],
    d: &ConvDims,
    k: &[E],
    bias: &[E],
    spec: &ConvSpec,
) -> Vec<E> {
    let n = d.oh * d.ow;
    let taps = d.cin * spec.kernel_h * spec.kernel_w;
    let mut out = vec![E::zero(); d.batch * d.cout * n];
    out.par_chunks_exact_mut(d.cout * n)
        .zip(x.par_chunks_exact(d.cin * d.h * d.w))
        .for_each(|(out_b, x_b)| {
            let mut cols = vec![E::zero(); taps * n];
            im2col_into(x_b, d.cin, d.h, d.w, spec, d.oh, d.ow, &mut cols);
            gemm_nn(d.cout, taps, n, k, &cols, E::zero(), out_b);
            for (co, row) in out_b.chunks_exact_mut(n).enumerate() {
                let b = bias[co];
                for v in row {
                    *v += b;
                }
            }
        });
    out
}

/// Scatter direction shared by conv-backward-input and transpose-forward:
/// given `g` on the small (strided) grid and a kernel laid out
/// `[g_channels, out_channels, kh, kw]`, accumulate into the large grid.
fn conv_scatter<E: Element>(
    g: &[E],
    batch: usize,
    g_ch: usize,
    gh: usize,
    gw: usize,
    k: &[E],
    out_ch: usize,
    out_h: usize,
    out_w: usize,
    bias: Option<&[E]>,
    spec: &ConvSpec,
) -> Vec<E> {
    let n = gh * gw;
    let taps = out_ch * spec.kernel_h * spec.kernel_w;
    let mut out = vec![E::zero(); batch * out_ch * out_h * out_w];
    out.par_chunks_exact_mut(out_ch * out_h * out_w)
        .zip(g.par_chunks_exact(g_ch * n))
        .for_each(|(out_b, g_b)| {
            let mut cols = vec![E::zero(); taps * n];
            // cols = K^T (taps x g_ch) x g_b (g_ch x n)
            gemm_tn(taps, g_ch, n, k, g_b, E::zero(), &mut cols);
            if let Some(bias) = bias {
                for (co, plane) in out_b.chunks_exact_mut(out_h * out_w).enumerate() {
                    plane.fill(bias[co]);
                }
            }
            col2im_add(&cols, out_ch, out_h, out_w, spec, gh, gw, out_b);
        });
    out
}

/// Kernel gradient shared by both directions: correlate the small-grid image
/// `g` with the large-grid image `x`; result layout `[g_ch, x_ch, kh, kw]`.
/// Per-item products are summed sequentially so the reduction order is fixed.
fn conv_kernel_grad<E: Element>(
    g: &[E],
    g_ch: usize,
    gh: usize,
    gw: usize,
    x: &[E],
    x_ch: usize,
    xh: usize,
    xw: usize,
    batch: usize,
    spec: &ConvSpec,
) -> Vec<E> {
    let n = gh * gw;
    let taps = x_ch * spec.kernel_h * spec.kernel_w;
    let mut per_item = vec![E::zero(); batch * g_ch * taps];
    per_item
        .par_chunks_exact_mut(g_ch * taps)
        .zip(g.par_chunks_exact(g_ch * n).zip(x.par_chunks_exact(x_ch * xh * xw)))
        .for_each(|(gk_b, (g_b, x_b))| {
            let mut cols = vec![E::zero(); taps * n];
            im2col_into(x_b, x_ch, xh, xw, spec, gh, gw, &mut cols);
            // gk_b = g_b (g_ch x n) x cols^T (n x taps)
            gemm_nt(g_ch, n, taps, g_b, &cols, E::zero(), gk_b);
        });
    let mut gk = vec![E::zero(); g_ch * taps];
    for item in per_item.chunks_exact(g_ch * taps) {
        super::axpy(&mut gk, item);
    }
    gk
}

/// Gather direction for the transposed op's input gradient: convolve the
/// large-grid gradient with the kernel back onto the small grid.
#[allow(clippy::too_many_arguments)]
fn transpose_input_grad<E: Element>(
    g: &[E],
    batch: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    k: &[E],
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
) -> Vec<E> {
    let n = h * w;
    let taps = cout * spec.kernel_h * spec.kernel_w;
    let mut gu = vec![E::zero(); batch * cin * n];
    gu.par_chunks_exact_mut(cin * n)
        .zip(g.par_chunks_exact(cout * oh * ow))
        .for_each(|(gu_b, g_b)| {
            let mut cols = vec![E::zero(); taps * n];
            im2col_into(g_b, cout, oh, ow, spec, h, w, &mut cols);
            gemm_nn(cin, taps, n, k, &cols, E::zero(), gu_b);
        });
    gu
}

fn bias_grad<E: Element>(g: &[E], batch: usize, ch: usize, n: usize) -> Vec<E> {
    let mut gb = vec![E::zero(); ch];
    for b in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let plane = &g[(b * ch + c) * n..(b * ch + c + 1) * n];
            let mut s = E::zero();
            for &v in plane {
                s += v;
            }
            *acc += s;
        }
    }
    gb
}

// ---------------------------------------------------------------------------
// Autodiff ops
// ---------------------------------------------------------------------------

struct Conv2dOp {
    spec: ConvSpec,
}

impl<E: Element> OpBackward<E> for Conv2dOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let (x, k) = (&inputs[0], &inputs[1]);
        let [b, cin, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let cout = k.shape()[0];
        let (oh, ow) = self.spec.out_hw(h, w).unwrap();
        let gx = want[0].then(|| {
            conv_scatter(
                g,
                b,
                cout,
                oh,
                ow,
                &k.data(),
                cin,
                h,
                w,
                None,
                &self.spec,
            )
        });
        let gk = want[1].then(|| conv_kernel_grad(g, cout, oh, ow, &x.data(), cin, h, w, b, &self.spec));
        let gb = want[2].then(|| bias_grad(g, b, cout, oh * ow));
        vec![gx, gk, gb]
    }
}

struct ConvTranspose2dOp {
    spec: ConvSpec,
}

impl<E: Element> OpBackward<E> for ConvTranspose2dOp {
    fn backward(
        &self,
        inputs: &[Tensor<E>],
        out_grads: &[Option<Vec<E>>],
        want: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = out_grads[0].as_ref().unwrap();
        let (u, k) = (&inputs[0], &inputs[1]);
        let [b, cin, h, w] = [u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]];
        let cout = k.shape()[1];
        let (oh, ow) = self.spec.transpose_out_hw(h, w).unwrap();
        // gu = Kt x im2col(g): gather from the large grid back onto u's grid
        let gu = want[0].then(|| {
            transpose_input_grad(g, b, cout, oh, ow, &k.data(), cin, h, w, &self.spec)
        });
        let gk = want[1].then(|| conv_kernel_grad(&u.data(), cin, h, w, g, cout, oh, ow, b, &self.spec));
        let gb = want[2].then(|| bias_grad(g, b, cout, oh * ow));
        vec![gu, gk, gb]
    }
}

impl<E: Element> Tensor<E> {
    /// Cross-correlation of `[B,Cin,H,W]` with kernel `[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<E>,
        bias: &Tensor<E>,
        spec: &ConvSpec,
    ) -> TensorResult<Tensor<E>> {
        let d = check_conv_dims(self, kernel, bias, spec, false)?;
        let out = conv_forward(&self.data(), &d, &kernel.data(), &bias.data(), spec);
        Ok(make_output(
            Conv2dOp { spec: *spec },
            vec![self.clone(), kernel.clone(), bias.clone()],
            vec![d.batch, d.cout, d.oh, d.ow],
            out,
        ))
    }

    /// Transposed convolution (adjoint of `conv2d` up to `output_padding`)
    /// of `[B,Cin,H,W]` with kernel `[Cin,Cout,kh,kw]`.
    pub fn conv2d_transpose(
        &self,
        kernel: &Tensor<E>,
        bias: &Tensor<E>,
        spec: &ConvSpec,
    ) -> TensorResult<Tensor<E>> {
        let d = check_conv_dims(self, kernel, bias, spec, true)?;
        let out = conv_scatter(
            &self.data(),
            d.batch,
            d.cin,
            d.h,
            d.w,
            &kernel.data(),
            d.cout,
            d.oh,
            d.ow,
            Some(&bias.data()),
            spec,
        );
        Ok(make_output(
            ConvTranspose2dOp { spec: *spec },
            vec![self.clone(), kernel.clone(), bias.clone()],
            vec![d.batch, d.cout, d.oh, d.ow],
            out,
        ))
    }
}

// Internal re-exports for the fused recurrent step.
pub(crate) use self::internal::ConvParts;

pub(crate) mod internal {
    use super::*;

    /// Raw conv pieces used by fused ops that manage their own graph node.
    pub(crate) struct ConvParts;

    impl ConvParts {
        pub(crate) fn forward<E: Element>(
            x: &[E],
            batch: usize,
            cin: usize,
            h: usize,
            w: usize,
            k: &[E],
            cout: usize,
            bias: &[E],
            spec: &ConvSpec,
        ) -> (Vec<E>, usize, usize) {
            let (oh, ow) = spec.out_hw(h, w).unwrap();
            let d = ConvDims {
                batch,
                cin,
                h,
                w,
                cout,
                oh,
                ow,
            };
            (conv_forward(x, &d, k, bias, spec), oh, ow)
        }

        pub(crate) fn input_grad<E: Element>(
            g: &[E],
            batch: usize,
            cout: usize,
            oh: usize,
            ow: usize,
            k: &[E],
            cin: usize,
            h: usize,
            w: usize,
            spec: &ConvSpec,
        ) -> Vec<E> {
            conv_scatter(g, batch, cout, oh, ow, k, cin, h, w, None, spec)
        }

        pub(crate) fn kernel_grad<E: Element>(
            g: &[E],
            cout: usize,
            oh: usize,
            ow: usize,
            x: &[E],
            cin: usize,
            h: usize,
            w: usize,
            batch: usize,
            spec: &ConvSpec,
        ) -> Vec<E> {
            conv_kernel_grad(g, cout, oh, ow, x, cin, h, w, batch, spec)
        }

        pub(crate) fn bias_grad<E: Element>(g: &[E], batch: usize, ch: usize, n: usize) -> Vec<E> {
            super::bias_grad(g, batch, ch, n)
        }
    }
}
