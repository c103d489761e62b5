//! Slice-level kernels shared by the forward and backward passes.

/// Strided matrix view used to describe a GEMM operand without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// Widest and largest right operand handled by [`small_gemm`]; packing
/// dominates matrixmultiply's cost on such narrow products.
const SMALL_N: usize = 64;
const SMALL_PANEL: usize = 4096;

/// `out = a·b + beta·out`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v *= beta;
        }
        return;
    }
    if n <= SMALL_N && k * n <= SMALL_PANEL {
        small_gemm(a, b, beta, &mut out[..m * n]);
        return;
    }
    // SAFETY: the views were built from slices whose lengths cover every
    // addressed element (checked by the row_major constructor and transposes
    // of it), and `out` holds at least m*n elements laid out row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Instantiates a width-generic kernel for common widths; `0` means the
/// width is only known at run time.
macro_rules! by_width {
    ($w:expr, $f:ident($($arg:expr),*)) => {
        match $w {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            4 => $f::<4>($($arg),*),
            8 => $f::<8>($($arg),*),
            16 => $f::<16>($($arg),*),
            32 => $f::<32>($($arg),*),
            64 => $f::<64>($($arg),*),
            _ => $f::<0>($($arg),*),
        }
    };
}

/// Defines `$name` as `$imp` compiled twice, once with AVX2 enabled, and
/// picks the variant at run time. Rust never contracts `a*b + c` into an
/// FMA, so both variants round identically.
macro_rules! multiversion {
    ($(#[$m:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),*) $(-> $ret:ty)? => $imp:ident) => {
        $(#[$m])*
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) $(-> $ret)? {
                    $imp($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the running CPU supports AVX2.
                    return unsafe { wide($($arg),*) };
                }
            }
            $imp($($arg),*)
        }
    };
}

/// Row-axpy product for narrow `b`: every output row is a combination of
/// the (copied, row-major) rows of `b`.
fn small_gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    let (k, n) = (a.cols, b.cols);
    let mut bm = vec![0.0; k * n];
    for p in 0..k {
        for j in 0..n {
            bm[p * n + j] = b.data[(p as isize * b.row_stride + j as isize * b.col_stride) as usize];
        }
    }
    if beta == 0.0 {
        out.fill(0.0);
    } else if beta != 1.0 {
        out.iter_mut().for_each(|v| *v *= beta);
    }
    small_gemm_rows(a, &bm, n, out);
}

multiversion! {
    fn small_gemm_rows(a: MatRef<'_>, bm: &[f64], n: usize, out: &mut [f64]) => small_gemm_any
}

#[inline(always)]
fn small_gemm_any(a: MatRef<'_>, bm: &[f64], n: usize, out: &mut [f64]) {
    by_width!(n, small_gemm_w(a, bm, n, out))
}

#[inline(always)]
fn small_gemm_w<const W: usize>(a: MatRef<'_>, bm: &[f64], n: usize, out: &mut [f64]) {
    let w = if W == 0 { n } else { W };
    let (m, k) = (a.rows, a.cols);
    if a.col_stride == 1 {
        for i in 0..m {
            let a_row = &a.data[(i as isize * a.row_stride) as usize..][..k];
            let o = &mut out[i * w..][..w];
            if W > 0 {
                let mut acc = [0.0; W];
                acc.copy_from_slice(o);
                for (p, &av) in a_row.iter().enumerate() {
                    let b_row = &bm[p * W..][..W];
                    for j in 0..W {
                        acc[j] += av * b_row[j];
                    }
                }
                o.copy_from_slice(&acc);
            } else {
                for (p, &av) in a_row.iter().enumerate() {
                    let b_row = &bm[p * w..][..w];
                    for j in 0..w {
                        o[j] += av * b_row[j];
                    }
                }
            }
        }
    } else {
        // Columns of `a` are contiguous (a transposed row-major matrix):
        // walk them in order and keep the small output resident.
        for p in 0..k {
            let b_row = &bm[p * w..][..w];
            for i in 0..m {
                let av = a.data[(i as isize * a.row_stride + p as isize * a.col_stride) as usize];
                let o = &mut out[i * w..][..w];
                for j in 0..w {
                    o[j] += av * b_row[j];
                }
            }
        }
    }
}

/// Sizes of a stride-1 temporal convolution over zero-padded sequences.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub n: usize,
    /// Sequence length after padding.
    pub padded_len: usize,
    pub c_in: usize,
    pub k: usize,
    pub out_len: usize,
    pub c_out: usize,
}

impl ConvShape {
    fn taps(&self) -> usize {
        self.k * self.c_in
    }
}

/// Copies `[n, len, c]` sequences into `[n, len + 2·pad, c]` with zero ends.
pub(crate) fn pad_sequences(x: &[f64], n: usize, len: usize, c: usize, pad: usize) -> Vec<f64> {
    let lp = len + 2 * pad;
    let mut out = vec![0.0; n * lp * c];
    for s in 0..n {
        out[(s * lp + pad) * c..(s * lp + pad + len) * c]
            .copy_from_slice(&x[s * len * c..(s + 1) * len * c]);
    }
    out
}

/// Inverse of [`pad_sequences`] (drops the padded ends).
pub(crate) fn unpad_sequences(xp: &[f64], n: usize, len: usize, c: usize, pad: usize) -> Vec<f64> {
    let lp = len + 2 * pad;
    let mut out = Vec::with_capacity(n * len * c);
    for s in 0..n {
        out.extend_from_slice(&xp[(s * lp + pad) * c..(s * lp + pad + len) * c]);
    }
    out
}

multiversion! {
    /// `out[s, t, :] = Σ_q xp[s, t·c_in + q] · wg[q, :]` over the `k·c_in`
    /// taps of each window, with `wg` in the [`kernel_to_gemm`] layout.
    pub(crate) fn conv_forward(xp: &[f64], wg: &[f64], sh: ConvShape) -> Vec<f64> => conv_forward_any
}

#[inline(always)]
fn conv_forward_any(xp: &[f64], wg: &[f64], sh: ConvShape) -> Vec<f64> {
    by_width!(sh.c_out, conv_forward_w(xp, wg, sh))
}

#[inline(always)]
fn conv_forward_w<const W: usize>(xp: &[f64], wg: &[f64], sh: ConvShape) -> Vec<f64> {
    let w = if W == 0 { sh.c_out } else { W };
    let taps = sh.taps();
    let mut out = vec![0.0; sh.n * sh.out_len * w];
    for s in 0..sh.n {
        for t in 0..sh.out_len {
            let a = &xp[(s * sh.padded_len + t) * sh.c_in..][..taps];
            let o = &mut out[(s * sh.out_len + t) * w..][..w];
            if W > 0 {
                let mut acc = [0.0; W];
                for (q, &av) in a.iter().enumerate() {
                    let b = &wg[q * W..][..W];
                    for j in 0..W {
                        acc[j] += av * b[j];
                    }
                }
                o.copy_from_slice(&acc);
            } else {
                for (q, &av) in a.iter().enumerate() {
                    let b = &wg[q * w..][..w];
                    for j in 0..w {
                        o[j] += av * b[j];
                    }
                }
            }
        }
    }
    out
}

multiversion! {
    /// Kernel adjoint of [`conv_forward`], in the [`kernel_to_gemm`] layout.
    pub(crate) fn conv_grad_kernel(xp: &[f64], g: &[f64], sh: ConvShape) -> Vec<f64> => conv_grad_kernel_any
}

#[inline(always)]
fn conv_grad_kernel_any(xp: &[f64], g: &[f64], sh: ConvShape) -> Vec<f64> {
    by_width!(sh.c_out, conv_grad_kernel_w(xp, g, sh))
}

#[inline(always)]
fn conv_grad_kernel_w<const W: usize>(xp: &[f64], g: &[f64], sh: ConvShape) -> Vec<f64> {
    let w = if W == 0 { sh.c_out } else { W };
    let taps = sh.taps();
    let mut gw = vec![0.0; taps * w];
    for q in 0..taps {
        let o = &mut gw[q * w..][..w];
        if W > 0 {
            let mut acc = [0.0; W];
            for s in 0..sh.n {
                for t in 0..sh.out_len {
                    let av = xp[(s * sh.padded_len + t) * sh.c_in + q];
                    let gr = &g[(s * sh.out_len + t) * W..][..W];
                    for j in 0..W {
                        acc[j] += av * gr[j];
                    }
                }
            }
            o.copy_from_slice(&acc);
        } else {
            for s in 0..sh.n {
                for t in 0..sh.out_len {
                    let av = xp[(s * sh.padded_len + t) * sh.c_in + q];
                    let gr = &g[(s * sh.out_len + t) * w..][..w];
                    for j in 0..w {
                        o[j] += av * gr[j];
                    }
                }
            }
        }
    }
    gw
}

multiversion! {
    /// Input adjoint of [`conv_forward`], on the padded sequences.
    pub(crate) fn conv_grad_input(g: &[f64], wg: &[f64], sh: ConvShape) -> Vec<f64> => conv_grad_input_any
}

#[inline(always)]
fn conv_grad_input_any(g: &[f64], wg: &[f64], sh: ConvShape) -> Vec<f64> {
    let (w, taps) = (sh.c_out, sh.taps());
    let mut wt = vec![0.0; w * taps];
    for q in 0..taps {
        for j in 0..w {
            wt[j * taps + q] = wg[q * w + j];
        }
    }
    let mut gxp = vec![0.0; sh.n * sh.padded_len * sh.c_in];
    for s in 0..sh.n {
        for t in 0..sh.out_len {
            let gr = &g[(s * sh.out_len + t) * w..][..w];
            let dst = &mut gxp[(s * sh.padded_len + t) * sh.c_in..][..taps];
            for (j, &gv) in gr.iter().enumerate() {
                let b = &wt[j * taps..][..taps];
                for q in 0..taps {
                    dst[q] += gv * b[q];
                }
            }
        }
    }
    gxp
}

/// Reorder a `[c_out, c_in, k]` kernel into the `[k·c_in, c_out]` GEMM layout.
pub(crate) fn kernel_to_gemm(kernel: &[f64], c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; k * c_in * c_out];
    for co in 0..c_out {
        for ci in 0..c_in {
            for kk in 0..k {
                w[(kk * c_in + ci) * c_out + co] = kernel[(co * c_in + ci) * k + kk];
            }
        }
    }
    w
}

/// Inverse of [`kernel_to_gemm`].
pub(crate) fn gemm_to_kernel(w: &[f64], c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut kernel = vec![0.0; c_out * c_in * k];
    for co in 0..c_out {
        for ci in 0..c_in {
            for kk in 0..k {
                kernel[(co * c_in + ci) * k + kk] = w[(kk * c_in + ci) * c_out + co];
            }
        }
    }
    kernel
}

/// Split a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
