//! 1D cross-correlation kernels (im2col + GEMM) with "same" zero padding.

/// Geometry of one conv1d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_len: usize,
    pub out_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        in_len: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let out_len = in_len.div_ceil(stride);
        let total_pad = ((out_len.max(1) - 1) * stride + kernel).saturating_sub(in_len);
        Self { batch, in_channels, out_channels, in_len, out_len, kernel, stride, groups, pad_left: total_pad / 2 }
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of one group's im2col matrix.
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kernel
    }

    fn col_len(&self) -> usize {
        self.col_rows() * self.out_len
    }
}

/// `C = alpha·A·B + beta·C` on row/column strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, b: usize, group: usize, col: &mut [f64]) {
    let (lin, lout, k) = (g.in_len, g.out_len, g.kernel);
    for c in 0..g.cin_g() {
        let ch = group * g.cin_g() + c;
        let xs = &x[(b * g.in_channels + ch) * lin..][..lin];
        for kk in 0..k {
            let row = &mut col[(c * k + kk) * lout..][..lout];
            for (o, r) in row.iter_mut().enumerate() {
                let idx = (o * g.stride + kk) as isize - g.pad_left as isize;
                *r = if idx >= 0 && (idx as usize) < lin { xs[idx as usize] } else { 0.0 };
            }
        }
    }
}

fn col2im_add(dcol: &[f64], g: &ConvGeometry, b: usize, group: usize, dx: &mut [f64]) {
    let (lin, lout, k) = (g.in_len, g.out_len, g.kernel);
    for c in 0..g.cin_g() {
        let ch = group * g.cin_g() + c;
        let dxs = &mut dx[(b * g.in_channels + ch) * lin..][..lin];
        for kk in 0..k {
            let row = &dcol[(c * k + kk) * lout..][..lout];
            for (o, r) in row.iter().enumerate() {
                let idx = (o * g.stride + kk) as isize - g.pad_left as isize;
                if idx >= 0 && (idx as usize) < lin {
                    dxs[idx as usize] += r;
                }
            }
        }
    }
}

/// Forward pass. Returns the output `[B, Cout, Lout]` and the im2col buffers
/// (one per batch item and group) needed by the backward pass.
pub fn forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let lout = g.out_len;
    let mut out = vec![0.0; g.batch * g.out_channels * lout];
    let mut cols = vec![0.0; g.batch * g.groups * g.col_len()];
    let rows = g.col_rows();
    for b in 0..g.batch {
        for group in 0..g.groups {
            let col = &mut cols[(b * g.groups + group) * g.col_len()..][..g.col_len()];
            im2col(x, g, b, group, col);
            let wg = &w[group * g.cout_g() * rows..][..g.cout_g() * rows];
            let og = &mut out[(b * g.out_channels + group * g.cout_g()) * lout..][..g.cout_g() * lout];
            gemm(g.cout_g(), rows, lout, wg, (rows, 1), col, (lout, 1), 0.0, og, lout);
        }
        if let Some(bias) = bias {
            for (co, bv) in bias.iter().enumerate() {
                for v in &mut out[(b * g.out_channels + co) * lout..][..lout] {
                    *v += bv;
                }
            }
        }
    }
    (out, cols)
}

/// Gradients `(dx, dw, dbias)`; `dx` is skipped when `need_input` is false.
pub fn backward(
    dout: &[f64],
    w: &[f64],
    cols: &[f64],
    g: &ConvGeometry,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let lout = g.out_len;
    let rows = g.col_rows();
    let mut dw = vec![0.0; w.len()];
    let mut dbias = vec![0.0; g.out_channels];
    let mut dx = need_input.then(|| vec![0.0; g.batch * g.in_channels * g.in_len]);
    let mut dcol = vec![0.0; g.col_len()];
    for b in 0..g.batch {
        for group in 0..g.groups {
            let col = &cols[(b * g.groups + group) * g.col_len()..][..g.col_len()];
            let dog = &dout[(b * g.out_channels + group * g.cout_g()) * lout..][..g.cout_g() * lout];
            let dwg = &mut dw[group * g.cout_g() * rows..][..g.cout_g() * rows];
            // dW += dOut · colᵀ
            gemm(g.cout_g(), lout, rows, dog, (lout, 1), col, (1, lout), 1.0, dwg, rows);
            if let Some(dx) = dx.as_mut() {
                let wg = &w[group * g.cout_g() * rows..][..g.cout_g() * rows];
                // dcol = Wᵀ · dOut
                gemm(rows, g.cout_g(), lout, wg, (1, rows), dog, (lout, 1), 0.0, &mut dcol, lout);
                col2im_add(&dcol, g, b, group, dx);
            }
        }
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += dout[(b * g.out_channels + co) * lout..][..lout].iter().sum::<f64>();
        }
    }
    (dx, dw, dbias)
}
