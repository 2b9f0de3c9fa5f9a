use crate::error::{Error, Result};

/// Dense row-major matrix of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Stacks equally sized rows into a matrix.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2D {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f32) {
        self.data.fill(value);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Tensor2D) -> Tensor2D {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Rows reordered so that output row `i` is input row `order[i]`.
    pub fn gather_rows(&self, order: &[usize]) -> Tensor2D {
        let mut out = Tensor2D::zeros(order.len(), self.cols);
        for (dst, &src) in order.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor2D) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Inner product with eight independent accumulators so the loop vectorizes.
///
/// Every score in the crate goes through this function, so results are
/// reproducible bit-for-bit across call sites.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a (n×k) · b (k×m)`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was just detected.
        unsafe { matmul_avx2(a, b, &mut out) };
        return Ok(out);
    }
    matmul_kernel(a, b, &mut out);
    Ok(out)
}

/// 256-bit build of [`matmul_kernel`]; no fused multiply-add, so the bits
/// match the portable build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &Tensor2D, b: &Tensor2D, out: &mut Tensor2D) {
    matmul_kernel(a, b, out)
}

#[inline(always)]
fn matmul_kernel(a: &Tensor2D, b: &Tensor2D, out: &mut Tensor2D) {
    let full = a.rows / MM_ROWS * MM_ROWS;
    for i0 in (0..full).step_by(MM_ROWS) {
        matmul_rows::<MM_ROWS>(a, b, out, i0);
    }
    for i in full..a.rows {
        matmul_rows::<1>(a, b, out, i);
    }
}

const MM_ROWS: usize = 4;
const MM_COLS: usize = 8;

/// Rows `i0..i0 + R` of `a · b`, accumulated in a register block of
/// R × MM_COLS outputs. Each output sums over the inner index in order.
#[inline(always)]
#[allow(clippy::needless_range_loop)]
fn matmul_rows<const R: usize>(a: &Tensor2D, b: &Tensor2D, out: &mut Tensor2D, i0: usize) {
    let (n, m) = (a.cols, b.cols);
    let full = m / MM_COLS * MM_COLS;
    for j0 in (0..full).step_by(MM_COLS) {
        let mut acc = [[0.0f32; MM_COLS]; R];
        for k in 0..n {
            let bv: [f32; MM_COLS] = b.data[k * m + j0..k * m + j0 + MM_COLS].try_into().unwrap();
            for r in 0..R {
                let av = a.data[(i0 + r) * n + k];
                for c in 0..MM_COLS {
                    acc[r][c] += av * bv[c];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out.data[(i0 + r) * m + j0..(i0 + r) * m + j0 + MM_COLS].copy_from_slice(row);
        }
    }
    for j in full..m {
        for r in 0..R {
            let mut s = 0.0f32;
            for k in 0..n {
                s += a.data[(i0 + r) * n + k] * b.data[k * m + j];
            }
            out.data[(i0 + r) * m + j] = s;
        }
    }
}

/// `aᵀ (k×n)ᵀ · b (k×m)`, yielding n×m. Used for weight gradients.
pub fn matmul_at_b(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_at_b {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor2D::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            if aki != 0.0 {
                axpy(aki, brow, &mut out.data[i * b.cols..(i + 1) * b.cols]);
            }
        }
    }
    Ok(out)
}

/// `a (n×k) · bᵀ (m×k)ᵀ`, yielding n×m.
pub fn matmul_a_bt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_a_bt {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

/// Adds a 1×n bias row to every row of `x`.
pub fn add_bias(x: &mut Tensor2D, bias: &Tensor2D) {
    debug_assert_eq!(bias.rows(), 1);
    debug_assert_eq!(bias.cols(), x.cols());
    for r in 0..x.rows {
        for (v, b) in x.row_mut(r).iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
}

/// `x · w + b`
pub fn linear(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    let mut out = matmul(x, w)?;
    add_bias(&mut out, b);
    Ok(out)
}

/// Column sums as a 1×n row; the gradient of a broadcast bias.
pub fn column_sums(x: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(1, x.cols);
    for r in 0..x.rows {
        for (o, v) in out.data.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}
