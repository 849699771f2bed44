//! Dense FP32 tensors, the fixed-order matmul kernel and the im2col/col2im pair.
//!
//! Layout is row-major with the innermost extent last (`W` for NCHW activations,
//! `Kw` for `(Cout, Cin, Kh, Kw)` weights). Every matmul accumulates each output
//! element from zero in ascending reduction index, so a product split into
//! reduction blocks and replayed block by block produces the same bits as the
//! one-shot product.

use std::io::{Read, Write};
use std::thread;

use crate::error::{Error, Result};

/// Magic bytes opening a serialized tensor.
pub const TENSOR_MAGIC: [u8; 8] = *b"QLRTENS1";

/// Below this many multiply-accumulates the worker split is skipped.
const PARALLEL_MIN_MACS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Dimension(format!(
                "expected a matrix, got shape {s:?}"
            ))),
        }
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::Dimension(format!("expected NCHW, got shape {s:?}"))),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Sample `i` of an NCHW batch, as a `1×C×H×W` tensor.
    pub fn sample(&self, i: usize) -> Result<Self> {
        let n = self.shape[0];
        if i >= n {
            return Err(Error::Dimension(format!("sample {i} of batch {n}")));
        }
        let per = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self::new(shape, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("nothing to stack".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Dimension(format!(
                    "cannot stack {:?} onto {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Self::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    /// Writes the binary container: magic, `u32` rank, `u32` extents, LE f32 payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Row-major operand view used by the blocked kernel.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> MatRef<'a> {
    pub fn of(t: &'a Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Ok(Self {
            data: t.data(),
            rows,
            cols,
        })
    }
}

/// Accumulates `a[rows, ks] · b[ks, cols]` into the matching block of `c`
/// (`c` has `b.cols` columns). Each touched `c` element receives its products
/// in ascending `k`, starting from whatever partial sum it already holds.
pub fn gemm_block(
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f32],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    ks: std::ops::Range<usize>,
) {
    let n = b.cols;
    for m in rows {
        let c_row = &mut c[m * n + cols.start..m * n + cols.end];
        let a_row = &a.data[m * a.cols..(m + 1) * a.cols];
        for k in ks.clone() {
            let av = a_row[k];
            let b_row = &b.data[k * n + cols.start..k * n + cols.end];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `a · b` on a single thread.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_par(a, b, 1)
}

/// `a · b` with output rows split across `workers` threads. Each output row is
/// produced by exactly one worker with the same loop order, so the result is
/// identical for every worker count.
pub fn matmul_par(a: &Tensor, b: &Tensor, workers: usize) -> Result<Tensor> {
    let am = MatRef::of(a)?;
    let bm = MatRef::of(b)?;
    if am.cols != bm.rows {
        return Err(Error::Dimension(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(vec![am.rows, bm.cols], gemm_par(am, bm, workers))
}

/// Fresh `a · b` buffer over views; the row split of [`matmul_par`].
pub fn gemm_par(am: MatRef<'_>, bm: MatRef<'_>, workers: usize) -> Vec<f32> {
    debug_assert_eq!(am.cols, bm.rows);
    let (m, n, k) = (am.rows, bm.cols, am.cols);
    let mut c = vec![0.0f32; m * n];
    let workers = workers.clamp(1, m.max(1));
    if workers == 1 || m * n * k < PARALLEL_MIN_MACS {
        gemm_block(am, bm, &mut c, 0..m, 0..n, 0..k);
    } else {
        let rows_per = m.div_ceil(workers);
        thread::scope(|s| {
            for (chunk_idx, chunk) in c.chunks_mut(rows_per * n).enumerate() {
                let start = chunk_idx * rows_per;
                let rows = chunk.len() / n;
                let a_part = MatRef {
                    data: &am.data[start * k..(start + rows) * k],
                    rows,
                    cols: k,
                };
                s.spawn(move || gemm_block(a_part, bm, chunk, 0..rows, 0..n, 0..k));
            }
        });
    }
    c
}

/// Convolution window geometry for a single `C×H×W` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output extents. Partial windows at the far edge are dropped (floor division).
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Geometry("zero stride or kernel".into()));
        }
        let ph = self.height + 2 * self.pad;
        let pw = self.width + 2 * self.pad;
        if ph < kh || pw < kw {
            return Err(Error::Geometry(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if n != 1 || c != self.channels || h != self.height || w != self.width {
            return Err(Error::Geometry(format!(
                "input {:?} does not match geometry {self:?}",
                x.shape()
            )));
        }
        Ok(())
    }
}

/// Rearranges one `1×C×H×W` sample into a `(C·Kh·Kw) × (Ho·Wo)` matrix; column
/// `j` is the receptive field of output position `j`, padding written as zeros.
pub fn im2col(x: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    geom.check_input(x)?;
    let (ho, wo) = geom.output_hw()?;
    let cols = ho * wo;
    let mut out = vec![0.0f32; geom.patch_len() * cols];
    im2col_into(x.data(), geom, &mut out, cols, 0)?;
    Tensor::new(vec![geom.patch_len(), cols], out)
}

/// Writes the im2col matrix of one `C×H×W` sample into `dst`, whose rows are
/// `row_stride` long, starting at column `offset`. `dst` must be zeroed where
/// padding lands.
pub fn im2col_into(
    src: &[f32],
    geom: &ConvGeometry,
    dst: &mut [f32],
    row_stride: usize,
    offset: usize,
) -> Result<()> {
    let (ho, wo) = geom.output_hw()?;
    let (kh, kw) = geom.kernel;
    let (h, w) = (geom.height, geom.width);
    for c in 0..geom.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * row_stride + offset;
                let d = &mut dst[base..base + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let s_row = &src[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let d_row = &mut d[oy * wo..(oy + 1) * wo];
                    for (ox, dv) in d_row.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *dv = s_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Adjoint of [`im2col`]: scatters columns back onto a `1×C×H×W` image, summing
/// overlapping contributions and dropping padded positions.
pub fn col2im(cols: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (ho, wo) = geom.output_hw()?;
    let (rows, ncols) = cols.dims2()?;
    if rows != geom.patch_len() || ncols != ho * wo {
        return Err(Error::Geometry(format!(
            "columns {:?} do not match geometry {geom:?}",
            cols.shape()
        )));
    }
    let mut out = vec![0.0f32; geom.channels * geom.height * geom.width];
    col2im_from(cols.data(), geom, ncols, 0, &mut out)?;
    Tensor::new(vec![1, geom.channels, geom.height, geom.width], out)
}

/// Accumulates the columns starting at `offset` of a matrix with rows
/// `row_stride` long into the `C×H×W` image `out`. Rows are visited in
/// ascending order, positions in ascending order within each row.
pub fn col2im_from(
    src: &[f32],
    geom: &ConvGeometry,
    row_stride: usize,
    offset: usize,
    out: &mut [f32],
) -> Result<()> {
    let (ho, wo) = geom.output_hw()?;
    let (kh, kw) = geom.kernel;
    let (h, w) = (geom.height, geom.width);
    for c in 0..geom.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let s = &src[row * row_stride + offset..row * row_stride + offset + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let o_row = &mut out[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            o_row[ix as usize] += s[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], c).unwrap()
    }

    #[test]
    fn identity_products() {
        let i2 = Tensor::eye(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &i2).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = Rng::new(11);
        let a = rng.uniform_tensor(&[7, 5], -1.0, 1.0);
        let b = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
        assert_eq!(matmul(&a, &b).unwrap().data(), naive(&a, &b).data());
    }

    #[test]
    fn matmul_is_worker_count_invariant() {
        let mut rng = Rng::new(5);
        let a = rng.uniform_tensor(&[67, 129], -1.0, 1.0);
        let b = rng.uniform_tensor(&[129, 33], -1.0, 1.0);
        let one = matmul_par(&a, &b, 1).unwrap();
        for w in [2, 3, 4, 8, 100] {
            assert_eq!(matmul_par(&a, &b, w).unwrap(), one);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn pointwise_im2col_is_reshape() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = ConvGeometry {
            channels: 1,
            height: 2,
            width: 2,
            kernel: (1, 1),
            stride: 1,
            pad: 0,
        };
        let cols = im2col(&x, &g).unwrap();
        assert_eq!(cols.shape(), &[1, 4]);
        assert_eq!(cols.data(), x.data());
        assert_eq!(col2im(&cols, &g).unwrap(), x);
    }

    #[test]
    fn padded_3x3_center_column_and_coverage() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let g = ConvGeometry {
            channels: 1,
            height: 3,
            width: 3,
            kernel: (3, 3),
            stride: 1,
            pad: 1,
        };
        let cols = im2col(&x, &g).unwrap();
        assert_eq!(cols.shape(), &[9, 9]);
        // brute-force patch extraction
        for pos in 0..9 {
            let (oy, ox) = (pos / 3, pos % 3);
            for r in 0..9 {
                let (ki, kj) = (r / 3, r % 3);
                let (iy, ix) = (oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                let expect = if (0..3).contains(&iy) && (0..3).contains(&ix) {
                    x.data()[(iy * 3 + ix) as usize]
                } else {
                    0.0
                };
                assert_eq!(cols.data()[r * 9 + pos], expect);
            }
        }
        let center: Vec<f32> = (0..9).map(|r| cols.data()[r * 9 + 4]).collect();
        assert_eq!(center, x.data());

        let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
        let cover = col2im(&im2col(&ones, &g).unwrap(), &g).unwrap();
        assert_eq!(cover.data()[4], 9.0);
        assert_eq!(cover.data()[0], 4.0);
    }

    #[test]
    fn adjoint_identity_on_random_instances() {
        let mut rng = Rng::new(99);
        for &(c, h, w, k, s, p) in &[(3, 5, 6, 3, 1, 1), (2, 8, 8, 3, 2, 1), (4, 7, 5, 1, 1, 0)] {
            let g = ConvGeometry {
                channels: c,
                height: h,
                width: w,
                kernel: (k, k),
                stride: s,
                pad: p,
            };
            let x = rng.uniform_tensor(&[1, c, h, w], -1.0, 1.0);
            let (ho, wo) = g.output_hw().unwrap();
            let y = rng.uniform_tensor(&[g.patch_len(), ho * wo], -1.0, 1.0);
            let lhs = im2col(&x, &g).unwrap().dot(&y);
            let rhs = x.dot(&col2im(&y, &g).unwrap());
            assert!(
                (lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_via_im2col_matches_direct_loops() {
        let mut rng = Rng::new(3);
        let (cin, cout, h, w) = (3, 4, 6, 5);
        let g = ConvGeometry {
            channels: cin,
            height: h,
            width: w,
            kernel: (3, 3),
            stride: 1,
            pad: 1,
        };
        let x = rng.uniform_tensor(&[1, cin, h, w], -1.0, 1.0);
        let wt = rng.uniform_tensor(&[cout, cin * 9], -1.0, 1.0);
        let y = matmul(&wt, &im2col(&x, &g).unwrap()).unwrap();
        for o in 0..cout {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (iy, ix) = (oy as isize + ki - 1, ox as isize + kj - 1);
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                    acc += wt.data()[o * cin * 9 + c * 9 + (ki * 3 + kj) as usize]
                                        as f64
                                        * x.data()[(c * h + iy as usize) * w + ix as usize] as f64;
                                }
                            }
                        }
                    }
                    let got = y.data()[o * h * w + oy * w + ox] as f64;
                    assert!((got - acc).abs() <= 1e-5 * acc.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn stride_two_floors_output() {
        let g = ConvGeometry {
            channels: 1,
            height: 8,
            width: 8,
            kernel: (3, 3),
            stride: 2,
            pad: 1,
        };
        assert_eq!(g.output_hw().unwrap(), (4, 4));
        let bad = ConvGeometry {
            height: 1,
            width: 1,
            pad: 0,
            ..g
        };
        assert!(matches!(bad.output_hw(), Err(Error::Geometry(_))));
    }

    #[test]
    fn container_round_trip_and_bad_magic() {
        let t = Rng::new(1).uniform_tensor(&[2, 3, 4], -1.0, 1.0);
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 8 + 4 + 12 + 24 * 4);
        assert_eq!(Tensor::read_from(&bytes[..]).unwrap(), t);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::read_from(&bad[..]).is_err());
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
