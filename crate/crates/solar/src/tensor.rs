//! Dense row-major f64 tensors and the "SOLT" binary tensor format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SolarError};

pub const SOLT_MAGIC: &[u8; 4] = b"SOLT";

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match {} values", shape, data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![rows.len(), cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows for a 1-D or 2-D tensor (a vector counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{} tensor", r),
        }
    }

    /// Number of columns for a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("cols() on rank-{} tensor", r),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SOLT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for d in &self.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SOLT_MAGIC {
            return Err(SolarError::Load("bad magic, not a SOLT tensor".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_from(&mut f)
    }
}

/// C = A (m×k) · B (k×n). Cache-friendly i-k-j ordering.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// One row-dot-row entry of A·Bᵀ: four accumulators break the serial FP
/// dependency chain. Kept as the single definition of the accumulation
/// order so the blocked path below stays bit-identical to the simple one.
#[inline(always)]
fn dot4(arow: &[f64], brow: &[f64], k: usize) -> f64 {
    let mut acc = [0.0f64; 4];
    let quads = k / 4 * 4;
    let mut p = 0;
    while p < quads {
        acc[0] += arow[p] * brow[p];
        acc[1] += arow[p + 1] * brow[p + 1];
        acc[2] += arow[p + 2] * brow[p + 2];
        acc[3] += arow[p + 3] * brow[p + 3];
        p += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for q in quads..k {
        s += arow[q] * brow[q];
    }
    s
}

/// C = A (m×k) · Bᵀ where B is n×k. Row-dot-row form, blocked four output
/// columns at a time so the dot chains of neighbouring outputs interleave;
/// each entry accumulates in exactly the order `dot4` defines.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_nt inner dims {} vs {}", k, k2);
    let mut out = vec![0.0; m * n];
    let bd = b.data();
    let quads = k / 4 * 4;
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let b0 = &bd[j * k..j * k + k];
            let b1 = &bd[(j + 1) * k..(j + 1) * k + k];
            let b2 = &bd[(j + 2) * k..(j + 2) * k + k];
            let b3 = &bd[(j + 3) * k..(j + 3) * k + k];
            let mut acc = [[0.0f64; 4]; 4];
            let mut p = 0;
            while p < quads {
                let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
                acc[0][0] += a0 * b0[p];
                acc[0][1] += a1 * b0[p + 1];
                acc[0][2] += a2 * b0[p + 2];
                acc[0][3] += a3 * b0[p + 3];
                acc[1][0] += a0 * b1[p];
                acc[1][1] += a1 * b1[p + 1];
                acc[1][2] += a2 * b1[p + 2];
                acc[1][3] += a3 * b1[p + 3];
                acc[2][0] += a0 * b2[p];
                acc[2][1] += a1 * b2[p + 1];
                acc[2][2] += a2 * b2[p + 2];
                acc[2][3] += a3 * b2[p + 3];
                acc[3][0] += a0 * b3[p];
                acc[3][1] += a1 * b3[p + 1];
                acc[3][2] += a2 * b3[p + 2];
                acc[3][3] += a3 * b3[p + 3];
                p += 4;
            }
            for (c, brow) in [b0, b1, b2, b3].into_iter().enumerate() {
                let mut s = (acc[c][0] + acc[c][1]) + (acc[c][2] + acc[c][3]);
                for q in quads..k {
                    s += arow[q] * brow[q];
                }
                orow[j + c] = s;
            }
            j += 4;
        }
        while j < n {
            orow[j] = dot4(arow, &bd[j * k..(j + 1) * k], k);
            j += 1;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C = Aᵀ · B where A is k×m, B is k×n.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_tn inner dims {} vs {}", k, k2);
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Tensor::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        let c2 = matmul_nt(&a, &b.transpose());
        assert_eq!(c.data(), c2.data());
        let c3 = matmul_tn(&a.transpose(), &b);
        assert_eq!(c.data(), c3.data());
    }

    #[test]
    fn solt_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], SOLT_MAGIC);
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
    }
}
