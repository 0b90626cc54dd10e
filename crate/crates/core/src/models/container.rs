//! Binary containers for model sequences and matrix traces.
//!
//! Both formats are little-endian: an 8-byte magic tag, `u64` dimension headers, then
//! `f64` matrices in row-major order.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use super::ModelStep;
use crate::cone::CovarianceMatrix;
use crate::error::{Error, Result};

const SEQUENCE_MAGIC: &[u8; 8] = b"KFSEQv01";
const MATRICES_MAGIC: &[u8; 8] = b"KFMATv01";

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut data = vec![0.0; rows * cols];
    let mut b = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::invalid("unrecognized container header"));
    }
    Ok(())
}

fn to_usize(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::invalid("container dimension too large"))
}

/// Write `n`, `d`, step count, then `M`, `H`, `R`, `Q` for every step.
pub fn write_sequence<W: Write>(w: &mut W, steps: &[ModelStep]) -> Result<()> {
    let n = steps.first().map_or(0, |s| s.state_dim());
    let d = steps.first().map_or(0, |s| s.obs_dim());
    if steps.iter().any(|s| s.state_dim() != n || s.obs_dim() != d) {
        return Err(Error::invalid("all steps must share state and observation dimensions"));
    }
    w.write_all(SEQUENCE_MAGIC)?;
    put_u64(w, n as u64)?;
    put_u64(w, d as u64)?;
    put_u64(w, steps.len() as u64)?;
    for s in steps {
        put_matrix(w, s.propagator())?;
        put_matrix(w, s.obs_operator())?;
        put_matrix(w, s.obs_cov().matrix())?;
        put_matrix(w, s.model_noise().matrix())?;
    }
    Ok(())
}

pub fn read_sequence<R: Read>(r: &mut R) -> Result<Vec<ModelStep>> {
    check_magic(r, SEQUENCE_MAGIC)?;
    let n = to_usize(get_u64(r)?)?;
    let d = to_usize(get_u64(r)?)?;
    let count = to_usize(get_u64(r)?)?;
    let mut steps = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let m = get_matrix(r, n, n)?;
        let h = get_matrix(r, d, n)?;
        let rc = CovarianceMatrix::new(get_matrix(r, d, d)?)?;
        let q = CovarianceMatrix::new(get_matrix(r, n, n)?)?;
        steps.push(ModelStep::new(m, h, rc, q)?);
    }
    Ok(steps)
}

/// Write a list of matrices, each preceded by its row and column counts.
pub fn write_matrices<W: Write>(w: &mut W, matrices: &[DMatrix<f64>]) -> Result<()> {
    w.write_all(MATRICES_MAGIC)?;
    put_u64(w, matrices.len() as u64)?;
    for m in matrices {
        put_u64(w, m.nrows() as u64)?;
        put_u64(w, m.ncols() as u64)?;
        put_matrix(w, m)?;
    }
    Ok(())
}

pub fn read_matrices<R: Read>(r: &mut R) -> Result<Vec<DMatrix<f64>>> {
    check_magic(r, MATRICES_MAGIC)?;
    let count = to_usize(get_u64(r)?)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let rows = to_usize(get_u64(r)?)?;
        let cols = to_usize(get_u64(r)?)?;
        out.push(get_matrix(r, rows, cols)?);
    }
    Ok(out)
}
