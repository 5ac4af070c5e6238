//! W1A8 and INT8 integer kernels.
//!
//! The lookup-table GEMV splits each activation row into groups of four
//! INT8 values and precomputes, per group, the 16 signed partial sums
//! `Σ_k ±a_k` for every 4-bit sign pattern. A weight row is then reduced
//! by reading its sign bits four at a time and summing table entries: no
//! multiplications in the inner loop.
//!
//! Accumulation is exact `i32`. With INT8 activations `|out| ≤ 128·cols`,
//! which stays below `2^31` for `cols ≤ MAX_COLS`.

use crate::error::{mismatch, Result};
use crate::quant::{BinaryMatrix, Int8Tensor};

/// Sign-pattern group width.
pub const GROUP: usize = 4;
/// Entries per group table.
pub const TABLE: usize = 1 << GROUP;
/// Largest supported reduction length.
pub const MAX_COLS: usize = 1 << 16;

/// Per-group 16-entry partial-sum tables for one activation row.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    cols: usize,
    entries: Vec<i32>,
}

impl LookupTable {
    /// Number of 4-wide groups (activation row zero-padded to a multiple of 4).
    pub fn groups(&self) -> usize {
        self.entries.len() / TABLE
    }

    /// Unpadded activation length the table was built from.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// The 16 entries of group `g`.
    pub fn group(&self, g: usize) -> &[i32] {
        &self.entries[g * TABLE..(g + 1) * TABLE]
    }
}

fn check_cols(cols: usize) -> Result<()> {
    if cols > MAX_COLS {
        return Err(mismatch(format!("{cols} columns exceeds the {MAX_COLS} accumulator bound")));
    }
    Ok(())
}

/// Scalar reference: `out_i = Σ_j s_ij · a_j` over unpacked signs.
pub fn gemv_w1a8_ref(w: &BinaryMatrix, a: &[i8]) -> Result<Vec<i32>> {
    if w.cols() != a.len() {
        return Err(mismatch(format!(
            "weight has {} columns, activation row has {}",
            w.cols(),
            a.len()
        )));
    }
    check_cols(a.len())?;
    let signs = w.signs();
    Ok(signs
        .chunks(w.cols())
        .map(|row| row.iter().zip(a).map(|(&s, &x)| s as i32 * x as i32).sum())
        .collect())
}

/// Builds the tables: `entry[p] = Σ_k (bit k of p ? a_k : -a_k)`.
pub fn build_lut(a: &[i8]) -> LookupTable {
    let groups = a.len().div_ceil(GROUP);
    let mut entries = vec![0i32; groups * TABLE];
    for (g, table) in entries.chunks_mut(TABLE).enumerate() {
        let mut lane = [0i32; GROUP];
        for (k, l) in lane.iter_mut().enumerate() {
            *l = a.get(g * GROUP + k).map_or(0, |&v| v as i32);
        }
        table[0] = -lane.iter().sum::<i32>();
        for p in 1..TABLE {
            // flip the lowest set bit's lane from -a_k to +a_k
            let k = p.trailing_zeros() as usize;
            table[p] = table[p & (p - 1)] + 2 * lane[k];
        }
    }
    LookupTable { cols: a.len(), entries }
}

/// Four sign bits starting at absolute bit offset `start`; bits past the
/// buffer read as zero.
#[inline]
fn nibble_at(bits: &[u8], start: usize) -> usize {
    let byte = start >> 3;
    let lo = bits[byte] as u16;
    let hi = bits.get(byte + 1).copied().unwrap_or(0) as u16;
    (((lo | hi << 8) >> (start & 7)) & 0xF) as usize
}

#[inline]
fn lut_row(bits: &[u8], row_start: usize, lut: &LookupTable) -> i32 {
    let groups = lut.groups();
    let e = &lut.entries;
    let mut acc = 0i32;
    if row_start % 8 == 0 {
        // byte-aligned row: two groups per byte
        let base = row_start >> 3;
        let full = groups / 2;
        for b in 0..full {
            let byte = bits[base + b] as usize;
            acc += e[(2 * b) * TABLE + (byte & 0xF)];
            acc += e[(2 * b + 1) * TABLE + (byte >> 4)];
        }
        if groups % 2 == 1 {
            let g = groups - 1;
            acc += e[g * TABLE + nibble_at(bits, row_start + g * GROUP)];
        }
    } else {
        for g in 0..groups {
            acc += e[g * TABLE + nibble_at(bits, row_start + g * GROUP)];
        }
    }
    acc
}

/// Table-lookup GEMV. Bit-exact with [`gemv_w1a8_ref`]; padded lanes have
/// zero activations so whatever bits sit under them contribute nothing.
pub fn gemv_w1a8_lut(w: &BinaryMatrix, lut: &LookupTable) -> Result<Vec<i32>> {
    if w.cols().div_ceil(GROUP) != lut.groups() || w.cols() != lut.cols {
        return Err(mismatch(format!(
            "table has {} groups for {} columns, weight has {} columns",
            lut.groups(),
            lut.cols,
            w.cols()
        )));
    }
    check_cols(w.cols())?;
    let bits = w.bits();
    Ok((0..w.rows()).map(|i| lut_row(bits, i * w.cols(), lut)).collect())
}

/// Row-major `i32` accumulator matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulators {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i32>,
}

impl Accumulators {
    pub fn row(&self, i: usize) -> &[i32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[inline]
fn dot_i8(w: &[i8], a: &[i8]) -> i32 {
    w.iter().zip(a).map(|(&x, &y)| x as i32 * y as i32).sum()
}

/// `out_i = Σ_j w_ij · a_j` for INT8 weights and one INT8 activation row.
pub fn gemv_int8(w: &Int8Tensor, a: &[i8]) -> Result<Vec<i32>> {
    if w.cols() != a.len() {
        return Err(mismatch(format!("int8 weight has {} columns, activation {}", w.cols(), a.len())));
    }
    Ok((0..w.rows()).map(|i| dot_i8(w.row(i), a)).collect())
}

/// INT8×INT8 GEMM: `out[t][i] = Σ_j w[i][j] · a[t][j]` (tokens × outputs).
/// The caller applies `1/(gamma_w_i · gamma_a_t)`.
pub fn gemm_int8(w: &Int8Tensor, a: &Int8Tensor) -> Result<Accumulators> {
    if w.cols() != a.cols() {
        return Err(mismatch(format!("inner dimensions {} and {}", w.cols(), a.cols())));
    }
    let mut values = Vec::with_capacity(a.rows() * w.rows());
    for t in 0..a.rows() {
        let at = a.row(t);
        values.extend((0..w.rows()).map(|i| dot_i8(w.row(i), at)));
    }
    Ok(Accumulators { rows: a.rows(), cols: w.rows(), values })
}

/// First FFN GEMM: one activation row feeds both the 1-bit up-projection
/// (via its lookup table) and the INT8 up-projection.
pub fn fused_ffn_first_gemm(
    up_1bit: &BinaryMatrix,
    up_8bit: &Int8Tensor,
    a: &[i8],
) -> Result<(Vec<i32>, Vec<i32>)> {
    if up_1bit.cols() != a.len() || up_8bit.cols() != a.len() {
        return Err(mismatch(format!(
            "activation length {} vs weights {} / {}",
            a.len(),
            up_1bit.cols(),
            up_8bit.cols()
        )));
    }
    let lut = build_lut(a);
    let bit = gemv_w1a8_lut(up_1bit, &lut)?;
    let hp = gemv_int8(up_8bit, a)?;
    Ok((bit, hp))
}
