//! Row-major bit matrices, one byte-aligned row per block.
//!
//! Bit `i` of row `l` lives at byte `l * ceil(cols / 8) + i / 8`, bit
//! position `i % 8` counted from the least significant bit.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

impl BitMatrix {
    pub fn row_bytes(cols: usize) -> usize {
        cols.div_ceil(8)
    }

    pub fn payload_len(rows: usize, cols: usize) -> usize {
        rows * Self::row_bytes(cols)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        BitMatrix {
            rows,
            cols,
            bytes: vec![0; Self::payload_len(rows, cols)],
        }
    }

    /// Wraps packed bytes. Padding bits past `cols` must be zero.
    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<Self> {
        let expected = Self::payload_len(rows, cols);
        if bytes.len() != expected {
            return Err(Error::PayloadLength {
                what: "bit matrix",
                expected,
                actual: bytes.len(),
            });
        }
        let m = BitMatrix { rows, cols, bytes };
        if !cols.is_multiple_of(8) {
            let pad_mask = !((1u8 << (cols % 8)) - 1);
            let rb = Self::row_bytes(cols);
            for r in 0..rows {
                if m.bytes[r * rb + rb - 1] & pad_mask != 0 {
                    return Err(Error::Malformed {
                        what: "bit matrix",
                        detail: format!("padding bits set in row {r}"),
                    });
                }
            }
        }
        Ok(m)
    }

    /// Builds a matrix with the given column indices set in each row.
    pub fn from_rows<I: AsRef<[usize]>>(cols: usize, rows: &[I]) -> Self {
        let mut m = Self::zeros(rows.len(), cols);
        for (r, idx) in rows.iter().enumerate() {
            for &c in idx.as_ref() {
                m.set(r, c, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        assert!(row < self.rows && col < self.cols, "bit ({row}, {col}) out of range");
        let byte = self.bytes[row * Self::row_bytes(self.cols) + col / 8];
        (byte >> (col % 8)) & 1 == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        assert!(row < self.rows && col < self.cols, "bit ({row}, {col}) out of range");
        let at = row * Self::row_bytes(self.cols) + col / 8;
        let bit = 1u8 << (col % 8);
        if on {
            self.bytes[at] |= bit;
        } else {
            self.bytes[at] &= !bit;
        }
    }

    pub fn row_count(&self, row: usize) -> usize {
        let rb = Self::row_bytes(self.cols);
        self.bytes[row * rb..(row + 1) * rb]
            .iter()
            .map(|b| b.count_ones() as usize)
            .sum()
    }

    pub fn row_indices(&self, row: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.get(row, c)).collect()
    }

    /// Checks every row has exactly `k` bits set.
    pub fn check_k_hot(&self, mask: &'static str, k: usize) -> Result<()> {
        for row in 0..self.rows {
            let found = self.row_count(row);
            if found != k {
                return Err(Error::RowBitCount {
                    mask,
                    row,
                    expected: k,
                    found,
                });
            }
        }
        Ok(())
    }

    /// Bits as 0/1 values, row-major.
    pub fn to_f64s(&self) -> Vec<f64> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| if self.get(r, c) { 1.0 } else { 0.0 })
            .collect()
    }
}
