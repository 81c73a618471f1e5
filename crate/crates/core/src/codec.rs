//! Base64 float32 payloads for JSON artifacts.
//!
//! Matrices are stored as `{"rows", "cols", "f32le"}` where `f32le` is the
//! base64 (standard alphabet, padded) encoding of the row-major values
//! narrowed to little-endian `f32`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A dense row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Encoded {
    rows: usize,
    cols: usize,
    f32le: String,
}

pub fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(s: &str) -> Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("payload length {} is not a multiple of 4", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Encoded {
            rows: self.rows,
            cols: self.cols,
            f32le: encode_f32(&self.data),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let enc = Encoded::deserialize(d)?;
        let data = decode_f32(&enc.f32le).map_err(D::Error::custom)?;
        if data.len() != enc.rows * enc.cols {
            return Err(D::Error::custom(format!(
                "matrix payload has {} values, expected {}x{}",
                data.len(),
                enc.rows,
                enc.cols
            )));
        }
        Ok(Matrix {
            rows: enc.rows,
            cols: enc.cols,
            data,
        })
    }
}

/// Serde adapter for a bare `Vec<f64>` stored as a base64 f32 string.
pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode_f32(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let s = String::deserialize(d)?;
        decode_f32(&s).map_err(D::Error::custom)
    }
}
