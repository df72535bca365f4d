//! Base64 little-endian array encoding shared by the on-disk formats.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base64 little-endian array with explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Array {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl Array {
    pub fn f64(shape: Vec<usize>, values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            dtype: "float64".into(),
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn i32(shape: Vec<usize>, values: impl IntoIterator<Item = i32>) -> Self {
        let mut bytes = Vec::new();
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            dtype: "int32".into(),
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    fn bytes(&self, dtype: &str, width: usize) -> Result<Vec<u8>> {
        if self.dtype != dtype {
            return Err(Error::data(format!("expected {dtype} array, found {}", self.dtype)));
        }
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::data(format!("bad base64 payload: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != n * width {
            return Err(Error::data(format!(
                "array of shape {:?} carries {} bytes",
                self.shape,
                bytes.len()
            )));
        }
        Ok(bytes)
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        let b = self.bytes("float64", 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn to_i32(&self) -> Result<Vec<i32>> {
        let b = self.bytes("int32", 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::data(format!("{what}: expected shape {shape:?}, found {:?}", self.shape)));
        }
        Ok(())
    }
}
