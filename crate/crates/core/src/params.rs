use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// Flattened adapter parameters: row-major `A` followed by row-major `B`.
///
/// This is the unit exchanged between clients and the server and the vector
/// space the server optimizers operate in.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(len: usize) -> Self {
        FlatParams(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn check_len(&self, other: &FlatParams) -> Result<()> {
        if self.len() != other.len() {
            return dim_err(format!(
                "parameter length {} vs {}",
                self.len(),
                other.len()
            ));
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &FlatParams) -> Result<f64> {
        self.check_len(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Little-endian byte image, used for checksums and checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

impl Deref for FlatParams {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for FlatParams {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for FlatParams {
    fn from(v: Vec<f64>) -> Self {
        FlatParams(v)
    }
}
