//! Latent files: a `W`-space code plus the hash of the generator checkpoint
//! it belongs to.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use voxopt_core::gan::LatentCode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFile {
    pub d_w: usize,
    pub values: Vec<f32>,
    pub generator_sha256: String,
}

impl LatentFile {
    pub fn new(code: &LatentCode<f32>, generator_sha256: &str) -> Self {
        Self { d_w: code.dim(), values: code.values.clone(), generator_sha256: generator_sha256.into() }
    }

    pub fn code(&self) -> Result<LatentCode<f32>> {
        ensure!(self.values.len() == self.d_w, "latent file declares d_w {} but holds {} values", self.d_w, self.values.len());
        Ok(LatentCode::new(self.values.clone())?)
    }

    /// Fails when the code was produced by a different generator.
    pub fn check_generator(&self, sha256: &str) -> Result<()> {
        ensure!(
            self.generator_sha256 == sha256,
            "latent belongs to generator {} but checkpoint hash is {sha256}",
            self.generator_sha256
        );
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_exact() {
        let code = LatentCode::new(vec![0.1f32, -3.25e-7, 1.0 / 3.0]).unwrap();
        let f = LatentFile::new(&code, "abc");
        let back: LatentFile = serde_json::from_slice(&serde_json::to_vec(&f).unwrap()).unwrap();
        assert_eq!(back.code().unwrap(), code);
        assert!(back.check_generator("abc").is_ok());
        assert!(back.check_generator("abd").is_err());
    }
}
