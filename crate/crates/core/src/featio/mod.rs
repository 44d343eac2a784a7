//! Feature sets, their on-disk formats, and synthetic generators.

mod manifest;
mod npy;
mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use manifest::{Manifest, ManifestEntry};
pub use npy::{decode_npy, encode_npy, load_feature_file, save_feature_file, NPY_MAGIC};
pub use synth::{
    random_lift, synth_gaussian_pair, synth_task_pipeline, GaussianPair, JointCovariance,
    SynthSpec, TaskPipeline,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Adapted,
    Expert,
    Encoder,
    Latent,
}

impl Role {
    /// Maps manifest role labels (`expert1`, `adapted`, ...) onto a role.
    pub fn from_label(label: &str) -> Role {
        let l = label.to_ascii_lowercase();
        if l.starts_with("expert") {
            Role::Expert
        } else if l.starts_with("encoder") {
            Role::Encoder
        } else if l.starts_with("latent") {
            Role::Latent
        } else {
            Role::Adapted
        }
    }
}

/// How `[N, T, D]` token grids become `[rows, D]` matrices for metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenPooling {
    /// Average over tokens, keeping N rows.
    #[default]
    Mean,
    /// Treat every token as a sample, giving N*T rows.
    Flatten,
}

/// An `N x D` or `N x T x D` feature array plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    data: Tensor,
    pub dtype: Dtype,
    pub role: Role,
    pub name: String,
    pub source: String,
}

impl FeatureSet {
    pub fn new(
        data: Tensor,
        dtype: Dtype,
        role: Role,
        name: impl Into<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let rank = data.rank();
        if rank != 2 && rank != 3 {
            return Err(Error::Usage(format!(
                "feature sets are N x D or N x T x D, got shape {:?}",
                data.shape()
            )));
        }
        if data.shape()[0] < 2 {
            return Err(Error::InsufficientData(format!(
                "feature set needs N >= 2 samples, got {}",
                data.shape()[0]
            )));
        }
        if let Some(index) = data.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        Ok(FeatureSet {
            data,
            dtype,
            role,
            name: name.into(),
            source: source.into(),
        })
    }

    /// Double-precision feature set built from `rows x cols` data.
    pub fn from_matrix(rows: usize, cols: usize, data: Vec<f64>, role: Role, name: &str) -> Result<Self> {
        FeatureSet::new(Tensor::new(vec![rows, cols], data)?, Dtype::F64, role, name, "memory")
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tokens(&self) -> Option<usize> {
        (self.data.rank() == 3).then(|| self.data.shape()[1])
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// `[rows, D]` view according to `pooling`. Plain matrices pass through.
    pub fn matrix(&self, pooling: TokenPooling) -> Tensor {
        let Some(t) = self.tokens() else {
            return self.data.clone();
        };
        let (n, d) = (self.samples(), self.dim());
        match pooling {
            TokenPooling::Flatten => self.data.clone().reshape(&[n * t, d]).expect("same size"),
            TokenPooling::Mean => {
                let mut out = vec![0.0; n * d];
                for s in 0..n {
                    let row = &mut out[s * d..(s + 1) * d];
                    for tok in 0..t {
                        let base = (s * t + tok) * d;
                        for (o, v) in row.iter_mut().zip(&self.data.data()[base..base + d]) {
                            *o += v;
                        }
                    }
                    row.iter_mut().for_each(|v| *v /= t as f64);
                }
                Tensor::new(vec![n, d], out).expect("pooled shape")
            }
        }
    }

    /// Paired sets must agree on sample count (and therefore ordering).
    pub fn check_paired(&self, other: &FeatureSet) -> Result<()> {
        if self.samples() != other.samples() {
            return Err(Error::Shape {
                op: "paired feature sets",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> Result<FeatureSet> {
        FeatureSet::new(
            self.data.select_rows(rows),
            self.dtype,
            self.role,
            self.name.clone(),
            self.source.clone(),
        )
    }
}

/// Writes `bytes` via a temporary sibling and rename. Existing targets are
/// refused unless `overwrite`; missing parent directories are created.
pub fn write_new_file(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if !overwrite && path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "refusing to overwrite existing file",
            ),
        ));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_single_sample_and_non_finite() {
        let one = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            FeatureSet::new(one, Dtype::F64, Role::Expert, "x", "t"),
            Err(Error::InsufficientData(_))
        ));
        let nan = Tensor::new(vec![2, 2], vec![0.0, 1.0, f64::NAN, 2.0]).unwrap();
        assert!(matches!(
            FeatureSet::new(nan, Dtype::F64, Role::Expert, "x", "t"),
            Err(Error::NonFinite { index: 2 })
        ));
    }

    #[test]
    fn mean_pooling_and_flatten() {
        let t = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let fs = FeatureSet::new(t, Dtype::F64, Role::Adapted, "a", "t").unwrap();
        assert_eq!(fs.matrix(TokenPooling::Mean).data(), &[2.0, 3.0, 1.0, 1.0]);
        assert_eq!(fs.matrix(TokenPooling::Flatten).shape(), &[4, 2]);
    }

    #[test]
    fn role_labels() {
        assert_eq!(Role::from_label("expert2"), Role::Expert);
        assert_eq!(Role::from_label("encoder"), Role::Encoder);
        assert_eq!(Role::from_label("adapted"), Role::Adapted);
    }

    #[test]
    fn write_creates_dirs_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.bin");
        write_new_file(&path, b"abc", false).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"abc");
        assert!(matches!(write_new_file(&path, b"x", false), Err(Error::Io { .. })));
        write_new_file(&path, b"xyz", true).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"xyz");
    }
}
