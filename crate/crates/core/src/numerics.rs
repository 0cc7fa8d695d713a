//! Numeric kernels over raw embedding vectors: cosine similarity, mean-pooled
//! video embeddings, the symmetric InfoNCE loss, and the anti-forgetting
//! regularizer used when fine-tuning between alignment rounds.
//!
//! All accumulation is in f64 regardless of the storage precision of the
//! inputs; the on-disk matrix format is 32-bit floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("batch invariant violated: {0}")]
    BadBatch(&'static str),
    #[error("matrix file {path}: {reason}")]
    BadMatrix { path: PathBuf, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar error: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Cosine similarity `dot(u, v) / (|u| |v|)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64, NumericsError> {
    if u.len() != v.len() {
        return Err(NumericsError::DimensionMismatch { left: u.len(), right: v.len() });
    }
    if u.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::ZeroVector);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Elementwise arithmetic mean of frame embeddings: the video embedding is
/// the average of image embeddings from uniformly sampled frames.
pub fn mean_pool(frames: &[Vec<f64>]) -> Result<Vec<f64>, NumericsError> {
    let first = frames.first().ok_or(NumericsError::EmptyInput)?;
    let dim = first.len();
    let mut acc = vec![0.0f64; dim];
    for frame in frames {
        if frame.len() != dim {
            return Err(NumericsError::DimensionMismatch { left: dim, right: frame.len() });
        }
        for (a, &x) in acc.iter_mut().zip(frame) {
            *a += x;
        }
    }
    let n = frames.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// A paired batch of text and video embeddings with a softmax temperature.
#[derive(Debug, Clone)]
pub struct Batch {
    pub text_embeddings: Vec<Vec<f64>>,
    pub video_embeddings: Vec<Vec<f64>>,
    /// Softmax temperature; similarities are divided by it.
    pub nu: f64,
}

impl Batch {
    pub fn new(
        text_embeddings: Vec<Vec<f64>>,
        video_embeddings: Vec<Vec<f64>>,
        nu: f64,
    ) -> Result<Self, NumericsError> {
        if text_embeddings.is_empty() {
            return Err(NumericsError::BadBatch("batch must be non-empty"));
        }
        if text_embeddings.len() != video_embeddings.len() {
            return Err(NumericsError::BadBatch("text/video counts differ"));
        }
        let dim = text_embeddings[0].len();
        if dim == 0 {
            return Err(NumericsError::BadBatch("zero-dimensional embeddings"));
        }
        let all_same = text_embeddings
            .iter()
            .chain(video_embeddings.iter())
            .all(|v| v.len() == dim && v.iter().all(|x| x.is_finite()));
        if !all_same {
            return Err(NumericsError::BadBatch("ragged dimensions or non-finite entries"));
        }
        if !(nu > 0.0) {
            return Err(NumericsError::BadBatch("temperature must be positive"));
        }
        Ok(Batch { text_embeddings, video_embeddings, nu })
    }

    pub fn len(&self) -> usize {
        self.text_embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_embeddings.is_empty()
    }
}

/// Symmetric InfoNCE loss over a paired batch.
///
/// With `rho[i][j]` the cosine similarity between text `i` and video `j`,
/// the loss is the mean over the batch of the row-wise and column-wise
/// negative log-softmax of `rho / nu` taken at the diagonal, with the two
/// directions averaged. Log-sum-exp is max-shifted for stability, which
/// also makes the single-pair batch evaluate to exactly zero.
pub fn info_nce(batch: &Batch) -> Result<f64, NumericsError> {
    let n = batch.len();
    let mut rho = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            rho[i * n + j] =
                cosine_sim(&batch.text_embeddings[i], &batch.video_embeddings[j])? / batch.nu;
        }
    }

    let mut total = 0.0f64;
    for i in 0..n {
        let row = &rho[i * n..(i + 1) * n];
        total += row[i] - log_sum_exp(row.iter().copied());
        total += rho[i * n + i] - log_sum_exp((0..n).map(|m| rho[m * n + i]));
    }
    Ok(-total / (2.0 * n as f64))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Current and frozen encoder outputs for the same samples, plus the
/// regularization weight.
#[derive(Debug, Clone)]
pub struct FrozenPairBatch {
    pub text: Vec<Vec<f64>>,
    pub text_frozen: Vec<Vec<f64>>,
    pub video: Vec<Vec<f64>>,
    pub video_frozen: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl FrozenPairBatch {
    pub fn new(
        text: Vec<Vec<f64>>,
        text_frozen: Vec<Vec<f64>>,
        video: Vec<Vec<f64>>,
        video_frozen: Vec<Vec<f64>>,
        alpha: f64,
    ) -> Result<Self, NumericsError> {
        let n = text.len();
        if n == 0 {
            return Err(NumericsError::BadBatch("batch must be non-empty"));
        }
        if text_frozen.len() != n || video.len() != n || video_frozen.len() != n {
            return Err(NumericsError::BadBatch("mismatched list lengths"));
        }
        if alpha < 0.0 {
            return Err(NumericsError::BadBatch("alpha must be non-negative"));
        }
        Ok(FrozenPairBatch { text, text_frozen, video, video_frozen, alpha })
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

/// Anti-forgetting regularizer: the mean similarity between current and
/// frozen encoder outputs, scaled by `alpha`.
///
/// Computed exactly as printed — `alpha * (1 / 2|B|) * sum_i
/// (sim(f_i, f*_i) + sim(g_i, g*_i))`. How the sign enters a training
/// objective is the caller's concern.
pub fn l_align(batch: &FrozenPairBatch) -> Result<f64, NumericsError> {
    let mut total = 0.0f64;
    for i in 0..batch.len() {
        total += cosine_sim(&batch.text[i], &batch.text_frozen[i])?;
        total += cosine_sim(&batch.video[i], &batch.video_frozen[i])?;
    }
    Ok(batch.alpha * total / (2.0 * batch.len() as f64))
}

/// JSON sidecar describing a flat binary matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub rows: usize,
    pub dim: usize,
    pub ids: Vec<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// Write a matrix as little-endian f32, row-major, with a `<path>.json`
/// sidecar carrying `{rows, dim, ids}`.
pub fn write_matrix(path: &Path, ids: &[String], rows: &[Vec<f64>]) -> Result<(), NumericsError> {
    if ids.len() != rows.len() {
        return Err(NumericsError::BadBatch("one id per row required"));
    }
    let dim = rows.first().map_or(0, |r| r.len());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = BufWriter::new(File::create(path)?);
    for row in rows {
        if row.len() != dim {
            return Err(NumericsError::DimensionMismatch { left: dim, right: row.len() });
        }
        for &x in row {
            writer.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    writer.flush()?;
    let sidecar = MatrixSidecar { rows: rows.len(), dim, ids: ids.to_vec() };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Read a matrix written by [`write_matrix`]; values widen to f64.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), NumericsError> {
    let sidecar: MatrixSidecar =
        serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    if sidecar.ids.len() != sidecar.rows {
        return Err(NumericsError::BadMatrix {
            path: path.to_path_buf(),
            reason: format!("sidecar lists {} ids for {} rows", sidecar.ids.len(), sidecar.rows),
        });
    }
    let expected = sidecar.rows * sidecar.dim * 4;
    let meta_len = std::fs::metadata(path)?.len() as usize;
    if meta_len != expected {
        return Err(NumericsError::BadMatrix {
            path: path.to_path_buf(),
            reason: format!("file is {meta_len} bytes, sidecar implies {expected}"),
        });
    }
    let mut reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::with_capacity(sidecar.rows);
    let mut buf = vec![0u8; sidecar.dim * 4];
    for _ in 0..sidecar.rows {
        reader.read_exact(&mut buf)?;
        let row: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        rows.push(row);
    }
    Ok((sidecar.ids, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.8);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(NumericsError::ZeroVector)
        ));
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(NumericsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mean_pool_basics() {
        let one = mean_pool(&[vec![3.0, -1.0]]).unwrap();
        assert_eq!(one, vec![3.0, -1.0]);
        let two = mean_pool(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(two, vec![1.0, 1.0]);
        assert!(matches!(mean_pool(&[]), Err(NumericsError::EmptyInput)));
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let b = Batch::new(vec![vec![0.3, 0.4]], vec![vec![0.3, 0.4]], 0.7).unwrap();
        assert_eq!(info_nce(&b).unwrap(), 0.0);
    }

    #[test]
    fn info_nce_orthogonal_pairs() {
        // Two matched orthogonal unit pairs at nu=1: loss = ln(1 + e^{-1}).
        let b = Batch::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            1.0,
        )
        .unwrap();
        assert_relative_eq!(info_nce(&b).unwrap(), (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
        assert_relative_eq!(info_nce(&b).unwrap(), 0.313262, epsilon = 1e-6);
    }

    #[test]
    fn l_align_identity_case() {
        let b = FrozenPairBatch::new(
            vec![vec![1.0, 0.0]],
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![vec![0.0, 1.0]],
            0.1,
        )
        .unwrap();
        assert_eq!(l_align(&b).unwrap(), 0.1);
    }

    #[test]
    fn l_align_zero_alpha() {
        let b = FrozenPairBatch::new(
            vec![vec![1.0, 2.0]],
            vec![vec![-3.0, 0.5]],
            vec![vec![0.2, 1.0]],
            vec![vec![4.0, -1.0]],
            0.0,
        )
        .unwrap();
        assert_eq!(l_align(&b).unwrap(), 0.0);
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.f32");
        let ids = vec!["a".to_string(), "b".to_string()];
        // f32-representable values survive the round trip exactly.
        let rows = vec![vec![1.5, -2.25, 0.0], vec![8.0, 0.125, -1.0]];
        write_matrix(&path, &ids, &rows).unwrap();
        let (ids2, rows2) = read_matrix(&path).unwrap();
        assert_eq!(ids2, ids);
        assert_eq!(rows2, rows);
    }

    #[test]
    fn matrix_size_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.f32");
        write_matrix(&path, &["a".to_string()], &[vec![1.0, 2.0]]).unwrap();
        // Truncate the payload behind the sidecar's back.
        std::fs::write(&path, [0u8; 4]).unwrap();
        assert!(matches!(read_matrix(&path), Err(NumericsError::BadMatrix { .. })));
    }
}
