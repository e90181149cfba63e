use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use npyz::{NpyFile, Order, WriterBuilder};

use super::FeatureMap;
use crate::error::{Error, Result};

/// Row-major 2-D float matrix, e.g. one text embedding per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_tensor(path: &Path) -> Result<RawTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let npy = NpyFile::new(BufReader::new(file))
        .map_err(|e| Error::Format(format!("{}: not a valid NPY file: {e}", path.display())))?;
    if npy.order() == Order::Fortran {
        return Err(Error::Format(format!("{}: Fortran-order arrays are not supported", path.display())));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let descr = npy.dtype().descr();
    let data: Vec<f32> = match descr.as_str() {
        "'<f4'" => npy
            .into_vec::<f32>()
            .map_err(|e| Error::Format(format!("{}: truncated or unreadable data: {e}", path.display())))?,
        "'<f8'" => npy
            .into_vec::<f64>()
            .map_err(|e| Error::Format(format!("{}: truncated or unreadable data: {e}", path.display())))?
            .into_iter()
            .map(|v| v as f32)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported dtype {other}, expected little-endian '<f4' or '<f8'",
                path.display()
            )))
        }
    };
    if shape.contains(&0) {
        return Err(Error::Shape(format!("{}: tensor is empty, shape {shape:?}", path.display())));
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite value at flat index {pos}", path.display())));
    }
    Ok(RawTensor { shape, data })
}

/// Loads a rank-3 `(H, W, C)` feature tensor.
pub fn load_feature_map(path: impl AsRef<Path>, patch_size: usize, source_tag: &str) -> Result<FeatureMap> {
    load_feature_map_with_grid(path, patch_size, source_tag, None)
}

/// Loads a feature tensor that is either rank 3 `(H, W, C)` or rank 2
/// `(H*W, C)`; the latter needs the patch grid supplied as `grid = (H, W)`.
pub fn load_feature_map_with_grid(
    path: impl AsRef<Path>,
    patch_size: usize,
    source_tag: &str,
    grid: Option<(usize, usize)>,
) -> Result<FeatureMap> {
    let path = path.as_ref();
    let raw = read_tensor(path)?;
    let (h, w, c) = match (raw.shape.as_slice(), grid) {
        (&[h, w, c], None) => (h, w, c),
        (&[h, w, c], Some((gh, gw))) => {
            if (gh, gw) != (h, w) {
                return Err(Error::Shape(format!(
                    "{}: tensor grid {h}x{w} does not match requested {gh}x{gw}",
                    path.display()
                )));
            }
            (h, w, c)
        }
        (&[n, c], Some((gh, gw))) => {
            if gh * gw != n {
                return Err(Error::Shape(format!(
                    "{}: {n} rows cannot form a {gh}x{gw} grid",
                    path.display()
                )));
            }
            (gh, gw, c)
        }
        (&[_, _], None) => {
            return Err(Error::Shape(format!(
                "{}: rank-2 feature tensor needs the patch grid height and width",
                path.display()
            )))
        }
        (shape, _) => {
            return Err(Error::Shape(format!(
                "{}: expected rank 3 (H, W, C) or rank 2 (H*W, C), got shape {shape:?}",
                path.display()
            )))
        }
    };
    FeatureMap::new(h, w, c, raw.data, patch_size, source_tag)
}

/// Loads a rank-2 float matrix.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let raw = read_tensor(path)?;
    match raw.shape.as_slice() {
        &[rows, cols] => Ok(Matrix { rows, cols, data: raw.data }),
        shape => Err(Error::Shape(format!("{}: expected a rank-2 matrix, got shape {shape:?}", path.display()))),
    }
}

fn write_f32(path: &Path, shape: &[u64], data: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut writer = npyz::WriteOptions::new()
        .default_dtype()
        .shape(shape)
        .writer(&mut out)
        .begin_nd()
        .map_err(|e| Error::io(path, e))?;
    writer.extend(data.iter().copied()).map_err(|e| Error::io(path, e))?;
    writer.finish().map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes `(H, W, C)` as a little-endian `<f4` NPY v1.0 file.
pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_f32(
        path.as_ref(),
        &[map.height() as u64, map.width() as u64, map.channels() as u64],
        map.data(),
    )
}

pub fn save_matrix(matrix: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    if matrix.data.len() != matrix.rows * matrix.cols {
        return Err(Error::Shape(format!(
            "matrix has {} values, expected {}x{}",
            matrix.data.len(),
            matrix.rows,
            matrix.cols
        )));
    }
    write_f32(path.as_ref(), &[matrix.rows as u64, matrix.cols as u64], &matrix.data)
}
