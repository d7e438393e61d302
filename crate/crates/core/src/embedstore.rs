//! Embedding matrices: binary I/O, L2 normalization and exact cosine kNN.
//!
//! Storage is `f32`; every dot product and norm is accumulated in `f64` so that
//! similarity ties break the same way on every platform.
//!
//! Binary layout (little-endian): magic `EMB1`, `u32` N, `u32` d, then N·d
//! `f32` values row-major. Image ids live in a companion `.ids` file, one id
//! per line in row order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

use crate::par;

pub const MAGIC: &[u8; 4] = b"EMB1";

/// Rows of a normalized matrix must have norm within this of 1.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected EMB1")]
    BadMagic([u8; 4]),
    #[error("dimension mismatch: header says {rows}×{dim} ({expected} bytes of data), file has {found}")]
    DimensionMismatch {
        rows: usize,
        dim: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("{ids} ids for {rows} rows")]
    IdCountMismatch { ids: usize, rows: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("row {row} has norm {norm}, not unit")]
    NotUnit { row: usize, norm: f64 },
    #[error("non-finite value in row {0}")]
    NonFinite(usize),
    #[error("query dimension {queries} differs from gallery dimension {gallery}")]
    DimMismatch { queries: usize, gallery: usize },
    #[error("query id `{0}` is not in the gallery")]
    MissingSelf(String),
    #[error("k = {k} exceeds the {available} gallery rows available")]
    KTooLarge { k: usize, available: usize },
    #[error("unknown id `{0}`")]
    UnknownId(String),
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    data: Array2<f32>,
    normalized: bool,
    index: HashMap<String, usize>,
}

fn dot64(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm64(a: ArrayView1<f32>) -> f64 {
    dot64(a, a).sqrt()
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, data: Array2<f32>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(EmbedError::ZeroDim);
        }
        if ids.len() != data.nrows() {
            return Err(EmbedError::IdCountMismatch {
                ids: ids.len(),
                rows: data.nrows(),
            });
        }
        for (i, row) in data.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite(i));
            }
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(EmbedError::DuplicateId(id.clone()));
            }
        }
        let data = data.as_standard_layout().into_owned();
        Ok(Self {
            ids,
            data,
            normalized: false,
            index,
        })
    }

    /// Like [`EmbeddingMatrix::new`], but marks the matrix normalized after
    /// checking every row is unit length.
    pub fn new_normalized(ids: Vec<String>, data: Array2<f32>) -> Result<Self> {
        let mut m = Self::new(ids, data)?;
        for (row, r) in m.data.rows().into_iter().enumerate() {
            let norm = norm64(r);
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(EmbedError::NotUnit { row, norm });
            }
        }
        m.normalized = true;
        Ok(m)
    }

    pub fn from_f64(ids: Vec<String>, data: &Array2<f64>) -> Result<Self> {
        Self::new(ids, data.mapv(|v| v as f32))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_by_id(&self, id: &str) -> Option<ArrayView1<'_, f32>> {
        self.position(id).map(|i| self.data.row(i))
    }

    /// Cosine similarity of rows `i` and `j`, 64-bit accumulation.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        cosine(self.row(i), self.row(j))
    }

    /// New matrix holding `ids` in the given order.
    pub fn select(&self, ids: &[impl AsRef<str>]) -> Result<Self> {
        let mut data = Array2::zeros((ids.len(), self.dim()));
        for (r, id) in ids.iter().enumerate() {
            let src = self
                .position(id.as_ref())
                .ok_or_else(|| EmbedError::UnknownId(id.as_ref().to_owned()))?;
            data.row_mut(r).assign(&self.data.row(src));
        }
        let mut out = Self::new(ids.iter().map(|s| s.as_ref().to_owned()).collect(), data)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Upcast of the data to `f64`.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Parses the binary matrix; `ids` must match the row count.
    pub fn read_from<R: Read>(mut r: R, ids: Vec<String>) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 12 {
            return Err(EmbedError::DimensionMismatch {
                rows: 0,
                dim: 0,
                expected: 12,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(EmbedError::BadMagic(magic));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let payload = &bytes[12..];
        let expected = rows * dim * 4;
        if payload.len() != expected {
            return Err(EmbedError::DimensionMismatch {
                rows,
                dim,
                expected,
                found: payload.len(),
            });
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = Array2::from_shape_vec((rows, dim), values).expect("length checked above");
        Self::new(ids, data)
    }
}

/// Cosine similarity with 64-bit accumulation; 0 when either row is zero.
///
/// A zero result is always `+0.0`, so `total_cmp` ranks it level with the
/// zero-row case rather than just below it.
pub fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let denom = norm64(a) * norm64(b);
    if denom == 0.0 {
        0.0
    } else {
        dot64(a, b) / denom + 0.0
    }
}

/// `<name>.ids` next to `<name>.emb`.
pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    matrix.write_to(&mut file)?;
    file.flush()?;
    let mut ids = String::new();
    for id in matrix.ids() {
        ids.push_str(id);
        ids.push('\n');
    }
    std::fs::write(ids_path(path), ids)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let ids: Vec<String> = std::fs::read_to_string(ids_path(path))?
        .lines()
        .map(str::to_owned)
        .collect();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    EmbeddingMatrix::read_from(file, ids)
}

/// Scales every row to unit length.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = matrix.data.clone();
    for (i, mut row) in data.rows_mut().into_iter().enumerate() {
        let norm = norm64(row.view());
        if norm == 0.0 {
            return Err(EmbedError::ZeroRow(i));
        }
        row.mapv_inplace(|v| (v as f64 / norm) as f32);
    }
    Ok(EmbeddingMatrix {
        ids: matrix.ids.clone(),
        data,
        normalized: true,
        index: matrix.index.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

/// Per query row, neighbors by descending similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub neighbors: Vec<Vec<Neighbor>>,
}

/// Orders by similarity descending, then gallery index ascending.
pub(crate) fn rank_order(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.index.cmp(&b.index))
}

/// Exact top-`k` gallery rows by cosine similarity for every query.
///
/// With `exclude_self`, the gallery row sharing the query's id is skipped.
pub fn cosine_knn(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    k: usize,
    exclude_self: bool,
) -> Result<NeighborList> {
    if queries.dim() != gallery.dim() {
        return Err(EmbedError::DimMismatch {
            queries: queries.dim(),
            gallery: gallery.dim(),
        });
    }
    let mut self_rows = vec![None; queries.rows()];
    if exclude_self {
        for (q, id) in queries.ids().iter().enumerate() {
            self_rows[q] = Some(gallery.position(id).ok_or_else(|| EmbedError::MissingSelf(id.clone()))?);
        }
    }
    let available = gallery.rows().saturating_sub(usize::from(exclude_self));
    if k > available {
        return Err(EmbedError::KTooLarge { k, available });
    }

    let gallery_norms: Vec<f64> = gallery.data.rows().into_iter().map(norm64).collect();
    let neighbors = par::map_range(queries.rows(), |q| {
        let qrow = queries.row(q);
        let qnorm = norm64(qrow);
        let mut scored: Vec<Neighbor> = (0..gallery.rows())
            .filter(|&g| Some(g) != self_rows[q])
            .map(|g| {
                let denom = qnorm * gallery_norms[g];
                // + 0.0 folds -0.0 into +0.0, see `cosine`
                let similarity = if denom == 0.0 { 0.0 } else { dot64(qrow, gallery.row(g)) / denom + 0.0 };
                Neighbor { index: g, similarity }
            })
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        scored
    });
    Ok(NeighborList { neighbors })
}
