//! The CFEB embedding container and the similarity matrices derived from it.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CFEB" | version u32 = 1 | flags u32 | N P K C H L_all (u64 each)
//! labels           N       x u32
//! image embeddings N·K     x f32
//! patch embeddings N·P·K   x f32
//! high concepts    H·K     x f32
//! low concepts     L_all·K x f32
//! [example-wise ground truth N·L_all x u8]   flags bit 0
//! [class-wise ground truth   C·L_all x u8]   flags bit 1
//! ```
//!
//! Values are promoted to `f64` on load. Rows whose norm is off by more than
//! [`RENORMALIZE_TOLERANCE`] but less than [`REJECT_TOLERANCE`] are rescaled;
//! anything further off is rejected as corrupt.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CfcbmError, Result};
use crate::numerics::{dot, Matrix};

pub const MAGIC: &[u8; 4] = b"CFEB";
pub const VERSION: u32 = 1;
pub const FLAG_EXAMPLE_GT: u32 = 1;
pub const FLAG_CLASS_GT: u32 = 1 << 1;

pub const RENORMALIZE_TOLERANCE: f64 = 1e-5;
pub const REJECT_TOLERANCE: f64 = 1e-2;

/// Binary indicator matrix stored one byte per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CfcbmError::Dimension(format!(
                "binary buffer of length {} for {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&b| b > 1) {
            return Err(CfcbmError::Domain(format!(
                "non-binary entry {} at row {}, column {}",
                data[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(BinaryMatrix { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Header fields of a CFEB file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub flags: u32,
    pub n_examples: usize,
    pub n_patches: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub n_high: usize,
    pub n_low: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbeddings {
    /// H×K
    pub high: Matrix,
    /// L_all×K
    pub low: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub n_classes: usize,
    /// N×K, unit rows.
    pub image_embeddings: Matrix,
    /// (N·P)×K, unit rows; row `n·P + p` is patch `p` of example `n`.
    pub patch_embeddings: Matrix,
    pub n_patches: usize,
    pub labels: Vec<usize>,
    pub concepts: ConceptEmbeddings,
    /// N×L_all
    pub example_ground_truth: Option<BinaryMatrix>,
    /// C×L_all
    pub class_ground_truth: Option<BinaryMatrix>,
}

impl EmbeddingDataset {
    pub fn n_examples(&self) -> usize {
        self.image_embeddings.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.image_embeddings.cols()
    }

    pub fn n_high(&self) -> usize {
        self.concepts.high.rows()
    }

    pub fn n_low(&self) -> usize {
        self.concepts.low.rows()
    }

    pub fn header(&self) -> DatasetHeader {
        let mut flags = 0;
        if self.example_ground_truth.is_some() {
            flags |= FLAG_EXAMPLE_GT;
        }
        if self.class_ground_truth.is_some() {
            flags |= FLAG_CLASS_GT;
        }
        DatasetHeader {
            flags,
            n_examples: self.n_examples(),
            n_patches: self.n_patches,
            embed_dim: self.embed_dim(),
            n_classes: self.n_classes,
            n_high: self.n_high(),
            n_low: self.n_low(),
        }
    }

    /// Checks shapes, label range, ground-truth shapes and the patch-grid
    /// requirement. Does not touch row norms.
    pub fn check_shapes(&self) -> Result<()> {
        let n = self.n_examples();
        let k = self.embed_dim();
        let p = self.n_patches;
        if !is_perfect_square(p) {
            return Err(CfcbmError::Validation(format!(
                "patch count {p} is not a perfect square"
            )));
        }
        if self.patch_embeddings.shape() != (n * p, k) {
            return Err(CfcbmError::dims(
                "patch embeddings",
                self.patch_embeddings.shape(),
                (n * p, k),
            ));
        }
        if self.labels.len() != n {
            return Err(CfcbmError::Dimension(format!(
                "{} labels for {n} examples",
                self.labels.len()
            )));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.n_classes)
        {
            return Err(CfcbmError::Index(format!(
                "label {l} of example {i} with {} classes",
                self.n_classes
            )));
        }
        for (name, m) in [("high", &self.concepts.high), ("low", &self.concepts.low)] {
            if m.cols() != k {
                return Err(CfcbmError::Dimension(format!(
                    "{name} concept dimension {} vs embedding dimension {k}",
                    m.cols()
                )));
            }
        }
        let l_all = self.n_low();
        if let Some(gt) = &self.example_ground_truth {
            if (gt.rows, gt.cols) != (n, l_all) {
                return Err(CfcbmError::dims(
                    "example-wise ground truth",
                    (gt.rows, gt.cols),
                    (n, l_all),
                ));
            }
        }
        if let Some(gt) = &self.class_ground_truth {
            if (gt.rows, gt.cols) != (self.n_classes, l_all) {
                return Err(CfcbmError::dims(
                    "class-wise ground truth",
                    (gt.rows, gt.cols),
                    (self.n_classes, l_all),
                ));
            }
        }
        Ok(())
    }

    /// Returns a copy holding only the given examples, in order.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingDataset {
        let p = self.n_patches;
        let patch_rows: Vec<usize> = indices.iter().flat_map(|&i| (i * p)..(i * p + p)).collect();
        EmbeddingDataset {
            n_classes: self.n_classes,
            image_embeddings: self.image_embeddings.select_rows(indices),
            patch_embeddings: self.patch_embeddings.select_rows(&patch_rows),
            n_patches: p,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            concepts: self.concepts.clone(),
            example_ground_truth: self.example_ground_truth.as_ref().map(|gt| BinaryMatrix {
                rows: indices.len(),
                cols: gt.cols,
                data: indices.iter().flat_map(|&i| gt.row(i).to_vec()).collect(),
            }),
            class_ground_truth: self.class_ground_truth.clone(),
        }
    }
}

pub fn is_perfect_square(p: usize) -> bool {
    let r = (p as f64).sqrt().round() as usize;
    p > 0 && r * r == p
}

/// Row-major patch index for grid cell (`row`, `col`) of a √P×√P grid.
pub fn patch_index(row: usize, col: usize, n_patches: usize) -> usize {
    let side = (n_patches as f64).sqrt().round() as usize;
    row * side + col
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    if norm.is_nan() || norm <= 1e-12 {
        return Err(CfcbmError::DegenerateInput(format!(
            "vector norm {norm:e} is too small to normalize"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Normalizes every row in place.
pub fn normalize_rows(m: &mut Matrix) -> Result<()> {
    for r in 0..m.rows() {
        let unit = l2_normalize(m.row(r))?;
        m.row_mut(r).copy_from_slice(&unit);
    }
    Ok(())
}

/// S_H\[n,h\] = ⟨image_n, high_h⟩ (N×H).
pub fn similarity_high(dataset: &EmbeddingDataset, concepts: &ConceptEmbeddings) -> Result<Matrix> {
    dataset.image_embeddings.matmul_t(&concepts.high)
}

/// S_L\[(n,p),l\] = ⟨patch_{n,p}, low_l⟩ ((N·P)×L_all).
pub fn similarity_low(dataset: &EmbeddingDataset, concepts: &ConceptEmbeddings) -> Result<Matrix> {
    dataset.patch_embeddings.matmul_t(&concepts.low)
}

fn check_norms(what: &str, m: &mut Matrix) -> Result<()> {
    for r in 0..m.rows() {
        let norm = dot(m.row(r), m.row(r)).sqrt();
        let dev = (norm - 1.0).abs();
        if dev >= REJECT_TOLERANCE || !norm.is_finite() {
            return Err(CfcbmError::CorruptData(format!(
                "{what} row {r} has norm {norm} (deviation {dev:e})"
            )));
        }
        if dev > RENORMALIZE_TOLERANCE {
            let row = m.row_mut(r);
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
    }
    Ok(())
}

fn format_err(e: std::io::Error) -> CfcbmError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CfcbmError::Format("file is truncated".into())
    } else {
        CfcbmError::Format(e.to_string())
    }
}

fn read_f32_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let mut buf = vec![0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut buf)
        .map_err(format_err)?;
    Matrix::from_vec(rows, cols, buf.into_iter().map(f64::from).collect())
}

fn read_binary<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<BinaryMatrix> {
    let mut buf = vec![0u8; rows * cols];
    r.read_exact(&mut buf).map_err(format_err)?;
    BinaryMatrix::new(rows, cols, buf)
}

fn read_count<R: Read>(r: &mut R) -> Result<usize> {
    let v = r.read_u64::<LittleEndian>().map_err(format_err)?;
    usize::try_from(v).map_err(|_| CfcbmError::Format(format!("count {v} does not fit in memory")))
}

pub fn read_header<R: Read>(r: &mut R) -> Result<DatasetHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(format_err)?;
    if &magic != MAGIC {
        return Err(CfcbmError::Format(format!(
            "bad magic {:?}, expected \"CFEB\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(format_err)?;
    if version != VERSION {
        return Err(CfcbmError::Format(format!("unsupported version {version}")));
    }
    let flags = r.read_u32::<LittleEndian>().map_err(format_err)?;
    if flags & !(FLAG_EXAMPLE_GT | FLAG_CLASS_GT) != 0 {
        return Err(CfcbmError::Format(format!("unknown flag bits {flags:#x}")));
    }
    Ok(DatasetHeader {
        flags,
        n_examples: read_count(r)?,
        n_patches: read_count(r)?,
        embed_dim: read_count(r)?,
        n_classes: read_count(r)?,
        n_high: read_count(r)?,
        n_low: read_count(r)?,
    })
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<EmbeddingDataset> {
    let h = read_header(r)?;
    let (n, p, k) = (h.n_examples, h.n_patches, h.embed_dim);
    let mut labels = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut labels)
        .map_err(format_err)?;
    let mut image = read_f32_matrix(r, n, k)?;
    let mut patches = read_f32_matrix(r, n * p, k)?;
    let mut high = read_f32_matrix(r, h.n_high, k)?;
    let mut low = read_f32_matrix(r, h.n_low, k)?;
    let example_gt = if h.flags & FLAG_EXAMPLE_GT != 0 {
        Some(read_binary(r, n, h.n_low)?)
    } else {
        None
    };
    let class_gt = if h.flags & FLAG_CLASS_GT != 0 {
        Some(read_binary(r, h.n_classes, h.n_low)?)
    } else {
        None
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(format_err)? != 0 {
        return Err(CfcbmError::Format(
            "trailing bytes after last section".into(),
        ));
    }

    check_norms("image embedding", &mut image)?;
    check_norms("patch embedding", &mut patches)?;
    check_norms("high concept embedding", &mut high)?;
    check_norms("low concept embedding", &mut low)?;

    let ds = EmbeddingDataset {
        n_classes: h.n_classes,
        image_embeddings: image,
        patch_embeddings: patches,
        n_patches: p,
        labels: labels.into_iter().map(|l| l as usize).collect(),
        concepts: ConceptEmbeddings { high, low },
        example_ground_truth: example_gt,
        class_ground_truth: class_gt,
    };
    ds.check_shapes()?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CfcbmError::io(path, e))?;
    read_dataset(&mut BufReader::new(file))
}

pub fn load_header(path: impl AsRef<Path>) -> Result<DatasetHeader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CfcbmError::io(path, e))?;
    read_header(&mut BufReader::new(file))
}

fn write_f32s<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    for &x in m.data() {
        w.write_f32::<LittleEndian>(x as f32)?;
    }
    Ok(())
}

pub fn write_dataset_to<W: Write>(w: &mut W, ds: &EmbeddingDataset) -> Result<()> {
    ds.check_shapes()?;
    let h = ds.header();
    let io = |e| CfcbmError::Format(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(h.flags).map_err(io)?;
    for v in [
        h.n_examples,
        h.n_patches,
        h.embed_dim,
        h.n_classes,
        h.n_high,
        h.n_low,
    ] {
        w.write_u64::<LittleEndian>(v as u64).map_err(io)?;
    }
    for &l in &ds.labels {
        w.write_u32::<LittleEndian>(l as u32).map_err(io)?;
    }
    write_f32s(w, &ds.image_embeddings).map_err(io)?;
    write_f32s(w, &ds.patch_embeddings).map_err(io)?;
    write_f32s(w, &ds.concepts.high).map_err(io)?;
    write_f32s(w, &ds.concepts.low).map_err(io)?;
    if let Some(gt) = &ds.example_ground_truth {
        w.write_all(&gt.data).map_err(io)?;
    }
    if let Some(gt) = &ds.class_ground_truth {
        w.write_all(&gt.data).map_err(io)?;
    }
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &EmbeddingDataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CfcbmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset_to(&mut w, ds)?;
    w.flush().map_err(|e| CfcbmError::io(path, e))
}
