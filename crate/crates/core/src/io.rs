//! Binary containers and dataset ingestion.
//!
//! * IDX (big-endian, the MNIST container) for image/label ingestion;
//!   gzipped files are decompressed transparently (byte offsets in errors
//!   then refer to the decompressed stream).
//! * `ASKM`/`ASKL` little-endian matrix and label containers.
//! * `ASKE` model container (f32 weights on disk, widened to f64 on load).
//! * `ASKI` index container (per-class f32 feature blocks plus row ids).

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knn::{KnnIndex, Metric};
use crate::model::{Encoder, Layer, LayerKind, SoftmaxHead};

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.offset(),
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_le(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

// ---------------------------------------------------------------- IDX

/// Loads a paired IDX image/label file set, scaling pixels to `[0,1]` and
/// flattening images row-major.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let img_bytes = read_maybe_gz(images)?;
    let lab_bytes = read_maybe_gz(labels)?;

    let mut r = Reader::new(&img_bytes);
    let magic = r.u32_be("image magic")?;
    if magic >> 8 != 0x08 || magic & 0xff != 3 {
        return Err(Error::parse(
            0,
            format!("bad IDX image magic 0x{magic:08x} (expected type u8, 3 dims)"),
        ));
    }
    let n = r.u32_be("image count")? as usize;
    let rows = r.u32_be("image rows")? as usize;
    let cols = r.u32_be("image cols")? as usize;
    let dim = rows * cols;
    if n == 0 || dim == 0 {
        return Err(Error::parse(4, "empty image container".to_string()));
    }
    let payload = r.take(n * dim, "image payload")?;
    if !r.done() {
        return Err(Error::parse(r.offset(), "trailing bytes after image payload".to_string()));
    }

    let mut lr = Reader::new(&lab_bytes);
    let lmagic = lr.u32_be("label magic")?;
    if lmagic >> 8 != 0x08 || lmagic & 0xff != 1 {
        return Err(Error::parse(
            0,
            format!("bad IDX label magic 0x{lmagic:08x} (expected type u8, 1 dim)"),
        ));
    }
    let ln = lr.u32_be("label count")? as usize;
    if ln != n {
        return Err(Error::parse(
            4,
            format!("label count {ln} does not match image count {n}"),
        ));
    }
    let label_bytes = lr.take(n, "label payload")?;
    if !lr.done() {
        return Err(Error::parse(lr.offset(), "trailing bytes after label payload".to_string()));
    }

    let features: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    LabeledDataset::new(features, dim, labels, class_count)
}

// ---------------------------------------------------------------- ASKM / ASKL

/// Dense matrix backed by the `ASKM` container (f32 on disk).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::rejected("matrix must have positive shape"));
        }
        if values.len() != rows * cols {
            return Err(Error::rejected(format!(
                "matrix payload holds {} values, expected {}",
                values.len(),
                rows * cols
            )));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = Vec::with_capacity(13 + m.values.len() * 4);
    out.extend_from_slice(b"ASKM");
    out.push(1u8);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for &v in &m.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4, "matrix magic")? != b"ASKM" {
        return Err(Error::parse(0, "bad matrix magic, expected ASKM".to_string()));
    }
    let version = r.u8("matrix version")?;
    if version != 1 {
        return Err(Error::parse(4, format!("unsupported matrix version {version}")));
    }
    let rows = r.u32_le("row count")? as usize;
    let cols = r.u32_le("col count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::parse(5, "matrix must have positive shape".to_string()));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(r.f32_le("matrix payload")? as f64);
    }
    if !r.done() {
        return Err(Error::parse(r.offset(), "trailing bytes after matrix payload".to_string()));
    }
    Matrix::new(rows, cols, values)
}

pub fn save_labels(path: &Path, labels: &[usize], class_count: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::rejected("label container must not be empty"));
    }
    if class_count > u16::MAX as usize || labels.iter().any(|&y| y >= class_count) {
        return Err(Error::rejected("labels out of range for the class count"));
    }
    let mut out = Vec::with_capacity(10 + labels.len() * 2);
    out.extend_from_slice(b"ASKL");
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(class_count as u16).to_le_bytes());
    for &y in labels {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<(Vec<usize>, usize)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4, "label magic")? != b"ASKL" {
        return Err(Error::parse(0, "bad label magic, expected ASKL".to_string()));
    }
    let n = r.u32_le("label count")? as usize;
    let class_count = r.u16_le("class count")? as usize;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u16_le("label payload")? as usize);
    }
    if !r.done() {
        return Err(Error::parse(r.offset(), "trailing bytes after label payload".to_string()));
    }
    if labels.iter().any(|&y| y >= class_count) {
        return Err(Error::parse(8, "label exceeds class count".to_string()));
    }
    Ok((labels, class_count))
}

// ---------------------------------------------------------------- ASKE

fn kind_code(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Identity => 0,
        LayerKind::Affine => 1,
        LayerKind::AffineRelu => 2,
    }
}

/// Saves an encoder (weights narrowed to f32) plus an optional head block.
pub fn save_model(path: &Path, encoder: &Encoder, head: Option<&SoftmaxHead>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ASKE");
    out.push(1u8);
    out.extend_from_slice(&(encoder.layers().len() as u32).to_le_bytes());
    for layer in encoder.layers() {
        out.push(kind_code(layer.kind));
        out.extend_from_slice(&(layer.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(layer.d_out as u32).to_le_bytes());
        for &w in &layer.weight {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        for &b in &layer.bias {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    if let Some(h) = head {
        out.extend_from_slice(b"HEAD");
        out.extend_from_slice(&(h.classes as u32).to_le_bytes());
        out.extend_from_slice(&(h.d_in as u32).to_le_bytes());
        for &w in &h.weight {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        for &b in &h.bias {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a model saved by [`save_model`]. Weights widen from f32 to f64; the
/// returned encoder taps its last layer (re-tap with
/// [`Encoder::with_taps`] as needed).
pub fn load_model(path: &Path) -> Result<(Encoder, Option<SoftmaxHead>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4, "model magic")? != b"ASKE" {
        return Err(Error::parse(0, "bad model magic, expected ASKE".to_string()));
    }
    let version = r.u8("model version")?;
    if version != 1 {
        return Err(Error::parse(4, format!("unsupported model version {version}")));
    }
    let layer_count = r.u32_le("layer count")? as usize;
    if layer_count == 0 {
        return Err(Error::parse(5, "model has no layers".to_string()));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let kind = r.u8("layer kind")?;
        let d_in = r.u32_le("layer d_in")? as usize;
        let d_out = r.u32_le("layer d_out")? as usize;
        match kind {
            0 => {
                if d_in != d_out {
                    return Err(Error::parse(
                        r.offset(),
                        format!("identity layer {li} must be square, got {d_in}x{d_out}"),
                    ));
                }
                layers.push(Layer::identity(d_in));
            }
            1 | 2 => {
                let mut weight = Vec::with_capacity(d_in * d_out);
                for _ in 0..d_in * d_out {
                    weight.push(r.f32_le("layer weights")? as f64);
                }
                let mut bias = Vec::with_capacity(d_out);
                for _ in 0..d_out {
                    bias.push(r.f32_le("layer bias")? as f64);
                }
                layers.push(Layer::affine(weight, bias, d_in, d_out, kind == 2)?);
            }
            k => {
                return Err(Error::parse(r.offset() - 9, format!("unknown layer kind {k}")));
            }
        }
    }
    let taps = vec![layer_count - 1];
    let encoder = Encoder::new(layers, taps)
        .map_err(|e| Error::parse(r.offset(), format!("inconsistent model: {e}")))?;

    let head = if r.done() {
        None
    } else {
        let at = r.offset();
        if r.take(4, "head magic")? != b"HEAD" {
            return Err(Error::parse(at, "expected HEAD block or end of file".to_string()));
        }
        let classes = r.u32_le("head classes")? as usize;
        let d_in = r.u32_le("head d_in")? as usize;
        let mut weight = Vec::with_capacity(classes * d_in);
        for _ in 0..classes * d_in {
            weight.push(r.f32_le("head weights")? as f64);
        }
        let mut bias = Vec::with_capacity(classes);
        for _ in 0..classes {
            bias.push(r.f32_le("head bias")? as f64);
        }
        Some(SoftmaxHead::new(weight, bias, classes, d_in)?)
    };
    if !r.done() {
        return Err(Error::parse(r.offset(), "trailing bytes after model".to_string()));
    }
    Ok((encoder, head))
}

// ---------------------------------------------------------------- ASKI

fn metric_code(m: Metric) -> u8 {
    match m {
        Metric::Cosine => 0,
        Metric::NegL2 => 1,
    }
}

/// Persists an index as per-class f32 feature blocks plus original row ids.
pub fn save_index(path: &Path, index: &KnnIndex) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ASKI");
    out.push(1u8);
    out.push(metric_code(index.metric()));
    out.extend_from_slice(&(index.layer() as u32).to_le_bytes());
    out.extend_from_slice(&(index.class_count() as u32).to_le_bytes());
    out.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    for (rows, feats) in index.to_parts() {
        out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
        for &f in &feats {
            out.extend_from_slice(&(f as f32).to_le_bytes());
        }
        for &row in &rows {
            out.extend_from_slice(&row.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads an index saved by [`save_index`], rebuilding the search trees.
pub fn load_index(path: &Path) -> Result<KnnIndex> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(4, "index magic")? != b"ASKI" {
        return Err(Error::parse(0, "bad index magic, expected ASKI".to_string()));
    }
    let version = r.u8("index version")?;
    if version != 1 {
        return Err(Error::parse(4, format!("unsupported index version {version}")));
    }
    let metric = match r.u8("metric")? {
        0 => Metric::Cosine,
        1 => Metric::NegL2,
        m => return Err(Error::parse(5, format!("unknown metric code {m}"))),
    };
    let layer = r.u32_le("layer")? as usize;
    let class_count = r.u32_le("class count")? as usize;
    let dim = r.u32_le("dim")? as usize;
    let mut parts = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let count = r.u32_le("class point count")? as usize;
        let mut feats = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            feats.push(r.f32_le("class features")? as f64);
        }
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            rows.push(r.u32_le("class row ids")?);
        }
        parts.push((rows, feats));
    }
    if !r.done() {
        return Err(Error::parse(r.offset(), "trailing bytes after index".to_string()));
    }
    KnnIndex::from_parts(metric, layer, dim, parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::build_index;
    use crate::rng::SeedSplitter;
    use std::io::Write;

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(bytes).unwrap();
        enc.finish().unwrap()
    }

    fn idx_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
        let mut out = vec![0, 0, 0x08, 3];
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&rows.to_be_bytes());
        out.extend_from_slice(&cols.to_be_bytes());
        for img in images {
            out.extend_from_slice(img);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 0x08, 1];
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn zero_image_loads_as_zero_vector() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(&[vec![0u8; 784]], 28, 28)).unwrap();
        std::fs::write(&lab, idx_labels(&[3])).unwrap();
        let data = load_idx(&img, &lab).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.dim(), 784);
        assert!(data.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crafted_three_image_file_flattens_row_major() {
        // 2x3 images with a marked pixel at (row 1, col 2) -> flat index 5
        let mut imgs = Vec::new();
        for v in [10u8, 128, 255] {
            let mut img = vec![0u8; 6];
            img[1 * 3 + 2] = v;
            imgs.push(img);
        }
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(&imgs, 2, 3)).unwrap();
        std::fs::write(&lab, idx_labels(&[0, 1, 2])).unwrap();
        let data = load_idx(&img, &lab).unwrap();
        for (i, v) in [10u8, 128, 255].iter().enumerate() {
            let row = data.row(i);
            for (j, &pix) in row.iter().enumerate() {
                let expected = if j == 5 { *v as f64 / 255.0 } else { 0.0 };
                assert!((pix - expected).abs() < 1e-12);
            }
        }
        assert_eq!(data.labels(), &[0, 1, 2]);
    }

    #[test]
    fn big_endian_dims_are_honored_and_gz_is_transparent() {
        let imgs: Vec<Vec<u8>> = (0..2).map(|i| vec![i as u8; 28 * 28]).collect();
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lab = dir.path().join("lab.gz");
        std::fs::write(&img, gz(&idx_images(&imgs, 28, 28))).unwrap();
        std::fs::write(&lab, gz(&idx_labels(&[1, 0]))).unwrap();
        let data = load_idx(&img, &lab).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.dim(), 784);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, vec![0, 0, 0x07, 3, 0, 0, 0, 0]).unwrap();
        std::fs::write(&lab, idx_labels(&[0])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Parse { .. })));

        // truncated payload
        let mut good = idx_images(&[vec![0u8; 784]], 28, 28);
        good.truncate(good.len() - 10);
        std::fs::write(&img, good).unwrap();
        match load_idx(&img, &lab) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected parse error, got {other:?}"),
        }

        // count mismatch
        std::fs::write(&img, idx_images(&[vec![0u8; 784]], 28, 28)).unwrap();
        std::fs::write(&lab, idx_labels(&[0, 1])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Parse { .. })));
    }

    #[test]
    fn matrix_roundtrip_is_bit_identical() {
        let mut rng = SeedSplitter::new(3).fork("m");
        use rand::Rng;
        let values: Vec<f64> = (0..1000 * 64).map(|_| rng.random::<f32>() as f64).collect();
        let m = Matrix::new(1000, 64, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.askm");
        let p2 = dir.path().join("b.askm");
        save_matrix(&p1, &m).unwrap();
        let loaded = load_matrix(&p1).unwrap();
        save_matrix(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(m, loaded);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        assert!(Matrix::new(0, 4, vec![]).is_err());
    }

    #[test]
    fn corrupted_matrix_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.askm");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_matrix(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn label_container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.askl");
        save_labels(&p, &[0, 3, 9, 1], 10).unwrap();
        let (labels, c) = load_labels(&p).unwrap();
        assert_eq!(labels, vec![0, 3, 9, 1]);
        assert_eq!(c, 10);
    }

    #[test]
    fn model_roundtrip_preserves_f32_weights() {
        let mut rng = SeedSplitter::new(5).fork("model");
        let enc = Encoder::mlp(&[4, 6, 3], &[0, 1], &mut rng).unwrap();
        let head = SoftmaxHead::init(5, 3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.aske");
        save_model(&p, &enc, Some(&head)).unwrap();
        let (enc2, head2) = load_model(&p).unwrap();
        let head2 = head2.unwrap();
        assert_eq!(enc2.layers().len(), 2);
        for (a, b) in enc.params_vec().iter().zip(enc2.params_vec()) {
            assert_eq!(*a as f32, b as f32);
            assert_eq!(b, (*a as f32) as f64);
        }
        assert_eq!(head.classes, head2.classes);
        // identity encoder persists with no parameter payload
        let id = Encoder::identity(7);
        save_model(&p, &id, None).unwrap();
        let (id2, none) = load_model(&p).unwrap();
        assert!(none.is_none());
        assert_eq!(id2.input_dim(), 7);
        assert_eq!(id2.param_count(), 0);
    }

    #[test]
    fn index_roundtrip_preserves_queries() {
        let mut rng = SeedSplitter::new(6).fork("data");
        // f32-representable coordinates so the rebuild is exact
        let rows: Vec<Vec<f64>> = (0..90)
            .map(|_| {
                use rand::Rng;
                (0..4)
                    .map(|_| (rng.random::<f32>() as f64 * 16.0).round() / 16.0)
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..90).map(|i| i % 3).collect();
        let data = LabeledDataset::from_rows(rows, labels, 3).unwrap();
        let enc = Encoder::identity(4);
        let idx = build_index(&data, &enc, 0, Metric::NegL2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.aski");
        save_index(&p, &idx).unwrap();
        let idx2 = load_index(&p).unwrap();
        assert_eq!(idx2.metric(), Metric::NegL2);
        assert_eq!(idx2.class_count(), 3);
        for qi in 0..30 {
            let q = data.row(qi);
            for c in 0..3 {
                let a: Vec<u32> = idx.query_class(c, q, 5).unwrap().iter().map(|n| n.row).collect();
                let b: Vec<u32> = idx2.query_class(c, q, 5).unwrap().iter().map(|n| n.row).collect();
                assert_eq!(a, b);
            }
        }
    }
}
