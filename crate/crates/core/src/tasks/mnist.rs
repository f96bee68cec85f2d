use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images scaled to `[0, 1]`, one flattened image per row.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` examples.
    pub fn truncate(mut self, n: usize) -> Self {
        if n < self.len() {
            let idx: Vec<usize> = (0..n).collect();
            self.images = self.images.select_rows(&idx);
            self.labels.truncate(n);
        }
        self
    }
}

/// Dataset root: `$DNI_DATA_DIR/mnist` if set, otherwise `data/mnist` under
/// the workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("DNI_DATA_DIR") {
        Some(d) => PathBuf::from(d).join("mnist"),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX3 image file into `[n × rows·cols]`, pixels scaled to `[0, 1]`.
pub fn load_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let pixels = be_u32(bytes, 8)? as usize * be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * pixels {
        return Err(Error::Format(format!(
            "image file holds {} bytes, header promises {}",
            body.len(),
            n * pixels
        )));
    }
    Tensor::new(&[n, pixels], body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("label file holds {} labels, header promises {n}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads one split from a directory of standard IDX files, raw or gzipped.
pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<MnistDataset> {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    let images = load_idx_images(&read_maybe_gz(&find(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
    let labels = load_idx_labels(&read_maybe_gz(&find(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
    if images.rows() != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    Ok(MnistDataset { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(px);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn two_image_fixture_round_trips() {
        let px = [0u8, 255, 51, 102, 0, 0, 255, 255];
        let t = load_idx_images(&idx_images(2, 2, 2, &px)).unwrap();
        assert_eq!(t.shape(), &[2, 4]);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(load_idx_labels(&idx_labels(&[7, 3])).unwrap(), vec![7, 3]);
    }

    #[test]
    fn bad_magic_and_truncation_fail() {
        let mut bytes = idx_images(1, 2, 2, &[1, 2, 3, 4]);
        assert!(load_idx_images(&bytes[..18]).is_err());
        bytes[3] = 0x01;
        assert!(matches!(load_idx_images(&bytes), Err(Error::Format(_))));
        assert!(load_idx_labels(&[0, 0]).is_err());
    }

    #[test]
    fn directory_load_with_gzip_and_count_check() {
        let dir = tempfile::tempdir().unwrap();
        let gz = |name: &str, bytes: &[u8]| {
            let mut e = GzEncoder::new(Vec::new(), flate2::Compression::fast());
            e.write_all(bytes).unwrap();
            std::fs::write(dir.path().join(name), e.finish().unwrap()).unwrap();
        };
        gz("t10k-images-idx3-ubyte.gz", &idx_images(2, 1, 2, &[0, 255, 255, 0]));
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[1, 2])).unwrap();
        let d = load_mnist(dir.path(), MnistSplit::Test).unwrap();
        assert_eq!(d.labels, vec![1, 2]);
        assert_eq!(d.images.row(1), &[1.0, 0.0]);

        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[1])).unwrap();
        assert!(matches!(load_mnist(dir.path(), MnistSplit::Test), Err(Error::Format(_))));
        assert!(load_mnist(dir.path(), MnistSplit::Train).is_err());
    }
}
