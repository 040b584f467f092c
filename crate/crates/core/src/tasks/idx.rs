//! IDX file reader (the MNIST distribution format).
//!
//! Layout: big-endian `u32` magic (`0x00000803` for rank-3 `u8` images,
//! `0x00000801` for rank-1 `u8` labels), one big-endian `u32` per dimension,
//! then the unsigned-byte payload in row-major order.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Idx {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse(path: &Path, bytes: Vec<u8>, magic: u32) -> Result<Idx> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::UnexpectedEof(path.to_path_buf()))
    };
    if bytes.len() < 4 {
        return Err(Error::NotIdx(path.to_path_buf()));
    }
    if word(0)? != magic {
        return Err(Error::NotIdx(path.to_path_buf()));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (1..=rank)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 * (rank + 1);
    let len: usize = dims.iter().product();
    if bytes.len() < header + len {
        return Err(Error::UnexpectedEof(path.to_path_buf()));
    }
    let mut payload = bytes;
    payload.drain(..header);
    payload.truncate(len);
    Ok(Idx { dims, payload })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an image file into a `[count × rows·cols]` matrix scaled to `[0, 1]`.
pub fn read_images(path: &Path) -> Result<Array2<f64>> {
    let idx = parse(path, read(path)?, IMAGES_MAGIC)?;
    let (count, features) = (idx.dims[0], idx.dims[1] * idx.dims[2]);
    let data = idx.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Array2::from_shape_vec((count, features), data).expect("payload length checked"))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let idx = parse(path, read(path)?, LABELS_MAGIC)?;
    Ok(idx.payload.into_iter().map(usize::from).collect())
}

/// Loads a matching image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Array2<f64>, Vec<usize>)> {
    let images = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if images.nrows() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.nrows(),
            labels: labels.len(),
        });
    }
    Ok((images, labels))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn write_images(path: &Path, images: &[[u8; 4]]) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(&IMAGES_MAGIC.to_be_bytes()).unwrap();
        for d in [images.len() as u32, 2, 2] {
            f.write_all(&d.to_be_bytes()).unwrap();
        }
        for img in images {
            f.write_all(img).unwrap();
        }
    }

    pub(crate) fn write_labels(path: &Path, labels: &[u8]) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn reads_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_images(&ip, &[[0, 255, 51, 0], [1, 2, 3, 4]]);
        write_labels(&lp, &[7, 3]);
        let (images, labels) = load_idx(&ip, &lp).unwrap();
        assert_eq!(images.dim(), (2, 4));
        assert_eq!(images[[0, 1]], 1.0);
        assert_eq!(images[[0, 2]], 0.2);
        assert_eq!(labels, vec![7, 3]);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_images(&ip, &[[0; 4]]);
        write_labels(&lp, &[1]);
        // swapped files
        assert!(matches!(read_images(&lp), Err(Error::NotIdx(_))));
        assert!(matches!(read_labels(&ip), Err(Error::NotIdx(_))));
        std::fs::write(&ip, [0u8, 0, 8]).unwrap();
        assert!(matches!(read_images(&ip), Err(Error::NotIdx(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        write_images(&ip, &[[0; 4], [1; 4]]);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_images(&ip), Err(Error::UnexpectedEof(_))));
        std::fs::write(&ip, &bytes[..10]).unwrap();
        assert!(matches!(read_images(&ip), Err(Error::UnexpectedEof(_))));
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_images(&ip, &[[0; 4], [1; 4]]);
        write_labels(&lp, &[1, 2, 3]);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }
}
