//! IDX image/label files (big-endian, magic `0x00000803` for images and
//! `0x00000801` for labels). Pixels are scaled to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::DenseMatrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    /// One flattened image per row.
    pub images: DenseMatrix,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile {
            path: what.into(),
            reason: format!("header ends before byte {}", offset + 4),
        })
}

/// Parses an image file into `(pixels, height, width)`.
pub fn parse_images(bytes: &[u8], name: &str) -> Result<(DenseMatrix, usize, usize)> {
    let magic = be_u32(bytes, 0, name)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, name)? as usize;
    let height = be_u32(bytes, 8, name)? as usize;
    let width = be_u32(bytes, 12, name)? as usize;
    let pixels = height * width;
    let needed = 16 + count * pixels;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: name.into(),
            reason: format!("expected {needed} bytes, found {}", bytes.len()),
        });
    }
    if count == 0 || pixels == 0 {
        return Err(Error::Empty("image file"));
    }
    let data = bytes[16..needed]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((DenseMatrix::new(count, pixels, data)?, height, width))
}

pub fn parse_labels(bytes: &[u8], name: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, name)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, name)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: name.into(),
            reason: format!("expected {needed} bytes, found {}", bytes.len()),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx_images(images: &Path, labels: &Path) -> Result<IdxImages> {
    let img_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (images_m, height, width) = parse_images(&img_bytes, &images.display().to_string())?;
    let labels_v = parse_labels(&lbl_bytes, &labels.display().to_string())?;
    if images_m.rows() != labels_v.len() {
        return Err(Error::CountMismatch {
            images: images_m.rows(),
            labels: labels_v.len(),
        });
    }
    Ok(IdxImages {
        images: images_m,
        labels: labels_v,
        height,
        width,
    })
}

/// Encodes images and labels in IDX format (used for fixtures).
pub fn encode_idx(
    pixels: &[u8],
    count: usize,
    height: usize,
    width: usize,
    labels: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, height as u32, width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    (img, lbl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fixture() {
        let (img, lbl) = encode_idx(&[0, 255, 51, 102, 0, 0, 0, 255], 2, 2, 2, &[3, 7]);
        let (m, h, w) = parse_images(&img, "img").unwrap();
        assert_eq!((m.rows(), m.cols(), h, w), (2, 4, 2, 2));
        assert_eq!(m.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_labels(&lbl, "lbl").unwrap(), vec![3, 7]);
    }

    #[test]
    fn rejects_bad_input() {
        let (mut img, lbl) = encode_idx(&[0; 8], 2, 2, 2, &[1, 2]);
        assert!(matches!(
            parse_labels(&img, "x"),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            parse_images(&lbl, "x"),
            Err(Error::BadMagic { .. })
        ));
        img.pop();
        assert!(matches!(
            parse_images(&img, "x"),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(
            parse_images(&img[..10], "x"),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn load_checks_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = encode_idx(&[0; 8], 2, 2, 2, &[1, 2, 3]);
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        assert!(matches!(
            load_idx_images(&ip, &lp),
            Err(Error::CountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }
}
