//! File formats: feature CSV, pair/identification protocols, IDX images,
//! checkpoints and evaluation reports.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod features;
pub mod idx;
pub mod protocol;
pub mod report;

pub use checkpoint::{read_head, read_model, write_head, write_model};
pub use features::{load_feature_csv, write_feature_csv, FeatureDataset, FeatureRecord};
pub use idx::{load_idx_images, IdxImages};
pub use protocol::{load_id_list, load_pair_protocol, write_id_list, write_pair_protocol};

/// Formats a float with at most 9 significant digits, trimming trailing
/// zeros. Exact for values that were themselves parsed from such text.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    }
}

/// Writes via a temporary file in the same directory followed by a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
