//! CSV export of DCT basis grids.

use std::fs;
use std::path::{Path, PathBuf};

use gcm_core::dct::{build_basis_set, DctBasis};

use crate::CliError;

pub fn basis_csv(b: &DctBasis) -> String {
    let mut s = String::new();
    for f in 0..b.f_len {
        let row: Vec<String> = (0..b.t_len).map(|t| format!("{:?}", b.at(f, t))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Writes the `k` lowest components as `dct_<rank>_i<i>_j<j>.csv`, one
/// frequency row per line. Returns the paths in rank order.
pub fn export_dct(f_len: usize, t_len: usize, k: usize, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let set = build_basis_set(f_len, t_len, k)?;
    fs::create_dir_all(out)?;
    set.components()
        .iter()
        .enumerate()
        .map(|(rank, b)| {
            let p = out.join(format!("dct_{rank:02}_i{}_j{}.csv", b.i, b.j));
            fs::write(&p, basis_csv(b))?;
            Ok(p)
        })
        .collect()
}

/// Parses a grid written by [`export_dct`].
pub fn read_grid(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    text.lines()
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| CliError::Data(format!("bad grid value {v}: {e}"))))
                .collect()
        })
        .collect()
}
