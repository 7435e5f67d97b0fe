//! Plain CSV files of sample matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Header `dim0,dim1,...` followed by one row per sample, 17 significant digits.
pub fn samples_to_csv(samples: &Array2<f64>) -> String {
    let header: Vec<String> = (0..samples.ncols()).map(|j| format!("dim{j}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in samples.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", cells.join(",")).expect("writing to a String cannot fail");
    }
    out
}

pub fn samples_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        msg: "missing header".into(),
    })?;
    let dim = header.split(',').count();
    for (j, name) in header.split(',').enumerate() {
        if name.trim() != format!("dim{j}") {
            return Err(Error::Csv {
                line: 1,
                msg: format!("unexpected column `{name}`"),
            });
        }
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim {
            return Err(Error::Csv {
                line: i + 1,
                msg: format!("expected {dim} values, found {}", cells.len()),
            });
        }
        for c in cells {
            data.push(c.trim().parse::<f64>().map_err(|e| Error::Csv {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim), data).map_err(|e| Error::Csv {
        line: 0,
        msg: e.to_string(),
    })
}

pub fn write_samples(path: &Path, samples: &Array2<f64>) -> Result<()> {
    fs::write(path, samples_to_csv(samples))?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Array2<f64>> {
    samples_from_csv(&fs::read_to_string(path)?)
}
