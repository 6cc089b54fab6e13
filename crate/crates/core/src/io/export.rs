use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::refine::CorrelationMatrix;

/// Maps a correlation in `[-1, 1]` to a gray level: `-1 -> 0`, `0 -> 127`,
/// `1 -> 255`, i.e. `127.5 c + 127` rounded half up and clamped.
pub fn heatmap_pixel(c: f64) -> u8 {
    (127.5 * c + 127.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// One line per matrix row, comma separated, shortest round-trip floats.
pub fn write_correlation_csv(path: impl AsRef<Path>, c: &CorrelationMatrix) -> Result<()> {
    let mut out = String::new();
    for row in c.data().rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_correlation_csv(path: impl AsRef<Path>) -> Result<CorrelationMatrix> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Manifest {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::Manifest {
                line: lineno + 1,
                message: "ragged row".into(),
            });
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    let data =
        Array2::from_shape_vec((rows, cols), values).map_err(|_| Error::Empty { rows, cols })?;
    CorrelationMatrix::new(data)
}

/// Binary PGM (`P5`, maxval 255), one pixel per entry.
pub fn write_pgm(path: impl AsRef<Path>, c: &CorrelationMatrix) -> Result<()> {
    let (rows, cols) = c.dim();
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(c.data().iter().map(|&v| heatmap_pixel(v)));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn export_correlation(
    c: &CorrelationMatrix,
    csv_path: impl AsRef<Path>,
    pgm_path: impl AsRef<Path>,
) -> Result<()> {
    write_correlation_csv(csv_path, c)?;
    write_pgm(pgm_path, c)
}
