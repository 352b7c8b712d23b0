//! File formats shared by every module: numeric CSV matrices/vectors
//! (row per line, comma separated, no header) and PGM images (P2/P5).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::transforms::ImageGrid;

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Read a dense matrix from CSV. Every line is one row; all rows must
/// have the same number of fields.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(path, format!("line {}: bad number {:?}", lineno + 1, field))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    format!(
                        "line {}: expected {} fields, got {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    ),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, "empty file"));
    }
    let nrows = rows.len();
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Read a vector from CSV. Accepts one value per line (the canonical
/// form) or a single comma-separated line.
pub fn read_vector_csv(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let m = read_matrix_csv(&path)?;
    if m.ncols() == 1 {
        Ok(DVector::from_column_slice(m.column(0).as_slice()))
    } else if m.nrows() == 1 {
        Ok(DVector::from_row_slice(
            &m.row(0).iter().copied().collect::<Vec<_>>(),
        ))
    } else {
        Err(parse_err(
            path.as_ref(),
            format!(
                "expected a vector, got a {}x{} matrix",
                m.nrows(),
                m.ncols()
            ),
        ))
    }
}

/// Write a matrix as CSV, one row per line. Values use Rust's shortest
/// round-trip float formatting, so read-back is exact.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a vector as a single-column CSV.
pub fn write_vector_csv(path: impl AsRef<Path>, v: &DVector<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..v.len() {
        out.push_str(&format!("{}\n", v[i]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a PGM image, either ASCII (P2) or binary (P5). Maxval up to
/// 65535 is accepted; two-byte samples are big-endian per the format.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let data = fs::read(path)?;
    let mut pos = 0usize;

    // Header tokens are whitespace-separated; '#' starts a comment.
    let next_token = |data: &[u8], pos: &mut usize| -> Result<String> {
        loop {
            while *pos < data.len() && data[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < data.len() && data[*pos] == b'#' {
                while *pos < data.len() && data[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(parse_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
    };

    let magic = next_token(&data, &mut pos)?;
    let width: usize = next_token(&data, &mut pos)?
        .parse()
        .map_err(|_| parse_err(path, "bad width"))?;
    let height: usize = next_token(&data, &mut pos)?
        .parse()
        .map_err(|_| parse_err(path, "bad height"))?;
    let maxval: u32 = next_token(&data, &mut pos)?
        .parse()
        .map_err(|_| parse_err(path, "bad maxval"))?;
    if width == 0 || height == 0 {
        return Err(parse_err(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}")));
    }

    let n = width * height;
    let mut pixels = Vec::with_capacity(n);
    match magic.as_str() {
        "P2" => {
            for _ in 0..n {
                let v: f64 = next_token(&data, &mut pos)?
                    .parse()
                    .map_err(|_| parse_err(path, "bad pixel value"))?;
                pixels.push(v);
            }
        }
        "P5" => {
            // Exactly one whitespace byte separates the header from raster data.
            pos += 1;
            if maxval < 256 {
                if data.len() < pos + n {
                    return Err(parse_err(path, "truncated raster"));
                }
                pixels.extend(data[pos..pos + n].iter().map(|&b| b as f64));
            } else {
                if data.len() < pos + 2 * n {
                    return Err(parse_err(path, "truncated raster"));
                }
                for k in 0..n {
                    let hi = data[pos + 2 * k] as u16;
                    let lo = data[pos + 2 * k + 1] as u16;
                    pixels.push(((hi << 8) | lo) as f64);
                }
            }
        }
        other => return Err(parse_err(path, format!("not a PGM file (magic {other:?})"))),
    }

    let grid = DMatrix::from_fn(height, width, |i, j| pixels[i * width + j]);
    ImageGrid::new(grid, maxval as f64)
}

/// Write an image as binary PGM (P5) with maxval 255. Pixels are
/// clamped to `[0, 255]` and rounded.
pub fn write_pgm(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    let scale = 255.0 / img.peak();
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{} {}\n255\n", img.width(), img.height())?;
    let mut raster = Vec::with_capacity(img.height() * img.width());
    for i in 0..img.height() {
        for j in 0..img.width() {
            let v = (img.pixels()[(i, j)] * scale).round().clamp(0.0, 255.0);
            raster.push(v as u8);
        }
    }
    file.write_all(&raster)?;
    Ok(())
}

/// Write an image as ASCII PGM (P2) with maxval 255.
pub fn write_pgm_ascii(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    let scale = 255.0 / img.peak();
    let mut out = format!("P2\n{} {}\n255\n", img.width(), img.height());
    for i in 0..img.height() {
        let row: Vec<String> = (0..img.width())
            .map(|j| {
                let v = (img.pixels()[(i, j)] * scale).round().clamp(0.0, 255.0);
                format!("{}", v as u8)
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
