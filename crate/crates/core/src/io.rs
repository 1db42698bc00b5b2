//! File formats: grayscale images, the R2NF displacement-field container
//! and landmark CSV files.
//!
//! R2NF layout (little-endian): magic `R2NF`, u32 height, u32 width, then
//! `H·W` f32 u values and `H·W` f32 v values, both row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{make_grid, DisplacementField, Grid2D, Image2D};

const FIELD_MAGIC: &[u8; 4] = b"R2NF";

/// Loads an 8- or 16-bit grayscale PGM/PNG, mapped linearly to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image2D> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (values, (w, h)) = match img {
        DynamicImage::ImageLuma8(b) => {
            let dims = b.dimensions();
            (b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect::<Vec<_>>(), dims)
        }
        DynamicImage::ImageLuma16(b) => {
            let dims = b.dimensions();
            (b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(), dims)
        }
        other => {
            return Err(Error::format(
                path,
                format!("expected a grayscale image, found {:?}", other.color()),
            ))
        }
    };
    let grid = make_grid(h as usize, w as usize).map_err(|e| Error::format(path, e.to_string()))?;
    let array = Array2::from_shape_vec((h as usize, w as usize), values).expect("buffer matches dims");
    Image2D::new(grid, array)
}

/// Writes a 16-bit grayscale PNG (`.png`) or PGM (`.pgm`), clamping values
/// to `[0, 1]`.
pub fn write_image(path: &Path, image: &Image2D) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
        Some(e) if e.eq_ignore_ascii_case("pgm") => ImageFormat::Pnm,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{}: image path must end in .png or .pgm",
                path.display()
            )))
        }
    };
    let g = image.grid();
    let raw: Vec<u16> = image
        .values()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(g.width() as u32, g.height() as u32, raw).expect("buffer matches dims");
    buf.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// Writes an 8-bit RGB PNG from rows of `[r, g, b]` pixels.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    let raw: Vec<u8> = rgb.iter().flatten().copied().collect();
    let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer matches dims");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

pub fn write_field(path: &Path, field: &DisplacementField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let g = field.grid();
    let mut body = || -> std::io::Result<()> {
        w.write_all(FIELD_MAGIC)?;
        w.write_u32::<LittleEndian>(g.height() as u32)?;
        w.write_u32::<LittleEndian>(g.width() as u32)?;
        for &x in field.u().iter().chain(field.v().iter()) {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::format(path, e.to_string()))?;
    if &magic != FIELD_MAGIC {
        return Err(Error::format(path, "not an R2NF field (bad magic)"));
    }
    let h = r.read_u32::<LittleEndian>().map_err(|e| Error::format(path, e.to_string()))? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(|e| Error::format(path, e.to_string()))? as usize;
    let grid = make_grid(h, w).map_err(|e| Error::format(path, e.to_string()))?;
    let mut data = vec![0f32; 2 * h * w];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| Error::format(path, format!("truncated field data: {e}")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", rest.len())));
    }
    let to_array = |s: &[f32]| Array2::from_shape_vec((h, w), s.iter().map(|&x| x as f64).collect()).expect("sized");
    DisplacementField::new(grid, to_array(&data[..h * w]), to_array(&data[h * w..]))
}

/// Reads `x,y` rows in pixel coordinates (column, row) and converts them to
/// normalized coordinates on `grid`. A leading `x,y` header and blank lines
/// are ignored.
pub fn read_landmarks(path: &Path, grid: &Grid2D) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, grid).map_err(|reason| Error::format(path, reason))
}

pub fn parse_landmarks(text: &str, grid: &Grid2D) -> std::result::Result<Vec<(f64, f64)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.eq_ignore_ascii_case("x,y")) {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("line {}: expected two comma-separated values", n + 1));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("line {}: invalid number {s:?}", n + 1))
        };
        out.push((grid.from_col(parse(a)?), grid.from_row(parse(b)?)));
    }
    Ok(out)
}

pub fn format_landmarks(points: &[(f64, f64)], grid: &Grid2D) -> String {
    let mut s = String::from("x,y\n");
    for &(x, y) in points {
        s.push_str(&format!("{:?},{:?}\n", grid.to_col(x), grid.to_row(y)));
    }
    s
}

pub fn write_landmarks(path: &Path, points: &[(f64, f64)], grid: &Grid2D) -> Result<()> {
    std::fs::write(path, format_landmarks(points, grid)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.r2nf");
        let g = make_grid(5, 7).unwrap();
        let f = DisplacementField::new(
            g.clone(),
            Array2::from_shape_fn((5, 7), |(i, j)| 0.01 * i as f64 - 0.003 * j as f64),
            Array2::from_shape_fn((5, 7), |(i, j)| (i * j) as f64 * 1e-3),
        )
        .unwrap();
        write_field(&p, &f).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"R2NF");
        assert_eq!(bytes.len(), 12 + 2 * 35 * 4);
        let back = read_field(&p).unwrap();
        for (a, b) in back.to_tensor().data().iter().zip(f.to_tensor().data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_field(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn image_round_trip_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let g = make_grid(6, 9).unwrap();
        let img = Image2D::from_fn(g, |x, y| 0.5 + 0.25 * x - 0.2 * y);
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            let back = read_image(&p).unwrap();
            assert_eq!(back.grid().height(), 6);
            assert_eq!(back.grid().width(), 9);
            for (a, b) in back.values().iter().zip(img.values()) {
                assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
        assert!(write_image(&dir.path().join("a.jpg"), &img).is_err());
        assert!(matches!(read_image(&dir.path().join("none.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn landmarks_round_trip() {
        let g = make_grid(64, 32).unwrap();
        let pts = vec![(-1.0, 1.0), (0.25, -0.5)];
        let text = format_landmarks(&pts, &g);
        let back = parse_landmarks(&text, &g).unwrap();
        for (a, b) in back.iter().zip(&pts) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
        assert_eq!(parse_landmarks("0,0\n31,63\n", &g).unwrap(), vec![(-1.0, -1.0), (1.0, 1.0)]);
        assert!(parse_landmarks("1;2\n", &g).is_err());
        assert!(parse_landmarks("1,nan\n", &g).is_err());
    }
}
