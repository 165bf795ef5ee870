//! Binary PPM (P6) and PGM (P5) readers/writers, maxval 255.

use super::{RgbImage, SlideError};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

fn read_header_token(r: &mut impl BufRead) -> Result<String, SlideError> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(SlideError::CorruptTile("unexpected end of header".into()));
            }
            return Ok(token);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_whitespace() {
            if !token.is_empty() {
                return Ok(token);
            }
            continue;
        }
        token.push(c);
    }
}

fn read_netpbm(
    path: &Path,
    magic: &str,
    channels: usize,
) -> Result<(usize, usize, Vec<u8>), SlideError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let name = path.display().to_string();
    if read_header_token(&mut r)? != magic {
        return Err(SlideError::CorruptTile(format!("{name}: expected {magic}")));
    }
    let parse = |t: String| {
        t.parse::<usize>()
            .map_err(|_| SlideError::CorruptTile(format!("{name}: bad header number {t}")))
    };
    let width = parse(read_header_token(&mut r)?)?;
    let height = parse(read_header_token(&mut r)?)?;
    let maxval = parse(read_header_token(&mut r)?)?;
    if maxval != 255 {
        return Err(SlideError::CorruptTile(format!("{name}: maxval {maxval} unsupported")));
    }
    let mut data = vec![0u8; width * height * channels];
    r.read_exact(&mut data)
        .map_err(|_| SlideError::CorruptTile(format!("{name}: truncated pixel data")))?;
    Ok((width, height, data))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage, SlideError> {
    let (width, height, data) = read_netpbm(path.as_ref(), "P6", 3)?;
    Ok(RgbImage { width, height, data })
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<(), SlideError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    w.write_all(&image.data)?;
    Ok(())
}

/// Grayscale P5; returns (width, height, bytes).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>), SlideError> {
    read_netpbm(path.as_ref(), "P5", 1)
}

pub fn write_pgm(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    data: &[u8],
) -> Result<(), SlideError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(data)?;
    Ok(())
}
