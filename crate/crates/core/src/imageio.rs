//! Binary PPM (P6) / PGM (P5) images and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.data().iter().map(|&v| to_byte(v)));
    out
}

/// Grayscale image of `values` (row-major, `h×w`) as `round(255·v)`.
pub fn encode_pgm(h: usize, w: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    out
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    write_atomic(path, &encode_pgm(h, w, values))
}

/// Parses the `Px W H MAX` header; returns (width, height, body offset).
fn parse_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if !bytes.starts_with(magic) {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad image header".into()))?;
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {}", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("bad image header".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let (w, h, off) = parse_header(bytes, b"P6")?;
    let body = &bytes[off..];
    if body.len() != w * h * 3 {
        return Err(Error::Format(format!(
            "PPM body has {} bytes, expected {}",
            body.len(),
            w * h * 3
        )));
    }
    ImageTensor::new(h, w, body.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Returns `(h, w, values in [0, 1])`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h, off) = parse_header(bytes, b"P5")?;
    let body = &bytes[off..];
    if body.len() != w * h {
        return Err(Error::Format(format!(
            "PGM body has {} bytes, expected {}",
            body.len(),
            w * h
        )));
    }
    Ok((h, w, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_on_byte_grid() {
        let mut img = ImageTensor::filled(2, 3, [0.0, 1.0, 128.0 / 255.0]);
        img.set_pixel(1, 2, [1.0, 0.0, 0.2]);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(encode_ppm(&back), bytes);
    }

    #[test]
    fn pgm_values_are_rounded() {
        let bytes = encode_pgm(1, 3, &[0.0, 0.5, 1.0]);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
        let (h, w, v) = decode_pgm(&bytes).unwrap();
        assert_eq!((h, w), (1, 3));
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn header_comments_and_truncation() {
        let mut bytes = b"P5 # c\n2 1\n255\n".to_vec();
        bytes.extend([1, 2]);
        assert_eq!(decode_pgm(&bytes).unwrap().2.len(), 2);
        bytes.pop();
        assert!(matches!(decode_pgm(&bytes), Err(Error::Format(_))));
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
