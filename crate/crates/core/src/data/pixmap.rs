//! Image files: binary PPM (`P6`, maxval 255) is the native format; PNG is
//! read through the `png` crate.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::encoders::RgbImage;
use crate::error::{Error, Result};

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let err = |msg: &str| Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(err("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad PPM header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(err("only 8-bit PPM (maxval 255) is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(err("truncated PPM raster"));
    }
    RgbImage::new(w, h, bytes[pos..pos + need].to_vec()).map_err(|e| err(&e.to_string()))
}

fn decode_png(path: &Path) -> Result<RgbImage> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(err("indexed PNG was not expanded".into())),
    };
    RgbImage::new(w, h, rgb).map_err(|e| err(e.to_string()))
}

/// Reads a `.ppm` or `.png` file, chosen by extension.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => decode_png(path),
        _ => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_ppm(&bytes, path)
        }
    }
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comment() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(decode_ppm(&bytes, Path::new("x.ppm")).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        commented.extend_from_slice(img.pixels());
        assert_eq!(decode_ppm(&commented, Path::new("x.ppm")).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_truncation() {
        let img = RgbImage::filled(3, 3, [9, 9, 9]).unwrap();
        let bytes = encode_ppm(&img);
        assert!(decode_ppm(&bytes[..bytes.len() - 1], Path::new("x.ppm")).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n", Path::new("x.ppm")).is_err());
    }

    #[test]
    fn png_rgb_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let pixels = vec![10u8, 20, 30, 40, 50, 60];
        {
            let f = File::create(&path).unwrap();
            let mut enc = png::Encoder::new(f, 2, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&pixels).unwrap();
        }
        let img = read_image(&path).unwrap();
        assert_eq!(img.pixels(), &pixels[..]);
    }
}
