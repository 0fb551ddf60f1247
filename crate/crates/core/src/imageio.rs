//! Portable pixmap I/O: binary PPM (P6) images, binary PGM (P5) masks, ASCII
//! PGM (P2) label maps for eyeballing, and a raw little-endian score dump.

use crate::error::{CtxError, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// [3,H,W] image in [0,1] -> binary PPM.
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(CtxError::ShapeMismatch(format!(
            "write_ppm wants [3,H,W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    let mut buf = Vec::with_capacity(3 * h * w);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = image.at3(ch, r, c).to_f64_val().clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut f = BufReader::new(File::open(path)?);
    let (magic, w, h, maxval) = read_pnm_header(&mut f)?;
    if magic != "P6" {
        return Err(CtxError::InvalidArgument(format!("{}: expected P6, got {magic}", path.display())));
    }
    let mut buf = vec![0u8; 3 * h * w];
    f.read_exact(&mut buf)?;
    let mut data = vec![T::zero(); 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                data[(ch * h + r) * w + c] =
                    T::from_f64(buf[(r * w + c) * 3 + ch] as f64 / maxval as f64);
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Label map -> binary PGM; 255 stays 255 (ignore).
pub fn write_pgm(path: &Path, mask: &LabelMap) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", mask.w, mask.h)?;
    f.write_all(&mask.data)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let mut f = BufReader::new(File::open(path)?);
    let (magic, w, h, _) = read_pnm_header(&mut f)?;
    if magic != "P5" {
        return Err(CtxError::InvalidArgument(format!("{}: expected P5, got {magic}", path.display())));
    }
    let mut data = vec![0u8; h * w];
    f.read_exact(&mut data)?;
    Ok(LabelMap { h, w, data })
}

/// ASCII PGM (P2) for human-readable label maps.
pub fn write_pgm_ascii(path: &Path, mask: &LabelMap) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P2\n{} {}\n255\n", mask.w, mask.h)?;
    for r in 0..mask.h {
        let row: Vec<String> = (0..mask.w).map(|c| mask.at(r, c).to_string()).collect();
        writeln!(f, "{}", row.join(" "))?;
    }
    Ok(())
}

fn read_pnm_header<R: BufRead>(r: &mut R) -> Result<(String, usize, usize, u32)> {
    let mut fields = Vec::new();
    let mut magic = String::new();
    while fields.len() < 3 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(CtxError::InvalidArgument("truncated PNM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            if magic.is_empty() {
                magic = tok.to_string();
            } else {
                fields.push(
                    tok.parse::<usize>()
                        .map_err(|_| CtxError::InvalidArgument(format!("bad PNM field {tok}")))?,
                );
            }
        }
    }
    Ok((magic, fields[0], fields[1], fields[2] as u32))
}

/// Per-class score maps [K,H,W]: ASCII "K H W" line, then little-endian f32s.
pub fn write_scores<T: Scalar>(path: &Path, scores: &Tensor<T>) -> Result<()> {
    if scores.shape().len() != 3 {
        return Err(CtxError::ShapeMismatch(format!(
            "write_scores wants [K,H,W], got {:?}",
            scores.shape()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{} {} {}", scores.shape()[0], scores.shape()[1], scores.shape()[2])?;
    for &v in scores.data() {
        f.write_all(&(v.to_f64_val() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_scores<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut line = String::new();
    f.read_line(&mut line)?;
    let dims: Vec<usize> = line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CtxError::InvalidArgument(format!("bad score dim {t}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(CtxError::InvalidArgument("score header needs K H W".into()));
    }
    let n = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        f.read_exact(&mut buf)?;
        data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
    }
    Tensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ppm_roundtrip_quantized() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = Tensor::<f32>::new(
            vec![3, 2, 2],
            (0..12).map(|i| i as f32 / 255.0 * 20.0).collect(),
        )
        .unwrap();
        write_ppm(&p, &img).unwrap();
        let back: Tensor<f32> = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm_roundtrip_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mask = LabelMap::new(3, 2, vec![0, 1, 4, 255, 2, 3]);
        write_pgm(&p, &mask).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), mask);
    }

    #[test]
    fn scores_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let t = Tensor::<f32>::new(vec![2, 2, 3], (0..12).map(|i| (i as f32).sin()).collect()).unwrap();
        write_scores(&p, &t).unwrap();
        let back: Tensor<f32> = read_scores(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn header_comments_skipped() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# a comment\n2 1\n255\n\x01\x02").unwrap();
        let m = read_pgm(&p).unwrap();
        assert_eq!((m.h, m.w), (1, 2));
        assert_eq!(m.data, vec![1, 2]);
    }
}
