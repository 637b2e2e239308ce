use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenization::ImageCrop;

/// 8-bit quantization used for heatmaps: `round(255·p)`.
pub fn quantize(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}

/// Encodes a `[h × w]` map with values in `[0, 1]` as a binary PGM.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("heatmap values must lie in [0, 1]".into()));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&p| quantize(p)));
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::write(path, pgm_bytes(map)?)?;
    Ok(())
}

/// Reads a binary 8-bit PGM back as raw byte values.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let bad = || Error::Image {
        path: path.to_path_buf(),
        msg: "not a binary 8-bit PGM".into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((h, w, data))
}

/// Search crop blended with the map upsampled by nearest neighbour: the
/// red channel carries the heat.
pub fn overlay(crop: &ImageCrop, map: &Tensor) -> Result<ImageCrop> {
    let (gh, gw) = map.dims2()?;
    Ok(ImageCrop::from_fn(crop.height(), crop.width(), |y, x| {
        let p = map
            .get2(y * gh / crop.height(), x * gw / crop.width())
            .clamp(0.0, 1.0);
        let c = crop.pixel(y, x);
        [
            0.5 * c[0] + 0.5 * p,
            0.5 * c[1],
            0.5 * c[2] + 0.5 * (1.0 - p) * 0.2,
        ]
    }))
}

/// Writes the classification map as PGM and, when `crop` is given, an
/// overlay PPM next to it (`<stem>_overlay.ppm`).
pub fn emit_heatmap(map: &Tensor, out: &Path, crop: Option<&ImageCrop>) -> Result<()> {
    write_pgm(out, map)?;
    if let Some(c) = crop {
        let stem = out
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("heatmap");
        overlay(c, map)?.save_ppm(&out.with_file_name(format!("{stem}_overlay.ppm")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.pgm");
        write_pgm(&p, &Tensor::full(&[4, 4], 0.5)).unwrap();
        let (h, w, data) = read_pgm(&p).unwrap();
        assert_eq!((h, w), (4, 4));
        assert!(data.iter().all(|&v| v == 128));

        let mut hot = Tensor::zeros(&[3, 5]);
        hot.data_mut()[7] = 1.0;
        write_pgm(&p, &hot).unwrap();
        let (_, _, data) = read_pgm(&p).unwrap();
        assert_eq!(data.iter().filter(|&&v| v == 255).count(), 1);
        assert_eq!(data[7], 255);
        assert!(write_pgm(&p, &Tensor::full(&[1, 1], 1.5)).is_err());
    }

    #[test]
    fn read_back_matches_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.pgm");
        let vals: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let map = Tensor::new(vec![3, 4], vals.clone()).unwrap();
        emit_heatmap(&map, &p, Some(&ImageCrop::filled(8, 8, [0.2; 3]))).unwrap();
        let (_, _, data) = read_pgm(&p).unwrap();
        let want: Vec<u8> = vals.iter().map(|&v| quantize(v)).collect();
        assert_eq!(data, want);
        assert!(dir.path().join("r_overlay.ppm").exists());
    }
}
