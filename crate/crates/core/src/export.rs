//! Plain-text and PGM renderings of maps and images.

use std::fmt::Write as _;

use gracaps_tensor::Tensor;

use crate::error::{contract, Result};

/// Binary 8-bit PGM (`P5`).
pub fn encode_pgm(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn dims(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        &[h, w] | &[1, h, w] => Ok((h, w)),
        s => Err(contract(format!("expected an [H, W] or [1, H, W] map, got {s:?}"))),
    }
}

/// Min-max normalized PGM plus the bounds used, for the sidecar line.
/// A constant map renders black.
pub fn map_to_pgm(map: &Tensor) -> Result<(Vec<u8>, f32, f32)> {
    let (h, w) = dims(map)?;
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let pixels: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok((encode_pgm(h, w, &pixels), lo, hi))
}

/// Sidecar text recording the normalization bounds of a map PGM.
pub fn bounds_line(lo: f32, hi: f32) -> String {
    format!("min={lo:.6} max={hi:.6}\n")
}

/// PGM of an image with values in `[0, 1]`, no normalization.
pub fn image_to_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = dims(image)?;
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(encode_pgm(h, w, &pixels))
}

/// Unnormalized values, one image row per line, six decimals.
pub fn map_to_csv(map: &Tensor) -> Result<String> {
    let (_, w) = dims(map)?;
    let mut out = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", cells.join(",")).expect("string write");
    }
    Ok(out)
}

/// Tiles equally sized images into a grid with a one-pixel gap.
pub fn contact_sheet(rows: &[Vec<Tensor>]) -> Result<Vec<u8>> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| contract("contact sheet needs at least one image"))?;
    let (h, w) = dims(first)?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (sh, sw) = (rows.len() * (h + 1) - 1, cols * (w + 1) - 1);
    let mut sheet = vec![0u8; sh * sw];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if dims(img)? != (h, w) {
                return Err(contract("contact sheet images differ in size"));
            }
            for y in 0..h {
                for x in 0..w {
                    let v = img.data()[y * w + x].clamp(0.0, 1.0);
                    sheet[(r * (h + 1) + y) * sw + c * (w + 1) + x] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(encode_pgm(sh, sw, &sheet))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_normalization() {
        let map = Tensor::new([1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let (bytes, lo, hi) = map_to_pgm(&map).unwrap();
        assert_eq!((lo, hi), (-1.0, 1.0));
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
        assert_eq!(bounds_line(lo, hi), "min=-1.000000 max=1.000000\n");
    }

    #[test]
    fn csv_rows() {
        let map = Tensor::new([2, 2], vec![0.5, 1.0, -2.0, 0.0]).unwrap();
        assert_eq!(map_to_csv(&map).unwrap(), "0.500000,1.000000\n-2.000000,0.000000\n");
    }
}
