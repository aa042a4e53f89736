//! Point-map files and PGM/PPM image export.

use std::io::{BufRead, Read, Write};

use super::{DepthImage, PointMap, RgbImage};
use crate::error::{Error, Result};

pub const MAP_MAGIC: &[u8; 8] = b"POETMAP1";

/// Binary map: magic, `u64` count, then `f32` x, y, z and optionally
/// reflectance per point, little-endian.
pub fn write_point_map<W: Write>(map: &PointMap, mut out: W) -> Result<()> {
    map.validate()?;
    out.write_all(MAP_MAGIC)?;
    out.write_all(&(map.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(map.len() * 16);
    for (i, p) in map.points.iter().enumerate() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(r) = &map.reflectance {
            buf.extend_from_slice(&r[i].to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Inverse of [`write_point_map`]; whether records carry reflectance is
/// inferred from the payload length.
pub fn read_point_map<R: Read>(mut input: R) -> Result<PointMap> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAP_MAGIC {
        return Err(Error::format("point map", "missing POETMAP1 header"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    let stride = match count {
        0 if payload.is_empty() => 12,
        0 => return Err(Error::format("point map", "trailing bytes after empty map")),
        _ if payload.len() == count * 12 => 12,
        _ if payload.len() == count * 16 => 16,
        _ => {
            return Err(Error::format(
                "point map",
                format!(
                    "{} payload bytes do not hold {count} records",
                    payload.len()
                ),
            ))
        }
    };
    let f = |c: &[u8]| f32::from_le_bytes(c.try_into().unwrap());
    let mut points = Vec::with_capacity(count);
    let mut refl = Vec::new();
    for rec in payload.chunks_exact(stride) {
        points.push([f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])]);
        if stride == 16 {
            refl.push(f(&rec[12..16]));
        }
    }
    let map = PointMap {
        points,
        reflectance: (stride == 16).then_some(refl),
    };
    map.validate()
        .map_err(|e| Error::format("point map", e.to_string()))?;
    Ok(map)
}

/// Whitespace-separated `x y z [reflectance]` per line; `#` starts a comment.
pub fn read_xyz<R: BufRead>(input: R) -> Result<PointMap> {
    let mut points = Vec::new();
    let mut refl = Vec::new();
    let mut columns = None;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals = body
            .split_whitespace()
            .map(str::parse::<f32>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("xyz", format!("line {}: {e}", n + 1)))?;
        if !(vals.len() == 3 || vals.len() == 4) || columns.is_some_and(|c| c != vals.len()) {
            return Err(Error::format(
                "xyz",
                format!(
                    "line {}: expected a consistent 3 or 4 columns, got {}",
                    n + 1,
                    vals.len()
                ),
            ));
        }
        columns = Some(vals.len());
        points.push([vals[0], vals[1], vals[2]]);
        if vals.len() == 4 {
            refl.push(vals[3]);
        }
    }
    let map = PointMap {
        points,
        reflectance: (columns == Some(4)).then_some(refl),
    };
    map.validate()
        .map_err(|e| Error::format("xyz", e.to_string()))?;
    Ok(map)
}

/// 16-bit binary PGM in millimeters, saturating at 65.535 m.
pub fn write_pgm16<W: Write>(depth: &DepthImage, mut out: W) -> Result<()> {
    write!(out, "P5\n{} {}\n65535\n", depth.width, depth.height)?;
    let mut buf = Vec::with_capacity(depth.data.len() * 2);
    for &d in &depth.data {
        let mm = (f64::from(d) * 1000.0).round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&mm.to_be_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_pgm16<R: Read>(input: R) -> Result<DepthImage> {
    let (w, h, maxval, data) = read_pnm(input, b"P5", 1)?;
    if maxval != 65535 {
        return Err(Error::format(
            "pgm",
            format!("expected maxval 65535, got {maxval}"),
        ));
    }
    let data = data
        .chunks_exact(2)
        .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / 1000.0)
        .collect();
    Ok(DepthImage {
        width: w,
        height: h,
        data,
    })
}

pub fn write_ppm<W: Write>(img: &RgbImage, mut out: W) -> Result<()> {
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    out.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm<R: Read>(input: R) -> Result<RgbImage> {
    let (w, h, maxval, data) = read_pnm(input, b"P6", 3)?;
    if maxval != 255 {
        return Err(Error::format(
            "ppm",
            format!("expected maxval 255, got {maxval}"),
        ));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

fn read_pnm<R: Read>(
    mut input: R,
    magic: &[u8; 2],
    channels: usize,
) -> Result<(usize, usize, usize, Vec<u8>)> {
    let kind = if channels == 1 { "pgm" } else { "ppm" };
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(kind, "bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
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
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(kind, "malformed header"))?;
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let [w, h, maxval] = fields;
    let sample = if maxval > 255 { 2 } else { 1 };
    let expected = w * h * channels * sample;
    let raster = bytes.get(pos..).unwrap_or_default();
    if w == 0 || h == 0 || raster.len() != expected {
        return Err(Error::format(
            kind,
            format!(
                "{w}x{h} image needs {expected} bytes, found {}",
                raster.len()
            ),
        ));
    }
    Ok((w, h, maxval, raster.to_vec()))
}

/// Depth returns drawn over the image, coloured near-red to far-blue over
/// `[near, far]` meters.
pub fn depth_overlay(img: &RgbImage, depth: &DepthImage, near: f32, far: f32) -> Result<RgbImage> {
    if (img.width, img.height) != (depth.width, depth.height) {
        return Err(Error::shape(
            "depth_overlay",
            format!(
                "image {}x{} vs depth {}x{}",
                img.width, img.height, depth.width, depth.height
            ),
        ));
    }
    let mut out = img.clone();
    let span = (far - near).max(1e-6);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = depth.get(x, y);
            if d > 0.0 {
                let s = ((d - near) / span).clamp(0.0, 1.0);
                let rgb = [
                    255.0 * (1.0 - s),
                    255.0 * (1.0 - (2.0 * s - 1.0).abs()),
                    255.0 * s,
                ];
                out.set_pixel(x, y, rgb.map(|v| v.round() as u8));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn map_header_layout() {
        let map = PointMap::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let mut buf = Vec::new();
        write_point_map(&map, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"POETMAP1");
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        assert_eq!(buf.len(), 16 + 12);
        assert_eq!(f32::from_le_bytes(buf[20..24].try_into().unwrap()), 2.0);
    }

    #[test]
    fn map_rejects_truncation_and_bad_magic() {
        let map = PointMap::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let mut buf = Vec::new();
        write_point_map(&map, &mut buf).unwrap();
        assert!(read_point_map(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_point_map(bad.as_slice()).is_err());
    }

    #[test]
    fn xyz_parsing() {
        let text = "# comment\n1 2 3\n\n4.5 -1 0 # trailing\n";
        let map = read_xyz(text.as_bytes()).unwrap();
        assert_eq!(map.points, vec![[1.0, 2.0, 3.0], [4.5, -1.0, 0.0]]);
        assert!(map.reflectance.is_none());
        let refl = read_xyz("0 0 0 0.5\n1 1 1 0.25\n".as_bytes()).unwrap();
        assert_eq!(refl.reflectance, Some(vec![0.5, 0.25]));
        assert!(read_xyz("1 2\n".as_bytes()).is_err());
        assert!(read_xyz("1 2 3\n1 2 3 4\n".as_bytes()).is_err());
        assert!(read_xyz("1 2 x\n".as_bytes()).is_err());
    }

    #[test]
    fn pgm_quantizes_to_millimeters() {
        let depth = DepthImage {
            width: 3,
            height: 1,
            data: vec![0.0, 1.2344, 70.0],
        };
        let mut buf = Vec::new();
        write_pgm16(&depth, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 1\n65535\n"));
        let back = read_pgm16(buf.as_slice()).unwrap();
        assert_eq!(back.data, vec![0.0, 1.234, 65.535]);
    }

    #[test]
    fn overlay_marks_returns_only() {
        let img = RgbImage::new(2, 1);
        let depth = DepthImage {
            width: 2,
            height: 1,
            data: vec![0.0, 1.0],
        };
        let o = depth_overlay(&img, &depth, 1.0, 10.0).unwrap();
        assert_eq!(o.pixel(0, 0), [0, 0, 0]);
        assert_eq!(o.pixel(1, 0), [255, 0, 0]);
        assert!(depth_overlay(&RgbImage::new(1, 1), &depth, 1.0, 2.0).is_err());
    }

    proptest! {
        #[test]
        fn map_round_trip(pts in prop::collection::vec(prop::array::uniform3(-1e4f32..1e4), 0..50), with_refl in any::<bool>()) {
            let map = if with_refl {
                let r = pts.iter().map(|p| p[0].abs()).collect();
                PointMap::with_reflectance(pts, r).unwrap()
            } else {
                PointMap::new(pts).unwrap()
            };
            let mut buf = Vec::new();
            write_point_map(&map, &mut buf).unwrap();
            let back = read_point_map(buf.as_slice()).unwrap();
            if map.is_empty() {
                prop_assert!(back.is_empty());
            } else {
                prop_assert_eq!(back, map);
            }
        }

        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u8>()) {
            let data = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = RgbImage { width: w, height: h, data };
            let mut buf = Vec::new();
            write_ppm(&img, &mut buf).unwrap();
            prop_assert_eq!(read_ppm(buf.as_slice()).unwrap(), img);
        }
    }
}
