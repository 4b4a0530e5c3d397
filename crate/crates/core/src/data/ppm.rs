use std::collections::BTreeMap;
use std::io::Write;

use super::LabelMap;
use crate::error::{Error, Result};
use crate::ops::activation::IGNORE_LABEL;

/// Class id to RGB; serialized as `{"0": [r, g, b], ...}`.
pub type Palette = BTreeMap<u8, [u8; 3]>;

const COLORS: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn default_palette(classes: usize) -> Palette {
    (0..classes.min(255))
        .map(|k| {
            let base = COLORS[k % COLORS.len()];
            // Darken repeats so later classes stay distinguishable.
            let shade = 1.0 / (1 + k / COLORS.len()) as f64;
            (k as u8, base.map(|c| (c as f64 * shade).round() as u8))
        })
        .collect()
}

/// Binary P6 pixmap; the ignore label renders black.
pub fn write_ppm<W: Write>(mut w: W, labels: &LabelMap, palette: &Palette) -> Result<()> {
    let mut body = Vec::with_capacity(labels.data.len() * 3);
    for &l in &labels.data {
        let rgb = if l == IGNORE_LABEL {
            [0, 0, 0]
        } else {
            *palette
                .get(&l)
                .ok_or_else(|| Error::precondition("write_ppm", format!("palette has no entry for class {l}")))?
        };
        body.extend_from_slice(&rgb);
    }
    write!(w, "P6\n{} {}\n255\n", labels.cols, labels.rows)?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Parses a binary P6 pixmap with a single-whitespace header and no comments.
/// Returns `(width, height, rgb bytes)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == bytes.len() || start == pos {
            return Err(Error::Format("truncated pixmap header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ascii header".into()))?);
        pos += 1;
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format("not an 8-bit P6 pixmap".into()));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad dimension `{s}`")));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let body = &bytes[pos..];
    if body.len() != w * h * 3 {
        return Err(Error::Format(format!("expected {} pixel bytes, found {}", w * h * 3, body.len())));
    }
    Ok((w, h, body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel() {
        let mut out = Vec::new();
        let palette = Palette::from([(0, [255, 0, 0])]);
        write_ppm(&mut out, &LabelMap::filled(1, 1, 0), &palette).unwrap();
        assert_eq!(out, b"P6\n1 1\n255\n\xff\x00\x00");
    }

    #[test]
    fn header_and_ignore_color() {
        let mut out = Vec::new();
        let labels = LabelMap::new(2, 3, vec![0, 1, 255, 1, 0, 1]).unwrap();
        write_ppm(&mut out, &labels, &default_palette(2)).unwrap();
        assert!(out.starts_with(b"P6\n3 2\n255\n"));
        let (w, h, px) = parse_ppm(&out).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(&px[6..9], &[0, 0, 0]);
    }

    #[test]
    fn missing_entry_is_an_error() {
        let labels = LabelMap::new(1, 2, vec![0, 3]).unwrap();
        assert!(write_ppm(Vec::new(), &labels, &default_palette(3)).is_err());
    }

    #[test]
    fn palette_json_shape() {
        let p = default_palette(2);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"0":[230,25,75],"1":[60,180,75]}"#);
        assert_eq!(serde_json::from_str::<Palette>(&s).unwrap(), p);
    }
}
