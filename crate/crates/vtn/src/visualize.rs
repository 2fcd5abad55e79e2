//! Warp-field, warped-feature and candidate-probability images.
//!
//! Per group `c` the renderer writes
//! `field_g{c}.ppm` (target coordinates on a hue/saturation wheel),
//! `field_g{c}.csv` (raw offsets), `warped_g{c}.pgm` (mean of the group's
//! warped channels) and, per selected pixel, `probs_g{c}_y{y}_x{x}.pgm`.

use std::io::Write;
use std::path::{Path, PathBuf};

use vtn_core::model::Model;
use vtn_core::nn::Mode;
use vtn_core::tape::Tape;
use vtn_core::vtn::ops::candidate_count;
use vtn_core::{Real, Tensor};

use crate::error::{AppError, Result};

/// One image's warp, flattened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpSnapshot {
    pub height: usize,
    pub width: usize,
    pub groups: usize,
    pub radius: usize,
    pub channels: usize,
    /// `[C,H,W,2]` offsets `(row, col)`.
    pub field: Vec<f64>,
    /// `[H,W,K]` warped features.
    pub warped: Vec<f64>,
    /// `[C,H,W,N]` candidate probabilities (probabilistic head only).
    pub probs: Option<Vec<f64>>,
}

impl WarpSnapshot {
    pub fn group_field(&self, c: usize) -> &[f64] {
        let n = self.height * self.width * 2;
        &self.field[c * n..(c + 1) * n]
    }
}

/// Runs `model` on one `H×W` grayscale image in inference mode.
pub fn snapshot<R: Real>(model: &mut Model<R>, image: &[f32], height: usize, width: usize) -> Result<WarpSnapshot> {
    let cfg = model
        .vtn_config()
        .cloned()
        .ok_or_else(|| AppError::config("variant", "the base model has no warp to visualize"))?;
    let mut tape = Tape::new();
    let data = image.iter().map(|&v| R::from_f64(v as f64)).collect();
    let x = tape.constant(Tensor::new(&[1, height, width, 1], data)?);
    let out = model.forward(&mut tape, x, Mode::Eval)?;
    let vtn = out.vtn.expect("warping variant");
    let fs = tape.shape(out.warped).to_vec();
    let to_f64 = |t: &Tensor<R>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    Ok(WarpSnapshot {
        height: fs[1],
        width: fs[2],
        groups: cfg.groups,
        radius: cfg.radius,
        channels: fs[3],
        field: to_f64(tape.value(vtn.field)),
        warped: to_f64(tape.value(out.warped)),
        probs: vtn.probs.map(|p| to_f64(tape.value(p))),
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// RGB colour of each pixel's target coordinate `(y + g_row, x + g_col)`:
/// hue is the angle around the map centre, saturation the distance from it,
/// normalised so that the reachable range `[-r, H-1+r]` spans the wheel.
pub fn field_colormap(field: &[f64], height: usize, width: usize, radius: usize) -> Vec<u8> {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let (sy, sx) = (cy + radius as f64, cx + radius as f64);
    let mut rgb = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let i = (y * width + x) * 2;
            let ty = (y as f64 + field[i] - cy) / sy.max(1.0);
            let tx = (x as f64 + field[i + 1] - cx) / sx.max(1.0);
            let hue = ty.atan2(tx).to_degrees();
            rgb.extend(hsv_to_rgb(hue, ty.hypot(tx).min(1.0), 1.0));
        }
    }
    rgb
}

/// Colormap of the zero field.
pub fn identity_colormap(height: usize, width: usize, radius: usize) -> Vec<u8> {
    field_colormap(&vec![0.0; height * width * 2], height, width, radius)
}

/// Min-max scaling to 0..=255; a constant map becomes mid-gray.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Nearest-neighbour enlargement of a `w×h` image with `ch` bytes per pixel.
pub fn upscale(pixels: &[u8], width: usize, height: usize, ch: usize, factor: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() * factor * factor);
    for y in 0..height * factor {
        for x in 0..width * factor {
            let src = ((y / factor) * width + x / factor) * ch;
            out.extend_from_slice(&pixels[src..src + ch]);
        }
    }
    out
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_pnm(path, "P6", width, height, rgb)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_pnm(path, "P5", width, height, gray)
}

/// Reads a binary 8-bit PGM as values in `[0, 1]`; returns `(w, h, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    let bad = |m: &str| AppError::Corrupt {
        path: path.to_path_buf(),
        message: format!("not a binary 8-bit PGM: {m}"),
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("maxval must be 1..=255"));
    }
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| bad("pixel data truncated"))?;
    Ok((w, h, body.iter().map(|&b| b as f32 / max as f32).collect()))
}

/// Writes every file for `snap` into `dir`; `pixels` are `(row, col)` on the
/// warped map. Returns the written paths.
pub fn render(snap: &WarpSnapshot, pixels: &[(usize, usize)], dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let (h, w, k) = (snap.height, snap.width, snap.channels);
    for &(y, x) in pixels {
        if y >= h || x >= w {
            return Err(AppError::config("pixel", format!("({y}, {x}) outside the {h}x{w} map")));
        }
    }
    let scale = scale.max(1);
    let gs = k / snap.groups;
    let n = candidate_count(snap.radius);
    let side = 2 * snap.radius + 1;
    let mut written = Vec::new();
    for c in 0..snap.groups {
        let field = snap.group_field(c);

        let path = dir.join(format!("field_g{c}.ppm"));
        let rgb = field_colormap(field, h, w, snap.radius);
        write_ppm(&path, w * scale, h * scale, &upscale(&rgb, w, h, 3, scale))?;
        written.push(path);

        let path = dir.join(format!("field_g{c}.csv"));
        let mut csv = csv::Writer::from_path(&path).map_err(|e| AppError::io(&path, e.into()))?;
        let io = |e: csv::Error| AppError::io(&path, e.into());
        csv.write_record(["row", "col", "g_row", "g_col"]).map_err(io)?;
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * 2;
                let rec = [y.to_string(), x.to_string(), format!("{:.6}", field[i]), format!("{:.6}", field[i + 1])];
                csv.write_record(&rec).map_err(io)?;
            }
        }
        csv.flush().map_err(|e| AppError::io(&path, e))?;
        written.push(path);

        let mean: Vec<f64> = snap
            .warped
            .chunks_exact(k)
            .map(|px| px[c * gs..(c + 1) * gs].iter().sum::<f64>() / gs as f64)
            .collect();
        let path = dir.join(format!("warped_g{c}.pgm"));
        write_pgm(&path, w * scale, h * scale, &upscale(&to_gray(&mean), w, h, 1, scale))?;
        written.push(path);

        if let Some(probs) = &snap.probs {
            for &(y, x) in pixels {
                let at = ((c * h + y) * w + x) * n;
                let p = &probs[at..at + n];
                let peak = p.iter().copied().fold(0.0, f64::max);
                let gray: Vec<u8> = p
                    .iter()
                    .map(|v| if peak > 0.0 { (v / peak * 255.0).round() as u8 } else { 0 })
                    .collect();
                let f = (scale * 4).max(1);
                let path = dir.join(format!("probs_g{c}_y{y}_x{x}.pgm"));
                write_pgm(&path, side * f, side * f, &upscale(&gray, side, side, 1, f))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Reads back a field CSV as `[H,W,2]` offsets.
pub fn read_field_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| AppError::io(path, e.into()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| AppError::io(path, e.into()))?;
        for i in [2, 3] {
            let v = rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| AppError::Corrupt {
                path: path.to_path_buf(),
                message: "malformed field row".into(),
            })?;
            out.push(v);
        }
    }
    Ok(out)
}

/// Logs a one-line summary per group to `log`.
pub fn summarize(snap: &WarpSnapshot, log: &mut dyn Write) {
    for c in 0..snap.groups {
        let f = snap.group_field(c);
        let mean_abs = f.iter().map(|v| v.abs()).sum::<f64>() / f.len() as f64;
        let _ = writeln!(log, "group {c}: mean |G| = {mean_abs:.4} px");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_is_white_and_wheel_is_saturated_at_the_rim() {
        let rgb = identity_colormap(3, 3, 0);
        assert_eq!(&rgb[4 * 3..5 * 3], &[255, 255, 255]);
        // top-right corner lies on the rim
        let px = &rgb[2 * 3..3 * 3];
        assert_eq!(px.iter().min(), Some(&0));
    }

    #[test]
    fn shifted_field_equals_shifted_identity() {
        let (h, w) = (5, 5);
        let mut f = vec![0.0; h * w * 2];
        f.chunks_mut(2).for_each(|g| g[1] = 1.0);
        let moved = field_colormap(&f, h, w, 1);
        let id = field_colormap(&vec![0.0; h * w * 2], h, w, 1);
        for y in 0..h {
            for x in 0..w - 1 {
                let a = (y * w + x) * 3;
                let b = (y * w + x + 1) * 3;
                assert_eq!(moved[a..a + 3], id[b..b + 3]);
            }
        }
    }

    #[test]
    fn gray_scaling() {
        assert_eq!(to_gray(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
        assert_eq!(to_gray(&[4.0, 4.0]), vec![128, 128]);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, 3, 2, &[0, 51, 102, 153, 204, 255]).unwrap();
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    }

    #[test]
    fn upscale_repeats_pixels() {
        assert_eq!(upscale(&[1, 2], 2, 1, 1, 2), vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }
}
