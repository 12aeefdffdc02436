use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    #[default]
    Gray,
    /// Blue through white to red.
    Heat,
}

impl std::str::FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(Palette::Gray),
            "heat" => Ok(Palette::Heat),
            other => Err(Error::Config(format!("unknown palette {other:?} (gray | heat)"))),
        }
    }
}

impl Palette {
    fn color(self, level: u8) -> [u8; 3] {
        match self {
            Palette::Gray => [level; 3],
            Palette::Heat => {
                let t = level as f64 / 255.0;
                let (r, g, b) = if t < 0.5 {
                    let s = 2.0 * t;
                    (s, s, 1.0)
                } else {
                    let s = 2.0 * (1.0 - t);
                    (1.0, s, s)
                };
                [r, g, b].map(|v| (255.0 * v).round() as u8)
            }
        }
    }
}

/// Sidecar written next to a rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderInfo {
    pub channel: usize,
    pub height: usize,
    pub width: usize,
    pub min: f64,
    pub max: f64,
    pub palette: Palette,
}

/// Linear min/max map to 0..=255; a constant plane maps to 0.
fn levels(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let px = values
        .iter()
        .map(|v| if span > 0.0 { (255.0 * (v - min) / span).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    (px, min, max)
}

/// Writes an 8-bit PGM of one channel, an optional PNG heatmap and a
/// `<pgm>.json` sidecar with the value range.
pub fn render(
    field: &Field,
    channel: usize,
    palette: Palette,
    pgm: impl AsRef<Path>,
    png_path: Option<&Path>,
) -> Result<RenderInfo> {
    let spec = field.spec();
    let plane = field.channel(channel)?;
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("channel {channel} holds non-finite values")));
    }
    let (px, min, max) = levels(plane);
    let pgm = pgm.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", spec.width, spec.height).into_bytes();
    bytes.extend_from_slice(&px);
    fs::write(pgm, bytes)?;
    if let Some(path) = png_path {
        let mut encoder = png::Encoder::new(BufWriter::new(File::create(path)?), spec.width as u32, spec.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let rgb: Vec<u8> = px.iter().flat_map(|&l| palette.color(l)).collect();
        encoder
            .write_header()
            .and_then(|mut w| w.write_image_data(&rgb))
            .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    }
    let info = RenderInfo { channel, height: spec.height, width: spec.width, min, max, palette };
    let mut sidecar = pgm.as_os_str().to_owned();
    sidecar.push(".json");
    fs::write(sidecar, serde_json::to_string_pretty(&info)?)?;
    Ok(info)
}
