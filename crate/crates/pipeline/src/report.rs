//! Cluster reports for visual inspection: one PNG contact sheet per cluster with captioned
//! member tiles, and optionally an animated GIF cycling through all members.

use std::fs;
use std::path::{Path, PathBuf};

use hudd_core::synthlab::dataset::read_pgm;
use hudd_core::synthlab::Manifest;
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::config::ReportOptions;
use crate::error::{PipelineError, Result};
use crate::font::{draw_text, text_width, GLYPH_HEIGHT};

const BACKGROUND: Rgb<u8> = Rgb([24, 24, 28]);
const TEXT: Rgb<u8> = Rgb([235, 235, 235]);
const MISSING: Rgb<u8> = Rgb([110, 20, 20]);
const LINE: u32 = GLYPH_HEIGHT + 2;
const PAD: u32 = 4;

/// A decoded 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// One member of a cluster: its id, caption lines and the image if it could be read.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub id: String,
    pub caption: Vec<String>,
    pub image: Option<Gray>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub sheets: Vec<String>,
    pub gifs: Vec<String>,
    /// `(id, path)` of members whose image could not be read.
    pub missing: Vec<(String, String)>,
}

/// GIF frame delay for a rate in images per minute, in milliseconds.
pub fn frame_delay_ms(images_per_minute: f64) -> u32 {
    (60_000.0 / images_per_minute).round() as u32
}

fn blit_scaled(canvas: &mut RgbImage, x0: u32, y0: u32, img: &Gray, scale: u32) {
    for y in 0..img.height as u32 * scale {
        for x in 0..img.width as u32 * scale {
            let v = img.pixels[(y / scale) as usize * img.width + (x / scale) as usize];
            canvas.put_pixel(x0 + x, y0 + y, Rgb([v, v, v]));
        }
    }
}

fn fill(canvas: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            canvas.put_pixel(x, y, color);
        }
    }
}

/// Square sheet grid for `per_sheet` images, narrowed to `n` columns for small clusters.
pub fn grid(n: usize, per_sheet: usize) -> (usize, usize) {
    let n = n.min(per_sheet).max(1);
    let side = (per_sheet as f64).sqrt().ceil() as usize;
    let cols = side.min(n);
    (cols, n.div_ceil(cols))
}

/// Lays out up to `per_sheet` tiles under a title line.
pub fn contact_sheet(title: &str, tiles: &[Tile], per_sheet: usize, scale: u32, side: usize) -> RgbImage {
    let shown = &tiles[..tiles.len().min(per_sheet)];
    let (cols, rows) = grid(shown.len(), per_sheet);
    let img_px = side as u32 * scale;
    let lines = shown.iter().map(|t| t.caption.len()).max().unwrap_or(0) as u32;
    let caption_w = shown
        .iter()
        .flat_map(|t| t.caption.iter().map(|l| text_width(l)))
        .max()
        .unwrap_or(0);
    let cell_w = img_px.max(caption_w) + PAD;
    let cell_h = img_px + 2 + lines * LINE + PAD;
    let header = LINE + PAD;
    let width = (cols as u32 * cell_w + PAD).max(text_width(title) + 2 * PAD);
    let height = header + rows as u32 * cell_h + PAD;
    let mut canvas = RgbImage::from_pixel(width, height, BACKGROUND);
    draw_text(&mut canvas, PAD, PAD, title, TEXT);
    for (i, tile) in shown.iter().enumerate() {
        let x = PAD + (i % cols) as u32 * cell_w;
        let y = header + (i / cols) as u32 * cell_h;
        match &tile.image {
            Some(img) if img.width == side && img.height == side => blit_scaled(&mut canvas, x, y, img, scale),
            _ => {
                fill(&mut canvas, x, y, img_px, img_px, MISSING);
                draw_text(&mut canvas, x + 2, y + 2, "MISSING", TEXT);
            }
        }
        for (l, line) in tile.caption.iter().enumerate() {
            draw_text(&mut canvas, x, y + img_px + 2 + l as u32 * LINE, line, TEXT);
        }
    }
    canvas
}

/// Writes an infinitely looping GIF with one captioned frame per readable member.
pub fn write_gif(path: &Path, tiles: &[Tile], scale: u32, side: usize, images_per_minute: f64) -> Result<usize> {
    let img_px = side as u32 * scale;
    let frames: Vec<&Tile> = tiles
        .iter()
        .filter(|t| t.image.as_ref().is_some_and(|g| g.width == side && g.height == side))
        .collect();
    let width = img_px.max(frames.iter().map(|t| text_width(&t.id)).max().unwrap_or(0)) + 2 * PAD;
    let height = img_px + LINE + 2 * PAD;
    let file = fs::File::create(path).map_err(|e| PipelineError::file(path, e))?;
    let mut encoder = GifEncoder::new(std::io::BufWriter::new(file));
    let img_err = |source| PipelineError::Image {
        path: path.to_path_buf(),
        source,
    };
    encoder.set_repeat(Repeat::Infinite).map_err(img_err)?;
    let delay = Delay::from_numer_denom_ms(frame_delay_ms(images_per_minute), 1);
    for t in &frames {
        let mut canvas = RgbImage::from_pixel(width, height, BACKGROUND);
        blit_scaled(&mut canvas, PAD, PAD, t.image.as_ref().expect("filtered on readable images"), scale);
        draw_text(&mut canvas, PAD, PAD + img_px + 2, &t.id, TEXT);
        let rgba = RgbaImage::from_fn(width, height, |x, y| {
            let p = canvas.get_pixel(x, y).0;
            Rgba([p[0], p[1], p[2], 255])
        });
        encoder.encode_frame(Frame::from_parts(rgba, 0, 0, delay)).map_err(img_err)?;
    }
    Ok(frames.len())
}

/// Caption of a member: its id, then `name=value` for each requested manifest parameter.
pub fn caption(id: &str, manifest: &Manifest, params: &[String]) -> Vec<String> {
    let mut lines = vec![id.to_string()];
    if let Some(row) = manifest.get(id) {
        for p in params {
            if let Some(v) = row.params.get(p) {
                lines.push(format!("{p}={v:.2}"));
            }
        }
    }
    lines
}

/// Renders the reports of all clusters into `out_dir`. Members whose image cannot be read are
/// listed in the summary and shown as placeholders.
pub fn render_reports(
    clusters: &[Vec<String>],
    layer: usize,
    manifest: &Manifest,
    data_dir: &Path,
    options: &ReportOptions,
    out_dir: &Path,
) -> Result<(ReportSummary, Vec<PathBuf>)> {
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::file(out_dir, e))?;
    let index = manifest.index();
    let mut summary = ReportSummary::default();
    let mut written = Vec::new();
    let scale = options.tile_scale as u32;
    for (c, members) in clusters.iter().enumerate() {
        let tiles: Vec<Tile> = members
            .iter()
            .map(|id| {
                let path = index.get(id.as_str()).map(|r| data_dir.join(&r.path));
                let image = path.as_ref().and_then(|p| read_pgm(p).ok()).map(|(w, h, px)| Gray {
                    width: w,
                    height: h,
                    pixels: px,
                });
                if image.is_none() {
                    let shown = path.map_or_else(|| "(not in manifest)".to_string(), |p| p.display().to_string());
                    summary.missing.push((id.clone(), shown));
                }
                Tile {
                    id: id.clone(),
                    caption: caption(id, manifest, &options.params),
                    image,
                }
            })
            .collect();
        let side = tiles.iter().find_map(|t| t.image.as_ref().map(|g| g.width)).unwrap_or(32);
        let shown = members.len().min(options.images_per_sheet);
        let title = format!("CLUSTER {c} LAYER {layer} SIZE {} SHOWN {shown}", members.len());
        let sheet = contact_sheet(&title, &tiles, options.images_per_sheet, scale, side);
        let sheet_path = out_dir.join(format!("cluster_{c:02}.png"));
        sheet.save(&sheet_path).map_err(|source| PipelineError::Image {
            path: sheet_path.clone(),
            source,
        })?;
        summary.sheets.push(file_name(&sheet_path));
        written.push(sheet_path);
        if options.gif {
            let gif_path = out_dir.join(format!("cluster_{c:02}.gif"));
            if write_gif(&gif_path, &tiles, scale, side, options.images_per_minute)? > 0 {
                summary.gifs.push(file_name(&gif_path));
                written.push(gif_path);
            } else {
                fs::remove_file(&gif_path).map_err(|e| PipelineError::file(&gif_path, e))?;
            }
        }
    }
    if !summary.missing.is_empty() {
        log::warn!("{} cluster member images could not be read", summary.missing.len());
    }
    Ok((summary, written))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(id: &str, side: usize) -> Tile {
        Tile {
            id: id.into(),
            caption: vec![id.into(), "angle=12.00".into()],
            image: Some(Gray {
                width: side,
                height: side,
                pixels: (0..side * side).map(|i| (i % 256) as u8).collect(),
            }),
        }
    }

    #[test]
    fn grid_is_five_by_five_for_the_default_sheet() {
        assert_eq!(grid(25, 25), (5, 5));
        assert_eq!(grid(40, 25), (5, 5));
        assert_eq!(grid(7, 25), (5, 2));
        assert_eq!(grid(1, 25), (1, 1));
    }

    #[test]
    fn single_member_gives_a_single_tile_sheet() {
        let sheet = contact_sheet("C", &[tile("a", 8)], 25, 2, 8);
        let cell_w = 16u32.max(text_width("angle=12.00")) + PAD;
        assert_eq!(sheet.width(), cell_w + PAD);
        let px = sheet.get_pixel(PAD + 3, LINE + PAD + 1);
        assert_eq!(px.0, [1, 1, 1], "scaled pixel (1, 0) of the tile");
    }

    #[test]
    fn missing_images_become_placeholders() {
        let mut t = tile("b", 8);
        t.image = None;
        let sheet = contact_sheet("C", &[t], 25, 2, 8);
        assert_eq!(*sheet.get_pixel(PAD + 15, LINE + PAD + 15), MISSING);
    }

    #[test]
    fn default_rate_shows_a_hundred_frames_in_a_minute() {
        assert_eq!(frame_delay_ms(100.0), 600);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gif");
        let tiles: Vec<Tile> = (0..100).map(|i| tile(&format!("i{i}"), 4)).collect();
        assert_eq!(write_gif(&path, &tiles, 1, 4, 100.0).unwrap(), 100);
        let decoder = image::codecs::gif::GifDecoder::new(std::io::BufReader::new(fs::File::open(&path).unwrap())).unwrap();
        use image::AnimationDecoder;
        let total_ms: f64 = decoder
            .into_frames()
            .map(|f| {
                let (n, d) = f.unwrap().delay().numer_denom_ms();
                n as f64 / d as f64
            })
            .sum();
        assert!((total_ms - 60_000.0).abs() < 1.0, "{total_ms} ms");
    }
}
