//! DAVIS-style directory layout:
//!
//! ```text
//! <root>/JPEGImages/<seq>/00000.jpg|png ...
//! <root>/Annotations/<seq>/00000.png ...   palette-indexed, 0 = background
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::maskops::BinaryMask;

pub const IMAGES_DIR: &str = "JPEGImages";
pub const ANNOTATIONS_DIR: &str = "Annotations";

/// The 256-entry colour map used by DAVIS/VOC annotation PNGs.
pub fn palette() -> Vec<u8> {
    let mut out = Vec::with_capacity(768);
    for i in 0u32..256 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        out.extend_from_slice(&[r, g, b]);
    }
    out
}

pub fn frame_name(index: usize) -> String {
    format!("{index:05}")
}

/// Writes an 8-bit palette-indexed PNG whose indices are the object ids.
pub fn write_label_png(path: &Path, labels: &Grid<u8>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), labels.width() as u32, labels.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette());
    let mut w = enc.write_header().map_err(|e| Error::file(path, e))?;
    w.write_image_data(labels.as_slice()).map_err(|e| Error::file(path, e))?;
    w.finish().map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Reads object ids from an indexed or 8-bit grayscale PNG.
pub fn read_label_png(path: &Path) -> Result<Grid<u8>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::file(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::file(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::file(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {
            let mut data = Vec::with_capacity(w * h);
            for y in 0..h {
                data.extend_from_slice(&buf[y * info.line_size..y * info.line_size + w]);
            }
            Grid::from_vec(w, h, data)
        }
        (ct, bd) => Err(Error::file(
            path,
            format!("unsupported annotation format {ct:?}/{bd:?}; expected 8-bit indexed"),
        )),
    }
}

pub fn read_frame(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_interleaved_u8(3, w as usize, h as usize, img.as_raw())
}

pub fn write_frame_png(path: &Path, frame: &Image) -> Result<()> {
    if frame.channels() != 3 {
        return Err(Error::shape(3, frame.channels()));
    }
    let raw = frame.to_interleaved_u8();
    image::save_buffer(path, &raw, frame.width() as u32, frame.height() as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::file(path, e))
}

/// Blends palette colours over the labelled pixels of `frame`.
pub fn overlay(frame: &Image, labels: &Grid<u8>, alpha: f32) -> Result<Image> {
    if frame.channels() != 3 || (frame.width(), frame.height()) != labels.shape() {
        return Err(Error::shape((3, labels.width(), labels.height()), (frame.channels(), frame.width(), frame.height())));
    }
    let pal = palette();
    let mut out = frame.clone();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let id = *labels.get(x, y) as usize;
            if id == 0 {
                continue;
            }
            for c in 0..3 {
                let v = frame.get(c, x, y);
                out.set(c, x, y, (1.0 - alpha) * v + alpha * pal[3 * id + c] as f32 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Sorted frame files (`.jpg`, `.jpeg`, `.png`) of a directory.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("jpg" | "jpeg" | "png")) {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

/// Annotation file for a frame index, if present.
pub fn annotation_path(annotations: &Path, index: usize) -> PathBuf {
    annotations.join(format!("{}.png", frame_name(index)))
}

/// Sorted distinct non-zero ids of a label map.
pub fn object_ids(labels: &Grid<u8>) -> Vec<u8> {
    let mut seen = [false; 256];
    for &v in labels.as_slice() {
        seen[v as usize] = true;
    }
    (1..=255u8).filter(|&i| seen[i as usize]).collect()
}

pub fn mask_for_id(labels: &Grid<u8>, id: u8) -> BinaryMask {
    BinaryMask::new(labels.map(|&v| v == id))
}

/// Label map from per-object masks; later masks win on overlap.
pub fn labels_from_masks(masks: &[(u8, &BinaryMask)], width: usize, height: usize) -> Grid<u8> {
    let mut out = Grid::filled(width, height, 0u8);
    for (id, m) in masks {
        for (o, &b) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            if b {
                *o = *id;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_starts_with_davis_colours() {
        let p = palette();
        assert_eq!(p.len(), 768);
        assert_eq!(&p[..12], &[0, 0, 0, 128, 0, 0, 0, 128, 0, 128, 128, 0]);
    }

    #[test]
    fn label_png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("00000.png");
        let labels = Grid::from_fn(13, 7, |x, y| ((x * 7 + y * 3) % 5) as u8);
        write_label_png(&path, &labels).unwrap();
        assert_eq!(read_label_png(&path).unwrap(), labels);
        assert_eq!(object_ids(&labels), vec![1, 2, 3, 4]);
    }

    #[test]
    fn frame_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let raw: Vec<u8> = (0..5 * 4 * 3).map(|i| (i * 4) as u8).collect();
        let img = Image::from_interleaved_u8(3, 5, 4, &raw).unwrap();
        write_frame_png(&path, &img).unwrap();
        assert_eq!(read_frame(&path).unwrap(), img);
        assert!(read_frame(&dir.path().join("missing.png")).is_err());
    }
}
