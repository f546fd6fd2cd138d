//! Boxes, crop transforms and crop/paste resampling between full frames and
//! fixed-resolution network inputs.
//!
//! Coordinates are continuous with pixel centres on integers: pixel `i`
//! covers `[i - 0.5, i + 0.5]`. A box with `cx = 2, w = 3` therefore covers
//! pixels 1, 2 and 3 exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::maskops::ProbabilityMap;

/// Axis-aligned box in centre form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// Box covering the inclusive pixel range `[px0, px1] × [py0, py1]`.
    pub fn from_pixel_extents(px0: usize, py0: usize, px1: usize, py1: usize) -> Self {
        Self {
            cx: (px0 + px1) as f64 / 2.0,
            cy: (py0 + py1) as f64 / 2.0,
            w: (px1 - px0 + 1) as f64,
            h: (py1 - py0 + 1) as f64,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DegenerateBox { w: self.w, h: self.h })
        }
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn iou(&self, other: &Box) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips the box to `[0, width] × [0, height]` in edge coordinates.
    /// Returns `None` if nothing remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<Self> {
        let (x0, y0, x1, y1) = self.corners();
        let (x0, x1) = (x0.clamp(0.0, width), x1.clamp(0.0, width));
        let (y0, y1) = (y0.clamp(0.0, height), y1.clamp(0.0, height));
        Self::from_corners(x0, y0, x1, y1).ok()
    }
}

/// Invertible mapping from a source region of the frame to an
/// `out_w × out_h` raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub source_box: Box,
    pub out_w: usize,
    pub out_h: usize,
}

impl CropTransform {
    pub fn new(source_box: Box, out_w: usize, out_h: usize) -> Result<Self> {
        source_box.validate()?;
        if out_w == 0 || out_h == 0 {
            return Err(Error::InvalidParameter {
                name: "output_size",
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            source_box,
            out_w,
            out_h,
        })
    }

    /// Crop covering the whole `width × height` frame at native resolution.
    pub fn identity(width: usize, height: usize) -> Result<Self> {
        let b = Box::new(
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width as f64,
            height as f64,
        )?;
        Self::new(b, width, height)
    }

    /// Same source region sampled at a different square resolution.
    pub fn with_output_size(&self, size: usize) -> Self {
        Self {
            out_w: size,
            out_h: size,
            ..*self
        }
    }

    /// Output pixels per frame pixel, `(x, y)`.
    pub fn scale(&self) -> (f64, f64) {
        (
            self.out_w as f64 / self.source_box.w,
            self.out_h as f64 / self.source_box.h,
        )
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, y0, _, _) = self.source_box.corners();
        let (sx, sy) = self.scale();
        ((x - x0) * sx - 0.5, (y - y0) * sy - 0.5)
    }

    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let (x0, y0, _, _) = self.source_box.corners();
        let (sx, sy) = self.scale();
        (x0 + (u + 0.5) / sx, y0 + (v + 0.5) / sy)
    }

    /// Maps a box given in crop coordinates back to frame coordinates.
    pub fn box_to_frame(&self, b: &Box) -> Box {
        let (cx, cy) = self.to_frame(b.cx, b.cy);
        let (sx, sy) = self.scale();
        Box {
            cx,
            cy,
            w: b.w / sx,
            h: b.h / sy,
        }
    }

    pub fn box_to_crop(&self, b: &Box) -> Box {
        let (cx, cy) = self.to_crop(b.cx, b.cy);
        let (sx, sy) = self.scale();
        Box {
            cx,
            cy,
            w: b.w * sx,
            h: b.h * sy,
        }
    }
}

/// Side length of the square search region around `b`:
/// `context_factor * sqrt((w + p)(h + p))` with `p = (w + h) / 2`.
pub fn search_region_side(b: &Box, context_factor: f64) -> f64 {
    let p = (b.w + b.h) / 2.0;
    context_factor * ((b.w + p) * (b.h + p)).sqrt()
}

/// Square search region centred on `b`, sampled at `output_size²`.
pub fn make_search_region(b: &Box, context_factor: f64, output_size: usize) -> Result<CropTransform> {
    b.validate()?;
    if !(context_factor >= 1.0) {
        return Err(Error::InvalidParameter {
            name: "context_factor",
            reason: format!("must be >= 1, got {context_factor}"),
        });
    }
    let side = search_region_side(b, context_factor);
    CropTransform::new(Box::new(b.cx, b.cy, side, side)?, output_size, output_size)
}

/// Bilinear sample of a `w × h` plane at continuous `(x, y)`. Points outside
/// the pixel area `[-0.5, w - 0.5] × [-0.5, h - 0.5]` return `None`; points
/// inside are clamped to the centre lattice.
#[inline]
fn bilinear(get: impl Fn(usize, usize) -> f64, w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= -0.5 && y >= -0.5 && x <= w as f64 - 0.5 && y <= h as f64 - 0.5) {
        return None;
    }
    Some(bilinear_clamped(get, w, h, x, y))
}

#[inline]
pub(crate) fn bilinear_clamped(get: impl Fn(usize, usize) -> f64, w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = if fx == 0.0 {
        get(x0, y0)
    } else {
        get(x0, y0) * (1.0 - fx) + get(x1, y0) * fx
    };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        get(x0, y1)
    } else {
        get(x0, y1) * (1.0 - fx) + get(x1, y1) * fx
    };
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the source region of `frame` into an `out_w × out_h` image.
/// Samples falling outside the frame take `fill[c]`.
pub fn crop_and_resize(frame: &Image, t: &CropTransform, fill: &[f32]) -> Result<Image> {
    if frame.is_empty() {
        return Err(Error::InvalidParameter {
            name: "frame",
            reason: "empty image".into(),
        });
    }
    if fill.len() != frame.channels() {
        return Err(Error::shape(frame.channels(), fill.len()));
    }
    let (w, h) = (frame.width(), frame.height());
    let mut out = Image::new(frame.channels(), t.out_w, t.out_h);
    for v in 0..t.out_h {
        for u in 0..t.out_w {
            let (x, y) = t.to_frame(u as f64, v as f64);
            for (c, &f) in fill.iter().enumerate() {
                let plane = frame.plane(c);
                let s = bilinear(|px, py| f64::from(plane[py * w + px]), w, h, x, y)
                    .map_or(f, |s| s as f32);
                out.set(c, u, v, s);
            }
        }
    }
    Ok(out)
}

/// [`crop_and_resize`] with the per-channel frame mean as fill.
pub fn crop_with_mean_fill(frame: &Image, t: &CropTransform) -> Result<Image> {
    let fill = frame.channel_means();
    crop_and_resize(frame, t, &fill)
}

/// Resamples the source region of a scalar grid; outside samples take `fill`.
pub fn crop_grid(grid: &Grid<f64>, t: &CropTransform, fill: f64) -> Grid<f64> {
    let (w, h) = grid.shape();
    let data = grid.as_slice();
    Grid::from_fn(t.out_w, t.out_h, |u, v| {
        let (x, y) = t.to_frame(u as f64, v as f64);
        bilinear(|px, py| data[py * w + px], w, h, x, y).unwrap_or(fill)
    })
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Inverse of [`crop_and_resize`] for probability maps: resamples a
/// crop-space map onto a `frame_w × frame_h` grid. Pixels outside the source
/// box are 0; pixels straddling the box edge are weighted by their covered
/// fraction.
pub fn paste_back(
    mask_crop: &ProbabilityMap,
    t: &CropTransform,
    frame_w: usize,
    frame_h: usize,
) -> Result<ProbabilityMap> {
    if mask_crop.shape() != (t.out_w, t.out_h) {
        return Err(Error::shape((t.out_w, t.out_h), mask_crop.shape()));
    }
    let mut out = Grid::filled(frame_w, frame_h, 0.0);
    let (bx0, by0, bx1, by1) = t.source_box.corners();
    let xs = (bx0 + 0.5).floor().max(0.0) as usize;
    let ys = (by0 + 0.5).floor().max(0.0) as usize;
    let xe = ((bx1 + 0.5).ceil().max(0.0) as usize).min(frame_w);
    let ye = ((by1 + 0.5).ceil().max(0.0) as usize).min(frame_h);
    let crop = mask_crop.as_slice();
    let (cw, ch) = (t.out_w, t.out_h);
    for y in ys..ye {
        let cov_y = overlap(y as f64 - 0.5, y as f64 + 0.5, by0, by1);
        if cov_y <= 0.0 {
            continue;
        }
        for x in xs..xe {
            let cov_x = overlap(x as f64 - 0.5, x as f64 + 0.5, bx0, bx1);
            if cov_x <= 0.0 {
                continue;
            }
            let (u, v) = t.to_crop(x as f64, y as f64);
            let s = bilinear_clamped(|px, py| crop[py * cw + px], cw, ch, u, v);
            out.set(x, y, (s * cov_x * cov_y).clamp(0.0, 1.0));
        }
    }
    Ok(ProbabilityMap::from_grid_clamped(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn search_region_side_matches_formula() {
        let b = Box::new(50.0, 50.0, 20.0, 20.0).unwrap();
        let t = make_search_region(&b, 1.0, 257).unwrap();
        assert_eq!(t.source_box.w, 40.0);
        assert_eq!(t.scale(), (257.0 / 40.0, 257.0 / 40.0));

        // square of side s -> 2s
        let s = 13.5;
        let b = Box::new(0.0, 0.0, s, s).unwrap();
        assert!((search_region_side(&b, 1.0) - 2.0 * s).abs() < 1e-12);
    }

    #[test]
    fn branches_share_the_box_with_their_own_resolution() {
        let b = Box::new(80.0, 60.0, 30.0, 20.0).unwrap();
        let sal = make_search_region(&b, 1.0, 257).unwrap();
        let sim = make_search_region(&b, 2.0, 303).unwrap();
        assert_eq!((sal.out_w, sim.out_w), (257, 303));
        assert_eq!(sal.source_box.cx, sim.source_box.cx);
        assert!((sim.source_box.w - 2.0 * sal.source_box.w).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(Box::new(0.0, 0.0, 0.0, 3.0).is_err());
        let b = Box { cx: 1.0, cy: 1.0, w: -1.0, h: 2.0 };
        assert!(make_search_region(&b, 1.0, 10).is_err());
        let b = Box::new(1.0, 1.0, 2.0, 2.0).unwrap();
        assert!(make_search_region(&b, 0.5, 10).is_err());
        assert!(make_search_region(&b, 1.0, 0).is_err());
    }

    #[test]
    fn identity_crop_is_pixel_identical() {
        let img = Image::from_planar(2, 3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4]).unwrap();
        let t = CropTransform::identity(3, 2).unwrap();
        let out = crop_with_mean_fill(&img, &t).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crop_outside_frame_is_fill() {
        let img = Image::filled(3, 8, 8, 0.25);
        let t = CropTransform::new(Box::new(100.0, 100.0, 10.0, 10.0).unwrap(), 5, 5).unwrap();
        let out = crop_and_resize(&img, &t, &[0.1, 0.2, 0.3]).unwrap();
        for c in 0..3 {
            assert!(out.plane(c).iter().all(|&v| v == [0.1, 0.2, 0.3][c]));
        }
    }

    #[test]
    fn checkerboard_upscale_bilinear_weights() {
        // a b / b a with a = 1, b = 0; 2x upscale samples at -0.25, 0.25, 0.75, 1.25
        let img = Image::from_planar(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = CropTransform::new(CropTransform::identity(2, 2).unwrap().source_box, 4, 4).unwrap();
        let out = crop_and_resize(&img, &t, &[0.5]).unwrap();
        let w = [1.0, 0.75, 0.25, 0.0];
        for v in 0..4 {
            for u in 0..4 {
                // f(x, y) = x y + (1 - x)(1 - y) on clamped coordinates
                let (x, y) = (1.0 - w[u], 1.0 - w[v]);
                let expected = x * y + (1.0 - x) * (1.0 - y);
                assert!((f64::from(out.get(0, u, v)) - expected).abs() < 1e-6, "({u},{v})");
            }
        }
    }

    #[test]
    fn paste_constant_maps() {
        let t = CropTransform::new(Box::from_pixel_extents(3, 2, 8, 6), 7, 7).unwrap();
        let zero = ProbabilityMap::filled(7, 7, 0.0);
        let out = paste_back(&zero, &t, 12, 10).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));

        let one = ProbabilityMap::filled(7, 7, 1.0);
        let out = paste_back(&one, &t, 12, 10).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                let inside = (3..=8).contains(&x) && (2..=6).contains(&y);
                assert_eq!(*out.get(x, y), if inside { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }
    }

    #[test]
    fn paste_rejects_shape_mismatch() {
        let t = CropTransform::new(Box::new(5.0, 5.0, 4.0, 4.0).unwrap(), 8, 8).unwrap();
        assert!(paste_back(&ProbabilityMap::filled(7, 8, 0.0), &t, 10, 10).is_err());
    }

    fn gaussian_blob(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> Grid<f64> {
        Grid::from_fn(w, h, |x, y| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn crop_paste_round_trip_smooth_blob() {
        let m = gaussian_blob(96, 80, 47.0, 41.0, 9.0);
        let b = Box::from_pixel_extents(20, 14, 75, 69);
        let t = CropTransform::new(b, 33, 33).unwrap();
        let crop = ProbabilityMap::from_grid_clamped(crop_grid(&m, &t, 0.0));
        let back = paste_back(&crop, &t, 96, 80).unwrap();
        let mut max_err: f64 = 0.0;
        for y in 14..=69 {
            for x in 20..=75 {
                max_err = max_err.max((back.get(x, y) - m.get(x, y)).abs());
            }
        }
        assert!(max_err < 0.05, "max error {max_err}");
    }

    #[test]
    fn round_trip_preserves_mass_of_large_blobs() {
        let b = Box::new(40.0, 40.0, 40.0, 40.0).unwrap();
        let t = make_search_region(&b, 1.0, 65).unwrap();
        // disk covering roughly a third of the crop
        let m = Grid::from_fn(100, 100, |x, y| {
            let d2 = (x as f64 - 40.0).powi(2) + (y as f64 - 40.0).powi(2);
            if d2 <= 27.0f64.powi(2) { 1.0 } else { 0.0 }
        });
        let crop = ProbabilityMap::from_grid_clamped(crop_grid(&m, &t, 0.0));
        let crop_mass: f64 = crop.as_slice().iter().sum::<f64>() / (65.0 * 65.0);
        assert!(crop_mass >= 0.25);
        let back = paste_back(&crop, &t, 100, 100).unwrap();
        let before: f64 = m.as_slice().iter().sum();
        let after: f64 = back.as_slice().iter().sum();
        assert!(((after - before) / before).abs() < 0.10, "{before} vs {after}");
    }

    proptest! {
        #[test]
        fn transform_round_trip(
            cx in -500.0f64..500.0, cy in -500.0f64..500.0,
            w in 1.0f64..300.0, h in 1.0f64..300.0,
            cf in 1.0f64..4.0, out in 1usize..400,
            fu in 0.0f64..1.0, fv in 0.0f64..1.0,
        ) {
            let b = Box::new(cx, cy, w, h).unwrap();
            let t = make_search_region(&b, cf, out).unwrap();
            let (x0, y0, x1, y1) = t.source_box.corners();
            let (x, y) = (x0 + fu * (x1 - x0), y0 + fv * (y1 - y0));
            let (u, v) = t.to_crop(x, y);
            let (xr, yr) = t.to_frame(u, v);
            prop_assert!((xr - x).abs() < 1e-6 && (yr - y).abs() < 1e-6);
        }

        #[test]
        fn search_region_is_translation_equivariant(
            cx in -500.0f64..500.0, cy in -500.0f64..500.0,
            w in 1.0f64..300.0, h in 1.0f64..300.0,
            dx in -100.0f64..100.0, dy in -100.0f64..100.0,
        ) {
            let b = Box::new(cx, cy, w, h).unwrap();
            let t0 = make_search_region(&b, 2.0, 64).unwrap();
            let t1 = make_search_region(&b.translated(dx, dy), 2.0, 64).unwrap();
            prop_assert_eq!(t1.source_box.cx, t0.source_box.cx + dx);
            prop_assert_eq!(t1.source_box.cy, t0.source_box.cy + dy);
            prop_assert_eq!(t1.source_box.w, t0.source_box.w);
        }

        #[test]
        fn corner_round_trip(cx in -1e3f64..1e3, cy in -1e3f64..1e3, w in 0.01f64..1e3, h in 0.01f64..1e3) {
            let b = Box::new(cx, cy, w, h).unwrap();
            let (x0, y0, x1, y1) = b.corners();
            let r = Box::from_corners(x0, y0, x1, y1).unwrap();
            prop_assert!((r.cx - cx).abs() < 1e-9 && (r.cy - cy).abs() < 1e-9);
            prop_assert!((r.w - w).abs() < 1e-9 && (r.h - h).abs() < 1e-9);
        }
    }
}
