use super::{BoundingBox, Raster};
use crate::error::{Error, Result};

/// Integer pixel region `(x0, y0, w, h)` covering a box: floor of the start,
/// ceil of the end.
pub(crate) fn pixel_region(b: &BoundingBox) -> (usize, usize, usize, usize) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = b.x2().ceil().max(0.0) as usize;
    let y1 = b.y2().ceil().max(0.0) as usize;
    (x0, y0, x1.saturating_sub(x0).max(1), y1.saturating_sub(y0).max(1))
}

/// Copies the pixels under `b` into a new raster.
pub fn crop_box_region(image: &Raster, b: &BoundingBox) -> Result<Raster> {
    b.check_within(image.width, image.height)?;
    let (x0, y0, w, h) = pixel_region(b);
    let mut data = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        data.extend_from_slice(&image.data[y * image.width + x0..y * image.width + x0 + w]);
    }
    Raster::new(h, w, data)
}

/// Source coordinate of output index `i` under corner-aligned sampling.
#[inline]
fn source_coord(i: usize, n_src: usize, n_dst: usize) -> f64 {
    if n_dst <= 1 {
        (n_src as f64 - 1.0) * 0.5
    } else {
        (i * (n_src - 1)) as f64 / (n_dst - 1) as f64
    }
}

/// Bilinear resize with corner alignment: output corners sample the source
/// corners exactly, and a same-size resize is a bit-identical copy.
pub fn resize_bilinear(src: &Raster, out_h: usize, out_w: usize) -> Raster {
    let cols: Vec<(usize, usize, f32)> = (0..out_w)
        .map(|i| {
            let s = source_coord(i, src.width, out_w);
            let i0 = (s.floor() as usize).min(src.width - 1);
            let i1 = (i0 + 1).min(src.width - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let s = source_coord(oy, src.height, out_h);
        let y0 = (s.floor() as usize).min(src.height - 1);
        let y1 = (y0 + 1).min(src.height - 1);
        let fy = (s - y0 as f64) as f32;
        let r0 = &src.data[y0 * src.width..(y0 + 1) * src.width];
        let r1 = &src.data[y1 * src.width..(y1 + 1) * src.width];
        for &(x0, x1, fx) in &cols {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            data.push(top + (bot - top) * fy);
        }
    }
    Raster {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Crops `b` from `image` and resamples it to a `target x target` patch.
///
/// Callers crop the same box from every band of a sample.
pub fn crop_and_resize(image: &Raster, b: &BoundingBox, target: usize) -> Result<Raster> {
    if target == 0 {
        return Err(Error::config("target", "must be >= 1"));
    }
    let region = crop_box_region(image, b)?;
    Ok(resize_bilinear(&region, target, target))
}

/// Nearest-neighbour resize of a label grid, using the same corner-aligned
/// coordinate mapping as [`resize_bilinear`].
pub fn resize_labels_nearest(
    labels: &[u8],
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<u8> {
    let cols: Vec<usize> = (0..out_w)
        .map(|i| (source_coord(i, src_w, out_w).round() as usize).min(src_w - 1))
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = (source_coord(oy, src_h, out_h).round() as usize).min(src_h - 1);
        let row = &labels[sy * src_w..(sy + 1) * src_w];
        out.extend(cols.iter().map(|&sx| row[sx]));
    }
    out
}
