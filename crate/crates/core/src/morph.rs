//! Binary morphology and connected components on row-major grids.
//!
//! Structuring elements are discrete disks `dx² + dy² <= r²`. Pixels outside
//! the grid count as background.

/// A labelled 8-connected component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    pub area: usize,
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

/// 8-connected labelling. Returns per-pixel labels (0 = background, `1..=n`
/// in raster order of first pixel) and the component list.
pub fn label_components(fg: &[bool], h: usize, w: usize) -> (Vec<u32>, Vec<Component>) {
    assert_eq!(fg.len(), h * w, "mask size mismatch");
    let mut labels = vec![0u32; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let label = comps.len() as u32 + 1;
        let mut c = Component {
            label,
            area: 0,
            min_x: usize::MAX,
            min_y: usize::MAX,
            max_x: 0,
            max_y: 0,
        };
        labels[start] = label;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            c.area += 1;
            c.min_x = c.min_x.min(x);
            c.max_x = c.max_x.max(x);
            c.min_y = c.min_y.min(y);
            c.max_y = c.max_y.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if fg[q] && labels[q] == 0 {
                        labels[q] = label;
                        stack.push(q);
                    }
                }
            }
        }
        comps.push(c);
    }
    (labels, comps)
}

fn disk(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

pub fn erode(fg: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return fg.to_vec();
    }
    let se = disk(radius);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !fg[y * w + x] {
                continue;
            }
            out[y * w + x] = se.iter().all(|&(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny >= 0
                    && nx >= 0
                    && ny < h as i64
                    && nx < w as i64
                    && fg[ny as usize * w + nx as usize]
            });
        }
    }
    out
}

pub fn dilate(fg: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return fg.to_vec();
    }
    let se = disk(radius);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !fg[y * w + x] {
                continue;
            }
            for &(dy, dx) in &se {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

pub fn open(fg: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    dilate(&erode(fg, h, w, radius), h, w, radius)
}

pub fn close(fg: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    erode(&dilate(fg, h, w, radius), h, w, radius)
}

/// Drops components smaller than `min_area` pixels.
pub fn remove_small_components(fg: &[bool], h: usize, w: usize, min_area: usize) -> Vec<bool> {
    let (labels, comps) = label_components(fg, h, w);
    labels
        .iter()
        .map(|&l| l != 0 && comps[l as usize - 1].area >= min_area)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Vec<bool> {
        (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                y >= y0 && y < y0 + side && x >= x0 && x < x0 + side
            })
            .collect()
    }

    #[test]
    fn five_square_erodes_to_three_core() {
        let fg = square(9, 9, 2, 2, 5);
        assert_eq!(erode(&fg, 9, 9, 1), square(9, 9, 3, 3, 3));
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let mut fg = vec![false; 16];
        fg[0] = true;
        fg[5] = true;
        fg[15] = true;
        let (labels, comps) = label_components(&fg, 4, 4);
        assert_eq!(comps.len(), 2);
        assert_eq!(labels[0], labels[5]);
        assert_eq!(comps[0].area, 2);
        assert_eq!((comps[1].min_x, comps[1].min_y), (3, 3));
    }

    #[test]
    fn small_components_are_removed() {
        let mut fg = square(20, 20, 1, 1, 3);
        for (p, v) in square(20, 20, 10, 10, 6).into_iter().enumerate() {
            fg[p] |= v;
        }
        let out = remove_small_components(&fg, 20, 20, 10);
        assert_eq!(out, square(20, 20, 10, 10, 6));
    }

    proptest! {
        #[test]
        fn erosion_shrinks_dilation_grows(bits in proptest::collection::vec(any::<bool>(), 64), r in 0usize..3) {
            let e = erode(&bits, 8, 8, r);
            let d = dilate(&bits, 8, 8, r);
            for i in 0..64 {
                prop_assert!(!e[i] || bits[i]);
                prop_assert!(!bits[i] || d[i]);
            }
            let o = open(&bits, 8, 8, r);
            for i in 0..64 {
                prop_assert!(!o[i] || bits[i]);
            }
        }
    }
}
