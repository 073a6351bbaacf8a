//! Named-layer helpers over [`Graph`] and [`ParamStore`]. A layer called
//! `p` owns parameters `p.weight` and `p.bias`.

use rand::Rng;

use super::{Graph, NodeId, ParamStore, Taps};

pub fn add_conv(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    ps.add_he(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
    ps.add_zeros(format!("{name}.bias"), &[cout]);
}

/// Output layer with small normal weights.
pub fn add_conv_small(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, std: f32, rng: &mut impl Rng) {
    ps.add_normal(format!("{name}.weight"), &[cout, cin, k, k], std, rng);
    ps.add_zeros(format!("{name}.bias"), &[cout]);
}

pub fn add_linear(ps: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) {
    ps.add_he(format!("{name}.weight"), &[fout, fin], fin, rng);
    ps.add_zeros(format!("{name}.bias"), &[fout]);
}

pub fn add_linear_small(ps: &mut ParamStore, name: &str, fin: usize, fout: usize, std: f32, rng: &mut impl Rng) {
    ps.add_normal(format!("{name}.weight"), &[fout, fin], std, rng);
    ps.add_zeros(format!("{name}.bias"), &[fout]);
}

pub fn conv(g: &mut Graph, x: NodeId, name: &str) -> NodeId {
    let w = g.param_named(&format!("{name}.weight"));
    let b = g.param_named(&format!("{name}.bias"));
    g.conv2d(x, w, Some(b))
}

pub fn conv_relu(g: &mut Graph, x: NodeId, name: &str) -> NodeId {
    let c = conv(g, x, name);
    g.relu(c)
}

pub fn linear(g: &mut Graph, x: NodeId, name: &str) -> NodeId {
    let w = g.param_named(&format!("{name}.weight"));
    let b = g.param_named(&format!("{name}.bias"));
    g.linear(x, w, Some(b))
}

/// Bilinear sampling taps pooling the image-space region
/// `[x, x+w) x [y, y+h)` into `bins x bins` cells of a `feat_h x feat_w`
/// map with the given stride. Each cell averages `samples²` points.
pub fn roi_align_taps(
    region: (f32, f32, f32, f32),
    stride: f32,
    feat_h: usize,
    feat_w: usize,
    bins: usize,
    samples: usize,
) -> Vec<Taps> {
    let (x, y, w, h) = region;
    let fx = x / stride - 0.5;
    let fy = y / stride - 0.5;
    let bw = w / stride / bins as f32;
    let bh = h / stride / bins as f32;
    let weight = 1.0 / (samples * samples) as f32;
    let clamp = |v: f32, n: usize| v.clamp(0.0, (n - 1) as f32);
    let mut out = Vec::with_capacity(bins * bins);
    for py in 0..bins {
        for px in 0..bins {
            let mut taps = Vec::with_capacity(4 * samples * samples);
            for sy in 0..samples {
                let yy = clamp(fy + (py as f32 + (sy as f32 + 0.5) / samples as f32) * bh, feat_h);
                let y0 = yy.floor() as usize;
                let y1 = (y0 + 1).min(feat_h - 1);
                let ly = yy - y0 as f32;
                for sx in 0..samples {
                    let xx = clamp(fx + (px as f32 + (sx as f32 + 0.5) / samples as f32) * bw, feat_w);
                    let x0 = xx.floor() as usize;
                    let x1 = (x0 + 1).min(feat_w - 1);
                    let lx = xx - x0 as f32;
                    for (yi, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                        for (xi, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                            let wt = wy * wx * weight;
                            if wt > 0.0 {
                                taps.push(((yi * feat_w + xi) as u32, wt));
                            }
                        }
                    }
                }
            }
            out.push(taps);
        }
    }
    out
}
