//! Contrast-limited adaptive histogram equalisation on the luminance channel.

use crate::error::{Error, Result};
use crate::tensornet::Tensor;

const BINS: usize = 256;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Per-tile intensity map; `None` when the tile holds a single grey level,
/// which is left untouched.
type TileMap = Option<[f32; BINS]>;

fn tile_map(hist: &[f64; BINS], pixels: f64, clip_limit: f64) -> TileMap {
    if hist.iter().filter(|&&c| c > 0.0).count() <= 1 {
        return None;
    }
    let mut h = *hist;
    if clip_limit.is_finite() {
        let limit = (clip_limit * pixels / BINS as f64).max(1.0);
        let mut excess = 0.0;
        for c in h.iter_mut() {
            if *c > limit {
                excess += *c - limit;
                *c = limit;
            }
        }
        let add = excess / BINS as f64;
        h.iter_mut().for_each(|c| *c += add);
    }
    let mut cdf = [0f64; BINS];
    let mut run = 0.0;
    for (c, v) in cdf.iter_mut().zip(h.iter()) {
        run += v;
        *c = run;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0.0).unwrap_or(0.0);
    let total = cdf[BINS - 1];
    let mut out = [0f32; BINS];
    for (o, &c) in out.iter_mut().zip(cdf.iter()) {
        *o = (((c - cdf_min) / (total - cdf_min)).clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0;
    }
    Some(out)
}

fn bounds(len: usize, tiles: usize, i: usize) -> (usize, usize) {
    (i * len / tiles, (i + 1) * len / tiles)
}

/// Returns the contrast-equalised image. `clip_limit` is relative to a flat
/// histogram (`f64::INFINITY` disables clipping); `tiles = (rows, cols)`.
/// Chrominance (`B - Y`, `R - Y`) is preserved.
pub fn clahe_baseline(image: &Tensor<f32>, clip_limit: f64, tiles: (usize, usize)) -> Result<Tensor<f32>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(Error::Shape {
                context: "CLAHE input",
                expected: vec![3, 0, 0],
                actual: image.shape().to_vec(),
            })
        }
    };
    let (ty, tx) = tiles;
    if ty == 0 || tx == 0 || ty > h || tx > w {
        return Err(Error::invalid(format!(
            "tile grid {ty}x{tx} does not fit a {h}x{w} image"
        )));
    }
    if !(clip_limit > 0.0) {
        return Err(Error::invalid("clip limit must be positive"));
    }
    let plane = h * w;
    let px = image.data();
    let luma: Vec<f32> = (0..plane)
        .map(|i| (0..3).map(|c| LUMA[c] * px[c * plane + i]).sum::<f32>().clamp(0.0, 1.0))
        .collect();
    let bin = |v: f32| (v * 255.0).round() as usize;

    let mut maps: Vec<TileMap> = Vec::with_capacity(ty * tx);
    for r in 0..ty {
        let (y0, y1) = bounds(h, ty, r);
        for c in 0..tx {
            let (x0, x1) = bounds(w, tx, c);
            let mut hist = [0f64; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin(luma[y * w + x])] += 1.0;
                }
            }
            maps.push(tile_map(&hist, ((y1 - y0) * (x1 - x0)) as f64, clip_limit));
        }
    }

    // tile-centre coordinate and interpolation weight along one axis
    let axis = |p: usize, len: usize, n: usize| -> (usize, usize, f32) {
        let centre = |i: usize| {
            let (a, b) = bounds(len, n, i);
            (a + b) as f32 / 2.0 - 0.5
        };
        let pf = p as f32;
        if n == 1 || pf <= centre(0) {
            return (0, 0, 0.0);
        }
        if pf >= centre(n - 1) {
            return (n - 1, n - 1, 0.0);
        }
        let mut i = 0;
        while centre(i + 1) < pf {
            i += 1;
        }
        (i, i + 1, (pf - centre(i)) / (centre(i + 1) - centre(i)))
    };

    let mut out = px.to_vec();
    for y in 0..h {
        let (r0, r1, fy) = axis(y, h, ty);
        for x in 0..w {
            let (c0, c1, fx) = axis(x, w, tx);
            let corners = [
                (r0 * tx + c0, (1.0 - fy) * (1.0 - fx)),
                (r0 * tx + c1, (1.0 - fy) * fx),
                (r1 * tx + c0, fy * (1.0 - fx)),
                (r1 * tx + c1, fy * fx),
            ];
            let i = y * w + x;
            let yl = luma[i];
            if corners.iter().all(|&(t, _)| maps[t].is_none()) {
                continue;
            }
            let b = bin(yl);
            let mapped: f32 = corners
                .iter()
                .map(|&(t, wt)| wt * maps[t].as_ref().map_or(yl, |m| m[b]))
                .sum();
            let cr = px[i] - yl;
            let cb = px[2 * plane + i] - yl;
            let r = mapped + cr;
            let bl = mapped + cb;
            let g = (mapped - LUMA[0] * r - LUMA[2] * bl) / LUMA[1];
            out[i] = r.clamp(0.0, 1.0);
            out[plane + i] = g.clamp(0.0, 1.0);
            out[2 * plane + i] = bl.clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}
