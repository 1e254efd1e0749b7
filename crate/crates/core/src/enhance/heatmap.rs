use crate::error::{Error, Result};
use crate::tensornet::Tensor;

/// Perturbation heat map of one (or the mean of several) image pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Per-pixel normalised magnitude in `[0, 1]`, row-major `H x W`.
    pub magnitude: Vec<f32>,
}

impl Heatmap {
    /// Red-to-blue colour map: red = m, green = 0, blue = 1 - m. CHW.
    pub fn colour(&self) -> Tensor<f32> {
        let plane = self.height * self.width;
        let mut data = vec![0f32; 3 * plane];
        for (i, &m) in self.magnitude.iter().enumerate() {
            data[i] = m;
            data[2 * plane + i] = 1.0 - m;
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("heat map shape")
    }

    /// Blends the colour map over `base` with heat-map weight `alpha`.
    pub fn overlay(&self, base: &Tensor<f32>, alpha: f32) -> Result<Tensor<f32>> {
        let colour = self.colour();
        if base.shape() != colour.shape() {
            return Err(Error::Shape {
                context: "heat map overlay",
                expected: colour.shape().to_vec(),
                actual: base.shape().to_vec(),
            });
        }
        let data = colour
            .data()
            .iter()
            .zip(base.data())
            .map(|(&h, &b)| (alpha * h + (1.0 - alpha) * b).clamp(0.0, 1.0))
            .collect();
        Tensor::new(colour.shape().to_vec(), data)
    }
}

fn chw(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape {
            context: "heat map image",
            expected: vec![3, 0, 0],
            actual: t.shape().to_vec(),
        }),
    }
}

/// Squared perturbation summed over channels, box-smoothed with a
/// `kernel x kernel` window (zero padded).
fn smoothed_energy(original: &Tensor<f32>, enhanced: &Tensor<f32>, kernel: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = chw(original)?;
    if enhanced.shape() != original.shape() {
        return Err(Error::Shape {
            context: "heat map pair",
            expected: original.shape().to_vec(),
            actual: enhanced.shape().to_vec(),
        });
    }
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::invalid(format!(
            "smoothing kernel must be odd and positive, got {kernel}"
        )));
    }
    let plane = h * w;
    let mut energy = vec![0f64; plane];
    for ch in 0..c {
        for i in 0..plane {
            let d = enhanced.data()[ch * plane + i] as f64 - original.data()[ch * plane + i] as f64;
            energy[i] += d * d;
        }
    }
    let r = (kernel / 2) as isize;
    let area = (kernel * kernel) as f64;
    let mut out = vec![0f64; plane];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    s += energy[yy as usize * w + xx as usize];
                }
            }
            out[y as usize * w + x as usize] = s / area;
        }
    }
    Ok((h, w, out))
}

fn min_max(v: &[f64]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| ((x - lo) / (hi - lo)) as f32).collect()
}

/// Heat map of where `enhanced` differs from `original`. A constant
/// perturbation (including none at all) yields an all-zero magnitude.
pub fn make_heatmap(original: &Tensor<f32>, enhanced: &Tensor<f32>, kernel: usize) -> Result<Heatmap> {
    let (height, width, e) = smoothed_energy(original, enhanced, kernel)?;
    Ok(Heatmap {
        height,
        width,
        magnitude: min_max(&e),
    })
}

/// Pixel-wise mean of the per-pair normalised maps.
pub fn average_heatmap(pairs: &[(Tensor<f32>, Tensor<f32>)], kernel: usize) -> Result<Heatmap> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::invalid("cannot average zero heat maps"));
    };
    let (_, height, width) = chw(first)?;
    let mut acc = vec![0f64; height * width];
    for (o, e) in pairs {
        if o.shape() != first.shape() {
            return Err(Error::Shape {
                context: "heat map average",
                expected: first.shape().to_vec(),
                actual: o.shape().to_vec(),
            });
        }
        let m = make_heatmap(o, e, kernel)?;
        for (a, v) in acc.iter_mut().zip(&m.magnitude) {
            *a += *v as f64;
        }
    }
    let n = pairs.len() as f64;
    Ok(Heatmap {
        height,
        width,
        magnitude: acc.into_iter().map(|a| (a / n) as f32).collect(),
    })
}
