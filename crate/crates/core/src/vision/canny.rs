use super::GrayImage;
use crate::error::{Error, Result};
use crate::latent::LatentGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            low: 0.1,
            high: 0.3,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "canny sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(0.0 < self.low && self.low < self.high && self.high < 1.0) {
            return Err(Error::config(format!(
                "canny thresholds must satisfy 0 < low < high < 1, got low={} high={}",
                self.low, self.high
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        (3.0 * self.sigma).ceil() as usize
    }
}

/// Binary edge map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn to_latent(&self) -> LatentGrid {
        LatentGrid::from_vec(
            1,
            self.height,
            self.width,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("valid dims")
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable blur, horizontal pass first, with border replication.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = gaussian_kernel(sigma, radius);
    let (w, h) = (img.width(), img.height());
    let r = radius as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * img.at_clamped(x as isize + k as isize - r, y as isize);
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Sobel gradients `(gx, gy)`: central differences smoothed with `[1 2 1]`.
pub fn sobel(values: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| -> f64 {
        let xx = x.clamp(0, w as isize - 1) as usize;
        let yy = y.clamp(0, h as isize - 1) as usize;
        values[yy * w + xx]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = |yy: isize| at(x + 1, yy) - at(x - 1, yy);
            let dy = |xx: isize| at(xx, y + 1) - at(xx, y - 1);
            let i = y as usize * w + x as usize;
            gx[i] = dx(y - 1) + 2.0 * dx(y) + dx(y + 1);
            gy[i] = dy(x - 1) + 2.0 * dy(x) + dy(x + 1);
        }
    }
    (gx, gy)
}

/// Magnitudes are snapped to this grid so that rounding noise cannot break
/// ties between mirror-symmetric neighbours.
pub const MAGNITUDE_QUANTUM: f64 = 1e-9;

fn quantize(m: f64) -> f64 {
    (m / MAGNITUDE_QUANTUM).round() * MAGNITUDE_QUANTUM
}

/// Canny edges: blur, Sobel, 4-sector non-maximum suppression and
/// 8-connected hysteresis. The outermost pixel ring is never an edge.
pub fn canny(img: &GrayImage, params: &CannyParams) -> Result<EdgeMap> {
    params
        .validate()
        .map_err(|e| Error::contract(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    let span = 2 * params.radius() + 1;
    if w < span || h < span {
        return Err(Error::contract(format!(
            "image {w}x{h} is smaller than the {span}x{span} blur kernel"
        )));
    }
    let blurred = gaussian_blur(img, params.sigma);
    let (gx, gy) = sobel(&blurred, w, h);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| quantize(a.hypot(*b)))
        .collect();

    let mut thin = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // (behind, ahead) neighbours along the gradient direction
            let (b, a) = if !(22.5..157.5).contains(&angle) {
                (i - 1, i + 1)
            } else if angle < 67.5 {
                (i - w - 1, i + w + 1)
            } else if angle < 112.5 {
                (i - w, i + w)
            } else {
                (i - w + 1, i + w - 1)
            };
            // strict on one side so plateaus of equal magnitude stay one pixel wide
            if m > mag[b] && m >= mag[a] {
                thin[i] = m;
            }
        }
    }

    let mut out = vec![0u8; w * h];
    let mut stack = Vec::new();
    for i in 0..w * h {
        if thin[i] >= params.high && out[i] == 0 {
            out[i] = 1;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (jx, jy) = ((j % w) as isize, (j / w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (jx + dx, jy + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let k = ny as usize * w + nx as usize;
                        if out[k] == 0 && thin[k] >= params.low {
                            out[k] = 1;
                            stack.push(k);
                        }
                    }
                }
            }
        }
    }
    Ok(EdgeMap {
        width: w,
        height: h,
        data: out,
    })
}
