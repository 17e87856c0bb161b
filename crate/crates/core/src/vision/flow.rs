use super::GrayImage;
use crate::error::{Error, Result};
use crate::latent::LatentGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    /// Smoothness weight added to the gradient energy in the update denominator.
    pub lambda: f64,
    pub iters: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            iters: 100,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "flow lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.iters == 0 {
            return Err(Error::config("flow iterations must be positive"));
        }
        Ok(())
    }
}

/// Dense displacement field in pixels. For a flow computed from `a` to `b`,
/// `a(p) ≈ b(p + flow(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|&x| x == 0.0)
    }

    /// Two-channel `(dx, dy)` grid.
    pub fn to_latent(&self) -> LatentGrid {
        let mut data = self.u.clone();
        data.extend_from_slice(&self.v);
        LatentGrid::from_vec(2, self.height, self.width, data).expect("valid dims")
    }

    pub fn from_latent(g: &LatentGrid) -> Result<Self> {
        if g.channels() != 2 {
            return Err(Error::contract("flow field needs exactly two channels"));
        }
        Ok(Self {
            width: g.width(),
            height: g.height(),
            u: g.plane(0).to_vec(),
            v: g.plane(1).to_vec(),
        })
    }
}

fn neighbourhood_mean(f: &[f64], w: usize, h: usize, out: &mut [f64]) {
    let at = |x: isize, y: isize| {
        f[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let edge = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1);
            let corner = at(x - 1, y - 1) + at(x + 1, y - 1) + at(x - 1, y + 1) + at(x + 1, y + 1);
            out[y as usize * w + x as usize] = edge / 6.0 + corner / 12.0;
        }
    }
}

/// Horn–Schunck flow from `a` to `b` with zero initialization and a fixed
/// number of Jacobi iterations.
pub fn optical_flow(a: &GrayImage, b: &GrayImage, params: &FlowParams) -> Result<FlowField> {
    if !a.same_dims(b) {
        return Err(Error::contract(format!(
            "flow inputs differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    params
        .validate()
        .map_err(|e| Error::contract(e.to_string()))?;
    let (w, h) = (a.width(), a.height());
    let n = w * h;
    let mean: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| 0.5 * (p + q))
        .collect();
    let at = |x: isize, y: isize| {
        mean[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            ix[i] = 0.5 * (at(x + 1, y) - at(x - 1, y));
            iy[i] = 0.5 * (at(x, y + 1) - at(x, y - 1));
        }
    }
    let it: Vec<f64> = b.data().iter().zip(a.data()).map(|(q, p)| q - p).collect();

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    if it.iter().all(|&d| d == 0.0) {
        return Ok(FlowField {
            width: w,
            height: h,
            u,
            v,
        });
    }
    let mut ub = vec![0.0; n];
    let mut vb = vec![0.0; n];
    for _ in 0..params.iters {
        neighbourhood_mean(&u, w, h, &mut ub);
        neighbourhood_mean(&v, w, h, &mut vb);
        for i in 0..n {
            let r = (ix[i] * ub[i] + iy[i] * vb[i] + it[i])
                / (params.lambda + ix[i] * ix[i] + iy[i] * iy[i]);
            u[i] = ub[i] - ix[i] * r;
            v[i] = vb[i] - iy[i] * r;
        }
    }
    let limit = w.max(h) as f64;
    for x in u.iter_mut().chain(v.iter_mut()) {
        *x = x.clamp(-limit, limit);
    }
    Ok(FlowField {
        width: w,
        height: h,
        u,
        v,
    })
}
