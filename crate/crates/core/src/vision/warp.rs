use super::{FlowField, GrayImage};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;

/// Bilinear sample of a plane; `None` outside `[0, w-1] x [0, h-1]`.
fn sample(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
    let bottom = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
    Some((1.0 - fy) * top + fy * bottom)
}

fn warp_planes(
    planes: &[&[f64]],
    w: usize,
    h: usize,
    flow: &FlowField,
) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut out = vec![vec![0.0; w * h]; planes.len()];
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (sx, sy) = (x as f64 + flow.u[i], y as f64 + flow.v[i]);
            for (o, p) in out.iter_mut().zip(planes) {
                if let Some(v) = sample(p, w, h, sx, sy) {
                    o[i] = v;
                    mask[i] = true;
                }
            }
        }
    }
    (out, mask)
}

fn check(w: usize, h: usize, flow: &FlowField) -> Result<()> {
    if flow.width != w || flow.height != h {
        return Err(Error::contract(format!(
            "flow {}x{} does not match image {w}x{h}",
            flow.width, flow.height
        )));
    }
    Ok(())
}

/// Backward warp of a multi-channel frame: `out(p) = frame(p + flow(p))`.
/// Samples landing outside the image are zero and marked invalid.
pub fn warp(frame: &LatentGrid, flow: &FlowField) -> Result<(LatentGrid, Vec<bool>)> {
    let (c, h, w) = frame.shape();
    check(w, h, flow)?;
    let planes: Vec<&[f64]> = (0..c).map(|ch| frame.plane(ch)).collect();
    let (out, mask) = warp_planes(&planes, w, h, flow);
    let data = out.concat();
    Ok((LatentGrid::from_vec(c, h, w, data)?, mask))
}

pub fn warp_frame(frame: &LatentGrid, flow: &FlowField) -> Result<(LatentGrid, Vec<bool>)> {
    warp(frame, flow)
}

pub fn warp_gray(img: &GrayImage, flow: &FlowField) -> Result<(GrayImage, Vec<bool>)> {
    check(img.width(), img.height(), flow)?;
    let (mut out, mask) = warp_planes(&[img.data()], img.width(), img.height(), flow);
    Ok((
        GrayImage::new(img.width(), img.height(), out.remove(0))?,
        mask,
    ))
}

/// Warps the flow field `field` itself along `flow`, returning the sampled
/// vectors and validity.
pub(crate) fn warp_flow(field: &FlowField, flow: &FlowField) -> (FlowField, Vec<bool>) {
    let (mut out, mask) = warp_planes(&[&field.u, &field.v], field.width, field.height, flow);
    let v = out.pop().expect("two planes");
    let u = out.pop().expect("two planes");
    (
        FlowField {
            width: field.width,
            height: field.height,
            u,
            v,
        },
        mask,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_identity() {
        let img = GrayImage::from_fn(7, 5, |x, y| ((x * 3 + y * 5) % 11) as f64 / 10.0);
        let (out, mask) = warp_gray(&img, &FlowField::zeros(7, 5)).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn unit_shift_moves_columns() {
        let img = GrayImage::from_fn(6, 4, |x, _| x as f64 / 10.0);
        let (out, mask) = warp_gray(&img, &FlowField::constant(6, 4, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.at(x, y), img.at(x + 1, y));
                assert!(mask[y * 6 + x]);
            }
            assert!(!mask[y * 6 + 5]);
        }
    }

    #[test]
    fn half_shift_on_ramp_is_exact() {
        let img = GrayImage::from_fn(9, 3, |x, _| 0.1 * x as f64);
        let (out, mask) = warp_gray(&img, &FlowField::constant(9, 3, 0.5, 0.0)).unwrap();
        for x in 0..8 {
            assert!((out.at(x, 1) - 0.1 * (x as f64 + 0.5)).abs() < 1e-12);
            assert!(mask[9 + x]);
        }
    }

    #[test]
    fn mismatched_flow_is_rejected() {
        let img = GrayImage::constant(4, 4, 0.0);
        assert!(warp_gray(&img, &FlowField::zeros(4, 5)).is_err());
    }
}
