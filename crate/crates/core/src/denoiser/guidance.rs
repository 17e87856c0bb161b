//! Multi-conditional guidance over a text and a joint structural condition.
//!
//! ```text
//! ẽ = e(∅, c_J) + s_T·(e(c_T, c_J) − e(∅, c_J)) + s_J·(e(c_T, c_J) − e(c_T, ∅))
//! ```
//!
//! The sum is evaluated in coefficient form,
//! `(1 − s_T)·e(∅,c_J) + (s_T + s_J)·e(c_T,c_J) − s_J·e(c_T,∅)`, which is
//! algebraically identical and collapses bit-exactly to a single evaluation
//! at `(s_T, s_J) ∈ {(1, 0), (0, 0)}`.

use super::condition::{Condition, GuidanceConfig};
use crate::error::Result;
use crate::latent::LatentGrid;

/// The three condition variants, in evaluation order:
/// `(∅, c_J)`, `(c_T, c_J)`, `(c_T, ∅)`.
pub fn guidance_variants(cond_full: &Condition) -> [Condition; 3] {
    [
        cond_full.without_text(),
        cond_full.clone(),
        cond_full.without_structural(),
    ]
}

fn combine_into(
    out: &mut [f64],
    null_text: &[f64],
    full: &[f64],
    null_joint: &[f64],
    cfg: &GuidanceConfig,
) {
    let a = 1.0 - cfg.s_text;
    let b = cfg.s_text + cfg.s_joint;
    let c = cfg.s_joint;
    for (((o, &u), &f), &j) in out.iter_mut().zip(null_text).zip(full).zip(null_joint) {
        *o = a * u + b * f - c * j;
    }
}

pub fn combine(
    null_text: &LatentGrid,
    full: &LatentGrid,
    null_joint: &LatentGrid,
    cfg: &GuidanceConfig,
) -> Result<LatentGrid> {
    full.ensure_same_shape(null_text, "guidance")?;
    full.ensure_same_shape(null_joint, "guidance")?;
    let mut out = full.clone();
    combine_into(
        out.data_mut(),
        null_text.data(),
        full.data(),
        null_joint.data(),
        cfg,
    );
    Ok(out)
}

/// Guided ε from exactly three evaluations of `eps_fn`.
pub fn guided_eps<F>(
    cond_full: &Condition,
    cfg: &GuidanceConfig,
    mut eps_fn: F,
) -> Result<LatentGrid>
where
    F: FnMut(&Condition) -> Result<LatentGrid>,
{
    let [v_null_text, v_full, v_null_joint] = guidance_variants(cond_full);
    let e_null_text = eps_fn(&v_null_text)?;
    let e_full = eps_fn(&v_full)?;
    let e_null_joint = eps_fn(&v_null_joint)?;
    combine(&e_null_text, &e_full, &e_null_joint, cfg)
}

/// Pair version: `eps_fn` receives the variant for each frame of the pair.
pub fn guided_pair_eps<F>(
    conds: [&Condition; 2],
    cfg: &GuidanceConfig,
    mut eps_fn: F,
) -> Result<[LatentGrid; 2]>
where
    F: FnMut([&Condition; 2]) -> Result<[LatentGrid; 2]>,
{
    let [a0, a1, a2] = guidance_variants(conds[0]);
    let [b0, b1, b2] = guidance_variants(conds[1]);
    let [u0, u1] = eps_fn([&a0, &b0])?;
    let [f0, f1] = eps_fn([&a1, &b1])?;
    let [j0, j1] = eps_fn([&a2, &b2])?;
    Ok([combine(&u0, &f0, &j0, cfg)?, combine(&u1, &f1, &j1, cfg)?])
}
