//! Deterministic hole filling: copy from the nearest background cell found
//! along the eight compass directions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Mpi;
use crate::image::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfillConfig {
    /// Number of passes.
    pub iterations: usize,
    /// Search reach in pixels per pass.
    pub radius: usize,
}

impl Default for InfillConfig {
    fn default() -> Self {
        Self { iterations: 3, radius: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfillResult {
    pub mpi: Mpi,
    /// Hole pixels no pass could reach; they stay transparent.
    pub unfilled: Mask,
}

const DIRS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

/// Farthest plane with nonzero alpha at a pixel.
fn farthest(m: &Mpi, x: usize, y: usize) -> Option<usize> {
    (0..m.planes()).rev().find(|&z| m.alpha[m.cell(x, y, z)] > 0.0)
}

/// Fills every pixel of `holes`. Each pass looks, per hole pixel, for the
/// first non-hole pixel in each direction and takes the farthest-plane cell
/// among them, provided it is no nearer than what the hole already holds;
/// ties go to the shorter distance. Pixels filled in a pass become sources
/// for the next one.
pub fn infill(m: &Mpi, holes: &Mask, cfg: &InfillConfig) -> InfillResult {
    let (w, h) = (m.width, m.height);
    let mut out = m.clone();
    let mut hole = holes.clone();
    for _ in 0..cfg.iterations {
        if hole.count() == 0 {
            break;
        }
        let picks: Vec<Option<(usize, usize)>> = (0..w * h)
            .into_par_iter()
            .map(|p| {
                if !hole.data[p] {
                    return None;
                }
                let (x, y) = (p % w, p / w);
                let floor = farthest(&out, x, y).unwrap_or(0);
                let mut best: Option<(usize, usize, usize)> = None;
                for (dx, dy) in DIRS {
                    for step in 1..=cfg.radius as i64 {
                        let (xx, yy) = (x as i64 + dx * step, y as i64 + dy * step);
                        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                            break;
                        }
                        let (xx, yy) = (xx as usize, yy as usize);
                        if hole.get(xx, yy) {
                            continue;
                        }
                        if let Some(z) = farthest(&out, xx, yy).filter(|&z| z >= floor) {
                            let src = out.cell(xx, yy, z);
                            // squared euclidean reach
                            let d = (step * step * (dx * dx + dy * dy)) as usize;
                            if best.is_none_or(|(bz, bd, _)| z > bz || (z == bz && d < bd)) {
                                best = Some((z, d, src));
                            }
                        }
                        break;
                    }
                }
                best.map(|(z, _, src)| (z, src))
            })
            .collect();
        let snapshot = out.clone();
        for (p, pick) in picks.into_iter().enumerate() {
            let Some((z, src)) = pick else { continue };
            let i = z * w * h + p;
            out.alpha[i] = snapshot.alpha[src];
            out.depth[i] = snapshot.depth[src];
            out.color[3 * i..3 * i + 3].copy_from_slice(&snapshot.color[3 * src..3 * src + 3]);
            hole.data[p] = false;
        }
    }
    InfillResult { mpi: out, unfilled: hole }
}
