//! Synthetic short-axis cardiac slices with known labels.
//!
//! Geometry per sample: a disk (LV) inside an annulus (myocardium) and a
//! crescent (RV) formed by an offset disk minus the epicardial disk, so the
//! crescent abuts the annulus. Centre, radii, wall thickness and the
//! direction of the RV are drawn per seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Provenance, SliceSample};
use crate::metrics::{SegmentationMask, BACKGROUND, LMYO, LV, RV};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Fractions are relative to the shorter image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub center_jitter: f64,
    pub lv_radius: (f64, f64),
    pub wall: (f64, f64),
    /// RV disk radius as a multiple of the epicardial radius.
    pub rv_radius: (f64, f64),
    /// Offset of the RV disk centre as a multiple of the epicardial radius.
    pub rv_offset: (f64, f64),
    /// Mean intensity of background, RV, myocardium, LV.
    pub intensities: [f64; 4],
    pub noise: f64,
    /// Pixels kept clear at the frame border.
    pub margin: usize,
    pub max_attempts: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            center_jitter: 0.06,
            lv_radius: (0.09, 0.13),
            wall: (0.05, 0.08),
            rv_radius: (0.85, 1.05),
            rv_offset: (0.7, 0.95),
            intensities: [0.1, 0.6, 0.35, 0.85],
            noise: 0.05,
            margin: 1,
            max_attempts: 64,
        }
    }
}

/// Drawn geometry of one phantom, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomGeometry {
    pub center: (f64, f64),
    pub lv_radius: f64,
    pub epi_radius: f64,
    pub rv_center: (f64, f64),
    pub rv_radius: f64,
}

impl PhantomGeometry {
    /// Label of the pixel at (row, col).
    pub fn label(&self, row: usize, col: usize) -> u8 {
        let d2 = |c: (f64, f64)| (row as f64 - c.0).powi(2) + (col as f64 - c.1).powi(2);
        let dc = d2(self.center);
        if dc <= self.lv_radius * self.lv_radius {
            LV
        } else if dc <= self.epi_radius * self.epi_radius {
            LMYO
        } else if d2(self.rv_center) <= self.rv_radius * self.rv_radius {
            RV
        } else {
            BACKGROUND
        }
    }

    fn fits(&self, h: usize, w: usize, margin: usize) -> bool {
        let m = margin as f64;
        let inside = |c: (f64, f64), r: f64| {
            c.0 - r >= m && c.1 - r >= m && c.0 + r <= (h - 1) as f64 - m && c.1 + r <= (w - 1) as f64 - m
        };
        inside(self.center, self.epi_radius) && inside(self.rv_center, self.rv_radius)
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn draw_geometry(rng: &mut impl Rng, h: usize, w: usize, p: &PhantomParams) -> PhantomGeometry {
    let s = h.min(w) as f64;
    let jitter = p.center_jitter * s;
    let center = (
        (h as f64 - 1.0) / 2.0 + uniform(rng, (-jitter, jitter)),
        (w as f64 - 1.0) / 2.0 + uniform(rng, (-jitter, jitter)),
    );
    let lv_radius = uniform(rng, p.lv_radius) * s;
    // at least two pixels of wall so the LV never touches the RV or background
    let wall = (uniform(rng, p.wall) * s).max(2.0);
    let epi_radius = lv_radius + wall;
    let rv_radius = uniform(rng, p.rv_radius) * epi_radius;
    let offset = uniform(rng, p.rv_offset) * epi_radius;
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    PhantomGeometry {
        center,
        lv_radius,
        epi_radius,
        rv_center: (center.0 + offset * angle.sin(), center.1 + offset * angle.cos()),
        rv_radius,
    }
}

/// Deterministic per `seed`. Geometry that leaves the frame is redrawn up
/// to `max_attempts` times.
pub fn phantom_geometry(seed: u64, h: usize, w: usize, p: &PhantomParams) -> Result<PhantomGeometry> {
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("phantom extents {h}×{w} must be even and positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..p.max_attempts.max(1) {
        let g = draw_geometry(&mut rng, h, w, p);
        if g.fits(h, w, p.margin) {
            return Ok(g);
        }
    }
    Err(Error::Config(format!(
        "no phantom fits in {h}×{w} after {} attempts",
        p.max_attempts
    )))
}

pub fn generate_phantom(seed: u64, h: usize, w: usize, p: &PhantomParams) -> Result<SliceSample> {
    let geometry = phantom_geometry(seed, h, w, p)?;
    // noise stream is separate from the geometry stream
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, p.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut labels = Vec::with_capacity(h * w);
    let mut image = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let l = geometry.label(r, c);
            labels.push(l);
            image.push((p.intensities[l as usize] + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    SliceSample::new(
        Tensor::new([1, h, w], image)?,
        SegmentationMask::new(h, w, 4, labels)?,
        Provenance {
            volume: format!("phantom-{seed}"),
            slice: 0,
            phase: None,
        },
    )
}

/// `n` phantoms with seeds `seed, seed+1, …`.
pub fn generate_phantoms(n: usize, seed: u64, h: usize, w: usize, p: &PhantomParams) -> Result<Vec<SliceSample>> {
    (0..n as u64).map(|i| generate_phantom(seed.wrapping_add(i), h, w, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let p = PhantomParams::default();
        assert_eq!(generate_phantom(5, 64, 64, &p).unwrap(), generate_phantom(5, 64, 64, &p).unwrap());
        assert_ne!(
            generate_phantom(5, 64, 64, &p).unwrap().image,
            generate_phantom(6, 64, 64, &p).unwrap().image
        );
    }

    #[test]
    fn all_classes_present_and_lv_enclosed() {
        let p = PhantomParams::default();
        for seed in 0..50 {
            for (h, w) in [(64, 64), (16, 16), (32, 48)] {
                let s = generate_phantom(seed, h, w, &p).unwrap();
                let m = &s.mask;
                assert!(m.histogram().iter().all(|&n| n > 0), "seed {seed} {h}×{w}");
                for r in 0..h {
                    for c in 0..w {
                        if m.get(r, c) != LV {
                            continue;
                        }
                        for dr in -1i64..=1 {
                            for dc in -1i64..=1 {
                                let l = m.get((r as i64 + dr) as usize, (c as i64 + dc) as usize);
                                assert!(l == LV || l == LMYO);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn image_in_unit_range() {
        let s = generate_phantom(1, 32, 32, &PhantomParams::default()).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_extents_rejected() {
        assert!(generate_phantom(0, 15, 16, &PhantomParams::default()).is_err());
    }

    #[test]
    fn impossible_geometry_reports_failure() {
        let p = PhantomParams {
            lv_radius: (0.6, 0.7),
            ..Default::default()
        };
        assert!(generate_phantom(0, 16, 16, &p).is_err());
    }
}
