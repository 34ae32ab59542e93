//! Procedural single-source images used in place of handwritten digits.
//!
//! Every family draws its own jittered geometry (position, extent, radius)
//! and a stroke intensity in `[0.7, 1]`; pixels lie in `[0, 1]`.

use rand::Rng;

use crate::data::pool::{SourceGroup, SourcePool};
use crate::error::{Error, Result};
use crate::rng;

pub const PATTERN_FAMILIES: [&str; 10] = [
    "horizontal-bar",
    "vertical-bar",
    "diagonal",
    "anti-diagonal",
    "ring",
    "blob",
    "plus",
    "square",
    "two-dots",
    "cross",
];

/// Smallest grid on which every family fits with room for jitter.
pub const MIN_SIDE: usize = 8;

fn centre_jitter(rng: &mut impl Rng, side: usize, spread: f64) -> (f64, f64) {
    let c = (side as f64 - 1.0) / 2.0;
    (
        c + rng.gen_range(-spread..=spread),
        c + rng.gen_range(-spread..=spread),
    )
}

/// One image of `family` on a `side × side` grid, row-major.
pub fn render_pattern(family: usize, side: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if family >= PATTERN_FAMILIES.len() {
        return Err(Error::Config(format!(
            "pattern family {family} out of range 0..{}",
            PATTERN_FAMILIES.len()
        )));
    }
    if side < MIN_SIDE {
        return Err(Error::Config(format!(
            "pattern side {side} below minimum {MIN_SIDE}"
        )));
    }
    let s = side as f64;
    let amp = rng.gen_range(0.7..=1.0);
    let mut img = vec![0.0; side * side];
    let margin = (s * 0.2).round();
    let mut paint = |f: &dyn Fn(f64, f64) -> f64| {
        for i in 0..side {
            for j in 0..side {
                let v = f(i as f64, j as f64);
                img[i * side + j] = (amp * v).clamp(0.0, 1.0);
            }
        }
    };
    match family {
        0 | 1 => {
            let line = rng.gen_range(margin..=s - 1.0 - margin).round();
            let start = rng.gen_range(0.0..=margin).round();
            let end = rng.gen_range(s - 1.0 - margin..=s - 1.0).round();
            let across = |a: f64, b: f64| {
                ((a - line).abs() <= 0.5 && b >= start && b <= end) as u8 as f64
            };
            if family == 0 {
                paint(&|i, j| across(i, j));
            } else {
                paint(&|i, j| across(j, i));
            }
        }
        2 | 3 => {
            let off = rng.gen_range(-margin..=margin).round();
            let half = rng.gen_range(0.5..=1.0);
            if family == 2 {
                paint(&|i, j| ((i - j - off).abs() <= half) as u8 as f64);
            } else {
                paint(&|i, j| ((i + j - (s - 1.0) - off).abs() <= half) as u8 as f64);
            }
        }
        4 => {
            let (ci, cj) = centre_jitter(rng, side, s * 0.08);
            let r = rng.gen_range(s * 0.22..=s * 0.34);
            paint(&|i, j| {
                let d = ((i - ci).powi(2) + (j - cj).powi(2)).sqrt();
                ((d - r).abs() <= 0.7) as u8 as f64
            });
        }
        5 => {
            let (ci, cj) = centre_jitter(rng, side, s * 0.15);
            let sigma = rng.gen_range(s * 0.1..=s * 0.15);
            paint(&|i, j| {
                let d2 = (i - ci).powi(2) + (j - cj).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                if v < 0.1 {
                    0.0
                } else {
                    v
                }
            });
        }
        6 => {
            let (ci, cj) = centre_jitter(rng, side, s * 0.1);
            let (ci, cj) = (ci.round(), cj.round());
            let arm = rng.gen_range(s * 0.2..=s * 0.35).round();
            paint(&|i, j| {
                let h = (i - ci).abs() <= 0.5 && (j - cj).abs() <= arm;
                let v = (j - cj).abs() <= 0.5 && (i - ci).abs() <= arm;
                (h || v) as u8 as f64
            });
        }
        7 => {
            let (ci, cj) = centre_jitter(rng, side, s * 0.08);
            let half = rng.gen_range(s * 0.2..=s * 0.32);
            paint(&|i, j| {
                let (di, dj) = ((i - ci).abs(), (j - cj).abs());
                let m = di.max(dj);
                ((m - half).abs() <= 0.5) as u8 as f64
            });
        }
        8 => {
            let (ci, cj) = centre_jitter(rng, side, s * 0.1);
            let sep = rng.gen_range(s * 0.2..=s * 0.3);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (di, dj) = (sep * angle.sin(), sep * angle.cos());
            paint(&|i, j| {
                let a = (i - ci - di).powi(2) + (j - cj - dj).powi(2);
                let b = (i - ci + di).powi(2) + (j - cj + dj).powi(2);
                (a.min(b) <= 1.6) as u8 as f64
            });
        }
        _ => {
            let (ci, cj) = centre_jitter(rng, side, s * 0.08);
            let arm = rng.gen_range(s * 0.2..=s * 0.32);
            paint(&|i, j| {
                let (di, dj) = (i - ci, j - cj);
                let on = ((di - dj).abs() <= 0.7 || (di + dj).abs() <= 0.7)
                    && di.abs() <= arm
                    && dj.abs() <= arm;
                on as u8 as f64
            });
        }
    }
    Ok(img)
}

/// Pool with `per_source` exemplars of each listed family. Stream `k` is
/// labelled `k + 1`.
pub fn synthetic_pool(
    families: &[usize],
    side: usize,
    per_source: usize,
    seed: u64,
) -> Result<SourcePool> {
    let base = rng::derive_seed(seed, "patterns");
    let mut groups = Vec::with_capacity(families.len());
    for (k, &f) in families.iter().enumerate() {
        let mut rng = rng::rng_for(rng::index_seed(base, k as u64));
        let exemplars = (0..per_source)
            .map(|_| render_pattern(f, side, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        groups.push(SourceGroup {
            label: k as u32 + 1,
            exemplars,
        });
    }
    SourcePool::new(side * side, Some((side, side)), groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_renders_in_unit_box_with_ink() {
        let mut rng = rng::rng_for(3);
        for f in 0..PATTERN_FAMILIES.len() {
            for _ in 0..50 {
                let img = render_pattern(f, 12, &mut rng).unwrap();
                assert_eq!(img.len(), 144);
                assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let ink = img.iter().filter(|&&v| v > 0.0).count();
                assert!(ink >= 3, "family {f} painted {ink} pixels");
                assert!(ink < 100, "family {f} painted {ink} pixels");
            }
        }
    }

    #[test]
    fn families_are_distinguishable_on_average() {
        let mut rng = rng::rng_for(4);
        let means: Vec<Vec<f64>> = (0..PATTERN_FAMILIES.len())
            .map(|f| {
                let mut acc = vec![0.0; 144];
                for _ in 0..200 {
                    for (a, v) in acc.iter_mut().zip(render_pattern(f, 12, &mut rng).unwrap()) {
                        *a += v / 200.0;
                    }
                }
                acc
            })
            .collect();
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.5, "families {a} and {b} too similar: {dist}");
            }
        }
    }

    #[test]
    fn pool_is_seeded_and_labelled() {
        let a = synthetic_pool(&[0, 4], 10, 5, 1).unwrap();
        assert_eq!(a, synthetic_pool(&[0, 4], 10, 5, 1).unwrap());
        assert_ne!(a, synthetic_pool(&[0, 4], 10, 5, 2).unwrap());
        assert_eq!(a.labels(), vec![1, 2]);
        assert!(synthetic_pool(&[10], 10, 1, 1).is_err());
        assert!(synthetic_pool(&[0], 4, 1, 1).is_err());
    }
}
