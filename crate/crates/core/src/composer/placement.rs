use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, RigidPlacement};

/// Maximum jitter applied about a base pose. Translations are along the
/// scene's x and y axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub t_x: f64,
    pub t_y: f64,
    /// Radians.
    pub t_theta: f64,
    pub seed: u64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            t_x: 20.0,
            t_y: 5.0,
            t_theta: 30f64.to_radians(),
            seed: 0,
        }
    }
}

impl JitterConfig {
    pub fn none(seed: u64) -> Self {
        Self {
            t_x: 0.0,
            t_y: 0.0,
            t_theta: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.t_x, self.t_y, self.t_theta].iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid("jitter ranges must be finite and >= 0"));
        }
        Ok(())
    }
}

fn offset<R: Rng + ?Sized>(rng: &mut R, range: f64) -> Option<f64> {
    let u: f64 = rng.gen();
    (range > 0.0).then(|| range * (2.0 * u - 1.0))
}

/// Jitters `base` by uniform offsets in `[-T, T]` per axis and in yaw. Three
/// numbers are always drawn so that streams stay aligned; zero ranges leave
/// the corresponding coordinate untouched bit for bit.
pub fn sample_placement<R: Rng + ?Sized>(base: &Box3D, jitter: &JitterConfig, rng: &mut R) -> RigidPlacement {
    let mut target = *base;
    let dx = offset(rng, jitter.t_x);
    let dy = offset(rng, jitter.t_y);
    let dyaw = offset(rng, jitter.t_theta);
    if let Some(d) = dx {
        target.center.x += d;
    }
    if let Some(d) = dy {
        target.center.y += d;
    }
    if let Some(d) = dyaw {
        target.yaw = crate::geometry::wrap_angle(target.yaw + d);
    }
    RigidPlacement::from_box(target)
}

/// Shannon entropy (nats) of the heading histogram with `bin` wide bins
/// over `(-pi, pi]`.
pub fn heading_entropy(yaws: &[f64], bin: f64) -> f64 {
    let bins = (2.0 * PI / bin).ceil() as usize;
    let mut hist = vec![0usize; bins];
    for y in yaws {
        let a = crate::geometry::wrap_angle(*y) + PI;
        hist[((a / bin) as usize).min(bins - 1)] += 1;
    }
    let n = yaws.len() as f64;
    hist.iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let f = (x - lo) / (hi - lo);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_jitter_is_identity() {
        let base = Box3D::new(Vec3::new(-0.0, 3.25, 0.8), Vec3::new(4.0, 1.8, 1.6), -2.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = sample_placement(&base, &JitterConfig::none(0), &mut rng);
            assert_eq!(p.target, base);
            assert_eq!(p.translation.x.to_bits(), base.center.x.to_bits());
            assert_eq!(p.yaw.to_bits(), base.yaw.to_bits());
        }
    }

    #[test]
    fn yaw_stays_in_range() {
        let base = Box3D::new(Vec3::zeros(), Vec3::repeat(1.0), 0.0).unwrap();
        let j = JitterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let p = sample_placement(&base, &j, &mut rng);
            assert!(p.yaw.abs() <= j.t_theta);
            assert!(p.translation.x.abs() <= 20.0 && p.translation.y.abs() <= 5.0);
        }
    }

    #[test]
    fn offsets_are_uniform() {
        let base = Box3D::new(Vec3::zeros(), Vec3::repeat(1.0), 0.0).unwrap();
        let j = JitterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps: Vec<_> = (0..20_000).map(|_| sample_placement(&base, &j, &mut rng)).collect();
        assert!(ks_uniform(ps.iter().map(|p| p.translation.x).collect(), -20.0, 20.0) < 0.015);
        assert!(ks_uniform(ps.iter().map(|p| p.translation.y).collect(), -5.0, 5.0) < 0.015);
        assert!(ks_uniform(ps.iter().map(|p| p.yaw).collect(), -j.t_theta, j.t_theta) < 0.015);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(heading_entropy(&[0.3; 10], 5f64.to_radians()), 0.0);
        let two = heading_entropy(&[0.0, 1.0], 5f64.to_radians());
        assert!((two - 2f64.ln()).abs() < 1e-12);
        assert!(heading_entropy(&[PI, -PI], 0.1) == 0.0);
    }

    #[test]
    fn jitter_validation() {
        assert!(JitterConfig::default().validate().is_ok());
        assert!(JitterConfig { t_y: -1.0, ..JitterConfig::default() }.validate().is_err());
    }
}
