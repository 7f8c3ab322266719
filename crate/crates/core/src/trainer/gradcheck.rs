//! Central finite-difference check of the analytic field gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::TrainingBatch;
use super::grad::{branch_signature, evaluate_loss, loss_and_gradient, FieldGradient, LossWeights, MarchOptions};
use crate::error::{Error, Result};
use crate::field::VoxelField;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Density(usize),
    Color(usize),
    Mlp(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters passed over because the difference interval crosses a
    /// branch of the loss (a ReLU, an absolute value or a clamp).
    pub skipped: usize,
    /// Parameter with the largest error, with its analytic and numeric values.
    pub worst: Option<(ParamRef, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn param(field: &mut VoxelField<f64>, p: ParamRef) -> &mut f64 {
    match p {
        ParamRef::Density(i) => &mut field.density[i],
        ParamRef::Color(i) => &mut field.color[i],
        ParamRef::Mlp(i) => field.mlp.as_mut().expect("mlp parameter without mlp").param_mut(i),
    }
}

/// Compares the analytic gradient against central differences of step `step`
/// on up to `samples` parameters drawn from those with a non-zero gradient.
/// Marching runs without jitter or early termination. Parameters whose
/// difference interval crosses a branch of the loss are not counted, since
/// the difference quotient is not a derivative estimate there.
pub fn gradient_check(
    field: &VoxelField<f64>,
    batch: &TrainingBatch,
    weights: &LossWeights,
    march: &MarchOptions,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let opts = MarchOptions {
        jitter: false,
        early_termination: false,
        ..*march
    };
    let mut grad = FieldGradient::zeros(field);
    loss_and_gradient(field, batch, weights, &opts, seed, 0, &mut grad)?;
    let mut candidates: Vec<(ParamRef, f64)> = Vec::new();
    let groups: [(&[f64], fn(usize) -> ParamRef); 3] =
        [(&grad.density, ParamRef::Density), (&grad.color, ParamRef::Color), (&grad.mlp, ParamRef::Mlp)];
    for (g, make) in groups {
        candidates.extend(g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (make(i), *v)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let base = branch_signature(field, batch, &opts);
    let mut probe = field.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (p, analytic) in candidates {
        if report.checked == samples {
            break;
        }
        let orig = *param(&mut probe, p);
        *param(&mut probe, p) = orig + step;
        let up = evaluate_loss(&probe, batch, weights, &opts, seed, 0)?.total;
        let smooth_up = branch_signature(&probe, batch, &opts) == base;
        *param(&mut probe, p) = orig - step;
        let down = evaluate_loss(&probe, batch, weights, &opts, seed, 0)?.total;
        let smooth_down = branch_signature(&probe, batch, &opts) == base;
        *param(&mut probe, p) = orig;
        if !(smooth_up && smooth_down) {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * step);
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((p, analytic, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ColorMode;
    use crate::geometry::{Aabb, Ray, Vec3};
    use rand::Rng;

    fn random_field(mode: ColorMode, seed: u64) -> VoxelField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelField::<f64>::new(Vec3::repeat(-1.0), 2.0 / 7.0, [8, 8, 8], mode).unwrap();
        f.init_mlp(&mut rng);
        f.density.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..2.0));
        f.color.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        f
    }

    fn random_batch(seed: u64, n: usize) -> TrainingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TrainingBatch::with_labels();
        for _ in 0..n {
            let o = Vec3::new(-3.0, rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
            let d = Vec3::new(1.0, rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
            let ray = Ray::new(o, d, 0.0, 8.0).unwrap();
            let c = [rng.gen(), rng.gen(), rng.gen()];
            let depth = rng.gen_bool(0.7).then(|| rng.gen_range(1.5..4.0));
            b.push(ray, c, depth, Some(rng.gen_bool(0.5)));
        }
        b
    }

    fn check(mode: ColorMode) {
        let weights = LossWeights {
            color: 1.0,
            depth: 0.1,
            gc: 0.01,
        };
        let r = gradient_check(&random_field(mode, 1), &random_batch(2, 24), &weights, &MarchOptions::default(), 200, 1e-4, 3).unwrap();
        assert_eq!(r.checked, 200, "{r:?}");
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn direct_mode_gradients_match() {
        check(ColorMode::Direct);
    }

    #[test]
    fn feature_mode_gradients_match() {
        check(ColorMode::FeatureMlp);
    }

    #[test]
    fn each_loss_term_alone() {
        for w in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let weights = LossWeights {
                color: w[0],
                depth: w[1],
                gc: w[2],
            };
            let r = gradient_check(&random_field(ColorMode::Direct, 4), &random_batch(5, 16), &weights, &MarchOptions::default(), 100, 1e-4, 6).unwrap();
            assert!(r.max_rel_error < 1e-3, "{w:?} {r:?}");
        }
    }

    #[test]
    fn many_random_instances() {
        for seed in 0..6 {
            let march = MarchOptions {
                background: [0.3, 0.5, 0.1],
                object_bounds: (seed % 2 == 1).then(|| Aabb::new(Vec3::new(-0.5, -0.6, -0.4), Vec3::new(0.4, 0.6, 0.5)).unwrap()),
                ..MarchOptions::default()
            };
            for mode in [ColorMode::Direct, ColorMode::FeatureMlp] {
                let r = gradient_check(&random_field(mode, seed), &random_batch(seed + 50, 8), &LossWeights::default(), &march, 200, 1e-4, seed).unwrap();
                assert!(r.max_rel_error < 1e-3, "{seed} {mode:?} {r:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_step() {
        let e = gradient_check(&random_field(ColorMode::Direct, 0), &random_batch(0, 2), &LossWeights::default(), &MarchOptions::default(), 5, 0.0, 0);
        assert!(e.is_err());
    }
}
