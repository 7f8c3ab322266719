//! Reference renderer for analytic scenes.
//!
//! Rays are split at every primitive boundary (and side-color plane), so on
//! scenes without smooth primitives each piece has constant density and
//! color and is integrated in closed form. Scenes with smooth primitives
//! fall back to midpoint quadrature at the requested step.

use super::analytic::{eval_analytic, AnalyticScene, Primitive, Shape};
use crate::error::{Error, Result};
use crate::geometry::{ray_aabb_intersect, Ray, Vec3};
use crate::render::{RenderResult, Rgb, DEPTH_EPS};

/// Render output plus the accumulated weight attributed to each primitive tag.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSample {
    pub result: RenderResult,
    pub tag_weights: Vec<(u64, f64)>,
}

impl OracleSample {
    pub fn weight_of(&self, tag: u64) -> f64 {
        self.tag_weights.iter().find(|(t, _)| *t == tag).map_or(0.0, |(_, w)| *w)
    }
}

pub fn oracle_render(scene: &AnalyticScene, ray: &Ray, step: f64) -> Result<RenderResult> {
    Ok(oracle_render_detailed(scene, ray, step, [0.0; 3])?.result)
}

pub fn oracle_render_with(scene: &AnalyticScene, ray: &Ray, step: f64, background: Rgb) -> Result<RenderResult> {
    Ok(oracle_render_detailed(scene, ray, step, background)?.result)
}

fn side_plane_crossing(p: &Primitive, ray: &Ray) -> Option<f64> {
    p.color_neg_y?;
    let (s, c) = p.yaw.sin_cos();
    // y component of the primitive-local frame along the ray.
    let oy = -s * (ray.origin.x - p.center[0]) + c * (ray.origin.y - p.center[1]);
    let dy = -s * ray.direction.x + c * ray.direction.y;
    (dy != 0.0).then(|| -oy / dy)
}

struct Accumulator {
    transmittance: f64,
    color: Rgb,
    depth_num: f64,
    tags: Vec<(u64, f64)>,
}

impl Accumulator {
    fn add_tags(&mut self, scene: &AnalyticScene, x: &Vec3, sigma: f64, w: f64) {
        if w == 0.0 || sigma == 0.0 {
            return;
        }
        for p in &scene.primitives {
            let Some(tag) = p.tag else { continue };
            let share = p.sigma * p.weight(x) / sigma;
            if share == 0.0 {
                continue;
            }
            match self.tags.iter_mut().find(|(t, _)| *t == tag) {
                Some(e) => e.1 += w * share,
                None => self.tags.push((tag, w * share)),
            }
        }
    }
}

pub fn oracle_render_detailed(scene: &AnalyticScene, ray: &Ray, step: f64, background: Rgb) -> Result<OracleSample> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("oracle step must be > 0, got {step}")));
    }
    if !(ray.t_near < ray.t_far) {
        return Err(Error::DegenerateRay {
            t_near: ray.t_near,
            t_far: ray.t_far,
        });
    }
    let mut acc = Accumulator {
        transmittance: 1.0,
        color: [0.0; 3],
        depth_num: 0.0,
        tags: Vec::new(),
    };
    if let Some((ta, tb)) = ray_aabb_intersect(ray, &scene.bounds) {
        let mut cuts = vec![ta, tb];
        for p in &scene.primitives {
            if let Some((a, b)) = p.intersect(ray) {
                cuts.extend([a, b].into_iter().filter(|t| *t > ta && *t < tb));
            }
            if let Some(t) = side_plane_crossing(p, ray).filter(|t| *t > ta && *t < tb) {
                cuts.push(t);
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let smooth = scene.has_smooth();
        for seg in cuts.windows(2) {
            let (s0, s1) = (seg[0], seg[1]);
            if smooth {
                march(scene, ray, s0, s1, step, &mut acc);
            } else {
                exact_segment(scene, ray, s0, s1, &mut acc);
            }
        }
    }
    let t = acc.transmittance;
    let opacity = 1.0 - t;
    let mut color = acc.color;
    for k in 0..3 {
        color[k] += t * background[k];
    }
    Ok(OracleSample {
        result: RenderResult {
            color,
            depth: acc.depth_num / opacity.max(DEPTH_EPS),
            depth_valid: opacity >= DEPTH_EPS,
            opacity,
            object_prob: None,
        },
        tag_weights: acc.tags,
    })
}

fn exact_segment(scene: &AnalyticScene, ray: &Ray, s0: f64, s1: f64, acc: &mut Accumulator) {
    let len = s1 - s0;
    let mid = ray.at(0.5 * (s0 + s1));
    let (sigma, c) = eval_analytic(scene, &mid);
    if sigma == 0.0 {
        return;
    }
    let tau = sigma * len;
    let alpha = -(-tau).exp_m1();
    let w = acc.transmittance * alpha;
    for k in 0..3 {
        acc.color[k] += w * c[k];
    }
    // Integral of t * sigma * exp(-sigma (t - s0)) over the segment.
    let tail = if tau < 1e-4 {
        len * (tau / 2.0 - tau * tau / 3.0 + tau * tau * tau / 8.0)
    } else {
        (1.0 - (-tau).exp() * (1.0 + tau)) / sigma
    };
    acc.depth_num += acc.transmittance * (s0 * alpha + tail);
    acc.add_tags(scene, &mid, sigma, w);
    acc.transmittance *= (-tau).exp();
}

fn march(scene: &AnalyticScene, ray: &Ray, s0: f64, s1: f64, step: f64, acc: &mut Accumulator) {
    let n = ((s1 - s0) / step).ceil().max(1.0) as usize;
    let delta = (s1 - s0) / n as f64;
    for i in 0..n {
        let t = s0 + (i as f64 + 0.5) * delta;
        let x = ray.at(t);
        let (sigma, c) = eval_analytic(scene, &x);
        if sigma == 0.0 {
            continue;
        }
        let tau = sigma * delta;
        let w = acc.transmittance * -(-tau).exp_m1();
        for k in 0..3 {
            acc.color[k] += w * c[k];
        }
        acc.depth_num += w * t;
        acc.add_tags(scene, &x, sigma, w);
        acc.transmittance *= (-tau).exp();
    }
}

/// Whether any primitive of the scene is a hard shape, for callers that
/// want to pick a step automatically.
pub fn is_piecewise_constant(scene: &AnalyticScene) -> bool {
    !scene.primitives.iter().any(|p| matches!(p.shape, Shape::Blob { .. }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::render::render;
    use proptest::prelude::*;

    fn bounds() -> Aabb {
        Aabb::new(Vec3::new(-5.0, -5.0, -5.0), Vec3::new(5.0, 5.0, 5.0)).unwrap()
    }

    fn ray_x() -> Ray {
        Ray::new(Vec3::new(-10.0, 0.2, 0.1), Vec3::x(), 0.0, 100.0).unwrap()
    }

    #[test]
    fn empty_scene_gives_background() {
        let scene = AnalyticScene::new(bounds(), vec![], 0.0).unwrap();
        let r = oracle_render_with(&scene, &ray_x(), 0.01, [0.1, 0.2, 0.3]).unwrap();
        assert_eq!(r.color, [0.1, 0.2, 0.3]);
        assert!(!r.depth_valid);
    }

    #[test]
    fn homogeneous_slab_closed_form() {
        let (s, len, c) = (0.7, 2.0, [0.9, 0.5, 0.1]);
        let slab = Primitive::new(Shape::Slab { z_min: -1.0, z_max: 1.0 }, Vec3::zeros(), s, c);
        let scene = AnalyticScene::new(bounds(), vec![slab], 0.0).unwrap();
        let ray = Ray::new(Vec3::new(0.3, 0.0, 4.0), -Vec3::z(), 0.0, 100.0).unwrap();
        let r = oracle_render(&scene, &ray, len / 1e4).unwrap();
        let a = 1.0 - (-s * len).exp();
        for k in 0..3 {
            assert!((r.color[k] - a * c[k]).abs() < 1e-6);
        }
        // Expected termination distance of an exponential truncated to the slab.
        let e = 3.0 + (1.0 - (-s * len).exp() * (1.0 + s * len)) / (s * a);
        assert!((r.depth - e).abs() < 1e-9);
    }

    #[test]
    fn sphere_is_stable_under_step_halving() {
        let sphere = Primitive::new(Shape::Sphere { radius: 1.5 }, Vec3::new(0.1, 0.0, 0.0), 1.3, [0.2, 0.8, 0.4]);
        let scene = AnalyticScene::new(bounds(), vec![sphere], 0.0).unwrap();
        let a = oracle_render(&scene, &ray_x(), 1e-3).unwrap();
        let b = oracle_render(&scene, &ray_x(), 5e-4).unwrap();
        for k in 0..3 {
            assert!((a.color[k] - b.color[k]).abs() < 1e-6);
        }
        assert!((a.depth - b.depth).abs() < 1e-6);
    }

    #[test]
    fn blob_converges_to_quadrature() {
        let blob = Primitive::new(Shape::Blob { radius: 0.8 }, Vec3::zeros(), 3.0, [0.6, 0.3, 0.9]);
        let scene = AnalyticScene::new(bounds(), vec![blob], 0.0).unwrap();
        let o = oracle_render(&scene, &ray_x(), 1e-3).unwrap();
        let r = render(&scene, &ray_x(), 4096, [0.0; 3]).unwrap();
        for k in 0..3 {
            assert!((o.color[k] - r.color[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn side_colors_split_segments() {
        let mut b = Primitive::new(Shape::Box { size: [1.0, 2.0, 1.0] }, Vec3::zeros(), 2.0, [1.0, 0.0, 0.0]);
        b.color_neg_y = Some([0.0, 0.0, 1.0]);
        let scene = AnalyticScene::new(bounds(), vec![b], 0.0).unwrap();
        let ray = Ray::new(Vec3::new(0.0, -4.0, 0.0), Vec3::y(), 0.0, 100.0).unwrap();
        let r = oracle_render(&scene, &ray, 1.0).unwrap();
        let first = 1.0 - (-2.0f64).exp();
        assert!((r.color[2] - first).abs() < 1e-12);
        assert!((r.color[0] - (1.0 - first) * first).abs() < 1e-12);
    }

    #[test]
    fn tags_attribute_weight() {
        let a = Primitive::new(Shape::Sphere { radius: 1.0 }, Vec3::zeros(), 50.0, [1.0; 3]).with_tag(7);
        let scene = AnalyticScene::new(bounds(), vec![a], 0.0).unwrap();
        let s = oracle_render_detailed(&scene, &ray_x(), 0.1, [0.0; 3]).unwrap();
        assert!(s.weight_of(7) > 0.99);
        assert_eq!(s.weight_of(3), 0.0);
    }

    proptest! {
        #[test]
        fn invariants_hold(sig in 0.0f64..5.0, r in 0.2f64..2.0, oy in -2.0f64..2.0, bg in 0.0f64..1.0) {
            let p = Primitive::new(Shape::Sphere { radius: r }, Vec3::zeros(), sig, [0.3, 0.6, 0.9]);
            let q = Primitive::new(Shape::Box { size: [1.0, 1.0, 1.0] }, Vec3::new(1.0, 0.0, 0.0), sig * 0.5, [0.9, 0.1, 0.2]);
            let scene = AnalyticScene::new(bounds(), vec![p, q], 0.0).unwrap();
            let ray = Ray::new(Vec3::new(-8.0, oy, 0.0), Vec3::new(1.0, 0.1, 0.05), 0.0, 50.0).unwrap();
            let s = oracle_render_detailed(&scene, &ray, 0.05, [bg; 3]).unwrap().result;
            prop_assert!((0.0..=1.0).contains(&s.opacity));
            for k in 0..3 {
                let lo = (1.0 - s.opacity) * bg;
                prop_assert!(s.color[k] >= lo - 1e-12 && s.color[k] <= lo + s.opacity + 1e-12);
            }
        }
    }
}
