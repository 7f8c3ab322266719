use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Binary image mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::LengthMismatch {
                left: bits.len(),
                right: width as usize * height as usize,
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width;
        self.bits[(y * w + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check_same(&self, other: &Mask) {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask size mismatch");
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.check_same(other);
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn union_with(&mut self, other: &Mask) {
        self.check_same(other);
        self.bits.iter_mut().zip(&other.bits).for_each(|(a, b)| *a |= *b);
    }

    pub fn xor(&self, other: &Mask) -> Mask {
        self.check_same(other);
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a ^ b).collect(),
        }
    }

    pub fn not(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn touches_border(&self) -> bool {
        let (w, h) = (self.width, self.height);
        (0..w).any(|x| self.get(x, 0) || self.get(x, h - 1)) || (0..h).any(|y| self.get(0, y) || self.get(w - 1, y))
    }

    /// Dilation by a Euclidean disk of `radius` pixels.
    pub fn dilate(&self, radius: u32) -> Mask {
        self.morph(radius, true)
    }

    /// Erosion by a Euclidean disk; pixels outside the image count as unset.
    pub fn erode(&self, radius: u32) -> Mask {
        self.morph(radius, false)
    }

    fn morph(&self, radius: u32, dilate: bool) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as i64;
        let offsets: Vec<(i64, i64)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let (w, h) = (self.width as i64, self.height as i64);
        let probe = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && self.bits[(y * w + x) as usize];
        Mask::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as i64, y as i64);
            if dilate {
                offsets.iter().any(|(dx, dy)| probe(x + dx, y + dy))
            } else {
                offsets.iter().all(|(dx, dy)| probe(x + dx, y + dy))
            }
        })
    }

    /// Run lengths in row-major order, alternating unset/set, starting with unset.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut n = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(n);
                current = b;
                n = 0;
            }
            n += 1;
        }
        runs.push(n);
        runs
    }

    pub fn from_rle(width: u32, height: u32, runs: &[u32]) -> Result<Self> {
        let total = width as usize * height as usize;
        let mut bits = Vec::with_capacity(total);
        let mut value = false;
        for &n in runs {
            if bits.len() + n as usize > total {
                return Err(Error::Manifest(format!("mask RLE covers more than {total} pixels")));
            }
            bits.extend(std::iter::repeat(value).take(n as usize));
            value = !value;
        }
        if bits.len() != total {
            return Err(Error::Manifest(format!("mask RLE covers {} of {total} pixels", bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    /// Pixels whose centers lie inside the convex polygon (any winding).
    pub fn from_convex_polygon(width: u32, height: u32, poly: &[Vec2]) -> Mask {
        if poly.len() < 3 {
            return Mask::new(width, height);
        }
        let area2: f64 = (0..poly.len())
            .map(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                a.x * b.y - a.y * b.x
            })
            .sum();
        let sign = area2.signum();
        Mask::from_fn(width, height, |x, y| {
            let p = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
            (0..poly.len()).all(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                sign * ((b - a).perp(&(p - a))) >= 0.0
            })
        })
    }
}

/// Convex hull (counter-clockwise, no collinear points) by monotone chain.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vec2, a: &Vec2, b: &Vec2| (a - o).perp(&(b - o));
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}
