use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::render::Rgb;

/// Rays with their supervision targets, as parallel arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingBatch {
    pub rays: Vec<Ray>,
    pub target_color: Vec<Rgb>,
    pub target_depth: Vec<f64>,
    pub depth_valid: Vec<bool>,
    /// Foreground flags, present for object training only. Background rays
    /// of an object batch only supervise the object probability.
    pub mask_label: Option<Vec<bool>>,
}

impl TrainingBatch {
    pub fn with_labels() -> Self {
        Self {
            mask_label: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Whether ray `i` carries a color target.
    pub fn has_color(&self, i: usize) -> bool {
        self.mask_label.as_ref().map_or(true, |l| l[i])
    }

    pub fn color_count(&self) -> usize {
        self.mask_label.as_ref().map_or(self.len(), |l| l.iter().filter(|v| **v).count())
    }

    pub fn push(&mut self, ray: Ray, color: Rgb, depth: Option<f64>, label: Option<bool>) {
        self.rays.push(ray);
        self.target_color.push(color);
        self.target_depth.push(depth.unwrap_or(0.0));
        self.depth_valid.push(depth.is_some());
        if let (Some(labels), Some(l)) = (self.mask_label.as_mut(), label) {
            labels.push(l);
        }
    }

    pub fn extend(&mut self, other: &TrainingBatch) {
        self.rays.extend_from_slice(&other.rays);
        self.target_color.extend_from_slice(&other.target_color);
        self.target_depth.extend_from_slice(&other.target_depth);
        self.depth_valid.extend_from_slice(&other.depth_valid);
        match (self.mask_label.as_mut(), other.mask_label.as_ref()) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (None, None) => {}
            _ => self.mask_label = None,
        }
    }

    pub fn select(&self, indices: &[usize]) -> TrainingBatch {
        TrainingBatch {
            rays: indices.iter().map(|&i| self.rays[i]).collect(),
            target_color: indices.iter().map(|&i| self.target_color[i]).collect(),
            target_depth: indices.iter().map(|&i| self.target_depth[i]).collect(),
            depth_valid: indices.iter().map(|&i| self.depth_valid[i]).collect(),
            mask_label: self.mask_label.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rays.len();
        for len in [self.target_color.len(), self.target_depth.len(), self.depth_valid.len()]
            .into_iter()
            .chain(self.mask_label.as_ref().map(Vec::len))
        {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        if self.target_color.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("target colors must lie in [0, 1]"));
        }
        Ok(())
    }
}
