use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Landmark {
    pub id: usize,
    pub name: String,
    /// Voxel coordinates along the (H, W, D) axes.
    pub pos: [f64; 3],
    pub present: bool,
}

/// Landmarks of one volume, indexed densely by id.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LandmarkSet {
    pub landmarks: Vec<Landmark>,
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
}

impl LandmarkSet {
    /// Builds a set with ids `0..n` and names `lm{id}`; `None` marks an
    /// absent landmark.
    pub fn from_positions(positions: &[Option<[f64; 3]>], spacing: [f64; 3]) -> Self {
        let landmarks = positions
            .iter()
            .enumerate()
            .map(|(id, p)| Landmark {
                id,
                name: format!("lm{id}"),
                pos: p.unwrap_or([0.0; 3]),
                present: p.is_some(),
            })
            .collect();
        LandmarkSet { landmarks, spacing }
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn present_count(&self) -> usize {
        self.landmarks.iter().filter(|l| l.present).count()
    }

    pub fn present_mask(&self) -> Vec<bool> {
        self.landmarks.iter().map(|l| l.present).collect()
    }

    /// Checks spacing, dense unique ids, and that present landmarks lie in
    /// `[0, n - 1]` along each axis of `dims`.
    pub fn validate(&self, dims: Option<[usize; 3]>) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        for (i, lm) in self.landmarks.iter().enumerate() {
            if lm.id != i {
                return Err(Error::Data(format!(
                    "landmark ids must be unique and dense 0..{}; found {} at row {i}",
                    self.len(),
                    lm.id
                )));
            }
            if !lm.present {
                continue;
            }
            if lm.pos.iter().any(|c| !c.is_finite()) {
                return Err(Error::Data(format!("landmark {i} has non-finite coordinates")));
            }
            if let Some(dims) = dims {
                for ax in 0..3 {
                    if lm.pos[ax] < 0.0 || lm.pos[ax] > (dims[ax] - 1) as f64 {
                        return Err(Error::Data(format!(
                            "landmark {i} at {:?} lies outside a {dims:?} volume",
                            lm.pos
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Euclidean distance in mm between two positions.
    pub fn distance_mm(&self, a: [f64; 3], b: [f64; 3]) -> f64 {
        (0..3)
            .map(|ax| ((a[ax] - b[ax]) * self.spacing[ax]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = LandmarkSet::from_positions(&[Some([1.0, 2.0, 3.0]), None], [1.0; 3]);
        ok.validate(Some([4, 4, 4])).unwrap();
        assert!(ok.validate(Some([4, 2, 4])).is_err());
        let mut dup = ok.clone();
        dup.landmarks[1].id = 0;
        assert!(dup.validate(None).is_err());
        let bad = LandmarkSet { spacing: [1.0, 0.0, 1.0], ..ok };
        assert!(bad.validate(None).is_err());
    }
}
