//! Anchor lattice, offset/existence target encoding and decoding.
//!
//! Tensors are laid out `[H', W', D', channels]`. Offsets use channel
//! `(l * n_a + a) * 3 + axis`, probabilities and labels use `l * n_a + a`.
//! Anchor ids run site-major with the site index x-fastest:
//! `(i + H' * (j + W' * k)) * n_a + a`.

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::tensor::{cast, Element, Tensor};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorGrid {
    pub dims: [usize; 3],
    pub unit: f64,
    pub radii: Vec<f64>,
}

impl AnchorGrid {
    pub fn anchors_per_site(&self) -> usize {
        self.radii.len()
    }

    pub fn sites(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn site_index(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn center(&self, site: [usize; 3]) -> [f64; 3] {
        site.map(|s| (s as f64 + 0.5) * self.unit)
    }

    /// `(site coordinates, anchor slot, global anchor id)` in ascending id
    /// order.
    pub fn anchors(&self) -> impl Iterator<Item = ([usize; 3], usize, usize)> + '_ {
        let [h, w, _] = self.dims;
        let n_a = self.anchors_per_site();
        (0..self.sites() * n_a).map(move |id| {
            let (site, a) = (id / n_a, id % n_a);
            ([site % h, (site / h) % w, site / (h * w)], a, id)
        })
    }

    /// Flat `[H', W', D']` row-major position of a site.
    fn cell(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }
}

pub fn build_grid(feature_dims: [usize; 3], unit: f64, radii: &[f64]) -> Result<AnchorGrid> {
    if radii.is_empty() {
        return Err(Error::Config("anchor radii must not be empty".into()));
    }
    if !(unit >= 1.0) {
        return Err(Error::Config(format!("anchor unit must be >= 1, got {unit}")));
    }
    if feature_dims.contains(&0) {
        return Err(Error::Config(format!("anchor lattice dims must be positive, got {feature_dims:?}")));
    }
    if radii[0] <= 0.0 || radii.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config(format!("radii must be positive and strictly increasing, got {radii:?}")));
    }
    Ok(AnchorGrid {
        dims: feature_dims,
        unit,
        radii: radii.to_vec(),
    })
}

/// Radii `{0.5u, 1u, 1.5u}`.
pub fn default_radii(unit: f64) -> Vec<f64> {
    vec![0.5 * unit, unit, 1.5 * unit]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets<T: Element> {
    /// `[H', W', D', 3 L n_a]`, zero away from positive anchors.
    pub offsets: Tensor<T>,
    /// `[H', W', D', L n_a]` in {0, 1}.
    pub labels: Tensor<T>,
    /// Same layout as `labels`.
    pub positive: Vec<bool>,
}

impl<T: Element> AnchorTargets<T> {
    pub fn positive_count(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

pub fn encode_targets<T: Element>(landmarks: &LandmarkSet, grid: &AnchorGrid) -> Result<AnchorTargets<T>> {
    landmarks.validate(None)?;
    let l = landmarks.len();
    let n_a = grid.anchors_per_site();
    let cells = grid.sites();
    let mut offsets = vec![T::zero(); cells * 3 * l * n_a];
    let mut labels = vec![T::zero(); cells * l * n_a];
    let mut positive = vec![false; cells * l * n_a];
    for (li, lm) in landmarks.landmarks.iter().enumerate() {
        if !lm.present {
            continue;
        }
        let g = lm.pos;
        let mut nearest = (f64::INFINITY, 0usize);
        let mut mark = |site: [usize; 3], a: usize| {
            let f = grid.center(site);
            let r = grid.radii[a];
            let slot = grid.cell(site) * l * n_a + li * n_a + a;
            positive[slot] = true;
            labels[slot] = T::one();
            for ax in 0..3 {
                offsets[slot * 3 + ax] = cast((g[ax] - f[ax]) / r);
            }
        };
        for (site, a, id) in grid.anchors() {
            let f = grid.center(site);
            let r = grid.radii[a];
            let linf = (0..3).map(|ax| (g[ax] - f[ax]).abs()).fold(0.0, f64::max);
            if linf <= r {
                mark(site, a);
            }
            let d2: f64 = (0..3).map(|ax| (g[ax] - f[ax]).powi(2)).sum();
            if d2 < nearest.0 {
                nearest = (d2, id);
            }
        }
        let (site, a, _) = grid.anchors().nth(nearest.1).expect("grid has anchors");
        mark(site, a);
    }
    let [h, w, d] = grid.dims;
    Ok(AnchorTargets {
        offsets: Tensor::new([h, w, d, 3 * l * n_a], offsets)?,
        labels: Tensor::new([h, w, d, l * n_a], labels)?,
        positive,
    })
}

pub fn decode_predictions<T: Element>(
    offsets: &Tensor<T>,
    probs: &Tensor<T>,
    grid: &AnchorGrid,
    tau: f64,
    spacing: [f64; 3],
) -> Result<LandmarkSet> {
    let [h, w, d] = grid.dims;
    let n_a = grid.anchors_per_site();
    let la = match probs.shape() {
        &[ph, pw, pd, c] if [ph, pw, pd] == grid.dims && c % n_a == 0 => c,
        s => return Err(Error::shape("decode_predictions", s, &[h, w, d, n_a])),
    };
    if offsets.shape() != [h, w, d, 3 * la] {
        return Err(Error::shape("decode_predictions", offsets.shape(), &[h, w, d, 3 * la]));
    }
    let l = la / n_a;
    let (p, t) = (probs.data(), offsets.data());
    let mut positions = Vec::with_capacity(l);
    for li in 0..l {
        let mut best: Option<(f64, [usize; 3], usize)> = None;
        for (site, a, _) in grid.anchors() {
            let v = p[grid.cell(site) * la + li * n_a + a].to_f64().unwrap_or(f64::NAN);
            if best.is_none_or(|(b, _, _)| v > b) {
                best = Some((v, site, a));
            }
        }
        let Some((v, site, a)) = best else {
            positions.push(None);
            continue;
        };
        if !(v >= tau) {
            positions.push(None);
            continue;
        }
        let f = grid.center(site);
        let r = grid.radii[a];
        let slot = grid.cell(site) * la + li * n_a + a;
        let mut pos = [0.0; 3];
        for ax in 0..3 {
            pos[ax] = f[ax] + r * t[slot * 3 + ax].to_f64().unwrap_or(f64::NAN);
        }
        positions.push(Some(pos));
    }
    Ok(LandmarkSet::from_positions(&positions, spacing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(pos: &[Option<[f64; 3]>]) -> LandmarkSet {
        LandmarkSet::from_positions(pos, [1.0; 3])
    }

    #[test]
    fn lattice_centers() {
        let g = build_grid([2, 2, 2], 4.0, &[2.0]).unwrap();
        let mut xs: Vec<[f64; 3]> = g.anchors().map(|(s, _, _)| g.center(s)).collect();
        xs.dedup();
        assert_eq!(xs.len(), 8);
        assert!(xs.iter().all(|c| c.iter().all(|&v| v == 2.0 || v == 6.0)));
        assert_eq!(g.anchors().nth(1).unwrap().0, [1, 0, 0]);
        let multi = build_grid([1, 1, 1], 4.0, &default_radii(4.0)).unwrap();
        assert_eq!(multi.anchors().count(), 3);
        let unit = build_grid([1, 1, 1], 1.0, &[0.5]).unwrap();
        assert_eq!(unit.center([0, 0, 0]), [0.5; 3]);
    }

    #[test]
    fn grid_validation() {
        assert!(build_grid([2, 2, 2], 4.0, &[]).is_err());
        assert!(build_grid([2, 2, 2], 4.0, &[2.0, 2.0]).is_err());
        assert!(build_grid([2, 2, 2], 0.5, &[2.0]).is_err());
    }

    #[test]
    fn offset_parameterization() {
        // one site with u = 16 puts the center at (8, 8, 8)
        let g = build_grid([1, 1, 1], 16.0, &[2.0]).unwrap();
        let t = encode_targets::<f64>(&set(&[Some([10.0; 3])]), &g).unwrap();
        assert_eq!(t.offsets.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(t.labels.data(), &[1.0]);
        let t = encode_targets::<f64>(&set(&[Some([8.0; 3])]), &g).unwrap();
        assert_eq!(t.offsets.data(), &[0.0; 3]);
        assert!(t.positive[0]);
    }

    #[test]
    fn midway_landmark_goes_to_lower_site() {
        // centers 2 and 6 along x, radius too small to cover 4
        let g = build_grid([2, 1, 1], 4.0, &[1.0]).unwrap();
        let t = encode_targets::<f64>(&set(&[Some([4.0, 2.0, 2.0])]), &g).unwrap();
        assert_eq!(t.positive, vec![true, false]);
    }

    #[test]
    fn absent_landmarks_have_no_positives() {
        let g = build_grid([2, 2, 2], 4.0, &default_radii(4.0)).unwrap();
        let t = encode_targets::<f64>(&set(&[None, Some([3.0, 3.0, 3.0])]), &g).unwrap();
        let n_a = 3;
        for cell in 0..8 {
            for a in 0..n_a {
                assert!(!t.positive[cell * 2 * n_a + a]);
            }
        }
        let back = decode_predictions(&t.offsets, &t.labels, &g, DEFAULT_TAU, [1.0; 3]).unwrap();
        assert!(!back.landmarks[0].present);
        assert!(back.landmarks[1].present);
    }

    #[test]
    fn low_probabilities_decode_absent() {
        let g = build_grid([2, 2, 2], 4.0, &[2.0]).unwrap();
        let p = Tensor::<f64>::full([2, 2, 2, 2], 0.1).unwrap();
        let o = Tensor::<f64>::zeros([2, 2, 2, 6]).unwrap();
        let back = decode_predictions(&o, &p, &g, 0.5, [1.0; 3]).unwrap();
        assert_eq!(back.present_count(), 0);
    }

    #[test]
    fn highest_probability_anchor_wins() {
        // two sites along x (centers 2 and 6), r = 1
        let g = build_grid([2, 1, 1], 4.0, &[1.0]).unwrap();
        let p = Tensor::new([2, 1, 1, 1], vec![0.8, 0.9]).unwrap();
        // site 0 decodes to (7,7,7), site 1 to (5,5,5)
        let o = Tensor::new([2, 1, 1, 3], vec![5.0, 5.0, 5.0, -1.0, 3.0, 3.0]).unwrap();
        let back = decode_predictions(&o, &p, &g, 0.5, [1.0; 3]).unwrap();
        assert_eq!(back.landmarks[0].pos, [5.0, 5.0, 5.0]);
    }

    fn case() -> impl Strategy<Value = ([usize; 3], Vec<f64>, Vec<Option<[f64; 3]>>)> {
        let dims = (1usize..4, 1usize..4, 1usize..3);
        let radii = prop_oneof![Just(vec![2.0]), Just(vec![2.0, 4.0, 6.0]), Just(vec![1.0, 3.0])];
        (dims, radii).prop_flat_map(|((h, w, d), radii)| {
            let lm = prop::option::weighted(0.7, (0.0..(4 * h - 1) as f64, 0.0..(4 * w - 1) as f64, 0.0..(4 * d - 1) as f64));
            (Just([h, w, d]), Just(radii), prop::collection::vec(lm.prop_map(|o| o.map(|(x, y, z)| [x, y, z])), 1..5))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn encode_decode_roundtrip((dims, radii, pos) in case()) {
            let g = build_grid(dims, 4.0, &radii).unwrap();
            let lms = set(&pos);
            let t = encode_targets::<f64>(&lms, &g).unwrap();
            let back = decode_predictions(&t.offsets, &t.labels, &g, DEFAULT_TAU, [1.0; 3]).unwrap();
            for (a, b) in lms.landmarks.iter().zip(&back.landmarks) {
                prop_assert_eq!(a.present, b.present);
                if a.present {
                    for ax in 0..3 {
                        prop_assert!((a.pos[ax] - b.pos[ax]).abs() < 1e-9);
                    }
                }
            }
            // present landmarks have a positive anchor, absent ones none
            let (l, n_a) = (pos.len(), radii.len());
            for (li, lm) in lms.landmarks.iter().enumerate() {
                let count = (0..g.sites()).flat_map(|c| (0..n_a).map(move |a| c * l * n_a + li * n_a + a))
                    .filter(|&s| t.positive[s]).count();
                prop_assert_eq!(count > 0, lm.present);
            }
        }

        #[test]
        fn decode_invariant_under_monotone_transform((dims, radii, pos) in case()) {
            let g = build_grid(dims, 4.0, &radii).unwrap();
            let t = encode_targets::<f64>(&set(&pos), &g).unwrap();
            let soft = t.labels.map(|v| 0.2 + 0.6 * v);
            let squashed = soft.map(|v| v.powi(3));
            let a = decode_predictions(&t.offsets, &soft, &g, 0.5, [1.0; 3]).unwrap();
            let b = decode_predictions(&t.offsets, &squashed, &g, 0.5f64.powi(3), [1.0; 3]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
