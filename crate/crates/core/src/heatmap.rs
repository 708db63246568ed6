//! Gaussian heatmap encoding of landmark sets and peak decoding.

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::tensor::{cast, Element, Tensor};

pub const DEFAULT_PRESENCE_THRESHOLD: f64 = 0.25;

/// Per-landmark heatmaps, `[H, W, D, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapVolume<T: Element> {
    pub values: Tensor<T>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub presence_threshold: f64,
    /// Replace the argmax voxel by the value-weighted centroid of its 3x3x3
    /// neighbourhood.
    pub centroid_refine: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            presence_threshold: DEFAULT_PRESENCE_THRESHOLD,
            centroid_refine: false,
        }
    }
}

/// Unnormalized isotropic Gaussian at squared distance `d2`.
pub fn gaussian(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn encode_heatmaps<T: Element>(
    landmarks: &LandmarkSet,
    dims: [usize; 3],
    sigma: f64,
) -> Result<HeatmapVolume<T>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("encode_heatmaps", format!("sigma must be positive, got {sigma}")));
    }
    landmarks.validate(Some(dims))?;
    let l = landmarks.len();
    let [h, w, d] = dims;
    let mut data = vec![T::zero(); h * w * d * l];
    for (c, lm) in landmarks.landmarks.iter().enumerate() {
        if !lm.present {
            continue;
        }
        let [px, py, pz] = lm.pos;
        for x in 0..h {
            let dx = (x as f64 - px).powi(2);
            for y in 0..w {
                let dy = (y as f64 - py).powi(2);
                for z in 0..d {
                    let dz = (z as f64 - pz).powi(2);
                    data[((x * w + y) * d + z) * l + c] = cast(gaussian(dx + dy + dz, sigma));
                }
            }
        }
    }
    Ok(HeatmapVolume {
        values: Tensor::new([h, w, d, l], data)?,
        sigma,
    })
}

fn split(values: &Tensor<impl Element>) -> Result<([usize; 3], usize)> {
    match values.shape() {
        &[h, w, d, l] => Ok(([h, w, d], l)),
        s => Err(Error::invalid("heatmap", format!("expected [H, W, D, L], got {s:?}"))),
    }
}

/// Per-channel argmax. Row-major scanning with a strict `>` keeps the first
/// maximum, which is the lowest `(x, y, z)` in lexicographic order.
pub fn decode_peaks<T: Element>(values: &Tensor<T>, spacing: [f64; 3], opts: &DecodeOptions) -> Result<LandmarkSet> {
    let ([h, w, d], l) = split(values)?;
    let data = values.data();
    let at = |x: usize, y: usize, z: usize, c: usize| data[((x * w + y) * d + z) * l + c].to_f64().unwrap_or(0.0);
    let mut positions = Vec::with_capacity(l);
    for c in 0..l {
        let mut best = (f64::NEG_INFINITY, [0usize; 3]);
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    let v = at(x, y, z, c);
                    if v > best.0 {
                        best = (v, [x, y, z]);
                    }
                }
            }
        }
        let (peak, [bx, by, bz]) = best;
        if !(peak >= opts.presence_threshold) {
            positions.push(None);
            continue;
        }
        let mut pos = [bx as f64, by as f64, bz as f64];
        if opts.centroid_refine {
            let (mut acc, mut total) = ([0.0; 3], 0.0);
            for x in bx.saturating_sub(1)..(bx + 2).min(h) {
                for y in by.saturating_sub(1)..(by + 2).min(w) {
                    for z in bz.saturating_sub(1)..(bz + 2).min(d) {
                        let v = at(x, y, z, c).max(0.0);
                        acc[0] += v * x as f64;
                        acc[1] += v * y as f64;
                        acc[2] += v * z as f64;
                        total += v;
                    }
                }
            }
            if total > 0.0 {
                pos = acc.map(|a| a / total);
            }
        }
        positions.push(Some(pos));
    }
    Ok(LandmarkSet::from_positions(&positions, spacing))
}

/// Channel sum, `[H, W, D]`. Export only.
pub fn sum_heatmap<T: Element>(values: &Tensor<T>) -> Result<Tensor<T>> {
    let ([h, w, d], l) = split(values)?;
    let data: Vec<T> = values.data().chunks_exact(l).map(|c| c.iter().copied().sum()).collect();
    Tensor::new([h, w, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(pos: [f64; 3]) -> LandmarkSet {
        LandmarkSet::from_positions(&[Some(pos)], [1.0; 3])
    }

    #[test]
    fn peak_and_one_sigma_values() {
        let hm = encode_heatmaps::<f64>(&one([4.0, 4.0, 4.0]), [10, 10, 10], 2.0).unwrap();
        assert_eq!(hm.values.get(&[4, 4, 4, 0]), 1.0);
        assert!((hm.values.get(&[6, 4, 4, 0]) - 0.606531).abs() < 1e-6);
        assert!(hm.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn absent_channel_is_zero() {
        let set = LandmarkSet::from_positions(&[Some([1.0, 1.0, 1.0]), None], [1.0; 3]);
        let hm = encode_heatmaps::<f64>(&set, [4, 4, 4], 1.0).unwrap();
        let absent: f64 = hm.values.data().iter().skip(1).step_by(2).sum();
        assert_eq!(absent, 0.0);
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(encode_heatmaps::<f64>(&one([4.0, 0.0, 0.0]), [4, 4, 4], 1.0).is_err());
        assert!(encode_heatmaps::<f64>(&one([1.0, 1.0, 1.0]), [4, 4, 4], 0.0).is_err());
    }

    #[test]
    fn one_hot_and_empty_decode() {
        let mut data = vec![0.0f64; 8 * 8 * 8];
        data[(3 * 8 + 4) * 8 + 5] = 1.0;
        let t = Tensor::new([8, 8, 8, 1], data).unwrap();
        let set = decode_peaks(&t, [1.0; 3], &DecodeOptions::default()).unwrap();
        assert!(set.landmarks[0].present);
        assert_eq!(set.landmarks[0].pos, [3.0, 4.0, 5.0]);
        let zero = Tensor::<f64>::zeros([4, 4, 4, 1]).unwrap();
        let opts = DecodeOptions { presence_threshold: 0.1, ..Default::default() };
        assert!(!decode_peaks(&zero, [1.0; 3], &opts).unwrap().landmarks[0].present);
    }

    #[test]
    fn ties_go_to_lowest_coordinate() {
        let mut data = vec![0.0f64; 27];
        // (2, 0, 0) and (0, 2, 1)
        data[18] = 0.5;
        data[7] = 0.5;
        let t = Tensor::new([3, 3, 3, 1], data).unwrap();
        let set = decode_peaks(&t, [1.0; 3], &DecodeOptions::default()).unwrap();
        assert_eq!(set.landmarks[0].pos, [0.0, 2.0, 1.0]);
    }

    #[test]
    fn centroid_refinement_shifts_towards_mass() {
        let mut data = vec![0.0f64; 27];
        data[13] = 1.0; // (1,1,1)
        data[14] = 1.0; // (1,1,2), tie resolved to (1,1,1)
        let t = Tensor::new([3, 3, 3, 1], data).unwrap();
        let opts = DecodeOptions { centroid_refine: true, ..Default::default() };
        assert_eq!(decode_peaks(&t, [1.0; 3], &opts).unwrap().landmarks[0].pos, [1.0, 1.0, 1.5]);
    }

    #[test]
    fn sums() {
        let set = LandmarkSet::from_positions(&[Some([0.0, 0.0, 0.0]), Some([2.0, 0.0, 0.0])], [1.0; 3]);
        let hm = encode_heatmaps::<f64>(&set, [3, 1, 1], 1.5).unwrap();
        let s = sum_heatmap(&hm.values).unwrap();
        assert_eq!(s.shape(), &[3, 1, 1]);
        assert!((s.get(&[1, 0, 0]) - 2.0 * gaussian(1.0, 1.5)).abs() < 1e-15);
        let z = sum_heatmap(&Tensor::<f64>::zeros([2, 2, 2, 3]).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    fn separated_landmarks() -> impl Strategy<Value = (Vec<[usize; 3]>, f64)> {
        (1.0f64..2.5, prop::collection::vec((0usize..12, 0usize..12, 0usize..8), 1..5))
            .prop_filter("pairwise separation > 2 sigma", |(sigma, pts)| {
                pts.iter().enumerate().all(|(i, a)| {
                    pts[..i].iter().all(|b| {
                        let d2 = (a.0 as f64 - b.0 as f64).powi(2)
                            + (a.1 as f64 - b.1 as f64).powi(2)
                            + (a.2 as f64 - b.2 as f64).powi(2);
                        d2.sqrt() > 2.0 * sigma
                    })
                })
            })
            .prop_map(|(s, pts)| (pts.into_iter().map(|(x, y, z)| [x, y, z]).collect(), s))
    }

    proptest! {
        #[test]
        fn roundtrip_integer_landmarks((pts, sigma) in separated_landmarks()) {
            let pos: Vec<_> = pts.iter().map(|p| Some(p.map(|c| c as f64))).collect();
            let set = LandmarkSet::from_positions(&pos, [1.0; 3]);
            let hm = encode_heatmaps::<f64>(&set, [12, 12, 8], sigma).unwrap();
            let back = decode_peaks(&hm.values, [1.0; 3], &DecodeOptions::default()).unwrap();
            prop_assert_eq!(back, set);
        }

        #[test]
        fn radial_monotonicity(sigma in 0.5f64..4.0, x in 0usize..6) {
            let hm = encode_heatmaps::<f64>(&one([x as f64, 0.0, 0.0]), [12, 1, 1], sigma).unwrap();
            for step in x + 1..11 {
                prop_assert!(hm.values.get(&[step + 1, 0, 0, 0]) < hm.values.get(&[step, 0, 0, 0]));
            }
        }

        #[test]
        fn decode_scale_invariant(pos in (0usize..6, 0usize..6, 0usize..6), scale in 0.3f64..5.0) {
            let p = [pos.0 as f64, pos.1 as f64, pos.2 as f64];
            let hm = encode_heatmaps::<f64>(&one(p), [6, 6, 6], 1.0).unwrap();
            let a = decode_peaks(&hm.values, [1.0; 3], &DecodeOptions::default()).unwrap();
            let b = decode_peaks(&hm.values.map(|v| v * scale), [1.0; 3], &DecodeOptions::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
