//! Inputs shared by the criterion benchmarks.

use lmk3d_core::attention::{dense_attention_reference, vbra, AttentionParams};
use lmk3d_core::cost::CostPoint;
use lmk3d_core::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random feature volume and projection weights for one sweep point.
pub struct AttentionInputs {
    pub point: CostPoint,
    pub x: Tensor<f32>,
    pub weights: [Tensor<f32>; 4],
}

impl AttentionInputs {
    pub fn new(point: CostPoint, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w, d] = point.dims;
        let c = point.channels;
        let x = Tensor::from_fn(vec![h, w, d, c], |_| rng.random_range(-1.0..1.0))?;
        let a = 1.0 / (c as f32).sqrt();
        let mut weight = || Tensor::from_fn(vec![c, c], |_| rng.random_range(-a..a));
        let weights = [weight()?, weight()?, weight()?, weight()?];
        Ok(AttentionInputs { point, x, weights })
    }

    fn setup(&self, tape: &mut Tape<f32>) -> (lmk3d_core::Var, AttentionParams) {
        let xv = tape.constant(self.x.clone());
        let [q, k, v, o] = self.weights.clone().map(|w| tape.constant(w));
        (xv, AttentionParams { w_q: q, w_k: k, w_v: v, w_o: o })
    }

    /// One routed forward pass; returns the output sum so it is not elided.
    pub fn routed(&self) -> Result<f32> {
        let mut tape = Tape::new();
        let (xv, p) = self.setup(&mut tape);
        let (y, _) = vbra(&mut tape, xv, &p, &self.point.config())?;
        Ok(tape.value(y).sum())
    }

    /// One dense forward pass with the same projections.
    pub fn dense(&self) -> Result<f32> {
        let mut tape = Tape::new();
        let (xv, p) = self.setup(&mut tape);
        let t = self.point.dims.iter().product();
        let flat = tape.reshape(xv, &[t, self.point.channels])?;
        let q = tape.matmul(flat, p.w_q)?;
        let k = tape.matmul(flat, p.w_k)?;
        let v = tape.matmul(flat, p.w_v)?;
        let y = dense_attention_reference(&mut tape, q, k, v, p.w_o, self.point.heads)?;
        Ok(tape.value(y).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routed_with_every_region_matches_dense() {
        let point = CostPoint { dims: [4, 4, 4], region: [2, 2, 2], k: 8, heads: 2, channels: 8 };
        let inputs = AttentionInputs::new(point, 3).unwrap();
        let (r, d) = (inputs.routed().unwrap(), inputs.dense().unwrap());
        assert!((r - d).abs() < 1e-3, "{r} vs {d}");
    }
}
