//! Training objectives. All terms are recorded on the tape and return a
//! 0-dimensional variable.

use crate::error::{Error, Result};
use crate::network::Variant;
use crate::tensor::{cast, Element, Tape, Tensor, Var};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reg: f64,
    pub cls: f64,
    pub heatmap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { reg: 1.0, cls: 1.0, heatmap: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.reg, self.cls, self.heatmap];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative with one positive, got {w:?}")));
        }
        Ok(())
    }
}

fn mask_tensor<T: Element>(shape: &[usize], keep: impl Fn(usize) -> bool) -> Result<Tensor<T>> {
    Tensor::from_fn(shape.to_vec(), |i| if keep(i) { T::one() } else { T::zero() })
}

/// Squared error over present channels of `[H, W, D, L]` heatmaps, divided by
/// `H W D` times the number of present channels.
pub fn heatmap_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, present: &[bool]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::shape("heatmap_loss", &shape, target.shape()));
    }
    let l = *shape.last().unwrap_or(&0);
    if present.len() != l {
        return Err(Error::invalid("heatmap_loss", format!("{} presence flags for {l} channels", present.len())));
    }
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present == 0 {
        return Err(Error::invalid("heatmap_loss", "no present landmarks"));
    }
    let voxels = target.numel() / l;
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let masked = if n_present < l {
        let m = tape.constant(mask_tensor(&shape, |i| present[i % l])?);
        tape.mul(sq, m)?
    } else {
        sq
    };
    let total = tape.sum_all(masked)?;
    tape.mul_scalar(total, cast(1.0 / (voxels * n_present) as f64))
}

/// Mean over positive anchors of `|t_true - t_pred|^2`. `positive` follows the
/// label layout; the offsets carry three channels per label slot.
pub fn offset_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, positive: &[bool]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::shape("offset_loss", &shape, target.shape()));
    }
    if positive.len() * 3 != target.numel() {
        return Err(Error::invalid(
            "offset_loss",
            format!("{} anchor flags for {} offset values", positive.len(), target.numel()),
        ));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::invalid("offset_loss", "no positive anchors"));
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(t, pred)?;
    let sq = tape.mul(diff, diff)?;
    let m = tape.constant(mask_tensor(&shape, |i| positive[i / 3])?);
    let masked = tape.mul(sq, m)?;
    let total = tape.sum_all(masked)?;
    tape.mul_scalar(total, cast(1.0 / n_pos as f64))
}

/// Mean binary cross-entropy over every anchor, with `p_hat` clamped into
/// `[eps, 1 - eps]`.
pub fn cls_loss<T: Element>(tape: &mut Tape<T>, p_hat: Var, p_true: &Tensor<T>) -> Result<Var> {
    let shape = tape.shape(p_hat).to_vec();
    if shape != p_true.shape() {
        return Err(Error::shape("cls_loss", &shape, p_true.shape()));
    }
    let p = tape.clamp(p_hat, cast(BCE_EPS), cast(1.0 - BCE_EPS))?;
    let log_p = tape.log(p)?;
    let neg = tape.mul_scalar(p, -T::one())?;
    let one_minus = tape.add_scalar(neg, T::one())?;
    let log_q = tape.log(one_minus)?;
    let y = tape.constant(p_true.clone());
    let y_bar = tape.constant(p_true.map(|v| T::one() - v));
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(y_bar, log_q)?;
    let s = tape.add(a, b)?;
    let mean = tape.mean_all(s)?;
    tape.mul_scalar(mean, -T::one())
}

/// Whichever terms the variant produced.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub heatmap: Option<Var>,
    pub reg: Option<Var>,
    pub cls: Option<Var>,
}

/// Anchor-free: the heatmap term alone, unweighted. Anchor-based: the
/// weighted sum of the offset, classification and (if present) auxiliary
/// heatmap terms.
pub fn total_loss<T: Element>(tape: &mut Tape<T>, parts: &LossParts, weights: &LossWeights, variant: Variant) -> Result<Var> {
    match variant {
        Variant::AnchorFree => parts
            .heatmap
            .ok_or_else(|| Error::invalid("total_loss", "anchor-free loss needs the heatmap term")),
        Variant::AnchorBased => {
            let (Some(reg), Some(cls)) = (parts.reg, parts.cls) else {
                return Err(Error::invalid("total_loss", "anchor-based loss needs offset and classification terms"));
            };
            let mut terms = vec![(reg, weights.reg), (cls, weights.cls)];
            if let Some(h) = parts.heatmap {
                terms.push((h, weights.heatmap));
            }
            let mut acc: Option<Var> = None;
            for (v, w) in terms {
                let scaled = tape.mul_scalar(v, cast(w))?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, scaled)?,
                    None => scaled,
                });
            }
            Ok(acc.expect("at least two terms"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn eval(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn heatmap_cases() {
        let target = Tensor::from_fn([4, 4, 2, 1], |i| if i == 5 { 1.0 } else { 0.0 }).unwrap();
        let zero = Tensor::zeros([4, 4, 2, 1]).unwrap();
        assert_eq!(eval(|t| { let p = t.param(zero.clone()); heatmap_loss(t, p, &target, &[true]) }), 1.0 / 32.0);
        assert_eq!(eval(|t| { let p = t.param(target.clone()); heatmap_loss(t, p, &target, &[true]) }), 0.0);
        let mut tape = Tape::new();
        let p = tape.param(zero);
        assert!(heatmap_loss(&mut tape, p, &target, &[false]).is_err());
    }

    #[test]
    fn masked_channel_ignores_garbage() {
        let target = Tensor::from_fn([2, 2, 2, 2], |i| (i % 3) as f64 * 0.25).unwrap();
        let mut garbage = target.to_vec();
        for (i, v) in garbage.iter_mut().enumerate() {
            if i % 2 == 1 {
                *v = 9.0 + i as f64;
            }
        }
        let garbage = Tensor::new([2, 2, 2, 2], garbage).unwrap();
        let clean = eval(|t| { let p = t.param(target.clone()); heatmap_loss(t, p, &target, &[true, false]) });
        let mut tape = Tape::new();
        let p = tape.param(garbage);
        let loss = heatmap_loss(&mut tape, p, &target, &[true, false]).unwrap();
        assert_eq!(tape.value(loss).item(), clean);
        let g = tape.backward(loss).unwrap().wrt(p);
        assert!(g.data().iter().skip(1).step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn offset_cases() {
        let target = Tensor::new([1, 1, 1, 6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let zero = Tensor::zeros([1, 1, 1, 6]).unwrap();
        assert_eq!(eval(|t| { let p = t.param(zero.clone()); offset_loss(t, p, &target, &[true, false]) }), 1.0);
        assert_eq!(eval(|t| { let p = t.param(target.clone()); offset_loss(t, p, &target, &[true, true]) }), 0.0);
        let two = Tensor::new([1, 1, 1, 6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(eval(|t| { let p = t.param(zero.clone()); offset_loss(t, p, &two, &[true, true]) }), 2.0);
        let mut tape = Tape::new();
        let p = tape.param(zero);
        assert!(offset_loss(&mut tape, p, &target, &[false, false]).is_err());
    }

    #[test]
    fn cls_cases() {
        let ones = Tensor::ones([1]).unwrap();
        let v = eval(|t| { let p = t.param(Tensor::full([1], 0.5).unwrap()); cls_loss(t, p, &ones) });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
        let labels = Tensor::new([4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let v = eval(|t| { let p = t.param(labels.clone()); cls_loss(t, p, &labels) });
        assert!((0.0..1e-6).contains(&v), "{v}");
    }

    #[test]
    fn total_dispatch() {
        let mut tape = Tape::<f64>::new();
        let (a, b, c) = (
            tape.param(Tensor::scalar(0.3)),
            tape.param(Tensor::scalar(0.5)),
            tape.param(Tensor::scalar(0.2)),
        );
        let parts = LossParts { heatmap: Some(a), reg: Some(b), cls: Some(c) };
        let w = LossWeights::default();
        let v = total_loss(&mut tape, &parts, &w, Variant::AnchorBased).unwrap();
        assert!((tape.value(v).item() - 1.0).abs() < 1e-15);
        let heavy = LossWeights { reg: 7.0, cls: 3.0, heatmap: 2.0 };
        let v = total_loss(&mut tape, &parts, &heavy, Variant::AnchorFree).unwrap();
        assert_eq!(tape.value(v).item(), 0.3);
        let no_cls = LossWeights { cls: 0.0, ..w };
        let v = total_loss(&mut tape, &parts, &no_cls, Variant::AnchorBased).unwrap();
        assert_eq!(tape.backward(v).unwrap().wrt(c).item(), 0.0);
        assert!(total_loss(&mut tape, &LossParts { heatmap: Some(a), ..Default::default() }, &w, Variant::AnchorBased).is_err());
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights { reg: 0.0, cls: 0.0, heatmap: 0.0 }.validate().is_err());
        assert!(LossWeights { reg: -1.0, ..Default::default() }.validate().is_err());
        LossWeights::default().validate().unwrap();
    }

    #[test]
    fn gradients_match_differences() {
        let target = Tensor::from_fn([2, 2, 1, 2], |i| (i as f64 * 0.37).sin().abs()).unwrap();
        let pred = Tensor::from_fn([2, 2, 1, 2], |i| (i as f64 * 0.91).cos() * 0.5).unwrap();
        let r = grad_check(|t, v| heatmap_loss(t, v[0], &target, &[true, false]), &[pred], 1e-6).unwrap();
        assert!(r.passed(1e-6), "{r:?}");

        let off_t = Tensor::from_fn([1, 1, 2, 6], |i| i as f64 * 0.1 - 0.4).unwrap();
        let off_p = Tensor::from_fn([1, 1, 2, 6], |i| (i as f64).sin()).unwrap();
        let pos = [true, false, true, true];
        let r = grad_check(|t, v| offset_loss(t, v[0], &off_t, &pos), &[off_p], 1e-6).unwrap();
        assert!(r.passed(1e-6), "{r:?}");

        let y = Tensor::new([5], vec![1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let p = Tensor::new([5], vec![0.2, 0.3, 0.7, 0.9, 0.55]).unwrap();
        let r = grad_check(|t, v| cls_loss(t, v[0], &y), &[p], 1e-6).unwrap();
        assert!(r.passed(1e-6), "{r:?}");
    }

    proptest! {
        #[test]
        fn bce_symmetry(q in 0.01f64..0.99) {
            let one = eval(|t| { let p = t.param(Tensor::full([1], q).unwrap()); cls_loss(t, p, &Tensor::ones([1]).unwrap()) });
            let zero = eval(|t| { let p = t.param(Tensor::full([1], 1.0 - q).unwrap()); cls_loss(t, p, &Tensor::zeros([1]).unwrap()) });
            prop_assert!((one - zero).abs() < 1e-12);
        }

        #[test]
        fn total_is_linear_in_weights(parts in prop::array::uniform3(0.0f64..2.0), w in prop::array::uniform3(0.0f64..3.0), s in 0.0f64..4.0) {
            let run = |w: [f64; 3]| {
                let mut tape = Tape::<f64>::new();
                let vs = parts.map(|p| tape.param(Tensor::scalar(p)));
                let lp = LossParts { reg: Some(vs[0]), cls: Some(vs[1]), heatmap: Some(vs[2]) };
                let v = total_loss(&mut tape, &lp, &LossWeights { reg: w[0], cls: w[1], heatmap: w[2] }, Variant::AnchorBased).unwrap();
                tape.value(v).item()
            };
            let base = run(w);
            let scaled = run([w[0] * s, w[1], w[2]]);
            let expect = base + (s - 1.0) * w[0] * parts[0];
            prop_assert!((scaled - expect).abs() < 1e-12);
        }

        #[test]
        fn losses_nonnegative(vals in prop::collection::vec(-2.0f64..2.0, 8), probs in prop::collection::vec(0.0f64..1.0, 8)) {
            let pred = Tensor::new([2, 2, 1, 2], vals.clone()).unwrap();
            let target = Tensor::new([2, 2, 1, 2], probs.clone()).unwrap();
            let hm = eval(|t| { let p = t.param(pred.clone()); heatmap_loss(t, p, &target, &[true, true]) });
            prop_assert!(hm >= 0.0);
            let labels = Tensor::new([8], probs.iter().map(|p| p.round()).collect()).unwrap();
            let p = Tensor::new([8], probs).unwrap();
            let bce = eval(|t| { let v = t.param(p.clone()); cls_loss(t, v, &labels) });
            prop_assert!(bce >= 0.0);
        }
    }
}
