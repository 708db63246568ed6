//! Full-batch gradient descent with global-norm clipping, plus prediction.

use crate::anchor::{decode_predictions, encode_targets, AnchorTargets, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::heatmap::{decode_peaks, encode_heatmaps, DecodeOptions, DEFAULT_PRESENCE_THRESHOLD};
use crate::landmarks::LandmarkSet;
use crate::loss::{cls_loss, heatmap_loss, offset_loss, total_loss, LossParts, LossWeights};
use crate::data::Sample;
use crate::network::{forward, ModelConfig, ModelState, Output, Variant, ANCHOR_UNIT};
use crate::tensor::{cast, Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `w -= lr * g`.
    Gd,
    /// Adam with beta1 0.9, beta2 0.999, eps 1e-8.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Optimizer::Gd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}, expected gd or adam"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub clip_norm: f64,
    /// Heatmap target width in voxels.
    pub sigma: f64,
    pub weights: LossWeights,
    pub presence_threshold: f64,
    pub tau: f64,
}

/// Adam step size that overfits the desk synthetic set in 500 steps. The
/// anchor-based heads need a larger step for the classification term to
/// converge.
pub fn default_lr(variant: Variant) -> f64 {
    match variant {
        Variant::AnchorFree => 3e-4,
        Variant::AnchorBased => 3e-3,
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_variant(Variant::AnchorFree)
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        TrainConfig {
            steps: 500,
            optimizer: Optimizer::Adam,
            lr: default_lr(variant),
            clip_norm: 1.0,
            sigma: 2.0,
            weights: LossWeights::default(),
            presence_threshold: DEFAULT_PRESENCE_THRESHOLD,
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.sigma > 0.0) {
            return Err(Error::Config("lr, clip_norm and sigma must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Loss values after one step's forward pass.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub heatmap: Option<f64>,
    pub reg: Option<f64>,
    pub cls: Option<f64>,
    pub grad_norm: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,total,heatmap,reg,cls,grad_norm";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.total,
            opt(self.heatmap),
            opt(self.reg),
            opt(self.cls),
            self.grad_norm
        )
    }
}

/// Per-sample supervision.
#[derive(Debug, Clone)]
pub enum Target<T: Element> {
    Heatmap { values: Tensor<T>, present: Vec<bool> },
    Anchors { anchors: AnchorTargets<T>, aux: Option<(Tensor<T>, Vec<bool>)> },
}

/// Landmarks rescaled onto the anchor lattice resolution, clipped into it.
fn quarter_landmarks(set: &LandmarkSet, dims: [usize; 3]) -> LandmarkSet {
    let mut out = set.clone();
    let u = ANCHOR_UNIT as f64;
    for lm in &mut out.landmarks {
        for (p, &n) in lm.pos.iter_mut().zip(&dims) {
            *p = (*p / u).clamp(0.0, (n - 1) as f64);
        }
    }
    out
}

pub fn build_target<T: Element>(model: &ModelConfig, tc: &TrainConfig, landmarks: &LandmarkSet) -> Result<Target<T>> {
    match model.variant {
        Variant::AnchorFree => Ok(Target::Heatmap {
            values: encode_heatmaps(landmarks, model.input_dims, tc.sigma)?.values,
            present: landmarks.present_mask(),
        }),
        Variant::AnchorBased => {
            let grid = model.anchor_grid()?;
            let aux = if model.aux_heatmap {
                let small = quarter_landmarks(landmarks, grid.dims);
                let sigma = (tc.sigma / ANCHOR_UNIT as f64).max(0.5);
                Some((encode_heatmaps(&small, grid.dims, sigma)?.values, landmarks.present_mask()))
            } else {
                None
            };
            Ok(Target::Anchors { anchors: encode_targets(landmarks, &grid)?, aux })
        }
    }
}

fn mean_of<T: Element>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else { return Ok(None) };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.mul_scalar(acc, cast(1.0 / vars.len() as f64))?))
}

/// Batch objective: each term is averaged over the samples that define it
/// (a sample with no present landmark has no heatmap or offset term).
pub fn batch_loss<T: Element>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    bound: &crate::network::Bound,
    samples: &[Sample<T>],
    targets: &[Target<T>],
    tc: &TrainConfig,
) -> Result<(Var, LossParts)> {
    let (mut hm, mut reg, mut cls) = (Vec::new(), Vec::new(), Vec::new());
    for (s, t) in samples.iter().zip(targets) {
        let x = tape.constant(s.input.clone());
        match (forward(tape, bound, &state.config, x)?, t) {
            (Output::Heatmap(h), Target::Heatmap { values, present }) => {
                if present.iter().any(|&p| p) {
                    hm.push(heatmap_loss(tape, h, values, present)?);
                }
            }
            (Output::Anchors { offsets, probs, aux_heatmap }, Target::Anchors { anchors, aux }) => {
                if anchors.positive_count() > 0 {
                    reg.push(offset_loss(tape, offsets, &anchors.offsets, &anchors.positive)?);
                }
                cls.push(cls_loss(tape, probs, &anchors.labels)?);
                if let (Some(h), Some((values, present))) = (aux_heatmap, aux) {
                    if present.iter().any(|&p| p) {
                        hm.push(heatmap_loss(tape, h, values, present)?);
                    }
                }
            }
            _ => return Err(Error::Config("targets were built for a different variant".into())),
        }
    }
    let mut parts = LossParts { heatmap: mean_of(tape, &hm)?, reg: mean_of(tape, &reg)?, cls: mean_of(tape, &cls)? };
    if state.config.variant == Variant::AnchorBased && parts.reg.is_none() {
        // no landmark present anywhere: nothing to regress
        parts.reg = Some(tape.constant(Tensor::scalar(T::zero())));
    }
    if state.config.variant == Variant::AnchorFree && parts.heatmap.is_none() {
        return Err(Error::Data("no sample has a present landmark".into()));
    }
    let total = total_loss(tape, &parts, &tc.weights, state.config.variant)?;
    Ok((total, parts))
}

#[derive(Default)]
struct AdamState {
    t: i32,
    moments: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, key: &str, g: &[f64], lr: f64) -> Vec<f64> {
        let (m, v) = self.moments.entry(key.to_string()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let (c1, c2) = (1.0 - Self::B1.powi(self.t), 1.0 - Self::B2.powi(self.t));
        g.iter()
            .zip(m.iter_mut().zip(v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// Runs `tc.steps` full-batch steps, calling `on_step` with each record. The
/// record for step `i` holds the loss before that step's update; one extra
/// record with `step == tc.steps` holds the final loss.
pub fn train<T: Element>(
    mut state: ModelState<T>,
    samples: &[Sample<T>],
    tc: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<(ModelState<T>, Vec<LossRecord>)> {
    tc.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training needs at least one sample".into()));
    }
    for s in samples {
        if s.landmarks.len() != state.config.landmarks {
            return Err(Error::Data(format!(
                "{}: {} annotated landmarks but the model predicts {}; set model.landmarks",
                s.name,
                s.landmarks.len(),
                state.config.landmarks
            )));
        }
        if s.input.shape() != state.config.input_dims {
            return Err(Error::Data(format!(
                "{}: volume {:?} does not match the model input {:?}; crop or regenerate the data",
                s.name,
                s.input.shape(),
                state.config.input_dims
            )));
        }
    }
    let targets: Vec<Target<T>> = samples
        .iter()
        .map(|s| build_target(&state.config, tc, &s.landmarks))
        .collect::<Result<_>>()?;
    let mut adam = AdamState::default();
    let mut curve = Vec::with_capacity(tc.steps + 1);
    for step in 0..=tc.steps {
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape);
        let (loss, parts) = batch_loss(&mut tape, &state, &bound, samples, &targets, tc)?;
        let val = |v: Option<Var>| v.map(|v| tape.value(v).item().to_f64().unwrap_or(f64::NAN));
        let mut record = LossRecord {
            step,
            total: tape.value(loss).item().to_f64().unwrap_or(f64::NAN),
            heatmap: val(parts.heatmap),
            reg: val(parts.reg),
            cls: val(parts.cls),
            grad_norm: 0.0,
        };
        if step < tc.steps {
            let grads = tape.backward(loss)?;
            let norm = bound
                .vars
                .values()
                .map(|&v| grads.get(v).map_or(0.0, |g| g.norm_sq().to_f64().unwrap_or(f64::NAN)))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite { op: "train" });
            }
            record.grad_norm = norm;
            let clip = if norm > tc.clip_norm { tc.clip_norm / norm } else { 1.0 };
            adam.t += 1;
            for (key, &v) in &bound.vars {
                if let Some(g) = grads.get(v) {
                    let p = &state.params[key];
                    let g: Vec<f64> = g.data().iter().map(|&x| x.to_f64().unwrap_or(f64::NAN) * clip).collect();
                    let step = match tc.optimizer {
                        Optimizer::Gd => g.iter().map(|x| tc.lr * x).collect(),
                        Optimizer::Adam => adam.step(key, &g, tc.lr),
                    };
                    let updated: Vec<T> =
                        p.data().iter().zip(&step).map(|(&w, &s)| w - cast::<T>(s)).collect();
                    state.params.insert(key.clone(), Tensor::new(p.shape().to_vec(), updated)?);
                }
            }
        }
        on_step(&record);
        curve.push(record);
    }
    Ok((state, curve))
}

/// Decodes the network output for one input volume.
pub fn predict<T: Element>(state: &ModelState<T>, input: &Tensor<T>, spacing: [f64; 3], tc: &TrainConfig) -> Result<LandmarkSet> {
    let mut tape = Tape::new();
    let bound = state.bind_with(&mut tape, |_| false);
    let x = tape.constant(input.clone());
    match forward(&mut tape, &bound, &state.config, x)? {
        Output::Heatmap(h) => {
            let opts = DecodeOptions { presence_threshold: tc.presence_threshold, ..Default::default() };
            decode_peaks(tape.value(h), spacing, &opts)
        }
        Output::Anchors { offsets, probs, .. } => {
            let grid = state.config.anchor_grid()?;
            decode_predictions(tape.value(offsets), tape.value(probs), &grid, tc.tau, spacing)
        }
    }
}
