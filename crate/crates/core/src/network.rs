//! Encoder-decoder assemblies: an anchor-free heatmap network and an
//! anchor-based offset/probability network sharing one trunk.
//!
//! The encoder is a stem convolution followed by `stages` stride-2
//! downsampling steps, each followed by a routing-attention block. The
//! decoder repeatedly upsamples, concatenates the matching encoder feature
//! and convolves ("fuse"). The anchor-free decoder climbs back to full
//! resolution and ends in a linear 1x1x1 heatmap head; the anchor-based decoder
//! stops at quarter resolution where the anchor lattice lives.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::{build_grid, AnchorGrid};
use crate::attention::{vbra_block, AttentionParams, VbraBlockParams, VbraConfig};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry, ConvParams, LinearParams, MlpParams, NormParams};
use crate::tensor::{DType, Element, Tape, Tensor, Var};

/// Resolution of the anchor lattice relative to the input.
pub const ANCHOR_UNIT: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AnchorFree,
    AnchorBased,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::AnchorFree => "anchor_free",
            Variant::AnchorBased => "anchor_based",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor_free" => Ok(Variant::AnchorFree),
            "anchor_based" => Ok(Variant::AnchorBased),
            _ => Err(Error::Config(format!("unknown variant {s:?}; expected anchor_free or anchor_based"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_dims: [usize; 3],
    pub landmarks: usize,
    /// Width of each encoder stage; the stem uses the first entry.
    pub channels: Vec<usize>,
    pub heads: usize,
    /// Upper bound on the region extent; each stage clips it to its own
    /// feature extent.
    pub region: [usize; 3],
    /// Upper bound on routed regions; clipped to the region count per stage.
    pub top_k: usize,
    pub mlp_ratio: usize,
    /// Anchor radii in input voxels.
    pub anchor_radii: Vec<f64>,
    /// Extra linear heatmap head on the quarter-resolution trunk.
    pub aux_heatmap: bool,
    pub force_self_region: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::AnchorFree,
            input_dims: [32, 32, 16],
            landmarks: 2,
            channels: vec![8, 16, 32, 64],
            heads: 2,
            region: [4, 4, 4],
            top_k: 4,
            mlp_ratio: 2,
            anchor_radii: vec![2.0, 4.0, 6.0],
            aux_heatmap: false,
            force_self_region: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, for convolutions feeding a ReLU.
    FanInRelu(usize),
    Zeros,
    Ones,
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n == 0 {
            return Err(Error::Config("the encoder needs at least one stage".into()));
        }
        if self.variant == Variant::AnchorBased && n < 2 {
            return Err(Error::Config("the anchor-based variant needs at least two stages".into()));
        }
        let div = 1usize << n;
        if self.input_dims.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::Config(format!(
                "input dims {:?} must be divisible by 2^stages = {div}",
                self.input_dims
            )));
        }
        if self.channels.contains(&0) || self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "stage channels must be positive and nondecreasing, got {:?}",
                self.channels
            )));
        }
        if self.landmarks == 0 || self.mlp_ratio == 0 || self.top_k == 0 || self.region.contains(&0) {
            return Err(Error::Config("landmarks, mlp_ratio, top_k and region extents must be positive".into()));
        }
        for i in 1..=n {
            self.stage_vbra(i)?.validate(self.stage_dims(i))?;
        }
        if self.variant == Variant::AnchorBased {
            self.anchor_grid()?;
        }
        Ok(())
    }

    /// Spatial dims of encoder feature `E_i`.
    pub fn stage_dims(&self, i: usize) -> [usize; 3] {
        self.input_dims.map(|d| d >> i)
    }

    /// Channel width of encoder feature `E_i`.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.channels[i.saturating_sub(1)]
    }

    pub fn stage_vbra(&self, i: usize) -> Result<VbraConfig> {
        let dims = self.stage_dims(i);
        let c = self.stage_channels(i);
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("stage {i}: {c} channels not divisible by {} heads", self.heads)));
        }
        let region = [0, 1, 2].map(|ax| self.region[ax].min(dims[ax]));
        let regions: usize = (0..3).map(|ax| dims[ax].div_ceil(region[ax])).product();
        let mut cfg = VbraConfig::new(c, self.heads, region, self.top_k.min(regions));
        cfg.force_self_region = self.force_self_region;
        Ok(cfg)
    }

    /// Number of fuse steps in the decoder.
    pub fn decoder_steps(&self) -> usize {
        match self.variant {
            Variant::AnchorFree => self.stages(),
            Variant::AnchorBased => self.stages() - 2,
        }
    }

    pub fn anchor_grid(&self) -> Result<AnchorGrid> {
        build_grid(self.stage_dims(2), ANCHOR_UNIT as f64, &self.anchor_radii)
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let mut push = |k: String, shape: Vec<usize>, init: Init| out.push((k, shape, init));
        let c0 = self.stage_channels(0);
        push("stem.w".into(), vec![3, 3, 3, 1, c0], Init::FanInRelu(27));
        push("stem.b".into(), vec![c0], Init::Zeros);
        for i in 1..=self.stages() {
            let (cin, c) = (self.stage_channels(i - 1), self.stage_channels(i));
            let p = format!("enc{i}");
            let hidden = c * self.mlp_ratio;
            push(format!("{p}.down.w"), vec![3, 3, 3, cin, c], Init::FanIn(27 * cin));
            push(format!("{p}.down.b"), vec![c], Init::Zeros);
            push(format!("{p}.dw.w"), vec![3, 3, 3, c], Init::FanIn(27));
            push(format!("{p}.dw.b"), vec![c], Init::Zeros);
            push(format!("{p}.ln1.g"), vec![c], Init::Ones);
            push(format!("{p}.ln1.b"), vec![c], Init::Zeros);
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.attn.{w}"), vec![c, c], Init::FanIn(c));
            }
            push(format!("{p}.ln2.g"), vec![c], Init::Ones);
            push(format!("{p}.ln2.b"), vec![c], Init::Zeros);
            push(format!("{p}.mlp.fc1.w"), vec![c, hidden], Init::FanIn(c));
            push(format!("{p}.mlp.fc1.b"), vec![hidden], Init::Zeros);
            push(format!("{p}.mlp.fc2.w"), vec![hidden, c], Init::FanIn(hidden));
            push(format!("{p}.mlp.fc2.b"), vec![c], Init::Zeros);
        }
        let n = self.stages();
        for j in 1..=self.decoder_steps() {
            let (prev, skip) = (self.stage_channels(n - j + 1), self.stage_channels(n - j));
            push(format!("dec{j}.w"), vec![3, 3, 3, prev + skip, skip], Init::FanInRelu(27 * (prev + skip)));
            push(format!("dec{j}.b"), vec![skip], Init::Zeros);
        }
        let top = self.stage_channels(n - self.decoder_steps());
        let l = self.landmarks;
        match self.variant {
            Variant::AnchorFree => {
                push("head.w".into(), vec![1, 1, 1, top, l], Init::FanIn(top));
                push("head.b".into(), vec![l], Init::Zeros);
            }
            Variant::AnchorBased => {
                let n_a = self.anchor_radii.len();
                push("head.offset.w".into(), vec![1, 1, 1, top, 3 * l * n_a], Init::FanIn(top));
                push("head.offset.b".into(), vec![3 * l * n_a], Init::Zeros);
                push("head.prob.w".into(), vec![1, 1, 1, top, l * n_a], Init::FanIn(top));
                push("head.prob.b".into(), vec![l * n_a], Init::Zeros);
                if self.aux_heatmap {
                    push("head.aux.w".into(), vec![1, 1, 1, top, l], Init::FanIn(top));
                    push("head.aux.b".into(), vec![l], Init::Zeros);
                }
            }
        }
        out
    }

    /// Parameter keys in initialization order.
    pub fn param_keys(&self) -> Vec<String> {
        self.param_specs().into_iter().map(|(k, _, _)| k).collect()
    }
}

/// Learned parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Element> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: BTreeMap<String, Tensor<T>>,
}

pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<ModelState<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (key, shape, init) in config.param_specs() {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape)?,
            Init::Ones => Tensor::ones(shape)?,
            Init::FanIn(fan_in) | Init::FanInRelu(fan_in) => {
                let gain = if init == Init::FanIn(fan_in) { 1.0 } else { 6f64.sqrt() };
                let a = gain / (fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-a..a)))?
            }
        };
        params.insert(key, t);
    }
    Ok(ModelState { config: config.clone(), seed, params })
}

impl<T: Element> ModelState<T> {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Like [`bind`](Self::bind) but only keys accepted by `trainable`
    /// require gradients.
    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }
}

/// Parameter variables on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, key: &str) -> Result<Var> {
        self.vars
            .get(key)
            .copied()
            .ok_or_else(|| Error::Config(format!("model has no parameter {key:?}")))
    }

    fn conv(&self, prefix: &str, geometry: ConvGeometry) -> Result<ConvParams> {
        Ok(ConvParams {
            weight: self.get(&format!("{prefix}.w"))?,
            bias: Some(self.get(&format!("{prefix}.b"))?),
            geometry,
        })
    }

    fn block(&self, p: &str) -> Result<VbraBlockParams> {
        let g = |s: &str| self.get(&format!("{p}.{s}"));
        Ok(VbraBlockParams {
            dwconv: self.conv(&format!("{p}.dw"), ConvGeometry::same([3; 3]))?,
            norm1: NormParams { gamma: g("ln1.g")?, beta: g("ln1.b")?, eps: LN_EPS },
            attn: AttentionParams { w_q: g("attn.wq")?, w_k: g("attn.wk")?, w_v: g("attn.wv")?, w_o: g("attn.wo")? },
            norm2: NormParams { gamma: g("ln2.g")?, beta: g("ln2.b")?, eps: LN_EPS },
            mlp: MlpParams {
                fc1: LinearParams { weight: g("mlp.fc1.w")?, bias: Some(g("mlp.fc1.b")?) },
                fc2: LinearParams { weight: g("mlp.fc2.w")?, bias: Some(g("mlp.fc2.b")?) },
            },
        })
    }
}

/// Network outputs.
#[derive(Debug, Clone, Copy)]
pub enum Output {
    /// `[H, W, D, L]`, unbounded.
    Heatmap(Var),
    Anchors {
        /// `[H/4, W/4, D/4, 3 L n_a]`.
        offsets: Var,
        /// `[H/4, W/4, D/4, L n_a]` in (0, 1).
        probs: Var,
        /// `[H/4, W/4, D/4, L]`, only with the auxiliary head enabled.
        aux_heatmap: Option<Var>,
    },
}

/// Upsample `prev` by two, concatenate `skip` on channels, convolve, relu.
pub fn fuse<T: Element>(tape: &mut Tape<T>, prev: Var, skip: Var, conv: &ConvParams, stage: &str) -> Result<Var> {
    let (ps, ss) = (tape.shape(prev).to_vec(), tape.shape(skip).to_vec());
    if ps.len() != 4 || ss.len() != 4 || (0..3).any(|ax| ss[ax] != 2 * ps[ax]) {
        return Err(Error::invalid(
            "fuse",
            format!("{stage}: skip feature {ss:?} is not twice the spatial size of {ps:?}"),
        ));
    }
    let up = nn::trilinear_upsample(tape, prev, [2; 3])?;
    let cat = tape.concat(&[up, skip], 3)?;
    let y = nn::conv3d(tape, cat, conv)?;
    tape.relu(y)
}

/// Runs the network on one `[H, W, D]` intensity volume.
pub fn forward<T: Element>(tape: &mut Tape<T>, bound: &Bound, config: &ModelConfig, input: Var) -> Result<Output> {
    let [h, w, d] = config.input_dims;
    if tape.shape(input) != [h, w, d] {
        return Err(Error::shape("forward", tape.shape(input), &[h, w, d]));
    }
    let x = tape.reshape(input, &[h, w, d, 1])?;
    let stem = nn::conv3d(tape, x, &bound.conv("stem", ConvGeometry::same([3; 3]))?)?;
    let mut enc = vec![tape.relu(stem)?];
    for i in 1..=config.stages() {
        let p = format!("enc{i}");
        let down = nn::conv3d(tape, enc[i - 1], &bound.conv(&format!("{p}.down"), ConvGeometry::strided(2, 1))?)?;
        let cfg = config.stage_vbra(i)?;
        enc.push(vbra_block(tape, down, &bound.block(&p)?, &cfg)?);
    }
    let n = config.stages();
    let mut u = enc[n];
    for j in 1..=config.decoder_steps() {
        let conv = bound.conv(&format!("dec{j}"), ConvGeometry::same([3; 3]))?;
        u = fuse(tape, u, enc[n - j], &conv, &format!("decoder step {j}"))?;
    }
    let pointwise = |tape: &mut Tape<T>, key: &str| -> Result<Var> {
        nn::conv3d(tape, u, &bound.conv(key, ConvGeometry::same([1; 3]))?)
    };
    match config.variant {
        // A sigmoid here saturates towards 0 under the MSE heatmap loss and
        // the peaks never recover, so heatmap heads stay linear.
        Variant::AnchorFree => Ok(Output::Heatmap(pointwise(tape, "head")?)),
        Variant::AnchorBased => {
            let offsets = pointwise(tape, "head.offset")?;
            let logits = pointwise(tape, "head.prob")?;
            let probs = tape.sigmoid(logits)?;
            let aux_heatmap = if config.aux_heatmap { Some(pointwise(tape, "head.aux")?) } else { None };
            Ok(Output::Anchors { offsets, probs, aux_heatmap })
        }
    }
}

pub fn forward_anchor_free<T: Element>(tape: &mut Tape<T>, bound: &Bound, config: &ModelConfig, input: Var) -> Result<Var> {
    match forward(tape, bound, config, input)? {
        Output::Heatmap(h) => Ok(h),
        Output::Anchors { .. } => Err(Error::Config("model is anchor-based".into())),
    }
}

pub fn forward_anchor_based<T: Element>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &ModelConfig,
    input: Var,
) -> Result<(Var, Var)> {
    match forward(tape, bound, config, input)? {
        Output::Anchors { offsets, probs, .. } => Ok((offsets, probs)),
        Output::Heatmap(_) => Err(Error::Config("model is anchor-free".into())),
    }
}

const CKPT_MAGIC: &str = "LMK3D-CKPT 1";

/// Serializes a model: a text header (format line, seed, dtype, config JSON,
/// manifest of `key offset len shape`) terminated by `end`, then the raw
/// little-endian payload. Offsets and lengths count elements.
pub fn checkpoint_bytes<T: Element>(state: &ModelState<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_string(&state.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut header = format!(
        "{CKPT_MAGIC}\nseed {}\ndtype {}\nconfig {config}\nparams {}\n",
        state.seed,
        T::DTYPE.tag(),
        state.params.len()
    );
    let mut payload = Vec::with_capacity(state.param_count() * T::DTYPE.width());
    let mut offset = 0;
    for (key, t) in &state.params {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{key} {offset} {} {}\n", t.numel(), shape.join(",")));
        offset += t.numel();
        t.data().iter().for_each(|&v| v.write_le(&mut payload));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend(payload);
    Ok(out)
}

pub fn checkpoint_from_bytes<T: Element>(bytes: &[u8]) -> Result<ModelState<T>> {
    let bad = |msg: String| Error::Data(format!("checkpoint: {msg}"));
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
    };
    let magic = next_line()?;
    if magic != CKPT_MAGIC {
        return Err(bad(format!("unsupported format line {magic:?}, expected {CKPT_MAGIC:?}")));
    }
    let field = |line: &str, name: &str| -> Result<String> {
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{name} ...`, found {line:?}")))
    };
    let seed: u64 = field(next_line()?, "seed")?.parse().map_err(|_| bad("bad seed".into()))?;
    let dtype = field(next_line()?, "dtype")?;
    if DType::from_tag(&dtype) != Some(T::DTYPE) {
        return Err(bad(format!("stored as {dtype}, requested {}", T::DTYPE.tag())));
    }
    let config: ModelConfig =
        serde_json::from_str(&field(next_line()?, "config")?).map_err(|e| bad(format!("config: {e}")))?;
    let count: usize = field(next_line()?, "params")?.parse().map_err(|_| bad("bad params count".into()))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        let [key, off, len, shape] = parts.as_slice() else {
            return Err(bad(format!("bad manifest line {line:?}")));
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
        let shape = shape.split(',').map(parse).collect::<Result<Vec<_>>>()?;
        manifest.push((key.to_string(), parse(off)?, parse(len)?, shape));
    }
    if next_line()? != "end" {
        return Err(bad("missing `end` after manifest".into()));
    }
    let payload = &bytes[pos..];
    let width = T::DTYPE.width();
    let mut params = BTreeMap::new();
    for (key, off, len, shape) in manifest {
        let range = off * width..(off + len) * width;
        let chunk = payload.get(range).ok_or_else(|| bad(format!("payload too short for {key}")))?;
        let data = chunk.chunks_exact(width).map(T::read_le).collect();
        params.insert(key, Tensor::new(shape, data)?);
    }
    let state = ModelState { config, seed, params };
    state.check_keys()?;
    Ok(state)
}

impl<T: Element> ModelState<T> {
    /// Errors when the parameter set does not match the config.
    pub fn check_keys(&self) -> Result<()> {
        self.config.validate()?;
        for (key, shape, _) in self.config.param_specs() {
            match self.params.get(&key) {
                None => return Err(Error::Data(format!("checkpoint lacks parameter {key}"))),
                Some(t) if t.shape() != shape => {
                    return Err(Error::Data(format!("parameter {key}: stored {:?}, config needs {shape:?}", t.shape())))
                }
                _ => {}
            }
        }
        if self.params.len() != self.config.param_specs().len() {
            return Err(Error::Data("checkpoint has parameters the config does not use".into()));
        }
        if self.params.values().any(|t| !t.is_finite()) {
            return Err(Error::Data("checkpoint holds non-finite parameters".into()));
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Element>(path: &Path, state: &ModelState<T>) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(state)?)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<ModelState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_sampled;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            input_dims: [8, 8, 8],
            channels: vec![4, 8],
            anchor_radii: vec![2.0],
            ..Default::default()
        }
    }

    fn input(dims: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims.to_vec(), |_| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn validation() {
        assert!(ModelConfig { channels: vec![], ..Default::default() }.validate().is_err());
        assert!(ModelConfig { input_dims: [32, 32, 8], ..Default::default() }.validate().is_err());
        assert!(ModelConfig { channels: vec![8, 4], input_dims: [8, 8, 8], ..Default::default() }.validate().is_err());
        ModelConfig::default().validate().unwrap();
        assert_eq!("anchor_based".parse::<Variant>().unwrap(), Variant::AnchorBased);
        assert!("anchor".parse::<Variant>().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = build_model::<f32>(&cfg, 7).unwrap();
        assert_eq!(a, build_model::<f32>(&cfg, 7).unwrap());
        assert_ne!(a.params, build_model::<f32>(&cfg, 8).unwrap().params);
        assert_eq!(a.params.len(), cfg.param_keys().len());
        assert_eq!(a.params["enc1.ln1.g"].data(), &[1.0; 8]);
    }

    #[test]
    fn desk_anchor_free_shape() {
        let cfg = ModelConfig::default();
        let state = build_model::<f32>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let b = state.bind(&mut tape);
        let x = tape.constant(input(cfg.input_dims, 2).cast());
        let h = forward_anchor_free(&mut tape, &b, &cfg, x).unwrap();
        assert_eq!(tape.shape(h), &[32, 32, 16, 2]);
        assert!(tape.value(h).is_finite());
    }

    #[test]
    fn desk_anchor_based_shapes() {
        let cfg = ModelConfig { variant: Variant::AnchorBased, anchor_radii: vec![4.0], ..Default::default() };
        let state = build_model::<f32>(&cfg, 1).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let b = state.bind(&mut tape);
            let x = tape.constant(input(cfg.input_dims, 2).cast());
            let (o, p) = forward_anchor_based(&mut tape, &b, &cfg, x).unwrap();
            (tape.value(o).clone(), tape.value(p).clone())
        };
        let (o, p) = run();
        assert_eq!(o.shape(), &[8, 8, 4, 6]);
        assert_eq!(p.shape(), &[8, 8, 4, 2]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!((o, p), run());
    }

    #[test]
    fn fuse_contract() {
        let mut tape = Tape::<f64>::new();
        let prev = tape.param(Tensor::zeros([2, 2, 2, 3]).unwrap());
        let skip = tape.param(input([4, 4, 4], 3).reshape([4, 4, 4, 1]).unwrap());
        let w = tape.param(Tensor::from_fn([3, 3, 3, 4, 5], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5).unwrap());
        let b = tape.param(Tensor::zeros([5]).unwrap());
        let conv = ConvParams { weight: w, bias: Some(b), geometry: ConvGeometry::same([3; 3]) };
        let y = fuse(&mut tape, prev, skip, &conv, "t").unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 4, 5]);
        // zero prev: only the skip channel contributes
        let w_skip = tape.constant(tape.value(w).clone());
        let skip_only = tape.slice(w_skip, 3, 3, 1).unwrap();
        let direct = nn::conv3d(&mut tape, skip, &ConvParams { weight: skip_only, bias: None, geometry: ConvGeometry::same([3; 3]) }).unwrap();
        let direct = tape.relu(direct).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(direct)).unwrap() < 1e-15);

        let bad = tape.param(Tensor::zeros([3, 4, 4, 1]).unwrap());
        let err = fuse(&mut tape, prev, bad, &conv, "decoder step 2").unwrap_err();
        assert!(err.to_string().contains("decoder step 2"));
    }

    #[test]
    fn fuse_gradient_reaches_both_inputs() {
        let mut tape = Tape::<f64>::new();
        let prev = tape.param(input([2, 2, 2], 4).reshape([2, 2, 2, 1]).unwrap());
        let skip = tape.param(input([4, 4, 4], 5).reshape([4, 4, 4, 1]).unwrap());
        let w = tape.param(Tensor::from_fn([3, 3, 3, 2, 2], |i| ((i * 5) % 13) as f64 / 13.0).unwrap());
        let conv = ConvParams { weight: w, bias: None, geometry: ConvGeometry::same([3; 3]) };
        let y = fuse(&mut tape, prev, skip, &conv, "t").unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(prev).norm_sq() > 0.0 && g.wrt(skip).norm_sq() > 0.0);
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        for variant in [Variant::AnchorFree, Variant::AnchorBased] {
            let cfg = tiny(variant);
            let state = build_model::<f64>(&cfg, 3).unwrap();
            let mut tape = Tape::new();
            let b = state.bind(&mut tape);
            let x = tape.constant(input(cfg.input_dims, 4));
            let loss = match forward(&mut tape, &b, &cfg, x).unwrap() {
                Output::Heatmap(h) => tape.sum_all(h).unwrap(),
                Output::Anchors { offsets, probs, .. } => {
                    let a = tape.sum_all(offsets).unwrap();
                    let p = tape.sum_all(probs).unwrap();
                    tape.add(a, p).unwrap()
                }
            };
            let g = tape.backward(loss).unwrap();
            for (k, v) in &b.vars {
                assert!(g.wrt(*v).norm_sq() > 0.0, "{variant:?}: no gradient for {k}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = ModelConfig { variant: Variant::AnchorBased, aux_heatmap: true, ..tiny(Variant::AnchorBased) };
        let state = build_model::<f32>(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &state).unwrap();
        let back: ModelState<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, state);
        assert_eq!(checkpoint_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
        assert!(load_checkpoint::<f64>(&path).is_err());
        let bytes = std::fs::read(&path).unwrap();
        assert!(checkpoint_from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_differences() {
        let cfg = tiny(Variant::AnchorFree);
        let state = build_model::<f64>(&cfg, 5).unwrap();
        let x = input(cfg.input_dims, 6);
        let keys: Vec<String> = ["stem.w", "enc1.attn.wq", "enc2.mlp.fc1.w", "dec2.w", "head.w"].map(String::from).to_vec();
        let inputs: Vec<Tensor<f64>> = keys.iter().map(|k| state.params[k].clone()).collect();
        let report = grad_check_sampled(
            |tape, vars| {
                let mut bound = state.bind_with(tape, |_| false);
                for (k, v) in keys.iter().zip(vars) {
                    bound.vars.insert(k.clone(), *v);
                }
                let xv = tape.constant(x.clone());
                let h = forward_anchor_free(tape, &bound, &cfg, xv)?;
                let sq = tape.mul(h, h)?;
                tape.mean_all(sq)
            },
            &inputs,
            1e-6,
            Some((4, 9)),
            |_, _| {},
        )
        .unwrap();
        assert!(report.passed(1e-3), "{report:?}");
    }
}
