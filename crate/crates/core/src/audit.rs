//! Finite-difference gradient audit suites, run at 64-bit.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{vbra, vbra_block, AttentionParams, VbraBlockParams, VbraConfig};
use crate::error::{Error, Result};
use crate::loss::{cls_loss, heatmap_loss, offset_loss, total_loss, LossParts, LossWeights};
use crate::network::{build_model, forward, ModelConfig, Output, Variant};
use crate::nn::{
    add_bias, conv3d, dwconv3d, layer_norm, linear, mlp_block, trilinear_upsample, ConvGeometry, ConvParams,
    LinearParams, MlpParams, NormParams,
};
use crate::tensor::{grad_check_sampled, GradCheckReport, Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const VBRA_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Vbra,
    Losses,
    EndToEnd,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ops, Suite::Vbra, Suite::Losses, Suite::EndToEnd];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Vbra => "vbra",
            Suite::Losses => "losses",
            Suite::EndToEnd => "end2end",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck suite {s:?}, expected ops, vbra, losses or end2end")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuditOptions {
    /// Perturbs one analytic gradient element per check. A correct harness
    /// must then report failures.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed(self.tolerance)
    }
}

pub fn format_results(results: &[CheckResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10}{:<28}{:>14}{:>12}{:>10}  status", "suite", "check", "max rel err", "tolerance", "elements");
    for r in results {
        let _ = writeln!(
            s,
            "{:<10}{:<28}{:>14.3e}{:>12.0e}{:>10}  {}",
            r.suite.as_str(),
            r.name,
            r.report.max_rel_error,
            r.tolerance,
            r.report.checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    s
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    /// Elements checked per input; `None` checks all of them.
    sample: Option<usize>,
    f: Loss,
}

fn case(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name: name.to_string(), inputs, sample: None, f: Box::new(f) }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).expect("nonzero shape")
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, seed)
}

/// Keeps every element at least `gap` away from each kink in `kinks`, so
/// central differences never straddle one.
fn away_from(t: Tensor<f64>, kinks: &[f64], gap: f64) -> Tensor<f64> {
    t.map(|v| {
        let mut v = v;
        for &k in kinks {
            if (v - k).abs() < gap {
                v = if v >= k { k + gap } else { k - gap };
            }
        }
        v
    })
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = t.constant(rand(t.shape(y), seed));
    let m = t.mul(y, r)?;
    t.sum_all(m)
}

fn run(suite: Suite, tolerance: f64, cases: Vec<Case>, opts: AuditOptions) -> Result<Vec<CheckResult>> {
    cases
        .into_iter()
        .map(|c| {
            let corrupt = opts.corrupt_gradient;
            let report = grad_check_sampled(
                &c.f,
                &c.inputs,
                EPS,
                c.sample.map(|n| (n, 17)),
                move |i, g: &mut Vec<f64>| {
                    if corrupt && i == 0 {
                        g[0] += 0.1 * (g[0].abs() + 1.0);
                    }
                },
            )?;
            Ok(CheckResult { suite, name: c.name, tolerance, report })
        })
        .collect()
}

fn op_cases() -> Vec<Case> {
    let v = |seed| rand(&[3, 4], seed);
    vec![
        case("add", vec![v(1), v(2)], |t, x| {
            let y = t.add(x[0], x[1])?;
            project(t, y, 100)
        }),
        case("sub", vec![v(3), v(4)], |t, x| {
            let y = t.sub(x[0], x[1])?;
            project(t, y, 101)
        }),
        case("mul", vec![v(5), v(6)], |t, x| {
            let y = t.mul(x[0], x[1])?;
            project(t, y, 102)
        }),
        case("add_scalar", vec![v(7)], |t, x| {
            let y = t.add_scalar(x[0], 0.7)?;
            let y = t.mul(y, y)?;
            project(t, y, 103)
        }),
        case("mul_scalar", vec![v(8)], |t, x| {
            let y = t.mul_scalar(x[0], -1.3)?;
            project(t, y, 104)
        }),
        case("exp", vec![v(9)], |t, x| {
            let y = t.exp(x[0])?;
            project(t, y, 105)
        }),
        case("log", vec![uniform(&[3, 4], 0.5, 1.5, 10)], |t, x| {
            let y = t.log(x[0])?;
            project(t, y, 106)
        }),
        case("relu", vec![away_from(v(11), &[0.0], 0.05)], |t, x| {
            let y = t.relu(x[0])?;
            project(t, y, 107)
        }),
        case("gelu", vec![v(12)], |t, x| {
            let y = t.gelu(x[0])?;
            project(t, y, 108)
        }),
        case("sigmoid", vec![v(13)], |t, x| {
            let y = t.sigmoid(x[0])?;
            project(t, y, 109)
        }),
        case("clamp", vec![away_from(v(14), &[-0.5, 0.5], 0.05)], |t, x| {
            let y = t.clamp(x[0], -0.5, 0.5)?;
            project(t, y, 110)
        }),
        case("matmul", vec![rand(&[3, 4], 15), rand(&[4, 2], 16)], |t, x| {
            let y = t.matmul(x[0], x[1])?;
            project(t, y, 111)
        }),
        case("matmul_batched", vec![rand(&[2, 3, 4], 17), rand(&[2, 4, 2], 18)], |t, x| {
            let y = t.matmul(x[0], x[1])?;
            project(t, y, 112)
        }),
        case("reshape", vec![v(19)], |t, x| {
            let y = t.reshape(x[0], &[2, 6])?;
            project(t, y, 113)
        }),
        case("permute", vec![rand(&[2, 3, 4], 20)], |t, x| {
            let y = t.permute(x[0], &[2, 0, 1])?;
            project(t, y, 114)
        }),
        case("transpose", vec![v(21)], |t, x| {
            let y = t.transpose(x[0])?;
            project(t, y, 115)
        }),
        case("concat", vec![rand(&[3, 2], 22), rand(&[3, 4], 23)], |t, x| {
            let y = t.concat(&[x[0], x[1]], 1)?;
            project(t, y, 116)
        }),
        case("slice", vec![v(24)], |t, x| {
            let y = t.slice(x[0], 1, 1, 2)?;
            project(t, y, 117)
        }),
        case("gather_rows", vec![v(25)], |t, x| {
            let y = t.gather_rows(x[0], &[2, 0, 2, 1])?;
            project(t, y, 118)
        }),
        case("reduce_sum", vec![v(26)], |t, x| {
            let y = t.reduce_sum(x[0], 1)?;
            project(t, y, 119)
        }),
        case("reduce_mean", vec![v(27)], |t, x| {
            let y = t.reduce_mean(x[0], 0)?;
            project(t, y, 120)
        }),
        case("reduce_max", vec![v(28)], |t, x| {
            let y = t.reduce_max(x[0], 1)?;
            project(t, y, 121)
        }),
        case("sum_all", vec![v(29)], |t, x| {
            let y = t.mul(x[0], x[0])?;
            t.sum_all(y)
        }),
        case("mean_all", vec![v(30)], |t, x| {
            let y = t.mul(x[0], x[0])?;
            t.mean_all(y)
        }),
        case("softmax", vec![v(31)], |t, x| {
            let y = t.softmax(x[0], 1)?;
            project(t, y, 122)
        }),
        case("softmax_masked", vec![v(32)], |t, x| {
            let keep: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
            let y = t.softmax_masked(x[0], 1, &keep)?;
            project(t, y, 123)
        }),
        case("conv3d", vec![rand(&[3, 3, 2, 2], 33), rand(&[3, 3, 3, 2, 3], 34), rand(&[3], 35)], |t, x| {
            let p = ConvParams { weight: x[1], bias: Some(x[2]), geometry: ConvGeometry::same([3; 3]) };
            let y = conv3d(t, x[0], &p)?;
            project(t, y, 124)
        }),
        case("conv3d_strided", vec![rand(&[4, 4, 2, 2], 36), rand(&[3, 3, 3, 2, 2], 37)], |t, x| {
            let p = ConvParams { weight: x[1], bias: None, geometry: ConvGeometry::strided(2, 1) };
            let y = conv3d(t, x[0], &p)?;
            project(t, y, 125)
        }),
        case("dwconv3d", vec![rand(&[3, 3, 2, 2], 38), rand(&[3, 3, 3, 2], 39), rand(&[2], 40)], |t, x| {
            let p = ConvParams { weight: x[1], bias: Some(x[2]), geometry: ConvGeometry::same([3; 3]) };
            let y = dwconv3d(t, x[0], &p)?;
            project(t, y, 126)
        }),
        case("add_bias", vec![rand(&[2, 2, 1, 3], 41), rand(&[3], 42)], |t, x| {
            let y = add_bias(t, x[0], x[1])?;
            project(t, y, 127)
        }),
        case("linear", vec![rand(&[5, 3], 43), rand(&[3, 4], 44), rand(&[4], 45)], |t, x| {
            let y = linear(t, x[0], &LinearParams { weight: x[1], bias: Some(x[2]) })?;
            project(t, y, 128)
        }),
        case("layer_norm", vec![rand(&[5, 4], 46), uniform(&[4], 0.5, 1.5, 47), rand(&[4], 48)], |t, x| {
            let y = layer_norm(t, x[0], &NormParams { gamma: x[1], beta: x[2], eps: 1e-5 })?;
            project(t, y, 129)
        }),
        case(
            "mlp_block",
            vec![rand(&[4, 3], 49), rand(&[3, 6], 50), rand(&[6], 51), rand(&[6, 3], 52), rand(&[3], 53)],
            |t, x| {
                let p = MlpParams {
                    fc1: LinearParams { weight: x[1], bias: Some(x[2]) },
                    fc2: LinearParams { weight: x[3], bias: Some(x[4]) },
                };
                let y = mlp_block(t, x[0], &p)?;
                project(t, y, 130)
            },
        ),
        case("trilinear_upsample", vec![rand(&[2, 2, 2, 2], 54)], |t, x| {
            let y = trilinear_upsample(t, x[0], [2, 2, 2])?;
            project(t, y, 131)
        }),
    ]
}

fn vbra_cases() -> Vec<Case> {
    let c = 4;
    let attn = |x: &[Var], o: usize| AttentionParams { w_q: x[o], w_k: x[o + 1], w_v: x[o + 2], w_o: x[o + 3] };
    let small = |seed: u64| rand(&[c, c], seed).map(|v| 0.5 * v);
    let mut block_inputs = vec![rand(&[4, 4, 4, c], 60), rand(&[3, 3, 3, c], 61).map(|v| 0.5 * v), rand(&[c], 62)];
    block_inputs.extend([uniform(&[c], 0.8, 1.2, 63), rand(&[c], 64).map(|v| 0.1 * v)]);
    block_inputs.extend((65..69).map(small));
    block_inputs.extend([uniform(&[c], 0.8, 1.2, 69), rand(&[c], 70).map(|v| 0.1 * v)]);
    block_inputs.extend([rand(&[c, 2 * c], 71), rand(&[2 * c], 72), rand(&[2 * c, c], 73), rand(&[c], 74)]);
    vec![
        case("vbra_attention", vec![rand(&[4, 4, 4, c], 55), small(56), small(57), small(58), small(59)], move |t, x| {
            let (y, _) = vbra(t, x[0], &attn(x, 1), &VbraConfig::new(c, 2, [2, 2, 2], 2))?;
            project(t, y, 132)
        }),
        case("vbra_block", block_inputs, move |t, x| {
            let p = VbraBlockParams {
                dwconv: ConvParams { weight: x[1], bias: Some(x[2]), geometry: ConvGeometry::same([3; 3]) },
                norm1: NormParams { gamma: x[3], beta: x[4], eps: 1e-5 },
                attn: attn(x, 5),
                norm2: NormParams { gamma: x[9], beta: x[10], eps: 1e-5 },
                mlp: MlpParams {
                    fc1: LinearParams { weight: x[11], bias: Some(x[12]) },
                    fc2: LinearParams { weight: x[13], bias: Some(x[14]) },
                },
            };
            let y = vbra_block(t, x[0], &p, &VbraConfig::new(c, 2, [2, 2, 2], 2))?;
            project(t, y, 133)
        }),
    ]
}

fn loss_cases() -> Vec<Case> {
    let target = uniform(&[3, 3, 2, 2], 0.0, 1.0, 80);
    let offsets = rand(&[2, 2, 1, 6], 81);
    let positive = vec![true, false, false, true, true, false, false, false];
    let labels = Tensor::new(vec![2, 2, 1, 2], positive.iter().map(|&p| f64::from(u8::from(p))).collect::<Vec<_>>())
        .expect("matching length");
    let (t1, o1, p1, l1) = (target.clone(), offsets.clone(), positive.clone(), labels.clone());
    vec![
        case("heatmap_loss", vec![uniform(&[3, 3, 2, 2], 0.05, 0.95, 82)], move |t, x| {
            heatmap_loss(t, x[0], &target, &[true, true])
        }),
        case("heatmap_loss_masked", vec![uniform(&[3, 3, 2, 2], 0.05, 0.95, 83)], move |t, x| {
            heatmap_loss(t, x[0], &t1, &[false, true])
        }),
        case("offset_loss", vec![rand(&[2, 2, 1, 6], 84)], move |t, x| offset_loss(t, x[0], &offsets, &positive)),
        case("cls_loss", vec![uniform(&[2, 2, 1, 2], 0.1, 0.9, 85)], move |t, x| cls_loss(t, x[0], &labels)),
        case(
            "total_loss_anchor_based",
            vec![uniform(&[2, 2, 1, 2], 0.1, 0.9, 86), rand(&[2, 2, 1, 6], 87)],
            move |t, x| {
                let parts = LossParts {
                    heatmap: None,
                    reg: Some(offset_loss(t, x[1], &o1, &p1)?),
                    cls: Some(cls_loss(t, x[0], &l1)?),
                };
                let w = LossWeights { reg: 0.7, cls: 1.3, heatmap: 0.5 };
                total_loss(t, &parts, &w, Variant::AnchorBased)
            },
        ),
    ]
}

/// Config used for the end-to-end check: two stages so an 8³ input keeps a
/// 2³ deepest stage with nontrivial attention.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::AnchorFree,
        input_dims: [8, 8, 8],
        channels: vec![4, 8],
        ..Default::default()
    }
}

fn end_to_end_cases() -> Result<Vec<Case>> {
    let cfg = end_to_end_config();
    let state = build_model::<f64>(&cfg, 5)?;
    let keys: Vec<String> = state.params.keys().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = keys.iter().map(|k| state.params[k].clone()).collect();
    // nonzero biases, so their gradients are not degenerate
    for (k, t) in keys.iter().zip(inputs.iter_mut()) {
        if k.ends_with(".b") {
            *t = rand(t.shape(), 90).map(|v| 0.1 * v);
        }
    }
    let x = uniform(&cfg.input_dims, 0.0, 1.0, 91);
    let f = move |t: &mut Tape<f64>, vars: &[Var]| {
        let mut bound = state.bind_with(t, |_| false);
        for (k, v) in keys.iter().zip(vars) {
            bound.vars.insert(k.clone(), *v);
        }
        let xv = t.constant(x.clone());
        let Output::Heatmap(h) = forward(t, &bound, &state.config, xv)? else {
            return Err(Error::Config("end-to-end audit expects the anchor-free variant".into()));
        };
        project(t, h, 134)
    };
    Ok(vec![Case { name: "anchor_free_8x8x8".into(), inputs, sample: Some(3), f: Box::new(f) }])
}

pub fn run_suite(suite: Suite, opts: AuditOptions) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Ops => run(suite, OP_TOLERANCE, op_cases(), opts),
        Suite::Vbra => run(suite, VBRA_TOLERANCE, vbra_cases(), opts),
        Suite::Losses => run(suite, LOSS_TOLERANCE, loss_cases(), opts),
        Suite::EndToEnd => run(suite, END_TO_END_TOLERANCE, end_to_end_cases()?, opts),
    }
}
