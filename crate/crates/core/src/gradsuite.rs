//! Finite-difference verification of every differentiable operation, every
//! loss term, the weighted total and the full network forward pass, each
//! on randomly drawn small instances.
//!
//! A coordinate whose finite-difference interval straddles a kink (relu,
//! max selection, |x| = 1 in smooth L1) shows up as disagreement between
//! the central differences at step h and h/2; it is skipped and counted.
//! Every other coordinate must agree with the analytic gradient, and a
//! check fails if more than a quarter of its coordinates were skipped.

use ndgrad::gradcheck::{relative_error, FD_STEP};
use ndgrad::{softmax_rows, CellRegion, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{generate_default_boxes, match_defaults, BBox, DefaultBoxLayout, LabeledBox, LayerLayout};
use crate::losses::{
    bd_loss, classification_loss, mine_hard_negatives, objectness_loss, regression_loss, tk_loss, total_loss,
    LossTerms, LossWeights, Mode,
};
use crate::model::{BoundParams, DetectionLayer, Domain, Lstd, LstdConfig, ProposalMode};
use crate::rng::substream;

pub const TOLERANCE: f64 = 1e-6;
/// Disagreement between step h and h/2 above which a coordinate is treated
/// as lying on a kink.
const KINK_THRESHOLD: f64 = 1e-7;
const MAX_KINK_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.max_rel_error <= TOLERANCE && (self.kinks_skipped as f64) <= MAX_KINK_FRACTION * self.coordinates as f64
    }
}

type Scalar = dyn Fn(&Graph, &[Var]) -> Result<Var>;

/// Inputs of one instance and the scalar function of them.
type Instance = Result<(Vec<Tensor>, Box<Scalar>)>;

fn eval(f: &Scalar, inputs: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    Ok(g.value(out).data().iter().sum())
}

fn central(f: &Scalar, probe: &mut [Tensor], (i, e): (usize, usize), h: f64) -> Result<f64> {
    let x0 = probe[i].data()[e];
    probe[i].data_mut()[e] = x0 + h;
    let plus = eval(f, probe)?;
    probe[i].data_mut()[e] = x0 - h;
    let minus = eval(f, probe)?;
    probe[i].data_mut()[e] = x0;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Default)]
struct Tally {
    coordinates: usize,
    kinks: usize,
    max_rel_error: f64,
}

/// Checks `sum(f(inputs))` at up to `budget` coordinates (all of them when
/// the inputs are smaller).
fn check(tally: &mut Tally, rng: &mut ChaCha8Rng, inputs: &[Tensor], budget: usize, step: f64, f: &Scalar) -> Result<()> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let root = if g.value(out).len() == 1 { out } else { g.sum(out) };
    let grads = g.backward(root)?;

    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    let coords: Vec<(usize, usize)> = if all.len() <= budget {
        all
    } else {
        (0..budget).map(|_| all[rng.random_range(0..all.len())]).collect()
    };
    let mut probe = inputs.to_vec();
    for c in coords {
        let analytic = grads.get(vars[c.0]).map_or(0.0, |t| t.data()[c.1]);
        let coarse = central(f, &mut probe, c, step)?;
        let fine = central(f, &mut probe, c, step / 2.0)?;
        tally.coordinates += 1;
        if relative_error(coarse, fine) > KINK_THRESHOLD {
            tally.kinks += 1;
            continue;
        }
        let err = relative_error(analytic, fine);
        tally.max_rel_error = tally.max_rel_error.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.15..0.6);
    let h = rng.random_range(0.15..0.6);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h).expect("positive size")
}

fn random_gts(rng: &mut ChaCha8Rng, classes: usize) -> Vec<LabeledBox> {
    (0..rng.random_range(1..=3))
        .map(|_| LabeledBox {
            bbox: random_box(rng),
            class_id: rng.random_range(1..=classes),
        })
        .collect()
}

fn toy_defaults() -> Vec<BBox> {
    generate_default_boxes(&DefaultBoxLayout {
        layers: vec![
            LayerLayout {
                grid_h: 3,
                grid_w: 3,
                scale: 0.35,
                ratios: vec![1.0, 2.0, 0.5],
            },
            LayerLayout {
                grid_h: 1,
                grid_w: 1,
                scale: 0.8,
                ratios: vec![1.0],
            },
        ],
    })
}

/// Smallest network that exercises every component.
pub fn toy_config() -> LstdConfig {
    LstdConfig {
        domain: Domain::Target,
        input_size: 16,
        backbone_channels: vec![3, 4, 4],
        detection_layers: vec![
            DetectionLayer {
                layer: "conv1".into(),
                scale: 0.3,
                ratios: vec![1.0, 2.0],
            },
            DetectionLayer {
                layer: "conv2".into(),
                scale: 0.6,
                ratios: vec![1.0],
            },
        ],
        bd_layer: "conv1".into(),
        roi_layer: "conv1".into(),
        roi_bins: 2,
        cls_channels: 3,
        k_source: 3,
        k_target: 2,
        pre_nms_top: 20,
        train_proposals: 4,
        eval_proposals: 4,
        ..LstdConfig::default()
    }
}

struct Case {
    name: &'static str,
    budget: usize,
    step: f64,
    /// Draws inputs and the function to differentiate.
    build: fn(&mut ChaCha8Rng) -> Instance,
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, op: fn(&Graph, Var) -> ndgrad::Result<Var>) -> Instance {
    Ok((vec![uniform(rng, shape, lo, hi)], Box::new(move |g, v| Ok(op(g, v[0])?))))
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&Graph, Var, Var) -> ndgrad::Result<Var>, positive_rhs: bool) -> Instance {
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = if positive_rhs {
        uniform(rng, &[3, 4], 0.5, 1.5)
    } else {
        uniform(rng, &[3, 4], -1.0, 1.0)
    };
    // a random weighting makes every output element matter differently
    let w = uniform(rng, &[3, 4], -1.0, 1.0);
    Ok((
        vec![a, b],
        Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            Ok(g.mul(y, g.constant(w.clone()))?)
        }),
    ))
}

fn weighted(g: &Graph, y: Var, w: &Tensor) -> Result<Var> {
    Ok(g.mul(y, g.constant(w.clone()))?)
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", budget: 64, step: FD_STEP, build: |r| binary(r, |g, a, b| g.add(a, b), false) },
        Case { name: "sub", budget: 64, step: FD_STEP, build: |r| binary(r, |g, a, b| g.sub(a, b), false) },
        Case { name: "mul", budget: 64, step: FD_STEP, build: |r| binary(r, |g, a, b| g.mul(a, b), false) },
        Case { name: "div", budget: 64, step: FD_STEP, build: |r| binary(r, |g, a, b| g.div(a, b), true) },
        Case {
            name: "scale",
            budget: 64,
            step: FD_STEP,
            build: |r| unary(r, &[2, 5], -1.0, 1.0, |g, x| Ok(g.scale(g.mul(x, x)?, -1.7))),
        },
        Case {
            name: "add_bias",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let w = uniform(r, &[3, 4], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
                    Box::new(move |g, v| weighted(g, g.add_bias(v[0], v[1])?, &w)),
                ))
            },
        },
        Case {
            name: "matmul",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let w = uniform(r, &[3, 2], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
                    Box::new(move |g, v| weighted(g, g.matmul(v[0], v[1])?, &w)),
                ))
            },
        },
        Case {
            name: "conv2d",
            budget: 60,
            step: FD_STEP,
            build: |r| {
                let stride = r.random_range(1..=2);
                let pad = r.random_range(0..=1);
                let x = uniform(r, &[2, 2, 5, 5], -1.0, 1.0);
                let wt = uniform(r, &[3, 2, 3, 3], -1.0, 1.0);
                let b = uniform(r, &[3], -1.0, 1.0);
                let out = (5 + 2 * pad - 3) / stride + 1;
                let w = uniform(r, &[2, 3, out, out], -1.0, 1.0);
                Ok((
                    vec![x, wt, b],
                    Box::new(move |g, v| weighted(g, g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?, &w)),
                ))
            },
        },
        Case {
            name: "maxpool2d",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let w = uniform(r, &[2, 2, 2], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[2, 4, 4], -1.0, 1.0)],
                    Box::new(move |g, v| weighted(g, g.maxpool2d(v[0], 2, 2)?, &w)),
                ))
            },
        },
        Case {
            name: "roi_max_pool",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let regions = vec![
                    CellRegion { y0: 0, y1: 4, x0: 1, x1: 5 },
                    CellRegion { y0: 2, y1: 3, x0: 0, x1: 2 },
                ];
                let w = uniform(r, &[2, 2, 2, 2], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[2, 5, 5], -1.0, 1.0)],
                    Box::new(move |g, v| weighted(g, g.roi_max_pool(v[0], &regions, 2)?, &w)),
                ))
            },
        },
        Case {
            name: "gather",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let index: Vec<usize> = (0..8).map(|_| r.random_range(0..6)).collect();
                let w = uniform(r, &[2, 4], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[6], -1.0, 1.0)],
                    Box::new(move |g, v| weighted(g, g.gather(v[0], index.clone(), &[2, 4])?, &w)),
                ))
            },
        },
        Case { name: "relu", budget: 64, step: FD_STEP, build: |r| unary(r, &[12], -1.0, 1.0, |g, x| Ok(g.relu(x))) },
        Case { name: "exp", budget: 64, step: FD_STEP, build: |r| unary(r, &[12], -1.0, 1.0, |g, x| Ok(g.exp(x))) },
        Case { name: "log", budget: 64, step: FD_STEP, build: |r| unary(r, &[12], 0.5, 2.0, |g, x| Ok(g.log(x))) },
        Case { name: "sum", budget: 64, step: FD_STEP, build: |r| unary(r, &[12], -1.0, 1.0, |g, x| Ok(g.sum(g.mul(x, x)?))) },
        Case { name: "mean", budget: 64, step: FD_STEP, build: |r| unary(r, &[12], -1.0, 1.0, |g, x| Ok(g.mean(g.exp(x)))) },
        Case {
            name: "reshape",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let w = uniform(r, &[4, 3], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[2, 6], -1.0, 1.0)],
                    Box::new(move |g, v| weighted(g, g.reshape(v[0], &[4, 3])?, &w)),
                ))
            },
        },
        Case {
            name: "slice",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let w = uniform(r, &[3, 2, 4], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[3, 5, 4], -1.0, 1.0)],
                    Box::new(move |g, v| weighted(g, g.slice(v[0], 1, 2, 4)?, &w)),
                ))
            },
        },
        Case {
            name: "concat",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let w = uniform(r, &[2, 5], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[2, 2], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
                    Box::new(move |g, v| weighted(g, g.concat(&[v[0], v[1]], 1)?, &w)),
                ))
            },
        },
        Case {
            name: "softmax_with_temperature",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let tau = r.random_range(0.5..3.0);
                let w = uniform(r, &[3, 4], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[3, 4], -2.0, 2.0)],
                    Box::new(move |g, v| weighted(g, g.softmax_with_temperature(v[0], tau)?, &w)),
                ))
            },
        },
        Case {
            name: "log_softmax_with_temperature",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let tau = r.random_range(0.5..3.0);
                let w = uniform(r, &[3, 4], -1.0, 1.0);
                Ok((
                    vec![uniform(r, &[3, 4], -2.0, 2.0)],
                    Box::new(move |g, v| weighted(g, g.log_softmax_with_temperature(v[0], tau)?, &w)),
                ))
            },
        },
        Case {
            name: "smooth_l1",
            budget: 64,
            step: FD_STEP,
            build: |r| unary(r, &[12], -2.5, 2.5, |g, x| Ok(g.smooth_l1(x))),
        },
        Case {
            name: "l2_norm",
            budget: 64,
            step: FD_STEP,
            build: |r| unary(r, &[2, 3, 2], -1.0, 1.0, |g, x| Ok(g.l2_norm(x))),
        },
        Case {
            name: "loss: regression smooth L1",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let defaults = toy_defaults();
                let gts = random_gts(r, 3);
                let assignment = match_defaults(&defaults, &gts, 0.5);
                let reg = uniform(r, &[defaults.len(), 4], -1.0, 1.0);
                Ok((
                    vec![reg],
                    Box::new(move |g, v| regression_loss(g, v[0], &defaults, &assignment, &gts)),
                ))
            },
        },
        Case {
            name: "loss: objectness cross-entropy",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let defaults = toy_defaults();
                let gts = random_gts(r, 3);
                let assignment = match_defaults(&defaults, &gts, 0.5);
                let obj = uniform(r, &[defaults.len(), 2], -2.0, 2.0);
                let negatives = mine_hard_negatives(obj.data(), &assignment, 3);
                Ok((
                    vec![obj],
                    Box::new(move |g, v| objectness_loss(g, v[0], &assignment, &negatives)),
                ))
            },
        },
        Case {
            name: "loss: (K+1) classification cross-entropy",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let n = 6;
                let labels: Vec<Option<usize>> = (0..n)
                    .map(|i| if i == 0 { Some(1) } else if r.random_bool(0.2) { None } else { Some(r.random_range(0..4)) })
                    .collect();
                Ok((
                    vec![uniform(r, &[n, 4], -2.0, 2.0)],
                    Box::new(move |g, v| classification_loss(g, v[0], &labels)),
                ))
            },
        },
        Case {
            name: "loss: background depression",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let gts: Vec<BBox> = random_gts(r, 1).iter().map(|b| b.bbox).collect();
                let normalize = r.random_bool(0.5);
                Ok((
                    vec![uniform(r, &[3, 4, 4], -1.0, 1.0)],
                    Box::new(move |g, v| bd_loss(g, v[0], &gts, normalize)),
                ))
            },
        },
        Case {
            name: "loss: transfer knowledge",
            budget: 64,
            step: FD_STEP,
            build: |r| {
                let tau = r.random_range(1.0..4.0);
                let source = uniform(r, &[5, 4], -3.0, 3.0);
                let knowledge = Tensor::new(vec![5, 4], softmax_rows(source.data(), 4, tau))?;
                Ok((
                    vec![uniform(r, &[5, 4], -3.0, 3.0)],
                    Box::new(move |g, v| tk_loss(g, &knowledge, v[0], tau)),
                ))
            },
        },
        Case {
            name: "loss: weighted total",
            budget: 80,
            step: FD_STEP,
            build: |r| {
                let defaults = toy_defaults();
                let gts = random_gts(r, 3);
                let assignment = match_defaults(&defaults, &gts, 0.5);
                let reg = uniform(r, &[defaults.len(), 4], -1.0, 1.0);
                let obj = uniform(r, &[defaults.len(), 2], -2.0, 2.0);
                let negatives = mine_hard_negatives(obj.data(), &assignment, 3);
                let labels: Vec<Option<usize>> = (0..5).map(|i| Some(i % 4)).collect();
                let logits = uniform(r, &[5, 4], -2.0, 2.0);
                let features = uniform(r, &[3, 4, 4], -1.0, 1.0);
                let soften = uniform(r, &[5, 3], -2.0, 2.0);
                let knowledge = Tensor::new(vec![5, 3], softmax_rows(uniform(r, &[5, 3], -2.0, 2.0).data(), 3, 2.0))?;
                let weights = LossWeights {
                    lambda_bd: r.random_range(0.1..1.0),
                    lambda_tk: r.random_range(0.1..1.0),
                    ..LossWeights::default()
                };
                let boxes: Vec<BBox> = gts.iter().map(|b| b.bbox).collect();
                Ok((
                    vec![reg, obj, logits, features, soften],
                    Box::new(move |g, v| {
                        let terms = LossTerms {
                            reg: regression_loss(g, v[0], &defaults, &assignment, &gts)?,
                            obj: objectness_loss(g, v[1], &assignment, &negatives)?,
                            cls: classification_loss(g, v[2], &labels)?,
                            bd: Some(bd_loss(g, v[3], &boxes, false)?),
                            tk: Some(tk_loss(g, &knowledge, v[4], weights.tau)?),
                        };
                        Ok(total_loss(g, &terms, &weights, Mode::FtTkBd)?.0)
                    }),
                ))
            },
        },
        Case {
            name: "network: forward outputs",
            budget: 40,
            step: FD_STEP,
            build: network_case,
        },
    ]
}

/// A random weighted sum of every differentiable forward output of the toy
/// network, as a function of all parameters. Proposals are fixed to the
/// ones selected at the base point.
fn network_case(r: &mut ChaCha8Rng) -> Instance {
    let config = toy_config();
    let net = Lstd::new(config.clone())?;
    let params = net.init_params(r);
    let size = config.input_size;
    let image = uniform(r, &[3, size, size], 0.0, 1.0);
    let gts = random_gts(r, config.k_target);
    let names: Vec<String> = params.map.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.map.values().cloned().collect();

    let g = Graph::new();
    let p = params.bind(&g, false);
    let base = net.forward(&g, &p, &image, ProposalMode::Train, &gts, None)?;
    let boxes: Vec<BBox> = base.proposals.iter().map(|p| p.bbox).collect();
    let shapes = [
        g.shape(base.regression),
        g.shape(base.objectness),
        g.shape(base.bd_features),
        g.shape(base.roi_features),
        g.shape(base.class_logits),
        g.shape(base.soften_logits.expect("target network")),
    ];
    let mut probes: Vec<Tensor> = shapes.iter().map(|s| uniform(r, s, -1.0, 1.0)).collect();
    // keep the functional O(1) so rounding stays far below the tolerance
    for t in &mut probes {
        let n = t.len() as f64;
        t.data_mut().iter_mut().for_each(|x| *x /= n.sqrt());
    }
    let f = move |g: &Graph, v: &[Var]| -> Result<Var> {
        let bound = BoundParams {
            vars: names.iter().cloned().zip(v.iter().copied()).collect(),
        };
        let out = net.forward(g, &bound, &image, ProposalMode::Train, &gts, Some(&boxes))?;
        let soften = out.soften_logits.expect("target network");
        let parts = [out.regression, out.objectness, out.bd_features, out.roi_features, out.class_logits, soften];
        let mut acc: Option<Var> = None;
        for (y, w) in parts.iter().zip(&probes) {
            let s = g.sum(g.mul(*y, g.constant(w.clone()))?);
            acc = Some(match acc {
                None => s,
                Some(a) => g.add(a, s)?,
            });
        }
        Ok(acc.expect("six outputs"))
    };
    Ok((inputs, Box::new(f)))
}

/// Names of all checks, in run order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every check on `instances` random instances drawn from `seed`.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    cases()
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut tally = Tally::default();
            for inst in 0..instances {
                let mut rng = substream(seed, "gradcheck", ((ci as u64) << 32) | inst as u64);
                let (inputs, f) = (case.build)(&mut rng)?;
                check(&mut tally, &mut rng, &inputs, case.budget, case.step, f.as_ref())?;
            }
            Ok(SuiteEntry {
                name: case.name.to_string(),
                instances,
                coordinates: tally.coordinates,
                kinks_skipped: tally.kinks,
                max_rel_error: tally.max_rel_error,
            })
        })
        .collect()
}
