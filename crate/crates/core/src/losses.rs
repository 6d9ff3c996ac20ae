//! Training objectives: box regression, mined objectness cross-entropy,
//! (K+1) classification, background depression, transfer knowledge and
//! their weighted total.

use std::fmt;
use std::str::FromStr;

use ndgrad::{softmax_rows, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LstdError, Result};
use crate::geometry::{encode_offsets, BBox, LabeledBox};
use crate::model::{BoundParams, DetectorParams, Lstd, ProposalMode};

pub use ndgrad::smooth_l1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_bd: f64,
    pub lambda_tk: f64,
    pub tau: f64,
    /// Divide the background-depression norm by the square root of the
    /// number of masked activations.
    pub bd_normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bd: 0.5,
            lambda_tk: 0.5,
            tau: 2.0,
            bd_normalize: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_bd >= 0.0 && self.lambda_tk >= 0.0) {
            return Err(LstdError::Config("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LstdError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Fine-tuning regime: plain fine-tuning, with transfer knowledge, or with
/// transfer knowledge and background depression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "FT+TK")]
    FtTk,
    #[serde(rename = "FT+TK+BD")]
    FtTkBd,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ft, Mode::FtTk, Mode::FtTkBd];

    pub fn uses_tk(self) -> bool {
        matches!(self, Mode::FtTk | Mode::FtTkBd)
    }

    pub fn uses_bd(self) -> bool {
        self == Mode::FtTkBd
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ft => "FT",
            Mode::FtTk => "FT+TK",
            Mode::FtTkBd => "FT+TK+BD",
        })
    }
}

impl FromStr for Mode {
    type Err = LstdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "FT" => Ok(Mode::Ft),
            "FT+TK" => Ok(Mode::FtTk),
            "FT+TK+BD" => Ok(Mode::FtTkBd),
            other => Err(LstdError::InvalidArgument(format!(
                "unknown mode `{other}` (expected FT, FT+TK or FT+TK+BD)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_bd: f64,
    pub l_tk: f64,
    pub l_main: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l_reg += b.l_reg;
            acc.l_obj += b.l_obj;
            acc.l_cls += b.l_cls;
            acc.l_bd += b.l_bd;
            acc.l_tk += b.l_tk;
            acc.l_main += b.l_main;
            acc.l_total += b.l_total;
        }
        LossBreakdown {
            l_reg: acc.l_reg / n,
            l_obj: acc.l_obj / n,
            l_cls: acc.l_cls / n,
            l_bd: acc.l_bd / n,
            l_tk: acc.l_tk / n,
            l_main: acc.l_main / n,
            l_total: acc.l_total / n,
        }
    }
}

fn zero(g: &Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Smooth L1 between predicted offsets of matched defaults and the encoded
/// ground truth, summed and divided by the number of matches.
pub fn regression_loss(
    g: &Graph,
    regression: Var,
    defaults: &[BBox],
    assignment: &[Option<usize>],
    gts: &[LabeledBox],
) -> Result<Var> {
    let matched: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter_map(|(d, a)| a.map(|gi| (d, gi)))
        .collect();
    if matched.is_empty() {
        return Ok(zero(g));
    }
    let mut index = Vec::with_capacity(matched.len() * 4);
    let mut targets = Vec::with_capacity(matched.len() * 4);
    for &(d, gi) in &matched {
        index.extend((0..4).map(|t| 4 * d + t));
        targets.extend(encode_offsets(&gts[gi].bbox, &defaults[d])?);
    }
    let shape = [matched.len(), 4];
    let pred = g.gather(regression, index, &shape)?;
    let target = g.constant(Tensor::new(shape.to_vec(), targets)?);
    let diff = g.sub(pred, target)?;
    let total = g.sum(g.smooth_l1(diff));
    Ok(g.scale(total, 1.0 / matched.len() as f64))
}

/// Negatives to count in the objectness loss: the `ratio·|pos|` unmatched
/// defaults with the highest background cross-entropy (ties by index), or
/// `ratio` of them when there are no positives.
pub fn mine_hard_negatives(objectness: &[f64], assignment: &[Option<usize>], ratio: usize) -> Vec<usize> {
    let positives = assignment.iter().filter(|a| a.is_some()).count();
    let want = ratio * positives.max(1);
    let probs = softmax_rows(objectness, 2, 1.0);
    let mut negatives: Vec<(usize, f64)> = assignment
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_none())
        .map(|(d, _)| (d, -probs[2 * d].ln()))
        .collect();
    negatives.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    negatives.truncate(want);
    let mut picked: Vec<usize> = negatives.into_iter().map(|(d, _)| d).collect();
    picked.sort_unstable();
    picked
}

/// Two-way cross-entropy over positives plus the given negatives, divided
/// by the positive count (at least 1).
pub fn objectness_loss(g: &Graph, objectness: Var, assignment: &[Option<usize>], negatives: &[usize]) -> Result<Var> {
    let n = assignment.len();
    let mut weights = vec![0.0; 2 * n];
    let mut positives = 0usize;
    for (d, a) in assignment.iter().enumerate() {
        if a.is_some() {
            weights[2 * d + 1] = 1.0;
            positives += 1;
        }
    }
    for &d in negatives {
        weights[2 * d] = 1.0;
    }
    let logp = g.log_softmax_with_temperature(objectness, 1.0)?;
    let w = g.constant(Tensor::new(vec![n, 2], weights)?);
    let picked = g.sum(g.mul(logp, w)?);
    Ok(g.scale(picked, -1.0 / positives.max(1) as f64))
}

/// Mean cross-entropy over proposals with a label; `None` entries are
/// ignored. Zero when everything is ignored.
pub fn classification_loss(g: &Graph, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LstdError::InvalidArgument(format!(
            "{} labels for logits of shape {shape:?}",
            labels.len()
        )));
    }
    let classes = shape[1];
    let counted = labels.iter().flatten().count();
    if counted == 0 {
        return Ok(zero(g));
    }
    let mut weights = vec![0.0; labels.len() * classes];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            if c >= classes {
                return Err(LstdError::InvalidArgument(format!("label {c} out of range for {classes} classes")));
            }
            weights[i * classes + c] = 1.0;
        }
    }
    let logp = g.log_softmax_with_temperature(logits, 1.0)?;
    let w = g.constant(Tensor::new(shape, weights)?);
    let picked = g.sum(g.mul(logp, w)?);
    Ok(g.scale(picked, -1.0 / counted as f64))
}

/// H×W mask with 1 at background cells, i.e. cells whose centers lie in
/// no ground-truth box.
pub fn background_cells(h: usize, w: usize, gts: &[BBox]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            mask.push(!gts.iter().any(|b| b.contains_point(cx, cy)));
        }
    }
    mask
}

/// L2 norm (not squared) of the feature activations at background cells
/// across all channels of a C×H×W cube.
pub fn bd_loss(g: &Graph, features: Var, gts: &[BBox], normalize: bool) -> Result<Var> {
    let shape = g.shape(features);
    if shape.len() != 3 {
        return Err(LstdError::InvalidArgument(format!("feature cube must be C×H×W, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let cells = background_cells(h, w, gts);
    let count = cells.iter().filter(|&&b| b).count() * c;
    if count == 0 {
        return Ok(zero(g));
    }
    let mask: Vec<f64> = (0..c)
        .flat_map(|_| cells.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    let masked = g.mul(features, g.constant(Tensor::new(shape, mask)?))?;
    let norm = g.l2_norm(masked);
    Ok(if normalize {
        g.scale(norm, 1.0 / (count as f64).sqrt())
    } else {
        norm
    })
}

/// Softened source-category predictions for the given proposals: the
/// frozen source network's backbone, ROI pooling of the target proposals
/// on its own feature cube, its (K_source+1) classifier, then softmax at
/// temperature `tau`. Returned as a plain tensor.
pub fn tk_knowledge(source: &Lstd, params: &DetectorParams, image: &Tensor, proposals: &[BBox], tau: f64) -> Result<Tensor> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let logits = source_logits(&g, source, &p, image, proposals)?;
    let soft = g.softmax_with_temperature(logits, tau)?;
    Ok((*g.value(soft)).clone())
}

/// The source network's pre-softmax class activations for `proposals`.
pub fn source_logits(g: &Graph, source: &Lstd, p: &BoundParams, image: &Tensor, proposals: &[BBox]) -> Result<Var> {
    let out = source.forward(g, p, image, ProposalMode::Eval, &[], Some(proposals))?;
    Ok(out.class_logits)
}

/// Mean over proposals of the cross-entropy between the source knowledge
/// rows and softmax(soften_logits / tau).
pub fn tk_loss(g: &Graph, knowledge: &Tensor, soften_logits: Var, tau: f64) -> Result<Var> {
    let shape = g.shape(soften_logits);
    if knowledge.shape() != shape.as_slice() {
        return Err(LstdError::InvalidArgument(format!(
            "knowledge shape {:?} does not match soften logits {shape:?}",
            knowledge.shape()
        )));
    }
    let logp = g.log_softmax_with_temperature(soften_logits, tau)?;
    let target = g.constant(knowledge.clone());
    let picked = g.sum(g.mul(logp, target)?);
    Ok(g.scale(picked, -1.0 / shape[0] as f64))
}

/// Loss terms of one image, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub reg: Var,
    pub obj: Var,
    pub cls: Var,
    pub bd: Option<Var>,
    pub tk: Option<Var>,
}

/// `l_main + λ_BD·l_bd + λ_TK·l_tk`, with terms the mode does not use set
/// to zero. Fails on any non-finite component.
pub fn total_loss(g: &Graph, terms: &LossTerms, weights: &LossWeights, mode: Mode) -> Result<(Var, LossBreakdown)> {
    let value = |v: Var| g.value(v).item();
    let check = |name: &'static str, v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LstdError::Diverged {
                component: name,
                iteration: 0,
            })
        }
    };
    let l_reg = check("l_reg", value(terms.reg))?;
    let l_obj = check("l_obj", value(terms.obj))?;
    let l_cls = check("l_cls", value(terms.cls))?;
    let main = g.add(g.add(terms.reg, terms.obj)?, terms.cls)?;
    let mut total = main;
    let mut out = LossBreakdown {
        l_reg,
        l_obj,
        l_cls,
        ..LossBreakdown::default()
    };
    if mode.uses_bd() {
        let bd = terms
            .bd
            .ok_or_else(|| LstdError::InvalidArgument("mode needs the BD term".into()))?;
        out.l_bd = check("l_bd", value(bd))?;
        total = g.add(total, g.scale(bd, weights.lambda_bd))?;
    }
    if mode.uses_tk() {
        let tk = terms
            .tk
            .ok_or_else(|| LstdError::InvalidArgument("mode needs the TK term".into()))?;
        out.l_tk = check("l_tk", value(tk))?;
        total = g.add(total, g.scale(tk, weights.lambda_tk))?;
    }
    out.l_main = value(main);
    out.l_total = check("l_total", value(total))?;
    Ok((total, out))
}

/// Plain-number version of the total used for reporting.
pub fn combine(l_main: f64, l_bd: f64, l_tk: f64, weights: &LossWeights, mode: Mode) -> f64 {
    let bd = if mode.uses_bd() { weights.lambda_bd * l_bd } else { 0.0 };
    let tk = if mode.uses_tk() { weights.lambda_tk * l_tk } else { 0.0 };
    l_main + bd + tk
}
