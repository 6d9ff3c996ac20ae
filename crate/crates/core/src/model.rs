//! The detector: a small convolutional backbone, category-agnostic box
//! regression and objectness heads on several feature maps, proposal
//! selection, ROI max pooling and a two-conv coarse-to-fine classifier with
//! an optional source-category soften head.

use std::collections::BTreeMap;

use ndgrad::{CellRegion, Graph, ParamMap, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LstdError, Result};
use crate::geometry::{
    decode_offsets, generate_default_boxes, iou, nms, BBox, DefaultBoxLayout, LabeledBox,
    LayerLayout,
};

/// Which classifier layout a network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// (K_source+1) classifier only.
    Source,
    /// (K_target+1) classifier plus a (K_source+1) soften head.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionLayer {
    pub layer: String,
    pub scale: f64,
    pub ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstdConfig {
    pub domain: Domain,
    pub input_size: usize,
    pub input_channels: usize,
    /// Output channels of each 3×3 conv + relu + 2×2 max-pool block. Block
    /// `i` produces the feature map named `conv{i+1}`.
    pub backbone_channels: Vec<usize>,
    pub detection_layers: Vec<DetectionLayer>,
    /// Feature map masked by background depression.
    pub bd_layer: String,
    /// Feature map used for ROI pooling.
    pub roi_layer: String,
    pub roi_bins: usize,
    pub cls_channels: usize,
    pub k_source: usize,
    pub k_target: usize,
    pub pre_nms_top: usize,
    pub nms_iou: f64,
    pub train_proposals: usize,
    pub eval_proposals: usize,
    /// IoU for matching default boxes to ground truth.
    pub match_iou: f64,
    /// Proposal label band: IoU ≥ pos_iou is foreground, < neg_iou is
    /// background, anything between is ignored.
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Hard-negative to positive ratio for the objectness loss.
    pub neg_pos_ratio: usize,
    /// Add ground-truth boxes to the proposal set during training.
    pub gt_proposals: bool,
}

impl Default for LstdConfig {
    fn default() -> Self {
        let ratios = vec![1.0, 2.0, 0.5];
        let layer = |name: &str, scale| DetectionLayer {
            layer: name.into(),
            scale,
            ratios: ratios.clone(),
        };
        Self {
            domain: Domain::Source,
            input_size: 64,
            input_channels: 3,
            backbone_channels: vec![16, 32, 64, 64],
            detection_layers: vec![layer("conv2", 0.3), layer("conv3", 0.55), layer("conv4", 0.8)],
            bd_layer: "conv2".into(),
            roi_layer: "conv2".into(),
            roi_bins: 4,
            cls_channels: 32,
            k_source: 5,
            k_target: 3,
            pre_nms_top: 200,
            nms_iou: 0.65,
            train_proposals: 32,
            eval_proposals: 32,
            match_iou: 0.5,
            pos_iou: 0.5,
            neg_iou: 0.3,
            neg_pos_ratio: 3,
            gt_proposals: true,
        }
    }
}

impl LstdConfig {
    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.backbone_channels.len()).map(|i| format!("conv{i}")).collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| LstdError::Config(format!("unknown feature layer `{name}`")))
    }

    /// (channels, spatial size) of a named feature map.
    pub fn layer_dims(&self, name: &str) -> Result<(usize, usize)> {
        let i = self.layer_index(name)?;
        Ok((self.backbone_channels[i], self.input_size >> (i + 1)))
    }

    /// Number of classes of the (K+1) classifier, excluding background.
    pub fn num_classes(&self) -> usize {
        match self.domain {
            Domain::Source => self.k_source,
            Domain::Target => self.k_target,
        }
    }

    pub fn has_soften_head(&self) -> bool {
        self.domain == Domain::Target
    }

    pub fn box_layout(&self) -> Result<DefaultBoxLayout> {
        let layers = self
            .detection_layers
            .iter()
            .map(|d| {
                let (_, size) = self.layer_dims(&d.layer)?;
                Ok(LayerLayout {
                    grid_h: size,
                    grid_w: size,
                    scale: d.scale,
                    ratios: d.ratios.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DefaultBoxLayout { layers })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LstdError::Config(msg));
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return bad("backbone needs at least one block with positive channels".into());
        }
        if self.input_size >> self.backbone_channels.len() == 0 {
            return bad(format!(
                "input size {} too small for {} pooling blocks",
                self.input_size,
                self.backbone_channels.len()
            ));
        }
        if self.detection_layers.is_empty() {
            return bad("need at least one detection layer".into());
        }
        for d in &self.detection_layers {
            self.layer_index(&d.layer)?;
            if !(d.scale > 0.0 && d.scale <= 1.0) || d.ratios.is_empty() {
                return bad(format!("detection layer {} needs scale in (0,1] and ratios", d.layer));
            }
            if d.ratios.iter().any(|&r| r <= 0.0 || !r.is_finite()) {
                return bad(format!("detection layer {} has a non-positive ratio", d.layer));
            }
        }
        self.layer_index(&self.bd_layer)?;
        let (_, roi_size) = self.layer_dims(&self.roi_layer)?;
        if self.roi_bins == 0 || self.roi_bins > roi_size {
            return bad(format!("roi bins {} exceed {} map size {roi_size}", self.roi_bins, self.roi_layer));
        }
        if self.k_source == 0 || self.k_target == 0 {
            return bad("category counts must be at least 1".into());
        }
        if self.cls_channels == 0 || self.input_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.pre_nms_top == 0 || self.train_proposals == 0 || self.eval_proposals == 0 {
            return bad("proposal counts must be positive".into());
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.nms_iou) || !unit(self.match_iou) || !unit(self.pos_iou) || !unit(self.neg_iou) {
            return bad("IoU thresholds must lie in (0,1)".into());
        }
        if self.neg_iou > self.pos_iou {
            return bad("neg_iou must not exceed pos_iou".into());
        }
        Ok(())
    }

    /// The same architecture with the given classifier layout.
    pub fn with_domain(&self, domain: Domain) -> Self {
        Self {
            domain,
            ..self.clone()
        }
    }
}

pub(crate) fn backbone_weight(i: usize) -> String {
    format!("backbone.conv{}.weight", i + 1)
}

fn backbone_bias(i: usize) -> String {
    format!("backbone.conv{}.bias", i + 1)
}

fn head_name(layer: &str, kind: &str, part: &str) -> String {
    format!("head.{layer}.{kind}.{part}")
}

pub const CLS_FC_WEIGHT: &str = "cls.fc.weight";
pub const CLS_FC_BIAS: &str = "cls.fc.bias";
pub const SOFTEN_FC_WEIGHT: &str = "soften.fc.weight";
pub const SOFTEN_FC_BIAS: &str = "soften.fc.bias";

/// Every parameter name with its shape, in a fixed order.
pub fn param_shapes(config: &LstdConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut in_c = config.input_channels;
    for (i, &c) in config.backbone_channels.iter().enumerate() {
        out.push((backbone_weight(i), vec![c, in_c, 3, 3]));
        out.push((backbone_bias(i), vec![c]));
        in_c = c;
    }
    for d in &config.detection_layers {
        let c = config.layer_dims(&d.layer).map(|(c, _)| c).unwrap_or(0);
        let r = d.ratios.len();
        out.push((head_name(&d.layer, "reg", "weight"), vec![4 * r, c, 3, 3]));
        out.push((head_name(&d.layer, "reg", "bias"), vec![4 * r]));
        out.push((head_name(&d.layer, "obj", "weight"), vec![2 * r, c, 3, 3]));
        out.push((head_name(&d.layer, "obj", "bias"), vec![2 * r]));
    }
    let roi_c = config.layer_dims(&config.roi_layer).map(|(c, _)| c).unwrap_or(0);
    let cc = config.cls_channels;
    out.push(("cls.conv1.weight".into(), vec![cc, roi_c, 3, 3]));
    out.push(("cls.conv1.bias".into(), vec![cc]));
    out.push(("cls.conv2.weight".into(), vec![cc, cc, 3, 3]));
    out.push(("cls.conv2.bias".into(), vec![cc]));
    let flat = cc * config.roi_bins * config.roi_bins;
    out.push((CLS_FC_WEIGHT.into(), vec![flat, config.num_classes() + 1]));
    out.push((CLS_FC_BIAS.into(), vec![config.num_classes() + 1]));
    if config.has_soften_head() {
        out.push((SOFTEN_FC_WEIGHT.into(), vec![flat, config.k_source + 1]));
        out.push((SOFTEN_FC_BIAS.into(), vec![config.k_source + 1]));
    }
    out
}

/// Fan-in scaled normal draw: `sqrt(gain / fan_in)` standard deviation.
pub(crate) fn init_tensor(shape: &[usize], gain: f64, rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = if shape.len() == 4 {
        shape[1..].iter().product()
    } else {
        shape[0]
    };
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

/// All learnable arrays of one network, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub map: ParamMap,
}

impl DetectorParams {
    /// Kaiming-style normal weights for convs, fan-in scaled normal for the
    /// final linear layers, zero biases.
    pub fn init(config: &LstdConfig, rng: &mut impl Rng) -> Self {
        let mut map = ParamMap::new();
        for (name, shape) in param_shapes(config) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if shape.len() == 4 {
                init_tensor(&shape, 2.0, rng)
            } else {
                init_tensor(&shape, 1.0, rng)
            };
            map.insert(name, t);
        }
        Self { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| LstdError::Config(format!("missing parameter `{name}`")))
    }

    /// Checks names and shapes against the architecture.
    pub fn check(&self, config: &LstdConfig) -> Result<()> {
        let expected = param_shapes(config);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(LstdError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.map.len() != expected.len() {
            let extra = self
                .map
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(LstdError::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Registers every array in `g`, as gradient-receiving leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundParams {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameter handles inside one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| LstdError::Config(format!("missing parameter `{name}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    /// Index of the default box the proposal was decoded from; `None` for
    /// injected ground-truth boxes.
    pub default_index: Option<usize>,
}

/// Graph handles for one image's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Backbone feature maps, `conv1`.. in order.
    pub features: Vec<Var>,
    /// Per detection layer (regression map 4R×H×W, objectness map 2R×H×W).
    pub head_maps: Vec<(Var, Var)>,
    /// All default boxes' offsets, D×4 in layout order.
    pub regression: Var,
    /// All default boxes' object-or-not logits, D×2 (background, object).
    pub objectness: Var,
    pub bd_features: Var,
    pub roi_features: Var,
    pub proposals: Vec<Proposal>,
    /// N×(K+1).
    pub class_logits: Var,
    /// N×(K_source+1), target networks only.
    pub soften_logits: Option<Var>,
}

/// Per-layer (regression, objectness) maps, then all regressions (D×4)
/// and all objectness logits (D×2) in layout order.
pub type DetectionHeads = (Vec<(Var, Var)>, Var, Var);

/// Network definition plus its precomputed default boxes.
#[derive(Clone, Debug)]
pub struct Lstd {
    config: LstdConfig,
    layout: DefaultBoxLayout,
    defaults: Vec<BBox>,
}

impl Lstd {
    pub fn new(config: LstdConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.box_layout()?;
        let defaults = generate_default_boxes(&layout);
        Ok(Self {
            config,
            layout,
            defaults,
        })
    }

    pub fn config(&self) -> &LstdConfig {
        &self.config
    }

    pub fn layout(&self) -> &DefaultBoxLayout {
        &self.layout
    }

    pub fn defaults(&self) -> &[BBox] {
        &self.defaults
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> DetectorParams {
        DetectorParams::init(&self.config, rng)
    }

    /// Runs the conv blocks; returns every block's output.
    pub fn backbone_forward(&self, g: &Graph, p: &BoundParams, image: Var) -> Result<Vec<Var>> {
        let shape = g.shape(image);
        let c = &self.config;
        if shape != [c.input_channels, c.input_size, c.input_size] {
            return Err(LstdError::InvalidArgument(format!(
                "image shape {shape:?}, expected {:?}",
                [c.input_channels, c.input_size, c.input_size]
            )));
        }
        let mut x = image;
        let mut features = Vec::with_capacity(c.backbone_channels.len());
        for i in 0..c.backbone_channels.len() {
            let y = g.conv2d(x, p.get(&backbone_weight(i))?, Some(p.get(&backbone_bias(i))?), 1, 1)?;
            x = g.maxpool2d(g.relu(y), 2, 2)?;
            features.push(x);
        }
        Ok(features)
    }

    /// Per detection layer a 3×3 conv for 4R offsets and one for 2R
    /// objectness logits, then both reordered to layout order and
    /// concatenated into D×4 and D×2.
    pub fn detection_heads(
        &self,
        g: &Graph,
        p: &BoundParams,
        features: &[Var],
    ) -> Result<DetectionHeads> {
        let mut maps = Vec::new();
        let mut regs = Vec::new();
        let mut objs = Vec::new();
        for d in &self.config.detection_layers {
            let f = features[self.config.layer_index(&d.layer)?];
            let reg = g.conv2d(
                f,
                p.get(&head_name(&d.layer, "reg", "weight"))?,
                Some(p.get(&head_name(&d.layer, "reg", "bias"))?),
                1,
                1,
            )?;
            let obj = g.conv2d(
                f,
                p.get(&head_name(&d.layer, "obj", "weight"))?,
                Some(p.get(&head_name(&d.layer, "obj", "bias"))?),
                1,
                1,
            )?;
            let s = g.shape(reg);
            let (h, w, r) = (s[1], s[2], d.ratios.len());
            regs.push(g.gather(reg, cell_major_index(h, w, r, 4), &[h * w * r, 4])?);
            objs.push(g.gather(obj, cell_major_index(h, w, r, 2), &[h * w * r, 2])?);
            maps.push((reg, obj));
        }
        Ok((maps, g.concat(&regs, 0)?, g.concat(&objs, 0)?))
    }

    /// Decodes every default box, ranks by object probability, keeps the
    /// top `pre_nms_top`, applies NMS at `nms_iou` and returns at most the
    /// train/eval proposal count.
    pub fn select_proposals(&self, regression: &Tensor, objectness: &Tensor, mode: ProposalMode) -> Vec<Proposal> {
        let cap = match mode {
            ProposalMode::Train => self.config.train_proposals,
            ProposalMode::Eval => self.config.eval_proposals,
        };
        select_proposals(
            &self.defaults,
            regression.data(),
            objectness.data(),
            self.config.pre_nms_top,
            self.config.nms_iou,
            cap,
        )
    }

    /// Runs ROI max pooling of `boxes` on a C×H×W feature cube.
    pub fn roi_pool(&self, g: &Graph, feature: Var, boxes: &[BBox]) -> Result<Var> {
        let s = g.shape(feature);
        let regions: Vec<CellRegion> = boxes.iter().map(|b| project_box(b, s[1], s[2])).collect();
        Ok(g.roi_max_pool(feature, &regions, self.config.roi_bins)?)
    }

    /// Two 3×3 conv + relu layers on the pooled cubes, flatten, then the
    /// (K+1) head and, if present, the soften head.
    pub fn classify(&self, g: &Graph, p: &BoundParams, pooled: Var) -> Result<(Var, Option<Var>)> {
        let n = g.shape(pooled)[0];
        let x = g.conv2d(pooled, p.get("cls.conv1.weight")?, Some(p.get("cls.conv1.bias")?), 1, 1)?;
        let x = g.relu(x);
        let x = g.conv2d(x, p.get("cls.conv2.weight")?, Some(p.get("cls.conv2.bias")?), 1, 1)?;
        let x = g.relu(x);
        let flat_len = g.value(x).len() / n;
        let flat = g.reshape(x, &[n, flat_len])?;
        let logits = g.add_bias(g.matmul(flat, p.get(CLS_FC_WEIGHT)?)?, p.get(CLS_FC_BIAS)?)?;
        let soften = if self.config.has_soften_head() {
            let s = g.matmul(flat, p.get(SOFTEN_FC_WEIGHT)?)?;
            Some(g.add_bias(s, p.get(SOFTEN_FC_BIAS)?)?)
        } else {
            None
        };
        Ok((logits, soften))
    }

    /// Full forward pass. `boxes` overrides proposal selection when given;
    /// otherwise proposals come from the heads, and in training mode the
    /// `gts` are placed in front of them when `gt_proposals` is enabled.
    pub fn forward(
        &self,
        g: &Graph,
        p: &BoundParams,
        image: &Tensor,
        mode: ProposalMode,
        gts: &[LabeledBox],
        boxes: Option<&[BBox]>,
    ) -> Result<ForwardOutputs> {
        let image = g.constant(image.clone());
        let features = self.backbone_forward(g, p, image)?;
        let (head_maps, regression, objectness) = self.detection_heads(g, p, &features)?;
        let proposals = match boxes {
            Some(b) => b
                .iter()
                .map(|&bbox| Proposal {
                    bbox,
                    objectness: 1.0,
                    default_index: None,
                })
                .collect(),
            None => {
                let selected = self.select_proposals(&g.value(regression), &g.value(objectness), mode);
                if mode == ProposalMode::Train && self.config.gt_proposals {
                    let mut all: Vec<Proposal> = gts
                        .iter()
                        .map(|gt| Proposal {
                            bbox: gt.bbox,
                            objectness: 1.0,
                            default_index: None,
                        })
                        .collect();
                    all.extend(selected);
                    all.truncate(self.config.train_proposals.max(gts.len()));
                    all
                } else {
                    selected
                }
            }
        };
        if proposals.is_empty() {
            return Err(LstdError::InvalidArgument("no proposals to classify".into()));
        }
        let bd_features = features[self.config.layer_index(&self.config.bd_layer)?];
        let roi_features = features[self.config.layer_index(&self.config.roi_layer)?];
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let pooled = self.roi_pool(g, roi_features, &boxes)?;
        let (class_logits, soften_logits) = self.classify(g, p, pooled)?;
        Ok(ForwardOutputs {
            features,
            head_maps,
            regression,
            objectness,
            bd_features,
            roi_features,
            proposals,
            class_logits,
            soften_logits,
        })
    }

    /// Feature maps only, with parameters as constants.
    pub fn features(&self, params: &DetectorParams, image: &Tensor) -> Result<Vec<Tensor>> {
        let g = Graph::new();
        let p = params.bind(&g, false);
        let x = g.constant(image.clone());
        let feats = self.backbone_forward(&g, &p, x)?;
        Ok(feats.into_iter().map(|v| (*g.value(v)).clone()).collect())
    }
}

/// Flat indices that reorder a (R·k)×H×W head map into (H·W·R)×k rows in
/// (row, column, ratio) order.
fn cell_major_index(h: usize, w: usize, r: usize, k: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * r * k);
    for i in 0..h {
        for j in 0..w {
            for ri in 0..r {
                for t in 0..k {
                    index.push(((ri * k + t) * h + i) * w + j);
                }
            }
        }
    }
    index
}

/// Object probability of each D×2 logit row.
pub fn objectness_scores(objectness: &[f64]) -> Vec<f64> {
    objectness
        .chunks(2)
        .map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp()))
        .collect()
}

/// Proposal pipeline on raw head outputs: rank by object probability
/// (ties by index), keep `pre_nms_top`, decode, NMS, truncate to `cap`.
/// Boxes that decode to an empty rectangle after clipping are dropped.
pub fn select_proposals(
    defaults: &[BBox],
    regression: &[f64],
    objectness: &[f64],
    pre_nms_top: usize,
    nms_iou: f64,
    cap: usize,
) -> Vec<Proposal> {
    let scores = objectness_scores(objectness);
    let mut order: Vec<usize> = (0..defaults.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let candidates: Vec<Proposal> = order
        .into_iter()
        .take(pre_nms_top)
        .filter_map(|d| {
            let t = [
                regression[4 * d],
                regression[4 * d + 1],
                regression[4 * d + 2],
                regression[4 * d + 3],
            ];
            let bbox = decode_offsets(&t, &defaults[d]);
            bbox.is_valid().then_some(Proposal {
                bbox,
                objectness: scores[d],
                default_index: Some(d),
            })
        })
        .collect();
    let scored: Vec<(BBox, f64)> = candidates.iter().map(|p| (p.bbox, p.objectness)).collect();
    nms(&scored, nms_iou, cap)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Cell rectangle covered by a box on an H×W grid: edges snapped outward
/// to whole cells, at least one cell in each direction.
pub fn project_box(b: &BBox, h: usize, w: usize) -> CellRegion {
    let span = |lo: f64, hi: f64, n: usize| {
        let a = ((lo * n as f64).floor().max(0.0) as usize).min(n - 1);
        let z = ((hi * n as f64).ceil() as usize).min(n);
        (a, z.max(a + 1))
    };
    let (y0, y1) = span(b.ymin, b.ymax, h);
    let (x0, x1) = span(b.xmin, b.xmax, w);
    CellRegion { y0, y1, x0, x1 }
}

/// Per-proposal class targets: the best gt's class at IoU ≥ `pos_iou`,
/// background (0) below `neg_iou`, `None` (ignored) in between.
pub fn label_proposals(proposals: &[BBox], gts: &[LabeledBox], pos_iou: f64, neg_iou: f64) -> Vec<Option<usize>> {
    proposals
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .map(|g| (iou(p, &g.bbox), g.class_id))
                .fold(None, |acc: Option<(f64, usize)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((v, class)) if v >= pos_iou => Some(class),
                Some((v, _)) if v >= neg_iou => None,
                _ => Some(0),
            }
        })
        .collect()
}
