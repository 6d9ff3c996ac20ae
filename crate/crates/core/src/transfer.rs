//! Source pre-training, parameter transplantation into the target network,
//! regularized few-shot fine-tuning, checkpoints and the shot × mode ×
//! seed ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndgrad::{AdamConfig, AdamState, Graph, ParamMap, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LstdError, Result};
use crate::evaluation::{evaluate, mean_background_heat, ApMetric, DetectConfig, EvalReport};
use crate::geometry::match_defaults;
use crate::losses::{
    bd_loss, classification_loss, mine_hard_negatives, objectness_loss, regression_loss, tk_knowledge, tk_loss,
    total_loss, LossBreakdown, LossTerms, LossWeights, Mode,
};
use crate::model::{
    label_proposals, param_shapes, DetectorParams, Domain, Lstd, LstdConfig, ProposalMode, CLS_FC_BIAS,
    CLS_FC_WEIGHT, SOFTEN_FC_BIAS, SOFTEN_FC_WEIGHT,
};
use crate::rng::substream;
use crate::synthdata::{sample_k_shot, write_atomic, Dataset, SampleRecord};

pub const SOURCE_ITERATIONS: usize = 5000;
pub const TARGET_ITERATIONS: usize = 500;

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub config: LstdConfig,
    pub weights: LossWeights,
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Iteration at which the learning rate is multiplied by `lr_decay`;
    /// 80% of `iterations` when unset.
    pub decay_at: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            config: LstdConfig::default(),
            weights: LossWeights::default(),
            mode: Mode::Ft,
            seed: 0,
            batch_size: 8,
            iterations: SOURCE_ITERATIONS,
            lr: adam.lr,
            lr_decay: 0.1,
            decay_at: None,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            weight_decay: adam.weight_decay,
            checkpoint_path: None,
            metrics_path: None,
        }
    }
}

impl TrainRun {
    /// Source pre-training defaults.
    pub fn source(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Target fine-tuning defaults.
    pub fn target(mode: Mode, seed: u64) -> Self {
        Self {
            config: LstdConfig::default().with_domain(Domain::Target),
            mode,
            seed,
            iterations: TARGET_ITERATIONS,
            ..Self::default()
        }
    }

    pub fn decay_iteration(&self) -> usize {
        self.decay_at.unwrap_or(self.iterations * 4 / 5)
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration >= self.decay_iteration() {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(LstdError::Config("batch_size and iterations must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_decay > 0.0) {
            return Err(LstdError::Config("learning rate and decay must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub l_reg: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_bd: f64,
    pub l_tk: f64,
    pub l_total: f64,
}

impl MetricRecord {
    fn new(iter: usize, b: &LossBreakdown) -> Self {
        Self {
            iter,
            l_reg: b.l_reg,
            l_obj: b.l_obj,
            l_cls: b.l_cls,
            l_bd: b.l_bd,
            l_tk: b.l_tk,
            l_total: b.l_total,
        }
    }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("metric record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| LstdError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LstdError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

const MAGIC: &[u8; 4] = b"LSTD";
const VERSION: u32 = 1;

/// A network configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: LstdConfig,
    pub params: DetectorParams,
}

impl Checkpoint {
    pub fn new(config: LstdConfig, params: DetectorParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    /// Source-domain category count.
    pub fn k_source(&self) -> usize {
        self.config.k_source
    }

    /// Header, JSON config, then one record per array in name order:
    /// name length, name, rank, dims, little-endian f64 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        for (name, t) in &self.params.map {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(LstdError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(LstdError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let config: LstdConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| LstdError::Checkpoint(format!("config: {e}")))?;
        let mut map = ParamMap::new();
        while r.pos < bytes.len() {
            let n = r.u64()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| LstdError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u64()? as usize;
            if rank > 8 {
                return Err(LstdError::Checkpoint(format!("`{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| LstdError::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if map.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(LstdError::Checkpoint(format!("duplicate parameter `{name}`")));
            }
        }
        Self::new(config, DetectorParams { map })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LstdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LstdError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Frozen source network used for transfer knowledge.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub net: &'a Lstd,
    pub params: &'a DetectorParams,
}

/// Loss and gradients of one image.
pub fn image_step(
    net: &Lstd,
    params: &DetectorParams,
    sample: &SampleRecord,
    weights: &LossWeights,
    mode: Mode,
    teacher: Option<Teacher<'_>>,
) -> Result<(ParamMap, LossBreakdown)> {
    let cfg = net.config();
    let g = Graph::new();
    let p = params.bind(&g, true);
    let image = sample.to_tensor();
    let gt_boxes = sample.gt_boxes();
    let out = net.forward(&g, &p, &image, ProposalMode::Train, &sample.boxes, None)?;

    let assignment = match_defaults(net.defaults(), &sample.boxes, cfg.match_iou);
    let reg = regression_loss(&g, out.regression, net.defaults(), &assignment, &sample.boxes)?;
    let negatives = mine_hard_negatives(g.value(out.objectness).data(), &assignment, cfg.neg_pos_ratio);
    let obj = objectness_loss(&g, out.objectness, &assignment, &negatives)?;
    let proposals: Vec<_> = out.proposals.iter().map(|p| p.bbox).collect();
    let labels = label_proposals(&proposals, &sample.boxes, cfg.pos_iou, cfg.neg_iou);
    let cls = classification_loss(&g, out.class_logits, &labels)?;

    let bd = if mode.uses_bd() {
        Some(bd_loss(&g, out.bd_features, &gt_boxes, weights.bd_normalize)?)
    } else {
        None
    };
    let tk = if mode.uses_tk() {
        let teacher = teacher.ok_or_else(|| LstdError::Config(format!("mode {mode} needs a source network")))?;
        let soften = out
            .soften_logits
            .ok_or_else(|| LstdError::Config(format!("mode {mode} needs a soften head")))?;
        let knowledge = tk_knowledge(teacher.net, teacher.params, &image, &proposals, weights.tau)?;
        Some(tk_loss(&g, &knowledge, soften, weights.tau)?)
    } else {
        None
    };
    let terms = LossTerms { reg, obj, cls, bd, tk };
    let (total, breakdown) = total_loss(&g, &terms, weights, mode)?;
    let mut grads = g.backward(total)?;
    let mut out = ParamMap::new();
    for (name, &v) in &p.vars {
        let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(&g.shape(v)));
        out.insert(name.clone(), t);
    }
    Ok((out, breakdown))
}

/// Batch indices over epochs: each epoch is a fresh permutation of the
/// dataset drawn from its own substream.
struct BatchSampler {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut substream(self.seed, "batches", self.epoch));
                self.epoch += 1;
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

/// Called after every iteration with its metrics record.
pub type Progress<'a> = &'a mut dyn FnMut(&MetricRecord);

fn train_loop(
    net: &Lstd,
    mut params: DetectorParams,
    dataset: &Dataset,
    run: &TrainRun,
    batch_size: usize,
    teacher: Option<Teacher<'_>>,
    progress: Progress<'_>,
) -> Result<Trained> {
    let mut adam = AdamState::new(run.adam());
    let mut sampler = BatchSampler::new(run.seed, dataset.samples.len());
    let mut metrics = Vec::with_capacity(run.iterations);
    let fail = |metrics: &[MetricRecord], e: LstdError| -> LstdError {
        if let Some(path) = &run.metrics_path {
            if let Err(io) = write_metrics(path, metrics) {
                return io;
            }
        }
        e
    };
    for iter in 0..run.iterations {
        let batch = sampler.next_batch(batch_size);
        let results: Vec<Result<(ParamMap, LossBreakdown)>> = batch
            .par_iter()
            .map(|&i| image_step(net, &params, &dataset.samples[i], &run.weights, run.mode, teacher))
            .collect();
        let mut sum: Option<ParamMap> = None;
        let mut parts = Vec::with_capacity(batch.len());
        for r in results {
            let (grads, b) = match r {
                Ok(v) => v,
                Err(LstdError::Diverged { component, .. }) => {
                    return Err(fail(&metrics, LstdError::Diverged { component, iteration: iter }))
                }
                Err(e) => return Err(fail(&metrics, e)),
            };
            parts.push(b);
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (name, g) in grads {
                        let a = acc.get_mut(&name).expect("same parameter set");
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = sum.expect("batch is non-empty");
        let inv = 1.0 / batch.len() as f64;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        let record = MetricRecord::new(iter, &LossBreakdown::mean(&parts));
        metrics.push(record);
        progress(&record);
        adam.config.lr = run.lr_at(iter);
        adam.update(&mut params.map, &grads).map_err(|e| fail(&metrics, e.into()))?;
    }
    let checkpoint = Checkpoint::new(net.config().clone(), params)?;
    if let Some(path) = &run.metrics_path {
        write_metrics(path, &metrics)?;
    }
    if let Some(path) = &run.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(Trained { checkpoint, metrics })
}

fn check_dataset(dataset: &Dataset, num_classes: usize) -> Result<()> {
    if dataset.samples.is_empty() {
        return Err(LstdError::Dataset("dataset is empty".into()));
    }
    if dataset.num_classes() != num_classes {
        return Err(LstdError::Dataset(format!(
            "dataset has {} classes, network expects {num_classes}",
            dataset.num_classes()
        )));
    }
    let size = dataset.samples[0].width;
    if dataset.samples.iter().any(|s| s.width != size || s.height != size) {
        return Err(LstdError::Dataset("all images must share one square size".into()));
    }
    Ok(())
}

/// Trains a source network from scratch on the main detection loss.
pub fn pretrain_source(dataset: &Dataset, run: &TrainRun, progress: Progress<'_>) -> Result<Trained> {
    run.validate()?;
    let mut config = run.config.clone().with_domain(Domain::Source);
    config.k_source = dataset.num_classes();
    check_dataset(dataset, config.k_source)?;
    if dataset.samples[0].width != config.input_size {
        return Err(LstdError::Dataset(format!(
            "images are {}px, config expects {}px",
            dataset.samples[0].width, config.input_size
        )));
    }
    let net = Lstd::new(config)?;
    let params = net.init_params(&mut substream(run.seed, "init", 0));
    let run = TrainRun {
        mode: Mode::Ft,
        ..run.clone()
    };
    train_loop(&net, params, dataset, &run, run.batch_size, None, progress)
}

/// Target configuration derived from a source checkpoint.
pub fn target_config(source: &Checkpoint, k_target: usize) -> LstdConfig {
    LstdConfig {
        domain: Domain::Target,
        k_target,
        ..source.config.clone()
    }
}

/// Target parameters: every array copied from the source except the
/// (K+1) classifier layer, which is drawn fresh; the soften head is a copy
/// of the source (K_source+1) classifier layer.
pub fn init_target(source: &Checkpoint, k_target: usize, seed: u64) -> Result<DetectorParams> {
    if source.config.domain != Domain::Source {
        return Err(LstdError::Checkpoint("initialization needs a source-domain checkpoint".into()));
    }
    let config = target_config(source, k_target);
    config.validate()?;
    let fresh = DetectorParams::init(&config, &mut substream(seed, "target-init", 0));
    let mut map = ParamMap::new();
    for (name, shape) in param_shapes(&config) {
        let from = match name.as_str() {
            CLS_FC_WEIGHT | CLS_FC_BIAS => {
                map.insert(name.clone(), fresh.get(&name)?.clone());
                continue;
            }
            SOFTEN_FC_WEIGHT => CLS_FC_WEIGHT,
            SOFTEN_FC_BIAS => CLS_FC_BIAS,
            other => other,
        };
        let t = source.params.get(from)?;
        if t.shape() != shape.as_slice() {
            return Err(LstdError::ParamShape {
                name,
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
        map.insert(name, t.clone());
    }
    Ok(DetectorParams { map })
}

/// Fine-tunes a transplanted target network on a few-shot dataset. The
/// source parameters are only read.
pub fn finetune_target(dataset: &Dataset, source: &Checkpoint, run: &TrainRun, progress: Progress<'_>) -> Result<Trained> {
    run.validate()?;
    let k = dataset.num_classes();
    check_dataset(dataset, k)?;
    for class in 1..=k {
        if !dataset.samples.iter().any(|s| s.has_class(class)) {
            return Err(LstdError::Dataset(format!("class {class} has no training images")));
        }
    }
    let params = init_target(source, k, run.seed)?;
    let net = Lstd::new(target_config(source, k))?;
    let teacher_net = Lstd::new(source.config.clone())?;
    let teacher = Teacher {
        net: &teacher_net,
        params: &source.params,
    };
    let batch = run.batch_size.min(dataset.samples.len());
    train_loop(&net, params, dataset, run, batch, Some(teacher), progress)
}

/// Ablation grid definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub shots: Vec<usize>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Template for every fine-tuning run; mode and seed are overridden.
    pub run: TrainRun,
    pub detect: DetectConfig,
    /// Held-out images used for the background heat statistic.
    pub heat_images: usize,
    pub jobs: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            shots: vec![1, 2, 5, 10, 30],
            modes: Mode::ALL.to_vec(),
            seeds: (0..5).collect(),
            run: TrainRun::target(Mode::Ft, 0),
            detect: DetectConfig::default(),
            heat_images: 50,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub shots: usize,
    pub mode: Mode,
    pub seed: u64,
    pub map: Option<f64>,
    pub background_heat: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub shots: usize,
    pub mode: Mode,
    pub runs: usize,
    pub failures: usize,
    pub mean_map: Option<f64>,
    /// Sample standard deviation over successful seeds.
    pub std_map: Option<f64>,
    pub mean_background_heat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub shots: Vec<usize>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub records: Vec<CellRecord>,
    pub cells: Vec<CellSummary>,
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

impl AblationTable {
    pub fn from_records(shots: Vec<usize>, modes: Vec<Mode>, seeds: Vec<u64>, records: Vec<CellRecord>) -> Self {
        let mut cells = Vec::new();
        for &mode in &modes {
            for &k in &shots {
                let mine: Vec<&CellRecord> = records.iter().filter(|r| r.shots == k && r.mode == mode).collect();
                let maps: Vec<f64> = mine.iter().filter_map(|r| r.map).collect();
                let heats: Vec<f64> = mine.iter().filter_map(|r| r.background_heat).collect();
                let stats = mean_std(&maps);
                cells.push(CellSummary {
                    shots: k,
                    mode,
                    runs: mine.len(),
                    failures: mine.iter().filter(|r| r.error.is_some()).count(),
                    mean_map: stats.map(|s| s.0),
                    std_map: stats.map(|s| s.1),
                    mean_background_heat: mean_std(&heats).map(|s| s.0),
                });
            }
        }
        Self {
            shots,
            modes,
            seeds,
            records,
            cells,
        }
    }

    pub fn cell(&self, shots: usize, mode: Mode) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.shots == shots && c.mode == mode)
    }

    /// Modes as rows, shot counts as columns, mAP in percent as mean±std.
    pub fn render(&self) -> String {
        let label_w = self.modes.iter().map(|m| m.to_string().len() + 5).max().unwrap_or(4).max(5);
        let col_w = 13;
        let mut s = String::new();
        let _ = write!(s, "{:<label_w$}", "Shots");
        for k in &self.shots {
            let _ = write!(s, "{k:>col_w$}");
        }
        s.push('\n');
        for &mode in &self.modes {
            let _ = write!(s, "{:<label_w$}", format!("LSTD {mode}"));
            for &k in &self.shots {
                let text = match self.cell(k, mode) {
                    Some(CellSummary {
                        mean_map: Some(m),
                        std_map: Some(sd),
                        failures,
                        ..
                    }) => format!("{:.1}±{:.1}{}", 100.0 * m, 100.0 * sd, if *failures > 0 { "*" } else { "" }),
                    _ => "failed".to_string(),
                };
                let _ = write!(s, "{text:>col_w$}");
            }
            s.push('\n');
        }
        if self.cells.iter().any(|c| c.failures > 0) {
            s.push_str("* some seeds failed; see records\n");
        }
        s
    }
}

pub fn cell_dir(root: &Path, shots: usize, mode: Mode, seed: u64) -> PathBuf {
    let tag = mode.to_string().replace('+', "_");
    root.join(format!("k{shots}_{tag}_seed{seed}"))
}

fn run_cell(
    source: &Checkpoint,
    pool: &Dataset,
    test: &Dataset,
    spec: &AblationSpec,
    (shots, mode, seed): (usize, Mode, u64),
    out_dir: Option<&Path>,
) -> Result<(f64, f64)> {
    let data = sample_k_shot(pool, shots, seed)?;
    let mut run = TrainRun {
        mode,
        seed,
        ..spec.run.clone()
    };
    let dir = out_dir.map(|root| cell_dir(root, shots, mode, seed));
    if let Some(dir) = &dir {
        fs::create_dir_all(dir).map_err(|e| LstdError::io(dir, e))?;
        run.checkpoint_path = Some(dir.join("target.ckpt"));
        run.metrics_path = Some(dir.join("metrics.jsonl"));
    }
    let trained = finetune_target(&data, source, &run, &mut |_| {})?;
    let net = Lstd::new(trained.checkpoint.config.clone())?;
    let params = &trained.checkpoint.params;
    let report: EvalReport = evaluate(&net, params, test, &spec.detect, ApMetric::ElevenPoint)?;
    let heat = mean_background_heat(&net, params, test, &net.config().bd_layer.clone(), spec.heat_images)?;
    if let Some(dir) = &dir {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(&dir.join("report.json"), format!("{text}\n").as_bytes())?;
    }
    Ok((report.map, heat))
}

/// Fine-tunes and evaluates every (shots, mode, seed) combination. Cells
/// run on `spec.jobs` threads; a failing cell is recorded and the rest
/// continue. With `out_dir`, each cell writes its checkpoint, metrics and
/// report into its own subdirectory and the tables are written at the top.
pub fn run_ablation(
    source: &Checkpoint,
    pool: &Dataset,
    test: &Dataset,
    spec: &AblationSpec,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if spec.shots.is_empty() || spec.modes.is_empty() || spec.seeds.is_empty() {
        return Err(LstdError::Config("ablation needs shots, modes and seeds".into()));
    }
    let mut jobs = Vec::new();
    for &k in &spec.shots {
        for &mode in &spec.modes {
            for &seed in &spec.seeds {
                jobs.push((k, mode, seed));
            }
        }
    }
    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.max(1))
        .build()
        .map_err(|e| LstdError::Config(format!("thread pool: {e}")))?;
    let records: Vec<CellRecord> = pool_threads.install(|| {
        jobs.par_iter()
            .map(|&(shots, mode, seed)| {
                let result = run_cell(source, pool, test, spec, (shots, mode, seed), out_dir);
                let (map, background_heat, error) = match result {
                    Ok((m, h)) => (Some(m), Some(h), None),
                    Err(e) => (None, None, Some(e.to_string())),
                };
                CellRecord {
                    shots,
                    mode,
                    seed,
                    map,
                    background_heat,
                    error,
                }
            })
            .collect()
    });
    let table = AblationTable::from_records(spec.shots.clone(), spec.modes.clone(), spec.seeds.clone(), records);
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&table).expect("table serializes");
        write_atomic(&dir.join("ablation.json"), format!("{json}\n").as_bytes())?;
        write_atomic(&dir.join("ablation.txt"), table.render().as_bytes())?;
    }
    Ok(table)
}

/// Names whose arrays differ between two parameter sets, including names
/// present in only one of them.
pub fn differing_params(a: &DetectorParams, b: &DetectorParams) -> Vec<String> {
    let mut names: BTreeMap<&str, ()> = BTreeMap::new();
    for k in a.map.keys().chain(b.map.keys()) {
        names.insert(k, ());
    }
    names
        .into_keys()
        .filter(|k| a.map.get(*k) != b.map.get(*k))
        .map(str::to_string)
        .collect()
}
