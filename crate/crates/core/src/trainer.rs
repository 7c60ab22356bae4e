//! Mini-batch training loop: label-smoothed CE on labeled data plus a
//! ramped-up regularizer on the unlabeled target batch, optimized by SGD with
//! momentum and weight decay under an inverse-decay learning rate.
//!
//! Each iteration reads pseudo-labels from the banks as left by the previous
//! iteration, takes the gradient step, and only then writes the current
//! batch's features and predictions back.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autonet::{Layer, NetGrads, NetParams, NetSpec, HEAD};
use crate::banks::{bank_init, CentroidBank, InstanceBank};
use crate::data::{apply_split, DomainDataset, SplitSpec, TrainingView};
use crate::error::{Error, Result};
use crate::evalkit::{self, RunResult};
use crate::labelers::{argmax_label, na_aggregate_batch, nc_label_batch, PseudoLabel};
use crate::losses::{self, LossOutput};
use crate::ndmath::{argmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    Minent,
    PlLee,
    PlWeighted,
    AtdocNc,
    AtdocNa,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::Minent => "minent",
            Method::PlLee => "pl_lee",
            Method::PlWeighted => "pl_weighted",
            Method::AtdocNc => "atdoc_nc",
            Method::AtdocNa => "atdoc_na",
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Method::SourceOnly => 0.0,
            Method::AtdocNc => 0.1,
            _ => 0.2,
        }
    }
}

/// Run configuration. The JSON form uses these field names (temperature is
/// `"T"`); unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Final regularizer weight; `None` picks the method default.
    pub lambda_max: Option<f64>,
    /// Neighborhood size for aggregation.
    pub m: usize,
    #[serde(rename = "T")]
    pub temperature: f64,
    /// EMA weight of the newest batch centroid.
    pub gamma: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Also keep source samples in the instance bank.
    pub source_memory: bool,
    /// Use the unnormalized aggregated mass as the confidence weight.
    pub raw_confidence: bool,
    /// Weight the aggregation loss by confidence; off, every weight is 1.
    pub confidence_weight: bool,
    pub label_smoothing: f64,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub lr_scale_head: f64,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub track_quality: bool,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::AtdocNa,
            lambda_max: None,
            m: 5,
            temperature: 0.5,
            gamma: 0.1,
            batch_size: 12,
            iterations: 3000,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 0,
            source_memory: false,
            raw_confidence: false,
            confidence_weight: true,
            label_smoothing: 0.1,
            lr_alpha: 10.0,
            lr_beta: 0.75,
            lr_scale_head: 1.0,
            hidden_dim: 64,
            bottleneck_dim: 32,
            track_quality: true,
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        TrainConfig { method, ..Default::default() }
    }

    /// Large-scale settings: batch 36, bottleneck 256.
    pub fn large_scale(method: Method) -> Self {
        TrainConfig { method, batch_size: 36, bottleneck_dim: 256, ..Default::default() }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_max.unwrap_or_else(|| self.method.default_lambda())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.m == 0 {
            return bad("m must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("T = {} must be positive", self.temperature));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma = {} outside (0, 1]", self.gamma));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing = {} outside [0, 1)", self.label_smoothing));
        }
        if self.lambda() < 0.0 || !self.lambda().is_finite() {
            return bad(format!("lambda_max = {} must be non-negative", self.lambda()));
        }
        if self.lr0 < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 || self.lr_scale_head < 0.0 {
            return bad("learning rate, momentum and weight decay must be non-negative".into());
        }
        if self.hidden_dim == 0 || self.bottleneck_dim == 0 {
            return bad("hidden_dim and bottleneck_dim must be positive".into());
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical config JSON.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Linear ramp of the regularizer weight from 0 to `lambda_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampupSchedule {
    pub lambda_max: f64,
    pub total_iterations: usize,
}

impl RampupSchedule {
    pub fn lambda_at(&self, t: usize) -> Result<f64> {
        if t > self.total_iterations {
            return Err(Error::InvalidArgument(format!("iteration {t} beyond {}", self.total_iterations)));
        }
        if self.total_iterations == 0 {
            return Ok(0.0);
        }
        Ok(self.lambda_max * t as f64 / self.total_iterations as f64)
    }
}

/// `lr0 * (1 + alpha * t / total)^(-beta)`.
pub fn lr_at(lr0: f64, t: usize, total: usize, alpha: f64, beta: f64) -> f64 {
    let p = if total == 0 { 0.0 } else { t as f64 / total as f64 };
    lr0 * (1.0 + alpha * p).powf(-beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: Vec<Layer>,
    pub iteration: usize,
}

impl OptState {
    pub fn new(params: &NetParams) -> Self {
        let velocity = params
            .layers
            .iter()
            .map(|l| Layer { weight: Matrix::zeros(l.weight.rows(), l.weight.cols()), bias: vec![0.0; l.bias.len()] })
            .collect();
        OptState { velocity, iteration: 0 }
    }
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
/// `layer_lr_scale[i]` multiplies `lr` for layer `i`.
pub fn sgd_step(
    params: &mut NetParams,
    grads: &NetGrads,
    opt: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    layer_lr_scale: &[f64],
) -> Result<()> {
    if grads.layers.len() != params.layers.len() || opt.velocity.len() != params.layers.len() {
        return Err(Error::Shape("optimizer state is not congruent with the parameters".into()));
    }
    for (i, ((p, g), v)) in params.layers.iter_mut().zip(&grads.layers).zip(&mut opt.velocity).enumerate() {
        if p.weight.shape() != g.weight.shape() || p.weight.shape() != v.weight.shape() {
            return Err(Error::Shape(format!("layer {i} gradient shape mismatch")));
        }
        let step = lr * layer_lr_scale.get(i).copied().unwrap_or(1.0);
        let update = |p: &mut [f64], g: &[f64], v: &mut [f64]| {
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = momentum * *v + g + weight_decay * *p;
                *p -= step * *v;
            }
        };
        update(p.weight.data_mut(), g.weight.data(), v.weight.data_mut());
        update(&mut p.bias, &g.bias, &mut v.bias);
    }
    opt.iteration += 1;
    Ok(())
}

/// Per-iteration loss components. `total = source + target_labeled + lambda * regularizer`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub source: f64,
    pub target_labeled: f64,
    /// Unweighted regularizer value.
    pub regularizer: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Endless shuffled pass over `0..n`, reshuffled every epoch.
#[derive(Debug, Clone)]
struct CyclicSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicSampler {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        CyclicSampler { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// What one iteration did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Indices into the unlabeled target set.
    pub target_batch: Vec<usize>,
    /// Pseudo-labels used for the batch (argmax labels for methods without
    /// an auxiliary classifier).
    pub pseudo: Vec<PseudoLabel>,
}

/// Owns the mutable training state: parameters, optimizer and banks.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    view: TrainingView,
    params: NetParams,
    opt: OptState,
    centroid_bank: Option<CentroidBank>,
    instance_bank: Option<InstanceBank>,
    source_sampler: CyclicSampler,
    labeled_sampler: CyclicSampler,
    target_sampler: CyclicSampler,
}

impl Trainer {
    /// Initializes parameters from `config.seed` and builds the banks the
    /// method needs from one forward pass over the bank samples.
    pub fn new(config: TrainConfig, view: TrainingView) -> Result<Self> {
        config.validate()?;
        let spec = NetSpec {
            input_dim: view.dim,
            hidden_dim: config.hidden_dim,
            bottleneck_dim: config.bottleneck_dim,
            class_count: view.class_count,
        };
        let params = NetParams::init(spec, config.seed)?;
        let mut trainer = Trainer {
            opt: OptState::new(&params),
            source_sampler: CyclicSampler::new(view.source_x.rows(), config.seed, 1),
            labeled_sampler: CyclicSampler::new(view.target_labeled_x.rows(), config.seed, 2),
            target_sampler: CyclicSampler::new(view.target_unlabeled_x.rows(), config.seed, 3),
            config,
            view,
            params,
            centroid_bank: None,
            instance_bank: None,
        };
        trainer.init_banks()?;
        Ok(trainer)
    }

    fn n_tu(&self) -> usize {
        self.view.target_unlabeled_x.rows()
    }

    fn n_tl(&self) -> usize {
        self.view.target_labeled_x.rows()
    }

    /// Bank id of an unlabeled target sample.
    pub fn unlabeled_id(&self, i: usize) -> usize {
        i
    }

    /// Bank id of a labeled target sample.
    pub fn labeled_id(&self, i: usize) -> usize {
        self.n_tu() + i
    }

    /// Bank id of a source sample (only present with `source_memory`).
    pub fn source_id(&self, i: usize) -> usize {
        self.n_tu() + self.n_tl() + i
    }

    fn init_banks(&mut self) -> Result<()> {
        let cfg = &self.config;
        match cfg.method {
            Method::AtdocNc | Method::AtdocNa => {}
            _ => return Ok(()),
        }
        let mut rows: Vec<&[f64]> = self.view.target_unlabeled_x.row_iter().collect();
        rows.extend(self.view.target_labeled_x.row_iter());
        let n_target = rows.len();
        if cfg.method == Method::AtdocNa && cfg.source_memory {
            rows.extend(self.view.source_x.row_iter());
        }
        if n_target == 0 {
            return Err(Error::EmptyInput);
        }
        let inputs = Matrix::from_rows(&rows)?;
        let ids: Vec<usize> = (0..rows.len()).collect();
        let (centroids, instances) = bank_init(&self.params, &inputs, &ids, cfg.gamma, cfg.temperature)?;
        if cfg.method == Method::AtdocNc {
            self.centroid_bank = Some(centroids);
        } else {
            self.instance_bank = Some(instances);
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn into_params(self) -> NetParams {
        self.params
    }

    pub fn centroid_bank(&self) -> Option<&CentroidBank> {
        self.centroid_bank.as_ref()
    }

    pub fn instance_bank(&self) -> Option<&InstanceBank> {
        self.instance_bank.as_ref()
    }

    pub fn instance_bank_mut(&mut self) -> Option<&mut InstanceBank> {
        self.instance_bank.as_mut()
    }

    pub fn centroid_bank_mut(&mut self) -> Option<&mut CentroidBank> {
        self.centroid_bank.as_mut()
    }

    pub fn schedule(&self) -> RampupSchedule {
        RampupSchedule { lambda_max: self.config.lambda(), total_iterations: self.config.iterations }
    }

    /// Pseudo-labels for a forward-passed unlabeled target batch, read from
    /// the current bank state.
    pub fn pseudo_labels(&self, batch: &[usize], features: &Matrix, probs: &Matrix) -> Result<Vec<PseudoLabel>> {
        let cfg = &self.config;
        match cfg.method {
            Method::AtdocNc => {
                let bank = self
                    .centroid_bank
                    .as_ref()
                    .ok_or_else(|| Error::BankMismatch("atdoc_nc needs a centroid bank".into()))?;
                nc_label_batch(features, bank)
            }
            Method::AtdocNa => {
                let bank = self
                    .instance_bank
                    .as_ref()
                    .ok_or_else(|| Error::BankMismatch("atdoc_na needs an instance bank".into()))?;
                let ids: Vec<Option<usize>> = batch.iter().map(|&i| Some(self.unlabeled_id(i))).collect();
                let mut pseudo: Vec<PseudoLabel> = na_aggregate_batch(features, &ids, bank, cfg.m, cfg.raw_confidence)?
                    .into_iter()
                    .map(|n| n.pseudo)
                    .collect();
                if !cfg.confidence_weight {
                    pseudo.iter_mut().for_each(|p| p.confidence = 1.0);
                }
                Ok(pseudo)
            }
            _ => probs.row_iter().map(argmax_label).collect(),
        }
    }

    fn regularizer(&self, probs: &Matrix, pseudo: &[PseudoLabel]) -> Result<Option<LossOutput>> {
        Ok(match self.config.method {
            Method::SourceOnly => None,
            Method::Minent => Some(losses::minent_loss(probs)?),
            Method::PlLee => Some(losses::pl_loss_lee(probs)?),
            Method::PlWeighted => Some(losses::pl_loss_weighted(probs)?),
            Method::AtdocNc => Some(losses::nc_loss(probs, pseudo)?),
            Method::AtdocNa => Some(losses::na_loss(probs, pseudo)?),
        })
    }

    /// One iteration at step `t` (0-based).
    pub fn step(&mut self, t: usize) -> Result<StepReport> {
        let cfg = self.config.clone();
        let bs = cfg.batch_size;
        let mut grads: Option<NetGrads> = None;
        let mut add = |g: NetGrads| match grads.as_mut() {
            Some(acc) => acc.accumulate(&g),
            None => grads = Some(g),
        };

        // (1) labeled batches
        let mut source_loss = 0.0;
        let src_idx = self.source_sampler.next_batch(bs);
        let src_cache = if src_idx.is_empty() {
            None
        } else {
            let cache = self.params.forward(&self.view.source_x.select_rows(&src_idx))?;
            let labels: Vec<usize> = src_idx.iter().map(|&i| self.view.source_y[i]).collect();
            let out = losses::lsr_loss(&cache.logits, &labels, cfg.label_smoothing)?;
            source_loss = out.value;
            add(self.params.backward(&cache, &out.dlogits)?);
            Some(cache)
        };
        let mut labeled_loss = 0.0;
        let tl_idx = self.labeled_sampler.next_batch(bs);
        let tl_cache = if tl_idx.is_empty() {
            None
        } else {
            let cache = self.params.forward(&self.view.target_labeled_x.select_rows(&tl_idx))?;
            let labels: Vec<usize> = tl_idx.iter().map(|&i| self.view.target_labeled_y[i]).collect();
            let out = losses::lsr_loss(&cache.logits, &labels, cfg.label_smoothing)?;
            labeled_loss = out.value;
            add(self.params.backward(&cache, &out.dlogits)?);
            Some(cache)
        };

        // (2) unlabeled target batch, (3) pseudo-labels from the stale banks
        let tu_idx = self.target_sampler.next_batch(bs);
        let mut reg_value = 0.0;
        let lambda = self.schedule().lambda_at(t)?;
        let mut pseudo = Vec::new();
        let mut tu_cache = None;
        if !tu_idx.is_empty() {
            let cache = self.params.forward(&self.view.target_unlabeled_x.select_rows(&tu_idx))?;
            pseudo = self.pseudo_labels(&tu_idx, &cache.features, &cache.probs)?;
            // (4) ramped regularizer
            if let Some(mut out) = self.regularizer(&cache.probs, &pseudo)? {
                reg_value = out.value;
                if lambda != 0.0 {
                    out.dlogits.scale(lambda);
                    add(self.params.backward(&cache, &out.dlogits)?);
                }
            }
            tu_cache = Some(cache);
        }

        // (5) parameter update
        if let Some(g) = grads {
            let lr = lr_at(cfg.lr0, t, cfg.iterations, cfg.lr_alpha, cfg.lr_beta);
            let mut scales = vec![1.0; self.params.layers.len()];
            scales[HEAD] = cfg.lr_scale_head;
            sgd_step(&mut self.params, &g, &mut self.opt, lr, cfg.momentum, cfg.weight_decay, &scales)?;
        }

        // (6) bank maintenance with this iteration's forward results
        if let Some(cache) = &tu_cache {
            if let Some(bank) = self.centroid_bank.as_mut() {
                let labels: Vec<usize> = cache.probs.row_iter().map(|r| argmax(r).unwrap_or(0)).collect();
                bank.update(&cache.features, &labels)?;
            }
        }
        let (n_tu, n_tl) = (self.n_tu(), self.n_tl());
        if let Some(bank) = self.instance_bank.as_mut() {
            if let Some(cache) = &tu_cache {
                bank.write(&tu_idx, &cache.features, &cache.probs)?;
            }
            if let Some(cache) = &tl_cache {
                let ids: Vec<usize> = tl_idx.iter().map(|&i| n_tu + i).collect();
                bank.write(&ids, &cache.features, &cache.probs)?;
            }
            if cfg.source_memory {
                if let Some(cache) = &src_cache {
                    let ids: Vec<usize> = src_idx.iter().map(|&i| n_tu + n_tl + i).collect();
                    bank.write(&ids, &cache.features, &cache.probs)?;
                }
            }
        }

        let losses = LossBreakdown {
            source: source_loss,
            target_labeled: labeled_loss,
            regularizer: reg_value,
            lambda,
            total: source_loss + labeled_loss + lambda * reg_value,
        };
        Ok(StepReport { losses, target_batch: tu_idx, pseudo })
    }
}

/// Options that do not change what is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Measure wall-clock time. Off, the result is a pure function of
    /// (config, dataset).
    pub record_timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { record_timing: true }
    }
}

/// Splits `dataset` per `config.split`, trains for `config.iterations` steps
/// and evaluates on the unlabeled target set.
pub fn run(config: &TrainConfig, dataset: &DomainDataset) -> Result<RunResult> {
    run_with(config, dataset, RunOptions::default())
}

pub fn run_with(config: &TrainConfig, dataset: &DomainDataset, opts: RunOptions) -> Result<RunResult> {
    let start = Instant::now();
    config.validate()?;
    let ds = apply_split(dataset, &config.split)?;
    let mut trainer = Trainer::new(config.clone(), ds.training_view())?;
    let mut loss_curve = Vec::with_capacity(config.iterations);
    let mut quality_curve = Vec::with_capacity(config.iterations);
    for t in 0..config.iterations {
        let report = trainer.step(t)?;
        loss_curve.push(report.losses);
        quality_curve.push(if config.track_quality {
            evalkit::pseudo_label_quality(&report.pseudo, ds.hidden_labels(), &report.target_batch)
        } else {
            None
        });
    }
    let params = trainer.into_params();
    let metrics = evalkit::evaluate(&params, &ds)?;
    let wall_clock_seconds = if opts.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
    Ok(RunResult {
        config: config.clone(),
        method: config.method,
        task: config.split.task,
        seed: config.seed,
        metrics,
        loss_curve,
        pseudo_label_accuracy: quality_curve,
        wall_clock_seconds,
        params_checksum: params.checksum(),
        final_params: params.to_checkpoint(),
    })
}
