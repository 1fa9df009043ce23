//! Adam, L1 supervision on the final flow of each window, and the loop.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{unroll, Model, ModelConfig, ParamVars};
use super::params::ModelParams;
use super::tape::Tape;
use super::tensor::Tensor;
use super::NetworkError;
use crate::events::EventWindow;
use crate::flow::FlowField;
use crate::representation::{build_unified_voxel_grid, BinSpec, Grid};
use crate::simulate::{
    generate_events_with, ground_truth_flow, masked_ground_truth_flow, MotionModel, ScenePattern, SimOptions,
};

type Result<T> = std::result::Result<T, NetworkError>;

/// One window: its unified voxel grid and the ground truth `V_{0,B-1}`.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub grid: Grid,
    pub target: FlowField,
}

impl TrainingSample {
    /// Simulates `[0, duration]` and bins it into `bins` unified bins with
    /// `tau = duration / (bins - 1)`. Also returns the events. With `masked`,
    /// the target is valid only at pixels that fired during the first bin
    /// period.
    pub fn simulated(
        pattern: &ScenePattern,
        motion: &MotionModel,
        duration: f64,
        rate: f64,
        bins: usize,
        options: &SimOptions,
        masked: bool,
    ) -> Result<(Self, EventWindow)> {
        let data = |e: String| NetworkError::Shape(e);
        let window = generate_events_with(pattern, motion, duration, rate, options).map_err(|e| data(e.to_string()))?;
        let spec = BinSpec::new(bins, duration / (bins as f64 - 1.0), 0.0, pattern.geometry)
            .map_err(|e| data(e.to_string()))?;
        let grid = build_unified_voxel_grid(&window, &spec).map_err(|e| data(e.to_string()))?;
        let target = if masked {
            masked_ground_truth_flow(motion, &window, 0.0, duration, spec.tau)
        } else {
            ground_truth_flow(motion, 0.0, duration, pattern.geometry)
        }
        .map_err(|e| data(e.to_string()))?;
        if !target.valid.iter().any(|&v| v) {
            return Err(data("no pixel fired near the anchor time".into()));
        }
        Ok((TrainingSample { grid, target }, window))
    }
}

/// How the learning rate moves from `learning_rate` to
/// `learning_rate * final_lr_fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    /// Half-cosine over the whole run.
    #[default]
    Cosine,
    /// Constant, then a single drop at the given iteration.
    Step(usize),
}

impl std::str::FromStr for LrSchedule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "cosine" => Ok(LrSchedule::Cosine),
            Some(("step", at)) => at.parse().map(LrSchedule::Step).map_err(|e| format!("step:{at}: {e}")),
            _ => Err(format!("unknown schedule {s:?} (cosine|step:N)")),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrSchedule::Cosine => f.write_str("cosine"),
            LrSchedule::Step(at) => write!(f, "step:{at}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Samples whose gradients are averaged per update.
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Random horizontal/vertical flips.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 200,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 1,
            clip_norm: 0.0,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The large-scale schedule: Adam at 5e-4, batch 6, 110k iterations with
    /// the rate cut tenfold at the end, flips on. Recorded, not run at desk scale.
    pub fn full_scale() -> Self {
        TrainConfig {
            iterations: 110_000,
            learning_rate: 5e-4,
            final_lr_fraction: 0.1,
            schedule: LrSchedule::Step(100_000),
            batch: 6,
            augment: true,
            ..TrainConfig::default()
        }
    }

    pub fn lr_at(&self, it: usize) -> f64 {
        if let LrSchedule::Step(at) = self.schedule {
            return if it < at { self.learning_rate } else { self.learning_rate * self.final_lr_fraction };
        }
        if self.iterations <= 1 || self.final_lr_fraction == 1.0 {
            return self.learning_rate;
        }
        let p = it as f64 / (self.iterations - 1) as f64;
        let f = self.final_lr_fraction + (1.0 - self.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.learning_rate * f
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..=1.0).contains(&self.final_lr_fraction)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch > 0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(NetworkError::Config(format!("invalid training settings {self:?}")))
        }
    }
}

/// Per-tensor first and second moment estimates.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Network inputs and target after augmentation.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub bins: Vec<Tensor>,
    /// `2 x H x W`.
    pub target: Tensor,
    pub mask: Option<Vec<bool>>,
}

impl PreparedSample {
    pub fn from_sample(s: &TrainingSample) -> Self {
        let g = s.grid.geometry();
        let (h, w) = (g.height as usize, g.width as usize);
        let bins = (0..s.grid.bins())
            .map(|b| Tensor::new(&[1, h, w], s.grid.bin(b).iter().map(|&v| v as f64).collect()))
            .collect();
        let mut data = s.target.u.clone();
        data.extend_from_slice(&s.target.v);
        let mask = s.target.valid.iter().any(|&v| !v).then(|| s.target.valid.clone());
        PreparedSample { bins, target: Tensor::new(&[2, h, w], data), mask }
    }

    /// Mirrors every plane; the flow component along the mirrored axis flips sign.
    pub fn flipped(&self, horizontal: bool) -> Self {
        let (_, h, w) = self.target.chw();
        let src = |y: usize, x: usize| if horizontal { y * w + (w - 1 - x) } else { (h - 1 - y) * w + x };
        let flip = |plane: &[f64]| -> Vec<f64> { (0..h * w).map(|i| plane[src(i / w, i % w)]).collect() };
        let bins = self.bins.iter().map(|b| Tensor::new(b.shape(), flip(&b.data))).collect();
        let mut u = flip(self.target.channel(0));
        let mut v = flip(self.target.channel(1));
        if horizontal {
            u.iter_mut().for_each(|x| *x = -*x);
        } else {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        u.extend(v);
        let mask = self.mask.as_ref().map(|m| (0..h * w).map(|i| m[src(i / w, i % w)]).collect());
        PreparedSample { bins, target: Tensor::new(&[2, h, w], u), mask }
    }
}

/// L1 loss on the final flow and its gradient with respect to every parameter.
pub fn loss_and_grads(model: &Model, sample: &PreparedSample) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if sample.bins.len() != model.config.bins {
        return Err(NetworkError::Shape(format!("{} bins, model expects {}", sample.bins.len(), model.config.bins)));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, &model.params, &model.config)?;
    let bins: Vec<_> = sample.bins.iter().map(|b| tape.leaf(b.clone())).collect();
    let flows = unroll(&mut tape, &pv, &model.config, &bins);
    let last = *flows.last().expect("at least two bins");
    let loss = tape.l1_mean(last, Rc::new(sample.target.clone()), sample.mask.clone().map(Rc::new));
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss);
    let mut out = BTreeMap::new();
    for (name, &var) in &pv.by_name {
        let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
        out.insert(name.clone(), g);
    }
    Ok((value, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
}

/// Trains `model` in place. `progress` sees `(iteration, loss)`.
pub fn train(
    model: &mut Model,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(NetworkError::Config("no training samples".into()));
    }
    let prepared: Vec<_> = samples.iter().map(PreparedSample::from_sample).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().unwrap();
            let mut s = prepared[idx].clone();
            if cfg.augment {
                if rng.gen_bool(0.5) {
                    s = s.flipped(true);
                }
                if rng.gen_bool(0.5) {
                    s = s.flipped(false);
                }
            }
            let (l, g) = loss_and_grads(model, &s)?;
            loss += l;
            for (name, t) in g {
                match total.get_mut(&name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        total.insert(name, t);
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        loss *= scale;
        let mut norm2 = 0.0;
        for t in total.values_mut() {
            t.data.iter_mut().for_each(|g| *g *= scale);
            norm2 += t.data.iter().map(|g| g * g).sum::<f64>();
        }
        if !loss.is_finite() || !norm2.is_finite() {
            return Err(NetworkError::Divergence { iteration: it, loss });
        }
        if cfg.clip_norm > 0.0 && norm2.sqrt() > cfg.clip_norm {
            let s = cfg.clip_norm / norm2.sqrt();
            total.values_mut().for_each(|t| t.data.iter_mut().for_each(|g| *g *= s));
        }
        adam.step(&mut model.params, &total, cfg.lr_at(it), cfg);
        if !model.params.is_finite() {
            return Err(NetworkError::Divergence { iteration: it, loss });
        }
        progress(it, loss);
        losses.push(loss);
    }
    Ok(TrainReport { losses })
}

/// Initializes a model from `config` with `train.seed`, trains it, and
/// returns the parameters and the loss curve.
pub fn train_toy(dataset: &[TrainingSample], config: &ModelConfig, train_cfg: &TrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    let mut model = Model::init(config.clone(), train_cfg.seed)?;
    let report = train(&mut model, dataset, train_cfg, |_, _| {})?;
    Ok((model.params, report.losses))
}
