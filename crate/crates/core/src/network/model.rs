//! Encoder pyramid, stacked spatiotemporal recurrent refinement and the
//! bin-by-bin time-dense forward pass.
//!
//! Level `l` (0 = finest) runs at stride `2^(l+1)`. Every time step runs the
//! levels coarse to fine: the coarser flow is upsampled (values doubled) and
//! used to backward-warp the level's features, the upsampled coarser hidden
//! state passes through a 1x1 adapter, and a ConvGRU whose recurrent state
//! is this level's hidden state from the previous time step produces a
//! residual flow through a two-layer head.

use std::collections::HashMap;

use super::params::ModelParams;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NetworkError;
use crate::events::SensorGeometry;
use crate::flow::FlowField;
use crate::metrics::FlowSequence;
use crate::representation::{Grid, GridKind};

type Result<T> = std::result::Result<T, NetworkError>;

/// What the coarsest level starts from at each time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowPrior {
    /// Zero flow; temporal memory lives only in the recurrent hidden states.
    #[default]
    Zero,
    /// The coarsest-level flow of the previous time step.
    Previous,
}

impl std::str::FromStr for FlowPrior {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(FlowPrior::Zero),
            "previous" => Ok(FlowPrior::Previous),
            _ => Err(format!("unknown flow prior {s:?} (zero|previous)")),
        }
    }
}

impl std::fmt::Display for FlowPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowPrior::Zero => "zero",
            FlowPrior::Previous => "previous",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub stem_channels: usize,
    /// Feature channels per level, finest first.
    pub channels: Vec<usize>,
    /// Hidden-state channels per level, finest first.
    pub hidden: Vec<usize>,
    pub head_channels: usize,
    pub flow_prior: FlowPrior,
    pub leaky_slope: f64,
    /// Multiplier on the fan-in uniform init bound `sqrt(3 / fan_in)`.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bins: 15,
            height: 64,
            width: 64,
            stem_channels: 8,
            channels: vec![8, 16, 24, 32],
            hidden: vec![8, 16, 24, 32],
            head_channels: 32,
            flow_prior: FlowPrior::Zero,
            leaky_slope: 0.1,
            init_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of level `l`.
    pub fn level_hw(&self, l: usize) -> (usize, usize) {
        (self.height >> (l + 1), self.width >> (l + 1))
    }

    pub fn geometry(&self) -> SensorGeometry {
        SensorGeometry { width: self.width as u32, height: self.height as u32 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.levels() < 2 {
            return bad(format!("need at least 2 pyramid levels, got {}", self.levels()));
        }
        if self.hidden.len() != self.levels() {
            return bad(format!("{} hidden widths for {} levels", self.hidden.len(), self.levels()));
        }
        if self.bins < 2 {
            return bad(format!("bins must be >= 2, got {}", self.bins));
        }
        let m = 1usize << self.levels();
        if self.height == 0 || self.width == 0 || self.height % m != 0 || self.width % m != 0 {
            return bad(format!("{}x{} is not a multiple of {m}", self.width, self.height));
        }
        if self.channels.iter().chain(&self.hidden).any(|&c| c == 0) || self.stem_channels == 0 || self.head_channels == 0
        {
            return bad("channel counts must be positive".into());
        }
        if !(self.leaky_slope.is_finite() && self.init_gain.is_finite() && self.init_gain >= 0.0) {
            return bad("leaky_slope/init_gain must be finite".into());
        }
        Ok(())
    }

    /// Name and shape of every learnable tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
            out.push((format!("{name}.w"), vec![c_out, c_in, k, k]));
            out.push((format!("{name}.b"), vec![c_out]));
        };
        conv("enc.stem".into(), self.stem_channels, 1, 3);
        let mut prev = self.stem_channels;
        for (l, &c) in self.channels.iter().enumerate() {
            conv(format!("enc.l{l}"), c, prev, 3);
            prev = c;
        }
        for l in 0..self.levels() {
            let (c, hd) = (self.channels[l], self.hidden[l]);
            let x = 2 + c + hd;
            for gate in ["z", "r", "q"] {
                conv(format!("smr.l{l}.gru.{gate}"), hd, hd + x, 3);
            }
            conv(format!("smr.l{l}.head1"), self.head_channels, hd, 3);
            conv(format!("smr.l{l}.head2"), 2, self.head_channels, 3);
            if l + 1 < self.levels() {
                conv(format!("smr.l{l}.adapt"), hd, self.hidden[l + 1], 1);
            }
        }
        out
    }

    /// Recovers widths from a parameter set; geometry and bins are supplied.
    pub fn from_params(params: &ModelParams, bins: usize, height: usize, width: usize) -> Result<Self> {
        let shape = |n: &str| {
            params.get(n).map(|t| t.shape().to_vec()).ok_or_else(|| NetworkError::Params(format!("missing tensor {n}")))
        };
        let stem = shape("enc.stem.w")?;
        let mut channels = Vec::new();
        let mut hidden = Vec::new();
        while let Some(t) = params.get(&format!("enc.l{}.w", channels.len())) {
            channels.push(t.shape()[0]);
        }
        for l in 0..channels.len() {
            hidden.push(shape(&format!("smr.l{l}.gru.z.w"))?[0]);
        }
        let head = shape("smr.l0.head1.w")?;
        let config = ModelConfig {
            bins,
            height,
            width,
            stem_channels: stem[0],
            channels,
            hidden,
            head_channels: head[0],
            ..ModelConfig::default()
        };
        config.validate()?;
        params.check(&config)?;
        Ok(config)
    }
}

/// Tape handles of one conv layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub z: ConvVars,
    pub r: ConvVars,
    pub q: ConvVars,
}

#[derive(Debug, Clone, Copy)]
pub struct SmrVars {
    pub gru: GruVars,
    pub head1: ConvVars,
    pub head2: ConvVars,
    pub adapt: Option<ConvVars>,
}

/// All parameters registered as leaves of one tape. Registering once per
/// tape is what shares weights across every time step.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub by_name: HashMap<String, Var>,
    pub stem: ConvVars,
    pub encoder: Vec<ConvVars>,
    pub smr: Vec<SmrVars>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, config: &ModelConfig) -> Result<Self> {
        params.check(config)?;
        let mut by_name = HashMap::new();
        for (name, t) in params.iter() {
            by_name.insert(name.to_string(), tape.leaf(t.clone()));
        }
        let conv = |name: &str| ConvVars { w: by_name[&format!("{name}.w")], b: by_name[&format!("{name}.b")] };
        let stem = conv("enc.stem");
        let encoder = (0..config.levels()).map(|l| conv(&format!("enc.l{l}"))).collect();
        let smr = (0..config.levels())
            .map(|l| SmrVars {
                gru: GruVars {
                    z: conv(&format!("smr.l{l}.gru.z")),
                    r: conv(&format!("smr.l{l}.gru.r")),
                    q: conv(&format!("smr.l{l}.gru.q")),
                },
                head1: conv(&format!("smr.l{l}.head1")),
                head2: conv(&format!("smr.l{l}.head2")),
                adapt: (l + 1 < config.levels()).then(|| conv(&format!("smr.l{l}.adapt"))),
            })
            .collect();
        Ok(ParamVars { by_name, stem, encoder, smr })
    }
}

fn conv(tape: &mut Tape, x: Var, c: ConvVars, stride: usize, pad: usize) -> Var {
    tape.conv2d(x, c.w, Some(c.b), stride, pad)
}

/// ConvGRU update:
/// `z = s(Wz*[h,x])`, `r = s(Wr*[h,x])`, `q = tanh(Wq*[r.h, x])`,
/// `h' = (1-z).h + z.q`.
pub fn convgru_cell(tape: &mut Tape, g: &GruVars, h: Var, x: Var) -> Var {
    let hx = tape.concat(&[h, x]);
    let z_pre = conv(tape, hx, g.z, 1, 1);
    let z = tape.sigmoid(z_pre);
    let r_pre = conv(tape, hx, g.r, 1, 1);
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h);
    let rhx = tape.concat(&[rh, x]);
    let q_pre = conv(tape, rhx, g.q, 1, 1);
    let q = tape.tanh(q_pre);
    let delta = tape.sub(q, h);
    let step = tape.mul(z, delta);
    tape.add(h, step)
}

/// One refinement module at one level and time step. Returns the refined
/// flow and the new hidden state.
pub fn smr_step(
    tape: &mut Tape,
    s: &SmrVars,
    features: Var,
    flow_coarse: Var,
    hidden_coarse: Var,
    h_prev: Var,
) -> (Var, Var) {
    let warped = tape.warp(features, flow_coarse);
    let x = tape.concat(&[flow_coarse, warped, hidden_coarse]);
    let h = convgru_cell(tape, &s.gru, h_prev, x);
    let mid_pre = conv(tape, h, s.head1, 1, 1);
    let mid = tape.leaky_relu(mid_pre, 0.0);
    let residual = conv(tape, mid, s.head2, 1, 1);
    (tape.add(flow_coarse, residual), h)
}

/// Per-bin encoder: a stem then one stride-2 convolution per level.
/// Returns features finest first.
pub fn encoder_forward(tape: &mut Tape, pv: &ParamVars, config: &ModelConfig, bin: Var) -> Vec<Var> {
    let stem = conv(tape, bin, pv.stem, 1, 1);
    let mut x = tape.leaky_relu(stem, config.leaky_slope);
    let mut feats = Vec::with_capacity(config.levels());
    for enc in &pv.encoder {
        let pre = conv(tape, x, *enc, 2, 1);
        x = tape.leaky_relu(pre, config.leaky_slope);
        feats.push(x);
    }
    feats
}

/// Outputs of one time step on a tape.
#[derive(Debug, Clone)]
pub struct StepVars {
    /// Full-resolution `2 x H x W` flow.
    pub flow: Var,
    /// Per-level flows, finest first.
    pub level_flows: Vec<Var>,
    /// Per-level hidden states, finest first.
    pub hidden: Vec<Var>,
}

/// One time step of the stacked modules, coarse to fine.
pub fn step_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    bin: Var,
    h_prev: &[Var],
    prior: Var,
) -> StepVars {
    let levels = config.levels();
    let feats = encoder_forward(tape, pv, config, bin);
    let (hc, wc) = config.level_hw(levels - 1);
    let mut hidden: Vec<Option<Var>> = vec![None; levels];
    let mut level_flows: Vec<Option<Var>> = vec![None; levels];
    let mut flow = prior;
    let mut hidden_coarse = tape.leaf(Tensor::zeros(&[config.hidden[levels - 1], hc, wc]));
    for l in (0..levels).rev() {
        if l + 1 < levels {
            let (h, w) = config.level_hw(l);
            flow = tape.resize(level_flows[l + 1].unwrap(), h, w, 2.0);
            let up = tape.resize(hidden[l + 1].unwrap(), h, w, 1.0);
            hidden_coarse = conv(tape, up, pv.smr[l].adapt.expect("adapter below the coarsest level"), 1, 0);
        }
        let (f, h) = smr_step(tape, &pv.smr[l], feats[l], flow, hidden_coarse, h_prev[l]);
        level_flows[l] = Some(f);
        hidden[l] = Some(h);
    }
    let finest = level_flows[0].unwrap();
    let full = tape.resize(finest, config.height, config.width, 2.0);
    StepVars {
        flow: full,
        level_flows: level_flows.into_iter().map(Option::unwrap).collect(),
        hidden: hidden.into_iter().map(Option::unwrap).collect(),
    }
}

/// Zero initial hidden states, one per level.
pub fn initial_hidden(tape: &mut Tape, config: &ModelConfig) -> Vec<Var> {
    (0..config.levels())
        .map(|l| {
            let (h, w) = config.level_hw(l);
            tape.leaf(Tensor::zeros(&[config.hidden[l], h, w]))
        })
        .collect()
}

fn zero_prior(tape: &mut Tape, config: &ModelConfig) -> Var {
    let (h, w) = config.level_hw(config.levels() - 1);
    tape.leaf(Tensor::zeros(&[2, h, w]))
}

/// Runs all bins on one tape. Bin 0 only primes the hidden states; the
/// returned vars are the full-resolution flows `V_{0,1} .. V_{0,B-1}`.
pub fn unroll(tape: &mut Tape, pv: &ParamVars, config: &ModelConfig, bins: &[Var]) -> Vec<Var> {
    let mut hidden = initial_hidden(tape, config);
    let mut prior = zero_prior(tape, config);
    let mut flows = Vec::with_capacity(bins.len().saturating_sub(1));
    for (j, &bin) in bins.iter().enumerate() {
        let out = step_on_tape(tape, pv, config, bin, &hidden, prior);
        hidden = out.hidden;
        prior = match config.flow_prior {
            FlowPrior::Zero => zero_prior(tape, config),
            FlowPrior::Previous => *out.level_flows.last().unwrap(),
        };
        if j > 0 {
            flows.push(out.flow);
        }
    }
    flows
}

/// Recurrent state carried between bins when running bin by bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    hidden: Option<Vec<Tensor>>,
    prior: Option<Tensor>,
    j: usize,
    t0: f64,
    tau: f64,
    last_flow: Option<FlowField>,
}

impl ModelState {
    /// Uninitialized state for bins spaced `tau` seconds from `t0`.
    pub fn new(t0: f64, tau: f64) -> Self {
        ModelState { hidden: None, prior: None, j: 0, t0, tau, last_flow: None }
    }

    pub fn is_initialized(&self) -> bool {
        self.hidden.is_some()
    }

    /// Index of the last consumed bin.
    pub fn time_index(&self) -> usize {
        self.j
    }

    pub fn last_flow(&self) -> Option<&FlowField> {
        self.last_flow.as_ref()
    }

    pub fn hidden(&self) -> Option<&[Tensor]> {
        self.hidden.as_deref()
    }
}

/// Parameters plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

fn bin_tensor(config: &ModelConfig, bin: &[f32]) -> Result<Tensor> {
    if bin.len() != config.height * config.width {
        return Err(NetworkError::Shape(format!(
            "bin has {} values, model expects {}x{}",
            bin.len(),
            config.width,
            config.height
        )));
    }
    Ok(Tensor::new(&[1, config.height, config.width], bin.iter().map(|&v| v as f64).collect()))
}

fn to_flow(config: &ModelConfig, t: &Tensor, duration: f64) -> Result<FlowField> {
    let n = config.height * config.width;
    FlowField::new(config.geometry(), t.data[..n].to_vec(), t.data[n..].to_vec(), duration)
        .map_err(|e| NetworkError::Shape(e.to_string()))
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Model { config, params })
    }

    /// Freshly initialized weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Model { config, params })
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid.kind != GridKind::UnifiedVoxelGrid {
            return Err(NetworkError::Shape("model input must be a unified voxel grid".into()));
        }
        if grid.bins() != self.config.bins {
            return Err(NetworkError::Shape(format!("grid has {} bins, model expects {}", grid.bins(), self.config.bins)));
        }
        if grid.geometry() != self.config.geometry() {
            return Err(NetworkError::Shape(format!("grid is {}, model expects {}", grid.geometry(), self.config.geometry())));
        }
        Ok(())
    }

    /// Time-dense flows `V_{0,1} .. V_{0,B-1}` for a whole grid.
    pub fn forward(&self, grid: &Grid) -> Result<FlowSequence> {
        self.check_grid(grid)?;
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params, &self.config)?;
        let bins = (0..grid.bins())
            .map(|b| bin_tensor(&self.config, grid.bin(b)).map(|t| tape.leaf(t)))
            .collect::<Result<Vec<_>>>()?;
        let flows = unroll(&mut tape, &pv, &self.config, &bins);
        let tau = grid.spec.tau;
        let fields = flows
            .iter()
            .enumerate()
            .map(|(k, &v)| to_flow(&self.config, tape.value(v), (k + 1) as f64 * tau))
            .collect::<Result<Vec<_>>>()?;
        FlowSequence::new(fields, grid.spec.t0, tau).map_err(|e| NetworkError::Shape(e.to_string()))
    }

    fn run_step(&self, state: &ModelState, bin: &[f32]) -> Result<(Tensor, Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params, &self.config)?;
        let bin = tape.leaf(bin_tensor(&self.config, bin)?);
        let hidden = match &state.hidden {
            Some(h) => h.iter().map(|t| tape.leaf(t.clone())).collect(),
            None => initial_hidden(&mut tape, &self.config),
        };
        let prior = match (&state.prior, self.config.flow_prior) {
            (Some(p), FlowPrior::Previous) => tape.leaf(p.clone()),
            _ => zero_prior(&mut tape, &self.config),
        };
        let out = step_on_tape(&mut tape, &pv, &self.config, bin, &hidden, prior);
        let hidden = out.hidden.iter().map(|&h| tape.value(h).clone()).collect();
        let coarse = tape.value(*out.level_flows.last().unwrap()).clone();
        Ok((tape.value(out.flow).clone(), hidden, coarse))
    }

    /// Consumes bin 0: runs one pass to prime the hidden states and
    /// discards its flow.
    pub fn prime(&self, state: &mut ModelState, bin: &[f32]) -> Result<()> {
        let (_, hidden, coarse) = self.run_step(&ModelState::new(state.t0, state.tau), bin)?;
        state.hidden = Some(hidden);
        state.prior = Some(coarse);
        state.j = 0;
        state.last_flow = None;
        Ok(())
    }

    /// Consumes the next bin and returns `V_{0,j}`.
    pub fn step(&self, state: &mut ModelState, bin: &[f32]) -> Result<FlowField> {
        if !state.is_initialized() {
            return Err(NetworkError::NotInitialized);
        }
        let (flow, hidden, coarse) = self.run_step(state, bin)?;
        state.j += 1;
        let field = to_flow(&self.config, &flow, state.j as f64 * state.tau)?;
        state.hidden = Some(hidden);
        state.prior = Some(coarse);
        state.last_flow = Some(field.clone());
        Ok(field)
    }
}

/// Batch entry point: `V_{0,1} .. V_{0,B-1}` from a unified voxel grid.
pub fn model_forward(grid: &Grid, model: &Model) -> Result<FlowSequence> {
    model.forward(grid)
}

/// Streaming entry point: advances `state` by one bin.
pub fn model_step(state: &mut ModelState, bin: &[f32], model: &Model) -> Result<FlowField> {
    model.step(state, bin)
}
