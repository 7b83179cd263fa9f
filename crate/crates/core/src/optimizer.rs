//! The LANTON optimizer and its reference baselines.
//!
//! One step, per layer `l` in group `G(l)`:
//!
//! ```text
//! B   <- beta1 * B + (1 - beta1) * G            (B = G on the first step)
//! O   <- LMO_G(B)
//! H   <- beta2 * H + (1 - beta2) * ||G - G'||_*^2   (G' = previous or twin gradient)
//! a_l <- alpha / sqrt(alpha^2 + H)
//! a_m <- max over the group of a_l
//! eta_l <- eta_t * sqrt(a_l / a_m)
//! X   <- (1 - eta_t * gamma) * X + eta_l * O
//! ```
//!
//! `O` minimizes `<B, .>` over the unit ball, so adding it descends.
//!
//! The tracker only refreshes every `noise_update_interval` steps; between
//! refreshes the last computed ratios stay in force.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmo::{lmo, sign0, LmoOptions, NsVariant, DEFAULT_NS_STEPS};
use crate::norms::{dual_norm, EmbeddingDual, GroupId};
use crate::param::{Param, Shape};

/// A named parameter block and the group it is optimized under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Shape,
    pub group: GroupId,
    /// Layer-wise smoothness constant; only synthetic tasks set this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, shape: Shape, group: GroupId) -> Self {
        Self {
            name: name.into(),
            shape,
            group,
            smoothness: None,
        }
    }

    pub fn with_smoothness(mut self, l: f64) -> Self {
        self.smoothness = Some(l);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '\n', '\r', '"']) {
            return Err(Error::Invalid(format!(
                "layer name {:?} must be non-empty without commas, quotes or newlines",
                self.name
            )));
        }
        let dims_ok = match self.shape {
            Shape::Matrix(r, c) => r >= 1 && c >= 1,
            Shape::Vector(d) => d >= 1,
        };
        if !dims_ok {
            return Err(Error::Shape(format!("layer `{}` has an empty shape", self.name)));
        }
        if !self.group.accepts(self.shape) {
            return Err(Error::Shape(format!(
                "layer `{}`: group {} does not accept shape {}",
                self.name,
                self.group.name(),
                self.shape
            )));
        }
        if let Some(l) = self.smoothness {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Invalid(format!(
                    "layer `{}`: smoothness must be >= 0",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Which second gradient feeds the noise tracker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseOption {
    /// Difference to the previous step's gradient.
    #[default]
    I,
    /// Difference to an independent gradient at the same point.
    II,
}

/// How per-layer learning rates are scaled from the base rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// `eta_t * sqrt(ratio)` for every layer.
    #[default]
    Raw,
    /// Group-specific base rates: `hidden_scale * sqrt(max(d_in, d_out))`
    /// for Hidden, `r1` for EmbeddingHead and `r2` for VectorNorm.
    Practical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LantonConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eta_max: f64,
    pub eta_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub r1: f64,
    pub r2: f64,
    pub hidden_scale: f64,
    pub noise_option: NoiseOption,
    pub noise_update_interval: usize,
    pub ns_steps: usize,
    pub ns_variant: NsVariant,
    pub oracle_polar: bool,
    pub embedding_dual: EmbeddingDual,
}

impl Default for LantonConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta1: 0.95,
            beta2: 0.9,
            eta_max: 5e-3,
            eta_min: 5e-4,
            warmup_steps: 0,
            total_steps: 1000,
            weight_decay: 0.0,
            r1: 300.0,
            r2: 1.0,
            hidden_scale: 0.2,
            noise_option: NoiseOption::I,
            noise_update_interval: 10,
            ns_steps: DEFAULT_NS_STEPS,
            ns_variant: NsVariant::Quintic,
            oracle_polar: false,
            embedding_dual: EmbeddingDual::Default,
        }
    }
}

impl LantonConfig {
    /// Checks every range; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, msg: &str) -> Result<()> {
            Err(Error::config(field, msg))
        }
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let unit = |x: f64| x.is_finite() && (0.0..1.0).contains(&x);
        if !pos(self.alpha) {
            return bad("alpha", "must be > 0");
        }
        if !unit(self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !unit(self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !pos(self.eta_max) {
            return bad("eta_max", "must be > 0");
        }
        if !pos(self.eta_min) {
            return bad("eta_min", "must be > 0");
        }
        if self.eta_min > self.eta_max {
            return bad("eta_min", "must not exceed eta_max");
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be >= 1");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps", "must not exceed total_steps");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !pos(self.r1) {
            return bad("r1", "must be > 0");
        }
        if !pos(self.r2) {
            return bad("r2", "must be > 0");
        }
        if !pos(self.hidden_scale) {
            return bad("hidden_scale", "must be > 0");
        }
        if self.noise_update_interval == 0 {
            return bad("noise_update_interval", "must be >= 1");
        }
        if self.ns_steps == 0 {
            return bad("ns_steps", "must be >= 1");
        }
        Ok(())
    }

    pub fn lmo_options(&self) -> LmoOptions {
        LmoOptions {
            ns_steps: self.ns_steps,
            ns_variant: self.ns_variant,
            oracle_polar: self.oracle_polar,
        }
    }
}

/// Base learning rate at step `t`: linear warmup to `eta_max`, then cosine
/// decay to `eta_min` at `total_steps`.
pub fn cosine_schedule_lr(t: usize, cfg: &LantonConfig) -> f64 {
    let warm = cfg.warmup_steps;
    if t < warm {
        return cfg.eta_max * (t + 1) as f64 / warm as f64;
    }
    let span = cfg.total_steps.saturating_sub(warm);
    if span == 0 {
        return cfg.eta_max;
    }
    let progress = ((t - warm) as f64 / span as f64).min(1.0);
    cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `alpha / sqrt(alpha^2 + h)`
pub fn alpha_factor(alpha: f64, h: f64) -> f64 {
    alpha / (alpha * alpha + h).sqrt()
}

/// Per-layer `(alpha_l, alpha_l / alpha_m)` where `alpha_m` is the max of
/// `alpha_l` over the layer's group.
pub fn alpha_and_ratio(alpha: f64, h: &[f64], groups: &[GroupId]) -> Vec<(f64, f64)> {
    let factors: Vec<f64> = h.iter().map(|&v| alpha_factor(alpha, v)).collect();
    let group_max = |g: GroupId| {
        factors
            .iter()
            .zip(groups)
            .filter(|(_, &gg)| gg == g)
            .fold(0.0f64, |m, (&f, _)| m.max(f))
    };
    factors
        .iter()
        .zip(groups)
        .map(|(&f, &g)| (f, f / group_max(g)))
        .collect()
}

/// Whether step `t` (0-based) refreshes the noise tracker.
pub fn is_tracker_step(t: usize, interval: usize) -> bool {
    t.is_multiple_of(interval)
}

/// Number of tracker refreshes performed during steps `0..=t`.
pub fn tracker_updates(t: usize, option: NoiseOption, interval: usize) -> usize {
    let all = t / interval + 1;
    match option {
        // step 0 has no previous gradient
        NoiseOption::I => all - 1,
        NoiseOption::II => all,
    }
}

/// One tracker refresh: `beta2 * h + (1 - beta2) * diff^2`.
pub fn tracker_recursion(h: f64, beta2: f64, dual_diff: f64) -> f64 {
    beta2 * h + (1.0 - beta2) * dual_diff * dual_diff
}

/// Reference optimizers sharing LANTON's schedule and momentum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Lanton,
    /// LANTON with the noise ratio pinned to 1.
    FixedRateLmo,
    Signum,
    Sgd,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Lanton => "lanton",
            OptimizerKind::FixedRateLmo => "fixed_rate_lmo",
            OptimizerKind::Signum => "signum",
            OptimizerKind::Sgd => "sgd",
        }
    }

    /// Whether this optimizer wants a twin gradient every step.
    pub fn needs_twin(&self, cfg: &LantonConfig) -> bool {
        *self == OptimizerKind::Lanton && cfg.noise_option == NoiseOption::II
    }
}

#[derive(Clone, Debug, Default)]
struct LayerState {
    momentum: Option<Param>,
    h: f64,
    prev_grad: Option<Param>,
    ratio: f64,
}

/// Per-layer numbers reported for a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub eta_eff: f64,
    pub ratio: f64,
    pub h: f64,
    pub dual_grad_norm: f64,
    /// `||G - G'||_*` when the tracker refreshed on this step.
    pub noise_sample: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `X_new - X` for every layer.
    pub deltas: Vec<Param>,
    pub eta_t: f64,
    pub layers: Vec<LayerStats>,
}

/// Optimizer state for one training run.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    mode: StepMode,
    cfg: LantonConfig,
    layers: Vec<LayerSpec>,
    groups: Vec<GroupId>,
    state: Vec<LayerState>,
    step: usize,
    /// Skip the dual-norm-of-gradient telemetry (one SVD per hidden layer).
    pub record_grad_norms: bool,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, mode: StepMode, cfg: LantonConfig, layers: Vec<LayerSpec>) -> Result<Self> {
        cfg.validate()?;
        for l in &layers {
            l.validate()?;
        }
        let groups = layers.iter().map(|l| l.group).collect();
        let state = layers
            .iter()
            .map(|_| LayerState {
                ratio: 1.0,
                ..LayerState::default()
            })
            .collect();
        Ok(Self {
            kind,
            mode,
            cfg,
            layers,
            groups,
            state,
            step: 0,
            record_grad_norms: true,
        })
    }

    pub fn lanton(cfg: LantonConfig, layers: Vec<LayerSpec>, mode: StepMode) -> Result<Self> {
        Self::new(OptimizerKind::Lanton, mode, cfg, layers)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn config(&self) -> &LantonConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of steps taken so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn noise_trackers(&self) -> Vec<f64> {
        self.state.iter().map(|s| s.h).collect()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.state.iter().map(|s| s.ratio).collect()
    }

    /// Per-layer multiplier on `eta_t` before the noise ratio is applied.
    fn base_scale(&self, layer: &LayerSpec) -> f64 {
        match (self.mode, layer.group, layer.shape) {
            (StepMode::Raw, ..) => 1.0,
            (StepMode::Practical, GroupId::Hidden, Shape::Matrix(r, c)) => {
                self.cfg.hidden_scale * (r.max(c) as f64).sqrt()
            }
            (StepMode::Practical, GroupId::EmbeddingHead, _) => self.cfg.r1,
            (StepMode::Practical, GroupId::VectorNorm, _) => self.cfg.r2,
            (StepMode::Practical, GroupId::Hidden, Shape::Vector(_)) => unreachable!("validated"),
        }
    }

    fn check_inputs(&self, params: &[Param], grads: &[Param], twins: Option<&[Param]>) -> Result<()> {
        let n = self.layers.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} layers, got {} params and {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(tw) = twins {
            if tw.len() != n {
                return Err(Error::Shape(format!("expected {n} twin gradients, got {}", tw.len())));
            }
        }
        for (i, spec) in self.layers.iter().enumerate() {
            if params[i].shape() != spec.shape || grads[i].shape() != spec.shape {
                return Err(Error::Shape(format!(
                    "layer `{}` expects shape {}",
                    spec.name, spec.shape
                )));
            }
            if grads[i].has_nan() {
                return Err(Error::NanGradient(spec.name.clone()));
            }
            if let Some(tw) = twins {
                if tw[i].shape() != spec.shape {
                    return Err(Error::Shape(format!(
                        "twin for `{}` expects shape {}",
                        spec.name, spec.shape
                    )));
                }
                if tw[i].has_nan() {
                    return Err(Error::NanGradient(spec.name.clone()));
                }
            }
        }
        if self.kind.needs_twin(&self.cfg) && twins.is_none() {
            return Err(Error::MissingTwin(self.layers[0].name.clone()));
        }
        Ok(())
    }

    /// Computes one step without touching `params`; returns the deltas.
    ///
    /// Advances the internal momentum, tracker and step counter.
    pub fn step(&mut self, params: &[Param], grads: &[Param], twins: Option<&[Param]>) -> Result<StepOutput> {
        self.check_inputs(params, grads, twins)?;
        let t = self.step;
        let eta_t = cosine_schedule_lr(t, &self.cfg);
        let out = match self.kind {
            OptimizerKind::Lanton | OptimizerKind::FixedRateLmo => self.lmo_step(t, eta_t, params, grads, twins)?,
            OptimizerKind::Signum | OptimizerKind::Sgd => self.simple_step(eta_t, params, grads)?,
        };
        self.step += 1;
        Ok(out)
    }

    /// Applies [`Optimizer::step`] in place.
    pub fn step_in_place(
        &mut self,
        params: &mut [Param],
        grads: &[Param],
        twins: Option<&[Param]>,
    ) -> Result<StepOutput> {
        let out = self.step(params, grads, twins)?;
        for (p, d) in params.iter_mut().zip(&out.deltas) {
            *p = p.add(d)?;
        }
        Ok(out)
    }

    fn lmo_step(
        &mut self,
        t: usize,
        eta_t: f64,
        params: &[Param],
        grads: &[Param],
        twins: Option<&[Param]>,
    ) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let lmo_opts = cfg.lmo_options();
        let track = self.kind == OptimizerKind::Lanton && is_tracker_step(t, cfg.noise_update_interval);
        let record_norms = self.record_grad_norms;

        // Per-layer phase: momentum, direction, tracker. Independent across layers.
        struct Phase1 {
            momentum: Param,
            direction: Param,
            noise_sample: Option<f64>,
            dual_grad_norm: f64,
        }
        let phase1: Vec<Result<Phase1>> = self
            .layers
            .par_iter()
            .zip(self.state.par_iter())
            .enumerate()
            .map(|(i, (spec, st))| {
                let g = &grads[i];
                let momentum = match &st.momentum {
                    None => g.clone(),
                    Some(b) => {
                        let mut m = b.scale(cfg.beta1);
                        m.axpy(1.0 - cfg.beta1, g)?;
                        m
                    }
                };
                let direction = lmo(spec.group, &momentum, &lmo_opts)?;
                let other = match cfg.noise_option {
                    NoiseOption::I => st.prev_grad.as_ref(),
                    NoiseOption::II => twins.map(|tw| &tw[i]),
                };
                let noise_sample = match (track, other) {
                    (true, Some(o)) => Some(dual_norm(spec.group, &g.sub(o)?, cfg.embedding_dual)?),
                    _ => None,
                };
                let dual_grad_norm = if record_norms {
                    dual_norm(spec.group, g, cfg.embedding_dual)?
                } else {
                    f64::NAN
                };
                Ok(Phase1 {
                    momentum,
                    direction,
                    noise_sample,
                    dual_grad_norm,
                })
            })
            .collect();
        let phase1: Vec<Phase1> = phase1.into_iter().collect::<Result<_>>()?;

        // Synchronization point: tracker update and group-max reduction.
        let mut refreshed = false;
        for (st, p) in self.state.iter_mut().zip(&phase1) {
            if let Some(d) = p.noise_sample {
                st.h = tracker_recursion(st.h, cfg.beta2, d);
                refreshed = true;
            }
        }
        if refreshed {
            let h: Vec<f64> = self.state.iter().map(|s| s.h).collect();
            for (st, (_, r)) in self.state.iter_mut().zip(alpha_and_ratio(cfg.alpha, &h, &self.groups)) {
                st.ratio = r;
            }
        }

        let mut deltas = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        for (i, p) in phase1.into_iter().enumerate() {
            let ratio = match self.kind {
                OptimizerKind::FixedRateLmo => 1.0,
                _ => self.state[i].ratio,
            };
            let eta_l = eta_t * self.base_scale(&self.layers[i]) * ratio.sqrt();
            // The oracle already points downhill: <B, O> = -||B||_*.
            let mut delta = p.direction.scale(eta_l);
            if cfg.weight_decay > 0.0 {
                delta.axpy(-eta_t * cfg.weight_decay, &params[i])?;
            }
            deltas.push(delta);
            let st = &mut self.state[i];
            st.momentum = Some(p.momentum);
            if cfg.noise_option == NoiseOption::I && self.kind == OptimizerKind::Lanton {
                st.prev_grad = Some(grads[i].clone());
            }
            stats.push(LayerStats {
                eta_eff: eta_l,
                ratio,
                h: st.h,
                dual_grad_norm: p.dual_grad_norm,
                noise_sample: p.noise_sample,
            });
        }
        Ok(StepOutput {
            deltas,
            eta_t,
            layers: stats,
        })
    }

    fn simple_step(&mut self, eta_t: f64, params: &[Param], grads: &[Param]) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let mut deltas = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let g = &grads[i];
            let mut delta = match self.kind {
                OptimizerKind::Signum => {
                    let st = &mut self.state[i];
                    let momentum = match &st.momentum {
                        None => g.clone(),
                        Some(b) => {
                            let mut m = b.scale(cfg.beta1);
                            m.axpy(1.0 - cfg.beta1, g)?;
                            m
                        }
                    };
                    let d = momentum.map(|v| -eta_t * sign0(v));
                    st.momentum = Some(momentum);
                    d
                }
                OptimizerKind::Sgd => g.scale(-eta_t),
                _ => unreachable!("lmo kinds handled elsewhere"),
            };
            if cfg.weight_decay > 0.0 {
                delta.axpy(-eta_t * cfg.weight_decay, &params[i])?;
            }
            deltas.push(delta);
            stats.push(LayerStats {
                eta_eff: eta_t,
                ratio: 1.0,
                h: 0.0,
                dual_grad_norm: if self.record_grad_norms {
                    dual_norm(spec.group, g, cfg.embedding_dual)?
                } else {
                    f64::NAN
                },
                noise_sample: None,
            });
        }
        Ok(StepOutput {
            deltas,
            eta_t,
            layers: stats,
        })
    }
}
