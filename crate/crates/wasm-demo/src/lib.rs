//! Browser bindings: the learning-rate schedule, the Newton-Schulz map on
//! singular values, and a small noisy quadratic comparing per-layer rates.
//!
//! Each export wraps a plain function so the logic also runs in host tests.

use lanton::linalg::Matrix;
use lanton::lmo::{newton_schulz, NsVariant};
use lanton::norms::GroupId;
use lanton::optimizer::{cosine_schedule_lr, LantonConfig, LayerSpec, NoiseOption, Optimizer, OptimizerKind, StepMode};
use lanton::param::Shape;
use lanton::tasks::{stochastic_grad, NoiseProfile, NoiseRange, NoiseSampler, QuadraticTask};
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;
use wasm_bindgen::JsValue;

const LAYERS: usize = 6;

fn js_err(e: lanton::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Base learning rate at every step of a warmup-plus-cosine schedule.
pub fn schedule(eta_max: f64, eta_min: f64, warmup: usize, total: usize) -> lanton::Result<Vec<f64>> {
    let cfg = LantonConfig {
        eta_max,
        eta_min,
        warmup_steps: warmup,
        total_steps: total,
        ..LantonConfig::default()
    };
    cfg.validate()?;
    Ok((0..total).map(|t| cosine_schedule_lr(t, &cfg)).collect())
}

/// Runs the iteration on `diag(s)` with `n` singular values log-spaced from
/// 1 down to `1/cond`; returns `[s_in, s_out]` pairs, flattened.
pub fn singular_map(cond: f64, n: usize, steps: usize, cubic: bool) -> lanton::Result<Vec<f64>> {
    if !(cond.is_finite() && cond >= 1.0) || n == 0 || steps == 0 {
        return Err(lanton::Error::Invalid("need cond >= 1, n >= 1, steps >= 1".into()));
    }
    let s: Vec<f64> = (0..n)
        .map(|j| {
            let t = if n == 1 { 0.0 } else { j as f64 / (n - 1) as f64 };
            cond.powf(-t)
        })
        .collect();
    let variant = if cubic { NsVariant::Cubic } else { NsVariant::Quintic };
    let out = newton_schulz(&Matrix::from_diag(&s), steps, variant)?;
    Ok(s.iter().enumerate().flat_map(|(j, &x)| [x, out[(j, j)]]).collect())
}

#[derive(Debug, Serialize)]
pub struct Simulation {
    pub sigma_hi: Vec<f64>,
    pub mean_eta: Vec<f64>,
    pub mean_h: Vec<f64>,
    pub loss_lanton: Vec<f64>,
    pub loss_fixed: Vec<f64>,
}

/// Six 8x8 Hidden layers whose noise radii span `spread`; runs LANTON and
/// the fixed-rate baseline on the same noise stream.
pub fn simulate(spread: f64, steps: usize, seed: u64, option_two: bool) -> lanton::Result<Simulation> {
    if !(spread.is_finite() && spread >= 1.0) || steps == 0 {
        return Err(lanton::Error::Invalid("need spread >= 1 and steps >= 1".into()));
    }
    let layers: Vec<LayerSpec> = (0..LAYERS)
        .map(|k| LayerSpec::new(format!("h{k}"), Shape::Matrix(8, 8), GroupId::Hidden).with_smoothness(1.0))
        .collect();
    let sigma_hi: Vec<f64> = (0..LAYERS)
        .map(|k| 0.01 * spread.powf(k as f64 / (LAYERS - 1) as f64))
        .collect();
    let noise = NoiseProfile {
        layers: sigma_hi
            .iter()
            .map(|&h| NoiseRange::new(h / 2.0, h))
            .collect::<lanton::Result<_>>()?,
    };
    let task = QuadraticTask::seeded(layers.clone(), noise, 0.05, seed)?;
    let cfg = LantonConfig {
        total_steps: steps,
        noise_option: if option_two { NoiseOption::II } else { NoiseOption::I },
        ..LantonConfig::default()
    };
    let twin = OptimizerKind::Lanton.needs_twin(&cfg);

    let mut opt = Optimizer::new(OptimizerKind::Lanton, StepMode::Raw, cfg.clone(), layers.clone())?;
    let mut sampler = NoiseSampler::new(seed, LAYERS, cfg.embedding_dual);
    let mut x = task.zeros();
    let mut mean_eta = vec![0.0; LAYERS];
    let mut mean_h = vec![0.0; LAYERS];
    let mut loss_lanton = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, g, tw) = stochastic_grad(&task, &x, &mut sampler, twin)?;
        let out = opt.step_in_place(&mut x, &g, tw.as_deref())?;
        loss_lanton.push(loss);
        for (i, l) in out.layers.iter().enumerate() {
            mean_eta[i] += l.eta_eff / steps as f64;
            mean_h[i] += l.h / steps as f64;
        }
    }

    let mut opt = Optimizer::new(OptimizerKind::FixedRateLmo, StepMode::Raw, cfg.clone(), layers)?;
    let mut sampler = NoiseSampler::new(seed, LAYERS, cfg.embedding_dual);
    let mut x = task.zeros();
    let mut loss_fixed = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, g, _) = stochastic_grad(&task, &x, &mut sampler, false)?;
        opt.step_in_place(&mut x, &g, None)?;
        loss_fixed.push(loss);
    }

    Ok(Simulation {
        sigma_hi,
        mean_eta,
        mean_h,
        loss_lanton,
        loss_fixed,
    })
}

#[wasm_bindgen]
pub fn schedule_curve(eta_max: f64, eta_min: f64, warmup: usize, total: usize) -> Result<Vec<f64>, JsValue> {
    schedule(eta_max, eta_min, warmup, total).map_err(js_err)
}

#[wasm_bindgen]
pub fn ns_singular_map(cond: f64, n: usize, steps: usize, cubic: bool) -> Result<Vec<f64>, JsValue> {
    singular_map(cond, n, steps, cubic).map_err(js_err)
}

/// Returns the [`Simulation`] as a JSON string.
#[wasm_bindgen]
pub fn noise_simulation(spread: f64, steps: usize, seed: u32, option_two: bool) -> Result<String, JsValue> {
    let sim = simulate(spread, steps, seed as u64, option_two).map_err(js_err)?;
    serde_json::to_string(&sim).map_err(|e| JsValue::from_str(&e.to_string()))
}
