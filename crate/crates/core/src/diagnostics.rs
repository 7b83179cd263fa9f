//! Post-hoc checks of the noise tracker and learning-rate ratios against
//! their theoretical envelopes.
//!
//! Every report is a pure function of a run's records and metadata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::GroupId;
use crate::optimizer::{tracker_updates, LayerSpec, LayerStats, NoiseOption};
use crate::param::Shape;
use crate::tasks::NoiseProfile;

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    /// 0-based step index; the loss is measured before the update.
    pub step: usize,
    pub loss: f64,
    pub layers: Vec<LayerStats>,
    pub wall_ns: u64,
}

/// A run's records with the metadata needed to interpret them.
#[derive(Clone, Copy, Debug)]
pub struct RunView<'a> {
    pub layers: &'a [LayerSpec],
    pub records: &'a [RunRecord],
    pub noise_option: NoiseOption,
    pub interval: usize,
}

/// Constants entering the tracker and ratio bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub profile: NoiseProfile,
}

impl BoundParams {
    /// Uses `c1 = 1` and the largest per-layer [`equivalence_c2`].
    pub fn for_layers(layers: &[LayerSpec], profile: NoiseProfile, alpha: f64, beta2: f64, delta: f64) -> Result<Self> {
        let c2 = layers
            .iter()
            .map(|l| equivalence_c2(l.group, l.shape))
            .fold(1.0, f64::max);
        let p = Self {
            c1: 1.0,
            c2,
            delta,
            beta2,
            alpha,
            profile,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(self.c1 > 0.0 && self.c1 <= self.c2 && self.c2 >= 1.0) {
            return bad("need 0 < c1 <= c2 and c2 >= 1");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2 must lie in [0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        for r in &self.profile.layers {
            r.validate()?;
        }
        Ok(())
    }

    /// `log 2 / log(1 / beta2)`; zero when `beta2 = 0`.
    pub fn t0(&self) -> f64 {
        if self.beta2 == 0.0 {
            0.0
        } else {
            std::f64::consts::LN_2 / (1.0 / self.beta2).ln()
        }
    }

    /// `min(alpha / sqrt(alpha^2 + 4 sigma_max^2), 1 / (2 sqrt(c2) kappa))`.
    pub fn alpha_r(&self) -> f64 {
        let s = self.profile.sigma_hi_max();
        let a = self.alpha / (self.alpha * self.alpha + 4.0 * s * s).sqrt();
        let b = 1.0 / (2.0 * self.c2.sqrt() * self.profile.kappa());
        a.min(b)
    }
}

/// Squared ratio of the upper to lower constants relating a group's dual
/// norm to a multiple of the Frobenius norm.
pub fn equivalence_c2(group: GroupId, shape: Shape) -> f64 {
    match (group, shape) {
        (GroupId::Hidden, Shape::Matrix(r, c)) => r.min(c) as f64,
        (GroupId::EmbeddingHead, Shape::Matrix(r, c)) => (r * c) as f64,
        _ => 1.0,
    }
}

/// Smallest `beta2` for which the two-sided tracker bound holds with
/// probability `1 - delta` over `horizon` steps. 1 when `sigma_lo = 0`.
pub fn beta2_threshold(sigma_lo: f64, sigma_hi: f64, c2: f64, horizon: usize, delta: f64) -> f64 {
    if sigma_lo == 0.0 {
        return 1.0;
    }
    let denom = 2.0 * c2 * sigma_hi * sigma_hi - sigma_lo * sigma_lo;
    let log_term = (4.0 * horizon.max(1) as f64 / delta).ln();
    1.0 - sigma_lo.powi(4) / (32.0 * denom * denom * log_term)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HBoundsLayer {
    pub layer: String,
    pub t0: f64,
    pub checked_steps: usize,
    pub upper_violations: usize,
    pub lower_violations: usize,
    pub lower_violation_rate: f64,
    /// Largest observed `H / (4 sigma_hi^2 (1 - beta2^n))`.
    pub max_upper_ratio: f64,
    pub beta2_threshold: f64,
}

fn ensure_telemetry(view: &RunView, what: &str, f: impl Fn(&LayerStats) -> f64) -> Result<()> {
    for r in view.records {
        if r.layers.len() != view.layers.len() {
            return Err(Error::Shape(format!(
                "record at step {} has {} layers",
                r.step,
                r.layers.len()
            )));
        }
        if r.layers.iter().any(|l| f(l).is_nan()) {
            return Err(Error::MissingTelemetry(format!("{what} at step {}", r.step)));
        }
    }
    Ok(())
}

/// Checks `H <= 4 sigma_hi^2 (1 - beta2^n)` (deterministic, any violation
/// is a bug) and counts `H < sigma_lo^2 (1 - beta2^n) / c2` (probabilistic)
/// over steps with `n >= t0` tracker refreshes.
pub fn h_bounds_check(view: &RunView, params: &BoundParams) -> Result<Vec<HBoundsLayer>> {
    params.validate()?;
    ensure_telemetry(view, "H", |l| l.h)?;
    if params.profile.layers.len() != view.layers.len() {
        return Err(Error::Shape("noise profile does not match layer count".into()));
    }
    let t0 = params.t0();
    let horizon = view.records.last().map_or(0, |r| r.step + 1);
    Ok(view
        .layers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let range = params.profile.layers[i];
            let mut out = HBoundsLayer {
                layer: spec.name.clone(),
                t0,
                checked_steps: 0,
                upper_violations: 0,
                lower_violations: 0,
                lower_violation_rate: 0.0,
                max_upper_ratio: 0.0,
                beta2_threshold: beta2_threshold(range.lo, range.hi, params.c2, horizon, params.delta),
            };
            for r in view.records {
                let n = tracker_updates(r.step, view.noise_option, view.interval);
                if (n as f64) < t0 || n == 0 {
                    continue;
                }
                let h = r.layers[i].h;
                let decay = 1.0 - params.beta2.powi(n as i32);
                let upper = 4.0 * range.hi * range.hi * decay;
                out.checked_steps += 1;
                if h > upper * (1.0 + 1e-12) {
                    out.upper_violations += 1;
                }
                if upper > 0.0 {
                    out.max_upper_ratio = out.max_upper_ratio.max(h / upper);
                }
                if h < range.lo * range.lo * decay / params.c2 {
                    out.lower_violations += 1;
                }
            }
            if out.checked_steps > 0 {
                out.lower_violation_rate = out.lower_violations as f64 / out.checked_steps as f64;
            }
            out
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRatioReport {
    pub alpha_r: f64,
    pub kappa_sigma: f64,
    pub sigma_max: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Fraction of steps on which some layer's ratio is below `alpha_r`.
    pub fraction_below_alpha_r: f64,
    /// Every step had all ratios `<= 1`.
    pub ratio_le_one: bool,
    /// Every step had some layer with ratio exactly 1 in each group.
    pub group_max_attained: bool,
}

pub fn alpha_ratio_envelope(view: &RunView, params: &BoundParams) -> Result<AlphaRatioReport> {
    params.validate()?;
    ensure_telemetry(view, "ratio", |l| l.ratio)?;
    let groups: Vec<GroupId> = GroupId::ALL
        .into_iter()
        .filter(|g| view.layers.iter().any(|l| l.group == *g))
        .collect();
    let alpha_r = params.alpha_r();
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;
    let mut below = 0usize;
    let mut ratio_le_one = true;
    let mut group_max_attained = true;
    for r in view.records {
        let mut step_below = false;
        for l in &r.layers {
            min_ratio = min_ratio.min(l.ratio);
            max_ratio = max_ratio.max(l.ratio);
            ratio_le_one &= l.ratio <= 1.0;
            step_below |= l.ratio < alpha_r;
        }
        below += step_below as usize;
        for g in &groups {
            let hit = view
                .layers
                .iter()
                .zip(&r.layers)
                .any(|(spec, l)| spec.group == *g && l.ratio == 1.0);
            group_max_attained &= hit;
        }
    }
    let n = view.records.len();
    Ok(AlphaRatioReport {
        alpha_r,
        kappa_sigma: params.profile.kappa(),
        sigma_max: params.profile.sigma_hi_max(),
        min_ratio: if n == 0 { f64::NAN } else { min_ratio },
        max_ratio: if n == 0 { f64::NAN } else { max_ratio },
        fraction_below_alpha_r: if n == 0 { 0.0 } else { below as f64 / n as f64 },
        ratio_le_one,
        group_max_attained,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRangeLayer {
    pub layer: String,
    pub group: GroupId,
    pub samples: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRangeReport {
    pub layers: Vec<NoiseRangeLayer>,
    /// Mean of the per-layer means over layers whose name starts with the
    /// given prefix (the part before the first `_`).
    pub prefix_means: Vec<(String, f64)>,
}

/// Summary of the observed `||G - G'||_*` samples over steps `window`.
pub fn noise_range_estimate(view: &RunView, window: Option<(usize, usize)>) -> Result<NoiseRangeReport> {
    let last = view.records.last().map_or(0, |r| r.step + 1);
    let (lo, hi) = window.unwrap_or((0, last));
    if lo > hi || hi > last {
        return Err(Error::Invalid(format!(
            "window [{lo}, {hi}) outside run of {last} steps"
        )));
    }
    let mut layers = Vec::with_capacity(view.layers.len());
    for (i, spec) in view.layers.iter().enumerate() {
        let samples: Vec<f64> = view
            .records
            .iter()
            .filter(|r| (lo..hi).contains(&r.step))
            .filter_map(|r| r.layers.get(i).and_then(|l| l.noise_sample))
            .collect();
        let n = samples.len();
        let (min, max, sum) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(a, b, s), &v| {
                (a.min(v), b.max(v), s + v)
            });
        layers.push(NoiseRangeLayer {
            layer: spec.name.clone(),
            group: spec.group,
            samples: n,
            min: if n == 0 { f64::NAN } else { min },
            mean: if n == 0 { f64::NAN } else { sum / n as f64 },
            max: if n == 0 { f64::NAN } else { max },
        });
    }
    let mut prefix_means: Vec<(String, f64, usize)> = Vec::new();
    for l in &layers {
        if l.samples == 0 {
            continue;
        }
        let prefix = l.layer.split('_').next().unwrap_or("").to_string();
        match prefix_means.iter_mut().find(|(p, ..)| *p == prefix) {
            Some((_, s, c)) => {
                *s += l.mean;
                *c += 1;
            }
            None => prefix_means.push((prefix, l.mean, 1)),
        }
    }
    Ok(NoiseRangeReport {
        layers,
        prefix_means: prefix_means.into_iter().map(|(p, s, c)| (p, s / c as f64)).collect(),
    })
}

/// Ranks starting at 1, ties get the average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// input is constant.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Invalid("rank correlation needs at least two points".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Everything `diagnose` writes for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub seed: u64,
    pub c2: f64,
    pub h_bounds: Option<Vec<HBoundsLayer>>,
    pub alpha_ratio: Option<AlphaRatioReport>,
    pub noise_ranges: Option<NoiseRangeReport>,
}
