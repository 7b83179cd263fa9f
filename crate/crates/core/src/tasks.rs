//! Synthetic objectives with known layer-wise smoothness and noise that is
//! bounded above and below in each layer's dual norm.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::norms::{dual_norm, EmbeddingDual, GroupId};
use crate::optimizer::LayerSpec;
use crate::param::{Param, Shape};

/// Generator used for every seeded stream in the crate.
pub type Stream = Xoshiro256PlusPlus;

/// What a random stream is used for. Each `(seed, layer, purpose)` triple
/// gets its own independent stream, so results do not depend on the order
/// in which layers are processed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Target = 1,
    Init = 2,
    Noise = 3,
    TwinNoise = 4,
    Batch = 5,
    TwinBatch = 6,
    Data = 7,
    Teacher = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, layer, purpose)`.
pub fn stream(seed: u64, layer: usize, purpose: Purpose) -> Stream {
    let key = splitmix64(splitmix64(seed) ^ splitmix64(((layer as u64) << 8) | purpose as u64));
    Stream::seed_from_u64(key)
}

/// Dual-norm radius interval `[lo, hi]` for one layer's gradient noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRange {
    pub lo: f64,
    pub hi: f64,
}

impl NoiseRange {
    pub const ZERO: NoiseRange = NoiseRange { lo: 0.0, hi: 0.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let r = Self { lo, hi };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && 0.0 <= self.lo && self.lo <= self.hi) {
            return Err(Error::Invalid(format!(
                "noise range needs 0 <= lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Per-layer noise radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub layers: Vec<NoiseRange>,
}

impl NoiseProfile {
    pub fn zero(n: usize) -> Self {
        Self {
            layers: vec![NoiseRange::ZERO; n],
        }
    }

    pub fn sigma_hi_max(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, r| m.max(r.hi))
    }

    /// `max_l hi_l / lo_l`, with `0/0 = 1`. Infinite when some layer has
    /// `lo = 0 < hi`.
    pub fn kappa(&self) -> f64 {
        self.layers
            .iter()
            .map(|r| {
                if r.hi == 0.0 {
                    1.0
                } else if r.lo == 0.0 {
                    f64::INFINITY
                } else {
                    r.hi / r.lo
                }
            })
            .fold(1.0, f64::max)
    }
}

/// Draws `E` with `dual_norm(group, E)` uniform on `[lo, hi]` and a random
/// sign, so the noise is symmetric about zero.
pub fn sample_dual_noise<R: Rng + ?Sized>(
    group: GroupId,
    shape: Shape,
    range: NoiseRange,
    embedding: EmbeddingDual,
    rng: &mut R,
) -> Result<Param> {
    range.validate()?;
    if range.hi == 0.0 {
        return Ok(Param::zeros(shape));
    }
    let radius = if range.lo == range.hi {
        range.hi
    } else {
        rng.random_range(range.lo..=range.hi)
    };
    let (dir, nrm) = loop {
        let d = Param::gaussian(shape, rng);
        let n = dual_norm(group, &d, embedding)?;
        if n > 0.0 {
            break (d, n);
        }
    };
    let flip = if rng.random::<bool>() { -1.0 } else { 1.0 };
    Ok(dir.scale(flip * radius / nrm))
}

/// `f(X) = sum_l L_l / 2 * ||X_l - A_l||_F^2`, satisfying layer-wise
/// smoothness with exactly the declared constants.
#[derive(Clone, Debug)]
pub struct QuadraticTask {
    pub layers: Vec<LayerSpec>,
    pub targets: Vec<Param>,
    pub noise: NoiseProfile,
}

impl QuadraticTask {
    pub fn new(layers: Vec<LayerSpec>, targets: Vec<Param>, noise: NoiseProfile) -> Result<Self> {
        if layers.len() != targets.len() || layers.len() != noise.layers.len() {
            return Err(Error::Shape(
                "layers, targets and noise profile must have equal length".into(),
            ));
        }
        for ((spec, a), r) in layers.iter().zip(&targets).zip(&noise.layers) {
            spec.validate()?;
            if a.shape() != spec.shape {
                return Err(Error::Shape(format!(
                    "target for `{}` must have shape {}",
                    spec.name, spec.shape
                )));
            }
            match spec.smoothness {
                Some(l) if l > 0.0 => {}
                _ => {
                    return Err(Error::Invalid(format!(
                        "layer `{}` needs a positive smoothness",
                        spec.name
                    )))
                }
            }
            r.validate()?;
        }
        Ok(Self { layers, targets, noise })
    }

    /// Targets drawn from per-layer seeded streams, scaled by `target_scale`.
    pub fn seeded(layers: Vec<LayerSpec>, noise: NoiseProfile, target_scale: f64, seed: u64) -> Result<Self> {
        let targets = layers
            .iter()
            .enumerate()
            .map(|(i, l)| Param::gaussian(l.shape, &mut stream(seed, i, Purpose::Target)).scale(target_scale))
            .collect();
        Self::new(layers, targets, noise)
    }

    fn smoothness(&self, i: usize) -> f64 {
        self.layers[i].smoothness.expect("validated")
    }

    pub fn value_grad(&self, x: &[Param]) -> Result<(f64, Vec<Param>)> {
        if x.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                self.layers.len(),
                x.len()
            )));
        }
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(x.len());
        for (i, (xi, ai)) in x.iter().zip(&self.targets).enumerate() {
            let diff = xi.sub(ai)?;
            let l = self.smoothness(i);
            loss += 0.5 * l * diff.dot(&diff)?;
            grads.push(diff.scale(l));
        }
        Ok((loss, grads))
    }

    pub fn zeros(&self) -> Vec<Param> {
        self.layers.iter().map(|l| Param::zeros(l.shape)).collect()
    }
}

/// Per-layer noise streams for one run.
#[derive(Clone, Debug)]
pub struct NoiseSampler {
    main: Vec<Stream>,
    twin: Vec<Stream>,
    embedding: EmbeddingDual,
}

impl NoiseSampler {
    pub fn new(seed: u64, layers: usize, embedding: EmbeddingDual) -> Self {
        Self {
            main: (0..layers).map(|i| stream(seed, i, Purpose::Noise)).collect(),
            twin: (0..layers).map(|i| stream(seed, i, Purpose::TwinNoise)).collect(),
            embedding,
        }
    }
}

/// Exact gradient plus dual-norm-bounded noise per layer. With `twin`, also
/// returns a second gradient at the same point with independent noise.
pub fn stochastic_grad(
    task: &QuadraticTask,
    x: &[Param],
    sampler: &mut NoiseSampler,
    twin: bool,
) -> Result<(f64, Vec<Param>, Option<Vec<Param>>)> {
    let (loss, exact) = task.value_grad(x)?;
    let noisy = |streams: &mut [Stream]| -> Result<Vec<Param>> {
        exact
            .iter()
            .zip(streams.iter_mut())
            .enumerate()
            .map(|(i, (g, rng))| {
                let spec = &task.layers[i];
                let e = sample_dual_noise(spec.group, spec.shape, task.noise.layers[i], sampler.embedding, rng)?;
                g.add(&e)
            })
            .collect()
    };
    let grads = noisy(&mut sampler.main)?;
    let twins = if twin { Some(noisy(&mut sampler.twin)?) } else { None };
    Ok((loss, grads, twins))
}

/// Named quadratic layouts with per-layer noise radii.
///
/// * `paper_like`: six Hidden layers in three pairs (`qk`, `vo`, `mlp`);
///   each pair splits its measured noise interval at the measured mean, plus
///   a single EmbeddingHead and VectorNorm layer with small radii.
/// * `hetero_hidden`: six 8x8 Hidden layers whose upper radii span 100x,
///   with `lo = hi / 2`.
pub fn preset(name: &str) -> Result<(Vec<LayerSpec>, NoiseProfile)> {
    let hidden = |n: &str, r, c| LayerSpec::new(n, Shape::Matrix(r, c), GroupId::Hidden).with_smoothness(1.0);
    let (layers, ranges): (Vec<LayerSpec>, Vec<(f64, f64)>) = match name {
        "paper_like" => {
            // (lo, mean, hi) per pair
            let qk = (0.003, 0.014, 0.026);
            let vo = (0.009, 0.046, 0.117);
            let mlp = (0.018, 0.038, 0.107);
            vec![
                (hidden("qk_a", 8, 8), (qk.0, qk.1)),
                (hidden("qk_b", 8, 8), (qk.1, qk.2)),
                (hidden("vo_a", 8, 8), (vo.0, vo.1)),
                (hidden("vo_b", 8, 8), (vo.1, vo.2)),
                (hidden("mlp_up", 16, 8), (mlp.0, mlp.1)),
                (hidden("mlp_down", 8, 16), (mlp.1, mlp.2)),
                (
                    LayerSpec::new("head", Shape::Matrix(4, 8), GroupId::EmbeddingHead).with_smoothness(1.0),
                    (0.01, 0.05),
                ),
                (
                    LayerSpec::new("norm", Shape::Vector(8), GroupId::VectorNorm).with_smoothness(1.0),
                    (0.005, 0.02),
                ),
            ]
            .into_iter()
            .unzip()
        }
        "hetero_hidden" => (0..6)
            .map(|k| {
                let hi = 0.01 * 100f64.powf(k as f64 / 5.0);
                (hidden(&format!("h{k}"), 8, 8), (hi / 2.0, hi))
            })
            .unzip(),
        other => return Err(Error::Invalid(format!("unknown preset `{other}`"))),
    };
    let layers_noise = ranges
        .into_iter()
        .map(|(lo, hi)| NoiseRange::new(lo, hi))
        .collect::<Result<Vec<_>>>()?;
    Ok((layers, NoiseProfile { layers: layers_noise }))
}

/// Parameters of a seeded regression dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub samples: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub teacher_hidden: usize,
    pub label_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `samples x input_dim`
    pub features: Matrix,
    /// `samples x output_dim`
    pub labels: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dataset with every sample repeated `k` times.
    pub fn repeated(&self, k: usize) -> Dataset {
        let rep = |m: &Matrix| {
            let mut data = Vec::with_capacity(m.data().len() * k);
            for _ in 0..k {
                data.extend_from_slice(m.data());
            }
            Matrix::from_vec(m.rows() * k, m.cols(), data).expect("consistent")
        };
        Dataset {
            features: rep(&self.features),
            labels: rep(&self.labels),
        }
    }
}

/// Gaussian features, labels from a random tanh teacher plus Gaussian noise.
pub fn gen_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.samples == 0 || spec.input_dim == 0 || spec.output_dim == 0 || spec.teacher_hidden == 0 {
        return Err(Error::Invalid("dataset sizes must be >= 1".into()));
    }
    if !(spec.label_noise.is_finite() && spec.label_noise >= 0.0) {
        return Err(Error::Invalid("label_noise must be >= 0".into()));
    }
    let mut data_rng = stream(seed, 0, Purpose::Data);
    let mut teacher_rng = stream(seed, 0, Purpose::Teacher);
    let features = Matrix::gaussian(spec.samples, spec.input_dim, &mut data_rng);
    let w1 = Matrix::gaussian(spec.teacher_hidden, spec.input_dim, &mut teacher_rng)
        .scale(1.0 / (spec.input_dim as f64).sqrt());
    let w2 = Matrix::gaussian(spec.output_dim, spec.teacher_hidden, &mut teacher_rng)
        .scale(1.0 / (spec.teacher_hidden as f64).sqrt());
    let hidden = features.matmul(&w1.transpose())?.map(f64::tanh);
    let mut labels = hidden.matmul(&w2.transpose())?;
    if spec.label_noise > 0.0 {
        for v in labels.data_mut() {
            let z: f64 = StandardNormal.sample(&mut data_rng);
            *v += spec.label_noise * z;
        }
    }
    Ok(Dataset { features, labels })
}

const CACHE_MAGIC: &[u8; 4] = b"LNTD";
const CACHE_VERSION: u32 = 1;

/// Writes `m` as `LNTD | version u32 | rows u64 | cols u64 | f64...`, all
/// little-endian, row-major.
pub fn write_matrix_cache(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 8 * m.data().len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    crate::harness::write_atomic(path, &buf)
}

pub fn read_matrix_cache(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Invalid(format!("{}: {msg}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("not a dataset cache file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported cache version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[24..];
    if body.len() != rows * cols * 8 {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl Dataset {
    /// Saves features and labels side by side in one cache matrix.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, din, dout) = (self.len(), self.features.cols(), self.labels.cols());
        let mut data = Vec::with_capacity(n * (din + dout));
        for i in 0..n {
            data.extend_from_slice(self.features.row(i));
            data.extend_from_slice(self.labels.row(i));
        }
        write_matrix_cache(path, &Matrix::from_vec(n, din + dout, data)?)
    }

    pub fn load(path: &Path, input_dim: usize) -> Result<Dataset> {
        let m = read_matrix_cache(path)?;
        if input_dim == 0 || input_dim >= m.cols() {
            return Err(Error::Shape(format!(
                "cache has {} columns, input_dim {input_dim}",
                m.cols()
            )));
        }
        let out_dim = m.cols() - input_dim;
        let mut f = Vec::with_capacity(m.rows() * input_dim);
        let mut l = Vec::with_capacity(m.rows() * out_dim);
        for i in 0..m.rows() {
            f.extend_from_slice(&m.row(i)[..input_dim]);
            l.extend_from_slice(&m.row(i)[input_dim..]);
        }
        Ok(Dataset {
            features: Matrix::from_vec(m.rows(), input_dim, f)?,
            labels: Matrix::from_vec(m.rows(), out_dim, l)?,
        })
    }
}

/// Fully connected tanh network with a linear output layer, trained with
/// `loss = 1/(2N) * sum_i ||y_i - t_i||^2`.
///
/// Parameters alternate weight/bias per layer: `w0, b0, w1, b1, ...`.
/// Inner weight matrices are Hidden, the output weight is EmbeddingHead
/// (the head), and biases are VectorNorm.
#[derive(Clone, Debug)]
pub struct MlpTask {
    pub widths: Vec<usize>,
    pub data: Dataset,
}

impl MlpTask {
    pub fn new(widths: Vec<usize>, data: Dataset) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Invalid(
                "mlp needs at least input and output widths, all >= 1".into(),
            ));
        }
        if data.features.cols() != widths[0] || data.labels.cols() != *widths.last().unwrap() {
            return Err(Error::Shape("dataset dimensions do not match mlp widths".into()));
        }
        if !(data.features.is_finite() && data.labels.is_finite()) {
            return Err(Error::NonFinite("mlp dataset".into()));
        }
        Ok(Self { widths, data })
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let n = self.widths.len() - 1;
        let mut out = Vec::with_capacity(2 * n);
        for k in 0..n {
            let group = if k + 1 == n {
                GroupId::EmbeddingHead
            } else {
                GroupId::Hidden
            };
            out.push(LayerSpec::new(
                format!("w{k}"),
                Shape::Matrix(self.widths[k + 1], self.widths[k]),
                group,
            ));
            out.push(LayerSpec::new(
                format!("b{k}"),
                Shape::Vector(self.widths[k + 1]),
                GroupId::VectorNorm,
            ));
        }
        out
    }

    /// Scaled Gaussian weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<Param> {
        self.layers()
            .iter()
            .enumerate()
            .map(|(i, l)| match l.shape {
                Shape::Matrix(_, fan_in) => {
                    Param::gaussian(l.shape, &mut stream(seed, i, Purpose::Init)).scale(1.0 / (fan_in as f64).sqrt())
                }
                Shape::Vector(_) => Param::zeros(l.shape),
            })
            .collect()
    }

    fn check_params(&self, params: &[Param]) -> Result<()> {
        let layers = self.layers();
        if params.len() != layers.len() {
            return Err(Error::Shape(format!(
                "mlp expects {} parameter blocks, got {}",
                layers.len(),
                params.len()
            )));
        }
        for (p, l) in params.iter().zip(&layers) {
            if p.shape() != l.shape {
                return Err(Error::Shape(format!(
                    "`{}` expects shape {}, got {}",
                    l.name,
                    l.shape,
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    /// Loss and gradients over the rows listed in `rows` (all rows if `None`).
    pub fn value_grad_rows(&self, params: &[Param], rows: Option<&[usize]>) -> Result<(f64, Vec<Param>)> {
        self.check_params(params)?;
        let idx: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..self.data.len()).collect(),
        };
        let n_layers = self.widths.len() - 1;
        let weights: Vec<&Matrix> = (0..n_layers).map(|k| params[2 * k].as_matrix().unwrap()).collect();
        let biases: Vec<&Vector> = (0..n_layers).map(|k| params[2 * k + 1].as_vector().unwrap()).collect();

        let mut grads: Vec<Param> = params.iter().map(|p| Param::zeros(p.shape())).collect();
        let mut loss = 0.0;
        let inv_n = 1.0 / idx.len() as f64;

        for &row in &idx {
            // forward, keeping every activation
            let mut acts: Vec<Vec<f64>> = vec![self.data.features.row(row).to_vec()];
            for k in 0..n_layers {
                let w = weights[k];
                let prev = &acts[k];
                let mut z: Vec<f64> = (0..w.rows())
                    .map(|i| crate::linalg::dot_slices(w.row(i), prev) + biases[k].data()[i])
                    .collect();
                if k + 1 < n_layers {
                    z.iter_mut().for_each(|v| *v = v.tanh());
                }
                acts.push(z);
            }
            let target = self.data.labels.row(row);
            let mut delta: Vec<f64> = acts[n_layers].iter().zip(target).map(|(y, t)| y - t).collect();
            loss += 0.5 * delta.iter().map(|d| d * d).sum::<f64>();

            for k in (0..n_layers).rev() {
                let prev = &acts[k];
                let (gw, gb) = {
                    let (left, right) = grads.split_at_mut(2 * k + 1);
                    (&mut left[2 * k], &mut right[0])
                };
                let cols = prev.len();
                let gw = gw.data_mut();
                for (i, &d) in delta.iter().enumerate() {
                    gb.data_mut()[i] += d;
                    for (j, &a) in prev.iter().enumerate() {
                        gw[i * cols + j] += d * a;
                    }
                }
                if k > 0 {
                    let w = weights[k];
                    let mut back = vec![0.0; cols];
                    for (i, &d) in delta.iter().enumerate() {
                        for (b, &wij) in back.iter_mut().zip(w.row(i)) {
                            *b += d * wij;
                        }
                    }
                    // prev = tanh(z) so dtanh = 1 - prev^2
                    delta = back.iter().zip(prev).map(|(b, a)| b * (1.0 - a * a)).collect();
                }
            }
        }
        let grads = grads.into_iter().map(|g| g.scale(inv_n)).collect();
        Ok((loss * inv_n, grads))
    }

    pub fn value_grad(&self, params: &[Param]) -> Result<(f64, Vec<Param>)> {
        self.value_grad_rows(params, None)
    }
}

/// Minibatch sampler for [`MlpTask`]: independent streams for the main and
/// twin batches.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    main: Stream,
    twin: Stream,
    batch: usize,
    n: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n: usize, batch: usize) -> Self {
        Self {
            main: stream(seed, 0, Purpose::Batch),
            twin: stream(seed, 0, Purpose::TwinBatch),
            batch: batch.clamp(1, n.max(1)),
            n,
        }
    }

    fn draw(rng: &mut Stream, n: usize, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }

    /// Full-data loss at `params`, a minibatch gradient and optionally an
    /// independent twin minibatch gradient.
    pub fn sample(
        &mut self,
        task: &MlpTask,
        params: &[Param],
        twin: bool,
    ) -> Result<(f64, Vec<Param>, Option<Vec<Param>>)> {
        let (loss, _) = task.value_grad(params)?;
        let rows = Self::draw(&mut self.main, self.n, self.batch);
        let (_, g) = task.value_grad_rows(params, Some(&rows))?;
        let t = if twin {
            let rows = Self::draw(&mut self.twin, self.n, self.batch);
            Some(task.value_grad_rows(params, Some(&rows))?.1)
        } else {
            None
        };
        Ok((loss, g, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[Param]) -> f64, x: &[Param], grads: &[Param], h: f64, rel: f64) {
        for (li, g) in grads.iter().enumerate() {
            for k in 0..g.data().len() {
                let mut xp = x.to_vec();
                xp[li].data_mut()[k] += h;
                let mut xm = x.to_vec();
                xm[li].data_mut()[k] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let an = g.data()[k];
                assert!(
                    (fd - an).abs() <= rel * (1.0 + an.abs()),
                    "layer {li} entry {k}: fd {fd} vs {an}"
                );
            }
        }
    }

    fn small_quadratic(seed: u64) -> QuadraticTask {
        let layers = vec![
            LayerSpec::new("h", Shape::Matrix(3, 2), GroupId::Hidden).with_smoothness(2.0),
            LayerSpec::new("e", Shape::Matrix(2, 4), GroupId::EmbeddingHead).with_smoothness(0.5),
            LayerSpec::new("v", Shape::Vector(3), GroupId::VectorNorm).with_smoothness(1.5),
        ];
        QuadraticTask::seeded(layers, NoiseProfile::zero(3), 1.0, seed).unwrap()
    }

    #[test]
    fn quadratic_minimum_and_example() {
        let task = small_quadratic(1);
        let (loss, grads) = task.value_grad(&task.targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.is_zero()));

        let spec = LayerSpec::new("w", Shape::Matrix(2, 2), GroupId::Hidden).with_smoothness(2.0);
        let a = Param::zeros(Shape::Matrix(2, 2));
        let task = QuadraticTask::new(vec![spec], vec![a], NoiseProfile::zero(1)).unwrap();
        let x = vec![Param::Matrix(Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]))];
        let (loss, grads) = task.value_grad(&x).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grads[0].data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let task = small_quadratic(3);
        let mut rng = stream(5, 0, Purpose::Init);
        let x: Vec<Param> = task.layers.iter().map(|l| Param::gaussian(l.shape, &mut rng)).collect();
        let (_, grads) = task.value_grad(&x).unwrap();
        fd_check(|p| task.value_grad(p).unwrap().0, &x, &grads, 1e-5, 1e-7);
    }

    #[test]
    fn quadratic_rejects_bad_shapes() {
        let task = small_quadratic(1);
        assert!(task.value_grad(&task.targets[..2]).is_err());
        let spec = LayerSpec::new("w", Shape::Matrix(2, 2), GroupId::Hidden);
        assert!(QuadraticTask::new(
            vec![spec],
            vec![Param::zeros(Shape::Matrix(2, 2))],
            NoiseProfile::zero(1)
        )
        .is_err());
    }

    #[test]
    fn noise_sampler_examples() {
        let mut rng = stream(0, 0, Purpose::Noise);
        let z = sample_dual_noise(
            GroupId::Hidden,
            Shape::Matrix(3, 3),
            NoiseRange::ZERO,
            EmbeddingDual::Default,
            &mut rng,
        )
        .unwrap();
        assert!(z.is_zero());
        for g in GroupId::ALL {
            let shape = if g == GroupId::VectorNorm {
                Shape::Vector(4)
            } else {
                Shape::Matrix(3, 5)
            };
            for _ in 0..20 {
                let e = sample_dual_noise(
                    g,
                    shape,
                    NoiseRange::new(2.0, 2.0).unwrap(),
                    EmbeddingDual::Default,
                    &mut rng,
                )
                .unwrap();
                let d = dual_norm(g, &e, EmbeddingDual::Default).unwrap();
                assert!((d - 2.0).abs() <= 1e-12 * 2.0, "{g:?}: {d}");
            }
        }
        assert!(NoiseRange::new(2.0, 1.0).is_err());
    }

    #[test]
    fn noise_radii_are_uniform() {
        // Kolmogorov-Smirnov against U[1, 3]; critical value at the 1% level
        // is 1.628 / sqrt(n).
        let mut rng = stream(42, 0, Purpose::Noise);
        let n = 10_000;
        let mut radii: Vec<f64> = (0..n)
            .map(|_| {
                let e = sample_dual_noise(
                    GroupId::EmbeddingHead,
                    Shape::Matrix(3, 3),
                    NoiseRange::new(1.0, 3.0).unwrap(),
                    EmbeddingDual::Default,
                    &mut rng,
                )
                .unwrap();
                dual_norm(GroupId::EmbeddingHead, &e, EmbeddingDual::Default).unwrap()
            })
            .collect();
        radii.sort_by(f64::total_cmp);
        assert!(radii[0] >= 1.0 - 1e-12 && radii[n - 1] <= 3.0 + 1e-12);
        let d = radii
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let cdf = (r - 1.0) / 2.0;
                (cdf - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn stochastic_grad_noiseless_and_twins() {
        let task = small_quadratic(2);
        let x = task.zeros();
        let mut s = NoiseSampler::new(1, 3, EmbeddingDual::Default);
        let (_, g, t) = stochastic_grad(&task, &x, &mut s, true).unwrap();
        let (_, exact) = task.value_grad(&x).unwrap();
        assert_eq!(g, exact);
        assert_eq!(t.unwrap(), exact);
    }

    #[test]
    fn stochastic_grad_is_unbiased() {
        let spec = LayerSpec::new("w", Shape::Matrix(2, 2), GroupId::Hidden).with_smoothness(1.0);
        let task = QuadraticTask::seeded(
            vec![spec],
            NoiseProfile {
                layers: vec![NoiseRange::new(0.5, 1.5).unwrap()],
            },
            1.0,
            9,
        )
        .unwrap();
        let x = task.zeros();
        let (_, exact) = task.value_grad(&x).unwrap();
        let mut s = NoiseSampler::new(3, 1, EmbeddingDual::Default);
        let n = 100_000;
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let (_, g, _) = stochastic_grad(&task, &x, &mut s, false).unwrap();
            for k in 0..4 {
                let e = g[0].data()[k] - exact[0].data()[k];
                sum[k] += e;
                sq[k] += e * e;
            }
        }
        for k in 0..4 {
            let mean = sum[k] / n as f64;
            let std = (sq[k] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() <= 3.0 * std / (n as f64).sqrt(), "entry {k}: bias {mean}");
        }
    }

    #[test]
    fn presets() {
        let (layers, profile) = preset("paper_like").unwrap();
        assert_eq!(layers.len(), profile.layers.len());
        assert_eq!(profile.layers[3], NoiseRange { lo: 0.046, hi: 0.117 });
        assert_eq!(profile.sigma_hi_max(), 0.117);
        let (layers, profile) = preset("hetero_hidden").unwrap();
        assert_eq!(layers.len(), 6);
        assert!((profile.layers[5].hi / profile.layers[0].hi - 100.0).abs() < 1e-12);
        assert!(preset("nope").is_err());
    }

    fn tiny_mlp(seed: u64) -> MlpTask {
        let spec = DatasetSpec {
            samples: 12,
            input_dim: 2,
            output_dim: 1,
            teacher_hidden: 3,
            label_noise: 0.1,
        };
        MlpTask::new(vec![2, 2, 1], gen_dataset(&spec, seed).unwrap()).unwrap()
    }

    #[test]
    fn mlp_zero_path() {
        let mut task = tiny_mlp(1);
        task.data.labels = Matrix::zeros(task.data.len(), 1);
        let params: Vec<Param> = task.layers().iter().map(|l| Param::zeros(l.shape)).collect();
        let (loss, grads) = task.value_grad(&params).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.is_zero()));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let task = tiny_mlp(4);
        let mut params = task.init_params(8);
        for (i, p) in params.iter_mut().enumerate() {
            if matches!(p.shape(), Shape::Vector(_)) {
                *p = Param::gaussian(p.shape(), &mut stream(8, i, Purpose::Init)).scale(0.3);
            }
        }
        let (_, grads) = task.value_grad(&params).unwrap();
        fd_check(|p| task.value_grad(p).unwrap().0, &params, &grads, 1e-5, 1e-5);
    }

    #[test]
    fn mlp_duplicate_data_invariance() {
        let task = tiny_mlp(5);
        let doubled = MlpTask::new(task.widths.clone(), task.data.repeated(2)).unwrap();
        let params = task.init_params(2);
        let (l1, g1) = task.value_grad(&params).unwrap();
        let (l2, g2) = doubled.value_grad(&params).unwrap();
        assert!((l1 - l2).abs() <= 1e-14 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mlp_rejects_wrong_params() {
        let task = tiny_mlp(1);
        let mut params = task.init_params(0);
        params.pop();
        assert!(matches!(task.value_grad(&params), Err(Error::Shape(_))));
    }

    #[test]
    fn dataset_determinism_and_noise() {
        let spec = DatasetSpec {
            samples: 20,
            input_dim: 3,
            output_dim: 2,
            teacher_hidden: 4,
            label_noise: 0.2,
        };
        let a = gen_dataset(&spec, 7).unwrap();
        assert_eq!(a, gen_dataset(&spec, 7).unwrap());
        assert_ne!(a, gen_dataset(&spec, 8).unwrap());

        let clean = DatasetSpec {
            label_noise: 0.0,
            ..spec
        };
        let d = gen_dataset(&clean, 7).unwrap();
        assert_eq!(d.features, a.features);
        // noiseless labels are exactly the teacher outputs
        let mut teacher_rng = stream(7, 0, Purpose::Teacher);
        let w1 = Matrix::gaussian(4, 3, &mut teacher_rng).scale(1.0 / 3f64.sqrt());
        let w2 = Matrix::gaussian(2, 4, &mut teacher_rng).scale(0.5);
        let expect = d
            .features
            .matmul(&w1.transpose())
            .unwrap()
            .map(f64::tanh)
            .matmul(&w2.transpose())
            .unwrap();
        assert_eq!(d.labels, expect);
    }

    #[test]
    fn dataset_cache_round_trip() {
        let spec = DatasetSpec {
            samples: 5,
            input_dim: 2,
            output_dim: 1,
            teacher_hidden: 2,
            label_noise: 0.1,
        };
        let d = gen_dataset(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.lntd");
        d.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"LNTD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 5);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 24 + 5 * 3 * 8);
        assert_eq!(Dataset::load(&path, 2).unwrap(), d);

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_matrix_cache(&path).is_err());
    }
}
