//! A small trainable epsilon-predictor: a two-hidden-layer SiLU MLP over
//! `[x_t, time embedding, one-hot condition]`, trained by denoising score
//! matching with condition dropout.
//!
//! # Parameter file
//!
//! [`DenoiserNet::save`] writes, all integers and floats little-endian:
//!
//! | bytes            | content                                        |
//! |------------------|------------------------------------------------|
//! | 7                | ASCII `UDSNET1`                                |
//! | 4 x u64          | `dim`, `n_prompts`, `hidden`, `n_freqs`        |
//! | `n_freqs` x f64  | time-embedding frequencies                     |
//! | `n_params` x f64 | `W1, b1, W2, b2, W3, b3`, matrices row-major   |
//!
//! `W1` is `hidden x in_dim` with `in_dim = dim + 2 n_freqs + n_prompts + 1`,
//! `W2` is `hidden x hidden` and `W3` is `dim x hidden`.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Condition, Denoiser};
use crate::error::{check_dim, LabError, Result};
use crate::gmm::PromptRegistry;
use crate::optim::{Adam, AdamConfig};
use crate::schedule::NoiseSchedule;

const MAGIC: &[u8; 7] = b"UDSNET1";

/// Number of sinusoidal frequencies in the time embedding.
pub const TIME_FREQS: usize = 8;

fn silu(a: f64) -> f64 {
    a / (1.0 + (-a).exp())
}

fn silu_grad(a: f64) -> f64 {
    let s = 1.0 / (1.0 + (-a).exp());
    s + a * s * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    dim: usize,
    n_prompts: usize,
    hidden: usize,
    freqs: Vec<f64>,
    params: Vec<f64>,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    in_dim: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

struct Activations {
    input: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl DenoiserNet {
    /// Random hidden layers (`N(0, 1/fan_in)`) and a zero output layer.
    pub fn new<R: Rng + ?Sized>(dim: usize, n_prompts: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(LabError::InvalidConfig("network dimensions must be positive".into()));
        }
        let freqs = (0..TIME_FREQS)
            .map(|k| std::f64::consts::PI * 0.5 * 1.8f64.powi(k as i32))
            .collect();
        let mut net = Self {
            dim,
            n_prompts,
            hidden,
            freqs,
            params: Vec::new(),
        };
        let l = net.layout();
        net.params = vec![0.0; l.end];
        let fill = |p: &mut [f64], fan_in: usize, rng: &mut R| {
            let s = (1.0 / fan_in as f64).sqrt();
            p.iter_mut().for_each(|v| *v = s * rng.sample::<f64, _>(StandardNormal));
        };
        fill(&mut net.params[l.w1..l.b1], l.in_dim, rng);
        fill(&mut net.params[l.w2..l.b2], hidden, rng);
        Ok(net)
    }

    fn layout(&self) -> Layout {
        let in_dim = self.dim + 2 * self.freqs.len() + self.n_prompts + 1;
        let h = self.hidden;
        let w1 = 0;
        let b1 = w1 + h * in_dim;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + self.dim * h;
        Layout {
            in_dim,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + self.dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn cond_index(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Unconditional => Ok(self.n_prompts),
            Condition::Prompt(i) | Condition::NegativePrompt(i) if i < self.n_prompts => Ok(i),
            Condition::Prompt(i) | Condition::NegativePrompt(i) => Err(LabError::UnknownPrompt(i)),
        }
    }

    fn encode(&self, x_t: &[f64], t: usize, steps: usize, cond: Condition) -> Result<Vec<f64>> {
        check_dim(self.dim, x_t.len())?;
        let mut u = Vec::with_capacity(self.layout().in_dim);
        u.extend_from_slice(x_t);
        let tau = t as f64 / steps as f64;
        u.extend(self.freqs.iter().map(|f| (f * tau).sin()));
        u.extend(self.freqs.iter().map(|f| (f * tau).cos()));
        let c = self.cond_index(cond)?;
        u.extend((0..=self.n_prompts).map(|k| if k == c { 1.0 } else { 0.0 }));
        Ok(u)
    }

    fn forward(&self, input: Vec<f64>) -> Activations {
        let l = self.layout();
        let p = &self.params;
        let h = self.hidden;
        let affine = |w: usize, b: usize, rows: usize, x: &[f64]| -> Vec<f64> {
            let cols = x.len();
            (0..rows)
                .map(|r| {
                    let row = &p[w + r * cols..w + (r + 1) * cols];
                    p[b + r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        };
        let a1 = affine(l.w1, l.b1, h, &input);
        let h1: Vec<f64> = a1.iter().map(|&a| silu(a)).collect();
        let a2 = affine(l.w2, l.b2, h, &h1);
        let h2: Vec<f64> = a2.iter().map(|&a| silu(a)).collect();
        let out = affine(l.w3, l.b3, self.dim, &h2);
        Activations {
            input,
            a1,
            h1,
            a2,
            h2,
            out,
        }
    }

    /// Accumulates `d loss / d params` for the loss `scale * |out - target|^2`
    /// into `grad`.
    fn backward(&self, act: &Activations, target: &[f64], scale: f64, grad: &mut [f64]) {
        let l = self.layout();
        let p = &self.params;
        let h = self.hidden;
        let g_out: Vec<f64> = act.out.iter().zip(target).map(|(o, y)| 2.0 * scale * (o - y)).collect();
        let mut g_h2 = vec![0.0; h];
        for (r, &g) in g_out.iter().enumerate() {
            grad[l.b3 + r] += g;
            for k in 0..h {
                grad[l.w3 + r * h + k] += g * act.h2[k];
                g_h2[k] += p[l.w3 + r * h + k] * g;
            }
        }
        let g_a2: Vec<f64> = g_h2.iter().zip(&act.a2).map(|(g, &a)| g * silu_grad(a)).collect();
        let mut g_h1 = vec![0.0; h];
        for (r, &g) in g_a2.iter().enumerate() {
            grad[l.b2 + r] += g;
            for k in 0..h {
                grad[l.w2 + r * h + k] += g * act.h1[k];
                g_h1[k] += p[l.w2 + r * h + k] * g;
            }
        }
        let n_in = l.in_dim;
        for r in 0..h {
            let g = g_h1[r] * silu_grad(act.a1[r]);
            grad[l.b1 + r] += g;
            let row = &mut grad[l.w1 + r * n_in..l.w1 + (r + 1) * n_in];
            for (gw, u) in row.iter_mut().zip(&act.input) {
                *gw += g * u;
            }
        }
    }

    /// Mean squared-error loss over a batch of `(x_t, t, cond, eps)` and its
    /// exact parameter gradient.
    pub fn loss_and_grad(&self, batch: &[TrainingExample], steps: usize) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for ex in batch {
            check_dim(self.dim, ex.eps.len())?;
            let act = self.forward(self.encode(&ex.x_t, ex.t, steps, ex.cond)?);
            loss += scale * act.out.iter().zip(&ex.eps).map(|(o, e)| (o - e).powi(2)).sum::<f64>();
            self.backward(&act, &ex.eps, scale, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(MAGIC.len() + 32 + 8 * (self.freqs.len() + self.params.len()));
        buf.extend_from_slice(MAGIC);
        for n in [self.dim, self.n_prompts, self.hidden, self.freqs.len()] {
            buf.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for v in self.freqs.iter().chain(&self.params) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| LabError::Format(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| LabError::Format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| LabError::Format(msg.to_string());
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing UDSNET1 header"));
        }
        let mut pos = MAGIC.len();
        let mut next_u64 = || {
            let v = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            pos += 8;
            v as usize
        };
        let (dim, n_prompts, hidden, n_freqs) = (next_u64(), next_u64(), next_u64(), next_u64());
        if dim == 0 || hidden == 0 || n_freqs > 1024 || dim > 1 << 20 || hidden > 1 << 16 || n_prompts > 1 << 20 {
            return Err(bad("implausible network dimensions"));
        }
        let mut net = Self {
            dim,
            n_prompts,
            hidden,
            freqs: vec![0.0; n_freqs],
            params: Vec::new(),
        };
        let n_params = net.layout().end;
        let body = &bytes[MAGIC.len() + 32..];
        if body.len() != 8 * (n_freqs + n_params) {
            return Err(bad("parameter block has the wrong length"));
        }
        let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        net.freqs = vals.by_ref().take(n_freqs).collect();
        net.params = vals.collect();
        if !net.freqs.iter().chain(&net.params).all(|v| v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(net)
    }
}

impl Denoiser for DenoiserNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x_t: &[f64], t: usize, cond: Condition, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        sched.check_t(t, 0)?;
        let out = self.forward(self.encode(x_t, t, sched.steps(), cond)?).out;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(LabError::NonFinite("network output".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub cond: Condition,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the prompt by the unconditional token.
    pub cond_dropout: f64,
    /// Decay of the exponential moving average of the weights that replaces
    /// the raw weights at the end of training; 0 keeps the raw weights.
    pub ema: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 1e-3,
            cond_dropout: 0.1,
            ema: 0.999,
            seed: 0,
        }
    }
}

/// Trains `net` in place and returns the per-step mean batch loss.
pub fn train(
    net: &mut DenoiserNet,
    registry: &PromptRegistry,
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if registry.is_empty() {
        return Err(LabError::InvalidMixture("empty prompt registry".into()));
    }
    check_dim(net.dim, registry.dim())?;
    if net.n_prompts != registry.len() {
        return Err(LabError::InvalidConfig(format!(
            "network has {} prompt slots, registry has {}",
            net.n_prompts,
            registry.len()
        )));
    }
    if config.batch == 0 || !(0.0..=1.0).contains(&config.cond_dropout) || !(0.0..1.0).contains(&config.ema) {
        return Err(LabError::InvalidConfig(
            "batch must be positive, dropout in [0, 1] and ema in [0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let picker = WeightedIndex::new(registry.prior()).map_err(|e| LabError::InvalidMixture(e.to_string()))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        net.params.len(),
    );
    let mut trace = Vec::with_capacity(config.steps);
    let mut initial = None;
    let mut averaged = net.params.clone();
    for step in 0..config.steps {
        let batch: Vec<TrainingExample> = (0..config.batch)
            .map(|_| {
                let k = picker.sample(&mut rng);
                let x0 = registry.sample_x0(Condition::Prompt(k), &mut rng)?;
                let t = rng.random_range(1..=sched.steps());
                let eps: Vec<f64> = (0..net.dim).map(|_| rng.sample(StandardNormal)).collect();
                let x_t = sched.forward_noise(&x0, t, &eps)?;
                let cond = if rng.random::<f64>() < config.cond_dropout {
                    Condition::Unconditional
                } else {
                    Condition::Prompt(k)
                };
                Ok(TrainingExample { x_t, t, cond, eps })
            })
            .collect::<Result<_>>()?;
        let (loss, grad) = net.loss_and_grad(&batch, sched.steps())?;
        let first = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * first {
            return Err(LabError::TrainingDiverged {
                step,
                loss,
                initial: first,
            });
        }
        adam.step(&mut net.params, &grad)?;
        for (a, p) in averaged.iter_mut().zip(&net.params) {
            *a = config.ema * *a + (1.0 - config.ema) * p;
        }
        trace.push(loss);
    }
    if config.ema > 0.0 {
        net.params = averaged;
    }
    Ok(trace)
}

/// Points per coordinate of the evaluation grid in [`support_grid_rms`].
pub const GRID_POINTS: usize = 9;

/// Root-mean-square difference between two predictors over a grid that
/// follows the diffused data.
///
/// For every prompt and the unconditional branch, and every
/// `t = 25, 50, ..., T`, the grid is centred on `sqrt(abar_t)` times the
/// condition's mean with half-width two marginal standard deviations per
/// coordinate and [`GRID_POINTS`] points per coordinate.
pub fn support_grid_rms(
    model: &dyn Denoiser,
    reference: &dyn Denoiser,
    registry: &PromptRegistry,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let d = registry.dim();
    check_dim(d, model.dim())?;
    check_dim(d, reference.dim())?;
    let cells = (GRID_POINTS as u32)
        .checked_pow(d as u32)
        .filter(|&c| c <= 1_000_000)
        .ok_or_else(|| LabError::InvalidConfig(format!("grid too large for dimension {d}")))? as usize;
    let conds = (0..registry.len())
        .map(Condition::Prompt)
        .chain(std::iter::once(Condition::Unconditional));
    let (mut se, mut count) = (0.0, 0usize);
    for cond in conds {
        let mix = registry.resolve(cond)?;
        let mut mean = vec![0.0; d];
        for c in mix.components() {
            for i in 0..d {
                mean[i] += c.weight * c.mean[i];
            }
        }
        let mut var = vec![0.0; d];
        for c in mix.components() {
            for i in 0..d {
                var[i] += c.weight * (c.var[i] + (c.mean[i] - mean[i]).powi(2));
            }
        }
        for t in (25..=sched.steps()).step_by(25) {
            let a = sched.alpha_bar(t);
            let half = GRID_POINTS as f64 / 2.0 - 0.5;
            for cell in 0..cells {
                let mut rest = cell;
                let x: Vec<f64> = (0..d)
                    .map(|i| {
                        let k = rest % GRID_POINTS;
                        rest /= GRID_POINTS;
                        let sd = (a * var[i] + 1.0 - a).sqrt();
                        a.sqrt() * mean[i] + 2.0 * sd * (k as f64 / half - 1.0)
                    })
                    .collect();
                let p = model.predict(&x, t, cond, sched)?;
                let q = reference.predict(&x, t, cond, sched)?;
                se += p.iter().zip(&q).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
                count += d;
            }
        }
    }
    Ok((se / count as f64).sqrt())
}
