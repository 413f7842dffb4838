//! Distillation deltas with an explicit term decomposition.
//!
//! Every method returns [`DeltaTerms`]: the pre-weighting identity,
//! reconstruction and classifier parts, plus the weighted `total` that is
//! chained through the generator. For all methods except PDS the total is
//! assembled from the parts; for PDS the total is the stochastic-latent
//! difference itself and the parts are its coefficient decomposition.

use std::fmt;
use std::str::FromStr;

use crate::denoiser::{Condition, Denoiser};
use crate::error::{check_dim, LabError, Result};
use crate::latent::{self, NoisingMode, X0ApproxMode};
use crate::schedule::NoiseSchedule;
use crate::vecops::{self, sub};

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTerms {
    pub recon: Vec<f64>,
    pub cls: Vec<f64>,
    pub identity: Vec<f64>,
    pub total: Vec<f64>,
    pub w: f64,
    pub omega_t: f64,
}

impl DeltaTerms {
    /// `omega_t * (identity + recon + w * cls)`, recomputed from the parts.
    pub fn reassembled(&self) -> Vec<f64> {
        (0..self.total.len())
            .map(|i| self.omega_t * (self.identity[i] + self.recon[i] + self.w * self.cls[i]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Sds,
    Dds,
    Pds,
    Ism,
    UdsEdit,
    UdsGen,
    UdsGenNeg,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sds,
        Method::Dds,
        Method::Pds,
        Method::Ism,
        Method::UdsEdit,
        Method::UdsGen,
        Method::UdsGenNeg,
    ];

    pub fn is_editing(self) -> bool {
        matches!(self, Method::Dds | Method::Pds | Method::UdsEdit)
    }

    /// Methods that compare `t` against `t - c`.
    pub fn uses_interval(self) -> bool {
        matches!(self, Method::Ism | Method::UdsGen | Method::UdsGenNeg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sds => "SDS",
            Method::Dds => "DDS",
            Method::Pds => "PDS",
            Method::Ism => "ISM",
            Method::UdsEdit => "UDS_EDIT",
            Method::UdsGen => "UDS_GEN",
            Method::UdsGenNeg => "UDS_GEN_NEG",
        }
    }

    /// Guidance weight used when none is configured: 100 for the
    /// noise-space baselines, 7.5 for the interval and UDS methods.
    pub fn default_cfg_weight(self) -> f64 {
        match self {
            Method::Sds | Method::Dds | Method::Pds => 100.0,
            _ => 7.5,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LabError::InvalidConfig(format!("unknown method '{s}'")))
    }
}

/// Timestep weight applied to the whole delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Omega {
    #[default]
    Constant1,
    OneMinusAlphaBar,
}

impl Omega {
    pub fn at(self, t: usize, sched: &NoiseSchedule) -> f64 {
        match self {
            Omega::Constant1 => 1.0,
            Omega::OneMinusAlphaBar => 1.0 - sched.alpha_bar(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillerConfig {
    pub method: Method,
    pub w: f64,
    pub interval: usize,
    pub x0_mode: X0ApproxMode,
    pub noising: NoisingMode,
    pub t_min: usize,
    pub t_max: usize,
    pub omega: Omega,
    /// Flips the sign of the classifier difference in `UDS_EDIT`. Exists
    /// only so the verification suite can prove it catches a mutation.
    #[doc(hidden)]
    pub inject_sign_fault: bool,
}

impl DistillerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            w: method.default_cfg_weight(),
            interval: 50,
            x0_mode: match method {
                Method::UdsEdit => X0ApproxMode::DdimMultiStep(4),
                _ => X0ApproxMode::TweedieSingleStep,
            },
            noising: NoisingMode::ForwardProcess,
            t_min: 20,
            t_max: 1000,
            omega: Omega::Constant1,
            inject_sign_fault: false,
        }
    }

    pub fn with_w(mut self, w: f64) -> Self {
        self.w = w;
        self
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return bad(format!("cfg weight must be finite and >= 0, got {}", self.w));
        }
        if self.t_min < 1 || self.t_max > sched.steps() || self.t_min > self.t_max {
            return bad(format!(
                "timestep bounds [{}, {}] invalid for T={}",
                self.t_min,
                self.t_max,
                sched.steps()
            ));
        }
        if self.method.uses_interval() {
            if self.interval < 1 {
                return bad("interval c must be at least 1".into());
            }
            if self.t_max <= self.interval {
                return bad(format!(
                    "t_max={} leaves no room for interval c={}",
                    self.t_max, self.interval
                ));
            }
        }
        if self.method == Method::Pds && self.t_max < 2 {
            return bad("PDS needs t_max >= 2".into());
        }
        if let X0ApproxMode::DdimMultiStep(0) = self.x0_mode {
            return bad("DdimMultiStep needs at least one step".into());
        }
        if let NoisingMode::DdimInverse(0) = self.noising {
            return bad("DdimInverse needs at least one step".into());
        }
        Ok(())
    }

    /// Smallest timestep this method can be evaluated at.
    pub fn effective_t_min(&self) -> usize {
        let floor = match self.method {
            m if m.uses_interval() => self.interval + 1,
            Method::Pds => 2,
            _ => 1,
        };
        self.t_min.max(floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptPair {
    pub src: Option<Condition>,
    pub tgt: Condition,
    pub neg: Option<Condition>,
}

impl PromptPair {
    pub fn generation(tgt: Condition) -> Self {
        Self {
            src: None,
            tgt,
            neg: None,
        }
    }

    pub fn editing(src: Condition, tgt: Condition) -> Self {
        Self {
            src: Some(src),
            tgt,
            neg: None,
        }
    }

    fn src(&self) -> Result<Condition> {
        self.src.ok_or(LabError::MissingCondition("source prompt"))
    }
}

/// Per-step inputs: the current render, the source render for editing,
/// the sampled timestep and the shared noise.
#[derive(Debug, Clone, Copy)]
pub struct DeltaInputs<'a> {
    pub x0: &'a [f64],
    pub x0_src: Option<&'a [f64]>,
    pub t: usize,
    pub eps: &'a [f64],
}

impl<'a> DeltaInputs<'a> {
    fn src(&self) -> Result<&'a [f64]> {
        self.x0_src.ok_or(LabError::MissingCondition("source render"))
    }
}

struct Ctx<'a> {
    den: &'a dyn Denoiser,
    sched: &'a NoiseSchedule,
}

impl Ctx<'_> {
    fn eps(&self, x: &[f64], t: usize, c: Condition) -> Result<Vec<f64>> {
        self.den.predict(x, t, c, self.sched)
    }

    fn noised(&self, x0: &[f64], t: usize, eps: &[f64], mode: NoisingMode) -> Result<Vec<f64>> {
        latent::noise_to(x0, t, eps, mode, self.den, self.sched)
    }
}

fn assemble(identity: Vec<f64>, recon: Vec<f64>, cls: Vec<f64>, w: f64, omega_t: f64) -> DeltaTerms {
    let total = (0..cls.len())
        .map(|i| omega_t * (identity[i] + recon[i] + w * cls[i]))
        .collect();
    DeltaTerms {
        recon,
        cls,
        identity,
        total,
        w,
        omega_t,
    }
}

/// Which slot a UDS clean-sample difference is stored in.
#[derive(Clone, Copy)]
enum X0Slot {
    Identity,
    Recon,
}

/// The single assembly path for `dx0 + w * dcls`, shared by the editing and
/// generation forms of UDS.
fn assemble_uds(dx0: Vec<f64>, slot: X0Slot, dcls: Vec<f64>, w: f64, omega_t: f64) -> DeltaTerms {
    let zero = vecops::zeros(dx0.len());
    match slot {
        X0Slot::Identity => assemble(dx0, zero, dcls, w, omega_t),
        X0Slot::Recon => assemble(zero, dx0, dcls, w, omega_t),
    }
}

fn check_inputs(inp: &DeltaInputs, den: &dyn Denoiser, sched: &NoiseSchedule) -> Result<()> {
    check_dim(den.dim(), inp.x0.len())?;
    check_dim(den.dim(), inp.eps.len())?;
    if let Some(src) = inp.x0_src {
        check_dim(den.dim(), src.len())?;
    }
    sched.check_t(inp.t, 1)
}

fn interval_step(inp: &DeltaInputs, cfg: &DistillerConfig) -> Result<usize> {
    if cfg.interval == 0 || inp.t <= cfg.interval {
        return Err(LabError::InvalidConfig(format!(
            "t - c must be >= 1, got t={} c={}",
            inp.t, cfg.interval
        )));
    }
    Ok(inp.t - cfg.interval)
}

/// Score distillation: `recon = eps(x_t, none) - eps`, `cls = eps(x_t, y) - eps(x_t, none)`.
pub fn delta_sds(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    check_inputs(inp, den, sched)?;
    let ctx = Ctx { den, sched };
    let x_t = ctx.noised(inp.x0, inp.t, inp.eps, cfg.noising)?;
    let eu = ctx.eps(&x_t, inp.t, Condition::Unconditional)?;
    let ey = ctx.eps(&x_t, inp.t, prompts.tgt)?;
    Ok(assemble(
        vecops::zeros(eu.len()),
        sub(&eu, inp.eps),
        sub(&ey, &eu),
        cfg.w,
        cfg.omega.at(inp.t, sched),
    ))
}

/// Delta denoising score: unconditional and classifier differences between
/// target and source latents that share the same noise.
pub fn delta_dds(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    check_inputs(inp, den, sched)?;
    let (x0_src, y_src) = (inp.src()?, prompts.src()?);
    let ctx = Ctx { den, sched };
    let t = inp.t;
    let xt_tgt = ctx.noised(inp.x0, t, inp.eps, cfg.noising)?;
    let xt_src = ctx.noised(x0_src, t, inp.eps, cfg.noising)?;
    let eu_tgt = ctx.eps(&xt_tgt, t, Condition::Unconditional)?;
    let eu_src = ctx.eps(&xt_src, t, Condition::Unconditional)?;
    let cls_tgt = sub(&ctx.eps(&xt_tgt, t, prompts.tgt)?, &eu_tgt);
    let cls_src = sub(&ctx.eps(&xt_src, t, y_src)?, &eu_src);
    Ok(assemble(
        vecops::zeros(eu_tgt.len()),
        sub(&eu_tgt, &eu_src),
        sub(&cls_tgt, &cls_src),
        cfg.w,
        cfg.omega.at(t, sched),
    ))
}

/// Identity and noise-difference coefficients of the PDS latent difference.
///
/// Substituting the forward process and the Tweedie estimate into the
/// stochastic latent gives
/// `z_tgt - z_src = c0 (x0_tgt - x0_src) + c1 (eps_tgt - eps_src)` with
/// `c0 = (sqrt(abar_{t-1}) - psi sqrt(abar_t) - d) / sigma` and
/// `c1 = d sqrt(1 - abar_t) / (sqrt(abar_t) sigma)`, where `d`, `psi` are the
/// posterior-mean weights on `x0` and `x_t`.
pub fn pds_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    let pc = sched.posterior_coeffs(t)?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let c0 = (ab_prev.sqrt() - pc.xt_coeff * ab.sqrt() - pc.x0_coeff) / pc.sigma;
    let c1 = pc.x0_coeff * (1.0 - ab).sqrt() / (ab.sqrt() * pc.sigma);
    Ok((c0, c1))
}

/// Posterior distillation: the total is `omega * (z_tgt - z_src)` computed
/// from the stochastic latents; the parts hold the coefficient split
/// `identity = c0 dx0`, `recon = c1 d eps_none`, `cls = c1 d cls`.
pub fn delta_pds(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    check_inputs(inp, den, sched)?;
    sched.check_t(inp.t, 2)?;
    let (x0_src, y_src) = (inp.src()?, prompts.src()?);
    let t = inp.t;
    let z_tgt = latent::stochastic_latent(inp.x0, t, inp.eps, den, prompts.tgt, cfg.w, sched)?;
    let z_src = latent::stochastic_latent(x0_src, t, inp.eps, den, y_src, cfg.w, sched)?;

    let ctx = Ctx { den, sched };
    let xt_tgt = sched.forward_noise(inp.x0, t, inp.eps)?;
    let xt_src = sched.forward_noise(x0_src, t, inp.eps)?;
    let eu_tgt = ctx.eps(&xt_tgt, t, Condition::Unconditional)?;
    let eu_src = ctx.eps(&xt_src, t, Condition::Unconditional)?;
    let cls_tgt = sub(&ctx.eps(&xt_tgt, t, prompts.tgt)?, &eu_tgt);
    let cls_src = sub(&ctx.eps(&xt_src, t, y_src)?, &eu_src);
    let (c0, c1) = pds_coefficients(t, sched)?;

    let omega_t = cfg.omega.at(t, sched);
    Ok(DeltaTerms {
        identity: vecops::scale(&sub(inp.x0, x0_src), c0),
        recon: vecops::scale(&sub(&eu_tgt, &eu_src), c1),
        cls: vecops::scale(&sub(&cls_tgt, &cls_src), c1),
        total: vecops::scale(&sub(&z_tgt, &z_src), omega_t),
        w: cfg.w,
        omega_t,
    })
}

/// Interval score matching: `recon = eps(x_t, t, none) - eps(x_{t-c}, t-c, none)`.
pub fn delta_ism(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    check_inputs(inp, den, sched)?;
    let s = interval_step(inp, cfg)?;
    let ctx = Ctx { den, sched };
    let t = inp.t;
    let x_t = ctx.noised(inp.x0, t, inp.eps, cfg.noising)?;
    let x_s = ctx.noised(inp.x0, s, inp.eps, cfg.noising)?;
    let eu_t = ctx.eps(&x_t, t, Condition::Unconditional)?;
    let eu_s = ctx.eps(&x_s, s, Condition::Unconditional)?;
    let ey = ctx.eps(&x_t, t, prompts.tgt)?;
    Ok(assemble(
        vecops::zeros(eu_t.len()),
        sub(&eu_t, &eu_s),
        sub(&ey, &eu_t),
        cfg.w,
        cfg.omega.at(t, sched),
    ))
}

/// UDS editing: `x0_hat_tgt - x0_hat_src + w (cls_tgt - cls_src)` with both
/// clean estimates from unconditional predictions.
pub fn delta_uds_edit(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    check_inputs(inp, den, sched)?;
    let (x0_src, y_src) = (inp.src()?, prompts.src()?);
    let ctx = Ctx { den, sched };
    let t = inp.t;
    let xt_tgt = ctx.noised(inp.x0, t, inp.eps, cfg.noising)?;
    let xt_src = ctx.noised(x0_src, t, inp.eps, cfg.noising)?;
    let eu_tgt = ctx.eps(&xt_tgt, t, Condition::Unconditional)?;
    let eu_src = ctx.eps(&xt_src, t, Condition::Unconditional)?;
    let x0h_tgt = latent::estimate_x0(&xt_tgt, t, &eu_tgt, cfg.x0_mode, den, Condition::Unconditional, sched)?;
    let x0h_src = latent::estimate_x0(&xt_src, t, &eu_src, cfg.x0_mode, den, Condition::Unconditional, sched)?;
    let cls_tgt = sub(&ctx.eps(&xt_tgt, t, prompts.tgt)?, &eu_tgt);
    let cls_src = sub(&ctx.eps(&xt_src, t, y_src)?, &eu_src);
    let mut dcls = sub(&cls_tgt, &cls_src);
    if cfg.inject_sign_fault {
        dcls.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(assemble_uds(
        sub(&x0h_tgt, &x0h_src),
        X0Slot::Identity,
        dcls,
        cfg.w,
        cfg.omega.at(t, sched),
    ))
}

fn uds_gen_common(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    guide_neg: Condition,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    check_inputs(inp, den, sched)?;
    let s = interval_step(inp, cfg)?;
    let ctx = Ctx { den, sched };
    let t = inp.t;
    let x_t = ctx.noised(inp.x0, t, inp.eps, cfg.noising)?;
    let x_s = ctx.noised(inp.x0, s, inp.eps, cfg.noising)?;
    let eu_t = ctx.eps(&x_t, t, Condition::Unconditional)?;
    let eu_s = ctx.eps(&x_s, s, Condition::Unconditional)?;
    let x0h_t = latent::estimate_x0(&x_t, t, &eu_t, cfg.x0_mode, den, Condition::Unconditional, sched)?;
    let x0h_s = latent::estimate_x0(&x_s, s, &eu_s, cfg.x0_mode, den, Condition::Unconditional, sched)?;
    let ey = ctx.eps(&x_t, t, prompts.tgt)?;
    let e_neg = match guide_neg {
        Condition::Unconditional => eu_t,
        c => ctx.eps(&x_t, t, c)?,
    };
    Ok(assemble_uds(
        sub(&x0h_t, &x0h_s),
        X0Slot::Recon,
        sub(&ey, &e_neg),
        cfg.w,
        cfg.omega.at(t, sched),
    ))
}

/// UDS generation: `x0_hat(t) - x0_hat(t - c) + w cls`, both estimates from
/// the same render and noise with unconditional predictions.
pub fn delta_uds_gen(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    uds_gen_common(inp, den, Condition::Unconditional, prompts, cfg, sched)
}

/// UDS generation with a negative prompt: the classifier term becomes
/// `eps(x_t, y) - eps(x_t, y_neg)`.
pub fn delta_uds_gen_neg(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    let neg = prompts.neg.ok_or(LabError::MissingCondition("negative prompt"))?;
    uds_gen_common(inp, den, neg, prompts, cfg, sched)
}

/// Dispatches on `cfg.method`.
pub fn compute_delta(
    inp: &DeltaInputs,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<DeltaTerms> {
    let f = match cfg.method {
        Method::Sds => delta_sds,
        Method::Dds => delta_dds,
        Method::Pds => delta_pds,
        Method::Ism => delta_ism,
        Method::UdsEdit => delta_uds_edit,
        Method::UdsGen => delta_uds_gen,
        Method::UdsGenNeg => delta_uds_gen_neg,
    };
    f(inp, den, prompts, cfg, sched)
}
