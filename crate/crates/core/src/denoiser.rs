use crate::error::Result;
use crate::schedule::NoiseSchedule;

/// What a noise prediction is conditioned on.
///
/// `NegativePrompt(id)` resolves to the same distribution as `Prompt(id)`;
/// the tag only records the role the prompt plays in guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Unconditional,
    Prompt(usize),
    NegativePrompt(usize),
}

impl Condition {
    pub fn prompt_id(&self) -> Option<usize> {
        match *self {
            Condition::Unconditional => None,
            Condition::Prompt(id) | Condition::NegativePrompt(id) => Some(id),
        }
    }
}

/// A conditional noise predictor `eps(x_t, t, cond)`.
///
/// Both the analytic mixture oracle and the trained network implement this,
/// so every distiller is agnostic to where its predictions come from.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn predict(&self, x_t: &[f64], t: usize, cond: Condition, sched: &NoiseSchedule) -> Result<Vec<f64>>;
}

/// Returns the same vector for every query, with a per-condition offset so
/// conditional and unconditional branches still differ.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    pub unconditional: Vec<f64>,
    pub conditional: Vec<f64>,
}

impl Denoiser for ConstantDenoiser {
    fn dim(&self) -> usize {
        self.unconditional.len()
    }

    fn predict(&self, x_t: &[f64], _t: usize, cond: Condition, _sched: &NoiseSchedule) -> Result<Vec<f64>> {
        crate::error::check_dim(self.dim(), x_t.len())?;
        Ok(match cond {
            Condition::Unconditional => self.unconditional.clone(),
            _ => self.conditional.clone(),
        })
    }
}
