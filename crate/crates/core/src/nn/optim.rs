//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use super::encoder::ParamBuffers;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// One gradient buffer per parameter buffer, in [`ParamBuffers::buffers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    buffers: Vec<Tensor2D>,
}

impl GradientSet {
    pub fn zeros_like<P: ParamBuffers + ?Sized>(params: &P) -> Self {
        GradientSet {
            buffers: params
                .buffers()
                .into_iter()
                .map(|(_, t)| Tensor2D::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    /// Copies the buffers of a parameter-shaped gradient container.
    pub fn from_params<P: ParamBuffers + ?Sized>(grads: &P) -> Self {
        GradientSet {
            buffers: grads.buffers().into_iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    pub fn from_buffers(buffers: Vec<Tensor2D>) -> Self {
        GradientSet { buffers }
    }

    pub fn buffers(&self) -> &[Tensor2D] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor2D] {
        &mut self.buffers
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for b in &mut self.buffers {
            b.scale(factor);
        }
    }

    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        if !self.same_shapes(other.buffers.iter()) {
            return Err(Error::shape("accumulating incongruent gradient sets"));
        }
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn is_congruent<P: ParamBuffers + ?Sized>(&self, params: &P) -> bool {
        self.same_shapes(params.buffers().into_iter().map(|(_, t)| t))
    }

    fn same_shapes<'a>(&self, other: impl ExactSizeIterator<Item = &'a Tensor2D>) -> bool {
        other.len() == self.buffers.len()
            && self.buffers.iter().zip(other).all(|(a, b)| a.shape() == b.shape())
    }

    /// All entries concatenated in buffer order.
    pub fn flatten(&self) -> Vec<f32> {
        self.buffers.iter().flat_map(|b| b.data().iter().copied()).collect()
    }
}

/// Learning-rate multiplier as a function of the step counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Rises linearly from 0 over `warmup_fraction` of `total_steps`, then
    /// decays linearly to 0 at `total_steps`.
    WarmupLinearDecay { warmup_fraction: f32, total_steps: u64 },
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> u64 {
        match *self {
            LrSchedule::Constant => 0,
            LrSchedule::WarmupLinearDecay {
                warmup_fraction,
                total_steps,
            } => {
                // Go through the shortest decimal form so 0.1 × 50 is 5, not 6.
                let frac: f64 = warmup_fraction.to_string().parse().unwrap_or(0.0);
                ((frac * total_steps as f64) - 1e-9).ceil().max(0.0) as u64
            }
        }
    }

    pub fn factor(&self, step: u64) -> f32 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupLinearDecay { total_steps, .. } => {
                let warmup = self.warmup_steps();
                if step < warmup {
                    step as f32 / warmup as f32
                } else if total_steps > warmup {
                    (total_steps.saturating_sub(step)) as f32 / (total_steps - warmup) as f32
                } else {
                    0.0
                }
            }
        }
    }

    fn total_steps(&self) -> Option<u64> {
        match *self {
            LrSchedule::Constant => None,
            LrSchedule::WarmupLinearDecay { total_steps, .. } => Some(total_steps),
        }
    }
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<Tensor2D>,
    second_moment: Vec<Tensor2D>,
    step: u64,
    pub base_lr: f32,
    pub weight_decay: f32,
    pub schedule: LrSchedule,
}

impl OptimizerState {
    pub fn new<P: ParamBuffers + ?Sized>(
        params: &P,
        base_lr: f32,
        weight_decay: f32,
        schedule: LrSchedule,
    ) -> Self {
        let zeros = GradientSet::zeros_like(params).buffers;
        OptimizerState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            base_lr,
            weight_decay,
            schedule,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn effective_lr(&self) -> f32 {
        self.base_lr * self.schedule.factor(self.step)
    }
}

/// One AdamW update (bias-corrected moments, decoupled decay).
pub fn adamw_step<P: ParamBuffers + ?Sized>(
    params: &mut P,
    grads: &GradientSet,
    state: &mut OptimizerState,
) -> Result<()> {
    if !grads.is_congruent(params) {
        return Err(Error::shape("gradients do not match parameter shapes"));
    }
    if state.first_moment.len() != grads.buffers.len()
        || state
            .first_moment
            .iter()
            .zip(&grads.buffers)
            .any(|(m, g)| m.shape() != g.shape())
    {
        return Err(Error::shape("optimizer moments do not match parameter shapes"));
    }
    if let Some(total) = state.schedule.total_steps() {
        if state.step >= total {
            return Err(Error::State(format!(
                "step {} beyond schedule of {total} steps",
                state.step
            )));
        }
    }
    let lr = state.effective_lr();
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * state.weight_decay;
    for (((p, g), m), v) in params
        .buffers_mut()
        .into_iter()
        .zip(&grads.buffers)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    state.step += 1;
    Ok(())
}
