use super::params::ParamStore;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const PEAK_LR: f64 = 5e-5;
pub const WARMUP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState { beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// gradient buffer. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    for p in store.iter().filter(|p| p.trainable) {
        if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad} in parameter {}", p.name)));
        }
    }
    if state.m.len() != store.len() {
        state.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((x, &g), (mi, vi)) in p.value.data.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `peak`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(total_steps: u64) -> Result<Self> {
        Self::with_peak(PEAK_LR, total_steps)
    }

    pub fn with_peak(peak: f64, total_steps: u64) -> Result<Self> {
        let warmup_steps = (WARMUP_FRACTION * total_steps as f64).floor() as u64;
        Self::custom(peak, total_steps, warmup_steps)
    }

    pub fn custom(peak: f64, total_steps: u64, warmup_steps: u64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
            )));
        }
        if !(peak.is_finite() && peak >= 0.0) {
            return Err(Error::Config(format!("peak learning rate {peak} invalid")));
        }
        Ok(LrSchedule { peak, total_steps, warmup_steps })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Invalid(format!("step {step} beyond schedule of {} steps", self.total_steps)));
        }
        Ok(if step < self.warmup_steps {
            self.peak * (step as f64 / self.warmup_steps as f64)
        } else {
            self.peak * ((self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[1], vec![x]).unwrap(), true);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let id = s.id("p").unwrap();
        s.get_mut(id).grad[0] = 2.0;
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, 1e-3).unwrap();
        assert!((s.get(id).value.data[0] + 1e-3).abs() < 1e-10);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_and_zero_lr_leave_params() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new();
        adam_step(&mut s, &mut st, 1e-3).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data[0], 0.7);
        assert_eq!(st.t, 1);
        s.get_mut(s.id("p").unwrap()).grad[0] = 5.0;
        adam_step(&mut s, &mut st, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data[0], 0.7);
    }

    #[test]
    fn scalar_oracle_ten_steps() {
        // Independent scalar Adam on f(p) = p^2.
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let lr = 0.01;
        for t in 1..=10 {
            let g = 2.0 * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let mut s = scalar_store(1.0);
        let id = s.id("p").unwrap();
        let mut st = AdamState::new();
        for _ in 0..10 {
            let x = s.get(id).value.data[0];
            s.get_mut(id).grad[0] = 2.0 * x;
            adam_step(&mut s, &mut st, lr).unwrap();
        }
        assert!((s.get(id).value.data[0] - p).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut s = scalar_store(1.0);
        s.get_mut(s.id("p").unwrap()).grad[0] = f64::NAN;
        let e = adam_step(&mut s, &mut AdamState::new(), 1e-3).unwrap_err();
        assert!(e.to_string().contains("p"));
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(8100).unwrap();
        assert_eq!(s.warmup_steps, 810);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(810).unwrap(), 5e-5);
        assert_eq!(s.lr_at(8100).unwrap(), 0.0);
        assert!(s.lr_at(8101).is_err());
        let max = (0..=8100).map(|k| s.lr_at(k).unwrap()).fold(0.0, f64::max);
        assert_eq!(max, 5e-5);
        assert!(LrSchedule::custom(1e-3, 10, 10).is_err());
    }
}
