//! Parameter update rules (SGD with momentum, ADAM) and the two-phase
//! learning-rate schedule used by the training loops.

use crate::nn::ShapeError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgdm { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer with per-parameter moment buffers, zero-initialized on first use.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    pub step_count: u64,
    moments1: Vec<Tensor>,
    moments2: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgdm(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimKind::Sgdm { momentum },
            lr,
            step_count: 0,
            moments1: Vec::new(),
            moments2: Vec::new(),
        }
    }

    /// ADAM with the usual constants beta1=0.9, beta2=0.999, eps=1e-8.
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            step_count: 0,
            moments1: Vec::new(),
            moments2: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn ensure_buffers(&mut self, params: &[&mut Tensor]) {
        if self.moments1.is_empty() {
            self.moments1 = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if matches!(self.kind, OptimKind::Adam { .. }) {
                self.moments2 = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            }
        }
    }

    /// One update over the full parameter list; `grads[i]` must be congruent
    /// with `params[i]` and the list order must not change between steps.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), ShapeError> {
        if params.len() != grads.len() {
            return Err(ShapeError::InvalidGeometry(format!(
                "{} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(ShapeError::TensorMismatch {
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.ensure_buffers(params);
        self.step_count += 1;
        let lr = self.lr;
        match self.kind {
            OptimKind::Sgdm { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads.iter()).zip(self.moments1.iter_mut()) {
                    let pd = p.data_mut();
                    let md = m.data_mut();
                    for ((pv, &gv), mv) in pd.iter_mut().zip(g.data().iter()).zip(md.iter_mut()) {
                        *mv = momentum * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.moments1.iter_mut())
                    .zip(self.moments2.iter_mut())
                {
                    let pd = p.data_mut();
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    for i in 0..pd.len() {
                        let gv = g.data()[i];
                        md[i] = beta1 * md[i] + (1.0 - beta1) * gv;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gv * gv;
                        let mhat = md[i] / bc1;
                        let vhat = vd[i] / bc2;
                        pd[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fine-tuning phase parameters: batch doubles and LR halves every period
/// while the test metric keeps improving.
#[derive(Debug, Clone)]
pub struct FinetuneSchedule {
    pub start_lr: f64,
    pub batch_doubling_period_epochs: usize,
    pub lr_halving_period_epochs: usize,
    pub stop_when_no_improvement: bool,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self {
            start_lr: 1e-5,
            batch_doubling_period_epochs: 10,
            lr_halving_period_epochs: 10,
            stop_when_no_improvement: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_period_epochs: usize,
    pub minibatch_size: usize,
    pub shuffle_each_epoch: bool,
    pub finetune: Option<FinetuneSchedule>,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.epochs < 1 || self.minibatch_size < 1 {
            return Err(ShapeError::InvalidGeometry(
                "epochs and minibatch_size must be >= 1".into(),
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(ShapeError::InvalidGeometry(
                "lr_drop_factor must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Main,
    Finetune,
}

/// Learning rate at a zero-based epoch. The main phase drops by
/// `lr_drop_factor` every `lr_drop_period_epochs`; fine-tuning halves the
/// start LR every `lr_halving_period_epochs`.
pub fn schedule_lr(schedule: &TrainSchedule, epoch: usize, phase: Phase) -> f64 {
    match phase {
        Phase::Main => {
            let k = (epoch / schedule.lr_drop_period_epochs) as i32;
            schedule.initial_lr * schedule.lr_drop_factor.powi(k)
        }
        Phase::Finetune => {
            let ft = schedule.finetune.clone().unwrap_or_default();
            let k = (epoch / ft.lr_halving_period_epochs) as i32;
            ft.start_lr * 0.5f64.powi(k)
        }
    }
}

/// Fine-tuning batch size at a zero-based epoch: base * 2^(epoch / period).
pub fn finetune_batch_size(schedule: &TrainSchedule, base: usize, epoch: usize) -> usize {
    let ft = schedule.finetune.clone().unwrap_or_default();
    base * (1usize << (epoch / ft.batch_doubling_period_epochs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar(1.5);
        let g = scalar(0.0);
        let mut opt = Optimizer::sgdm(0.1, 0.9);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data()[0], 1.5);
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let mut p = scalar(1.0);
        let g = scalar(2.0);
        let mut opt = Optimizer::sgdm(0.1, 0.0);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_follow_hand_unrolled_recurrence() {
        // v1 = 1, delta1 = -0.1; v2 = 0.9 + 1 = 1.9, delta2 = -0.19
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut opt = Optimizer::sgdm(0.1, 0.9);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_unit_scaled_update() {
        // With bias correction the first step is -lr * g/|g| for any g.
        let mut p = scalar(0.0);
        let g = scalar(3.0);
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar(0.0);
        let g = Tensor::zeros(&[2]);
        let mut opt = Optimizer::sgdm(0.1, 0.9);
        assert!(opt.step(&mut [&mut p], &[&g]).is_err());
    }

    fn classifier_schedule() -> TrainSchedule {
        TrainSchedule {
            epochs: 10,
            initial_lr: 2.5e-2,
            lr_drop_factor: 0.5,
            lr_drop_period_epochs: 2,
            minibatch_size: 120,
            shuffle_each_epoch: true,
            finetune: Some(FinetuneSchedule::default()),
        }
    }

    #[test]
    fn main_phase_halves_every_two_epochs() {
        let s = classifier_schedule();
        assert!((schedule_lr(&s, 0, Phase::Main) - 2.5e-2).abs() < 1e-15);
        assert!((schedule_lr(&s, 1, Phase::Main) - 2.5e-2).abs() < 1e-15);
        assert!((schedule_lr(&s, 2, Phase::Main) - 1.25e-2).abs() < 1e-15);
        assert!((schedule_lr(&s, 4, Phase::Main) - 6.25e-3).abs() < 1e-15);
    }

    #[test]
    fn finetune_halves_lr_and_doubles_batch_every_ten_epochs() {
        let s = classifier_schedule();
        assert!((schedule_lr(&s, 0, Phase::Finetune) - 1e-5).abs() < 1e-18);
        assert!((schedule_lr(&s, 10, Phase::Finetune) - 5e-6).abs() < 1e-18);
        assert_eq!(finetune_batch_size(&s, 120, 0), 120);
        assert_eq!(finetune_batch_size(&s, 120, 10), 240);
    }

    #[test]
    fn unit_drop_factor_keeps_lr_constant() {
        let mut s = classifier_schedule();
        s.lr_drop_factor = 1.0;
        for e in 0..20 {
            assert_eq!(schedule_lr(&s, e, Phase::Main), 2.5e-2);
        }
    }
}
