//! Plateau learning-rate decay and early stopping on validation loss.

use serde::{Deserialize, Serialize};

/// Relative margin a validation loss must beat the best by.
pub const MIN_REL_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochAction {
    Continue,
    DecayLr,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    /// Stagnant epochs since the best; drives stopping.
    pub epochs_since_improve: usize,
    /// Stagnant epochs since the best or the last decay; drives decay.
    pub plateau_count: usize,
    pub epoch: usize,
    pub decay_factor: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
}

impl ScheduleState {
    pub fn new(decay_factor: f64, plateau_patience: usize, stop_patience: usize, max_epochs: usize) -> Self {
        Self {
            best_val_loss: None,
            best_epoch: 0,
            epochs_since_improve: 0,
            plateau_count: 0,
            epoch: 0,
            decay_factor,
            plateau_patience,
            stop_patience,
            max_epochs,
        }
    }

    pub fn is_improvement(&self, val_loss: f64) -> bool {
        match self.best_val_loss {
            None => true,
            Some(best) => val_loss < best && best - val_loss >= MIN_REL_IMPROVEMENT * best.abs(),
        }
    }

    /// Records one finished epoch (1-based numbering). Returns whether it
    /// was a new best and what to do next.
    pub fn end_of_epoch(&mut self, val_loss: f64) -> (bool, EpochAction) {
        self.epoch += 1;
        let improved = self.is_improvement(val_loss);
        let mut action = EpochAction::Continue;
        if improved {
            self.best_val_loss = Some(val_loss);
            self.best_epoch = self.epoch;
            self.epochs_since_improve = 0;
            self.plateau_count = 0;
        } else {
            self.epochs_since_improve += 1;
            self.plateau_count += 1;
            if self.epochs_since_improve >= self.stop_patience {
                action = EpochAction::Stop;
            } else if self.plateau_count >= self.plateau_patience {
                self.plateau_count = 0;
                action = EpochAction::DecayLr;
            }
        }
        if self.epoch >= self.max_epochs {
            action = EpochAction::Stop;
        }
        (improved, action)
    }
}

/// Actions for a whole validation-loss trace, stopping at the first `Stop`.
pub fn trace(losses: &[f64], state: &mut ScheduleState) -> Vec<EpochAction> {
    let mut out = Vec::new();
    for &l in losses {
        let (_, a) = state.end_of_epoch(l);
        out.push(a);
        if a == EpochAction::Stop {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use EpochAction::*;

    fn full_scale() -> ScheduleState {
        ScheduleState::new(0.8, 2, 6, 100)
    }

    #[test]
    fn monotone_improvement_continues() {
        assert_eq!(trace(&[1.0, 0.9, 0.8], &mut full_scale()), vec![Continue; 3]);
    }

    #[test]
    fn flat_losses_decay_after_third_epoch() {
        assert_eq!(trace(&[1.0, 1.0, 1.0], &mut full_scale()), vec![Continue, Continue, DecayLr]);
    }

    #[test]
    fn stop_six_after_best() {
        let mut s = full_scale();
        let actions = trace(&[1.0, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6], &mut s);
        assert_eq!(actions.len(), 8);
        assert_eq!(s.best_epoch, 2);
        assert_eq!(actions, vec![Continue, Continue, Continue, DecayLr, Continue, DecayLr, Continue, Stop]);
    }

    #[test]
    fn tiny_gains_are_stagnation() {
        let s = ScheduleState { best_val_loss: Some(1.0), ..full_scale() };
        assert!(!s.is_improvement(1.0 - 1e-9));
        assert!(s.is_improvement(1.0 - 1e-5));
    }

    #[test]
    fn max_epochs_caps() {
        let mut s = ScheduleState::new(0.8, 2, 6, 3);
        assert_eq!(trace(&[3.0, 2.0, 1.0, 0.5], &mut s), vec![Continue, Continue, Stop]);
    }
}
