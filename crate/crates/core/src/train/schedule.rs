//! Validation-driven learning-rate decay and early stopping.

/// Reduce-on-plateau: after `patience` epochs without a strictly lower
/// validation loss the learning rate is multiplied by `factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
    pub patience: usize,
    pub factor: f64,
}

impl SchedulerState {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Self { best_val_loss: f64::INFINITY, epochs_since_improvement: 0, current_lr: lr, patience, factor }
    }

    /// Feeds one epoch's validation loss; returns the learning rate for the next epoch.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.current_lr *= self.factor;
                self.epochs_since_improvement = 0;
            }
        }
        self.current_lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping that keeps a snapshot of the best parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState<P> {
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_parameters: Option<P>,
    pub epochs_since_improvement: usize,
    pub stopped: bool,
    pub patience: usize,
}

impl<P: Clone> EarlyStopState<P> {
    pub fn new(patience: usize) -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            best_parameters: None,
            epochs_since_improvement: 0,
            stopped: false,
            patience,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64, params: &P) -> StopDecision {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.best_parameters = Some(params.clone());
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.stopped = true;
                return StopDecision::Stop;
            }
        }
        StopDecision::Continue
    }

    /// The best snapshot, if any epoch improved on the initial infinity.
    pub fn restore(&self) -> Option<&P> {
        self.best_parameters.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduler_never_decays_while_improving() {
        let mut s = SchedulerState::new(1e-4, 5, 0.5);
        for i in 0..20 {
            assert_eq!(s.update(1.0 - i as f64 * 0.01), 1e-4);
        }
    }

    #[test]
    fn scheduler_halves_on_fifth_stagnant_epoch() {
        let mut s = SchedulerState::new(1e-4, 5, 0.5);
        s.update(1.0);
        s.update(0.9);
        let lrs: Vec<f64> = [0.9, 0.95, 1.0, 0.91, 0.9].iter().map(|&l| s.update(l)).collect();
        assert_eq!(lrs, vec![1e-4, 1e-4, 1e-4, 1e-4, 5e-5]);
        for _ in 0..4 {
            assert_eq!(s.update(0.9), 5e-5);
        }
        assert_eq!(s.update(0.9), 2.5e-5);
    }

    #[test]
    fn early_stop_restores_best_epoch() {
        let mut e = EarlyStopState::new(10);
        let losses = [3.0, 2.0, 1.0];
        for (i, &l) in losses.iter().enumerate() {
            assert_eq!(e.update(i + 1, l, &(i + 1)), StopDecision::Continue);
        }
        for epoch in 4..13 {
            assert_eq!(e.update(epoch, 1.5, &epoch), StopDecision::Continue);
        }
        assert_eq!(e.update(13, 1.0, &13), StopDecision::Stop);
        assert!(e.stopped);
        assert_eq!(e.restore(), Some(&3));
        assert_eq!(e.best_epoch, Some(3));
    }

    #[test]
    fn early_stop_boundary_resets() {
        let mut e = EarlyStopState::new(10);
        e.update(1, 1.0, &());
        for epoch in 2..11 {
            assert_eq!(e.update(epoch, 2.0, &()), StopDecision::Continue);
        }
        assert_eq!(e.update(11, 0.5, &()), StopDecision::Continue);
        assert_eq!(e.epochs_since_improvement, 0);
    }
}
