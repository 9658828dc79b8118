/// What the plateau policy did with one epoch's AUC.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Reduced,
    /// Patience ran out. The learning rate was reduced on this epoch too.
    Stop,
}

/// Reduce-on-plateau state driven by the test AUC.
#[derive(Clone, Debug, PartialEq)]
pub struct LrPolicyState {
    pub current_lr: f64,
    pub best_auc: f64,
    pub epochs_since_improvement: usize,
    pub reduction_factor: f64,
    pub patience: usize,
}

impl LrPolicyState {
    pub const DEFAULT_FACTOR: f64 = 0.2;
    pub const DEFAULT_PATIENCE: usize = 10;

    /// Fresh state: nothing seen yet, so the best AUC starts at 0.
    pub fn new(initial_lr: f64) -> Self {
        Self::with(initial_lr, Self::DEFAULT_FACTOR, Self::DEFAULT_PATIENCE)
    }

    pub fn with(initial_lr: f64, reduction_factor: f64, patience: usize) -> Self {
        Self {
            current_lr: initial_lr,
            best_auc: 0.0,
            epochs_since_improvement: 0,
            reduction_factor,
            patience: patience.max(1),
        }
    }
}

/// One step of the plateau policy. An epoch improves only if its AUC is
/// strictly above the best seen so far; NaN never improves. Every other
/// epoch multiplies the learning rate by `reduction_factor`, and the one that
/// brings the counter to `patience` also ends training.
pub fn lr_update(state: &LrPolicyState, auc: f64) -> (LrPolicyState, Decision) {
    let mut next = state.clone();
    if auc > state.best_auc {
        next.best_auc = auc;
        next.epochs_since_improvement = 0;
        return (next, Decision::Continue);
    }
    if auc.is_nan() {
        log::warn!("AUC undefined this epoch, counted as no improvement");
    }
    next.current_lr *= state.reduction_factor;
    next.epochs_since_improvement += 1;
    if next.epochs_since_improvement >= state.patience {
        (next, Decision::Stop)
    } else {
        (next, Decision::Reduced)
    }
}

/// Replays `aucs` from a fresh state and lists every event, a final
/// [`Decision::Stop`] appearing as the reduction it performs followed by the
/// stop itself. Input after the stop is ignored.
pub fn decision_trace(initial: &LrPolicyState, aucs: &[f64]) -> (LrPolicyState, Vec<Decision>) {
    let mut state = initial.clone();
    let mut events = Vec::with_capacity(aucs.len() + 1);
    for &auc in aucs {
        let (next, d) = lr_update(&state, auc);
        state = next;
        if d == Decision::Stop {
            events.push(Decision::Reduced);
            events.push(Decision::Stop);
            break;
        }
        events.push(d);
    }
    (state, events)
}
