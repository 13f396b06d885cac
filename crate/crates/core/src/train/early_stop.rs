//! Patience-based early stopping on validation loss.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopState {
    pub best_loss: f64,
    pub epochs_since_improve: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best_loss: f64::INFINITY,
            epochs_since_improve: 0,
            patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopDecision {
    pub state: EarlyStopState,
    pub should_checkpoint: bool,
    pub should_stop: bool,
}

/// Only a strictly lower loss counts as an improvement.
pub fn update_early_stop(state: EarlyStopState, val_loss: f64) -> EarlyStopDecision {
    let improved = val_loss < state.best_loss;
    let next = if improved {
        EarlyStopState {
            best_loss: val_loss,
            epochs_since_improve: 0,
            ..state
        }
    } else {
        EarlyStopState {
            epochs_since_improve: state.epochs_since_improve + 1,
            ..state
        }
    };
    EarlyStopDecision {
        state: next,
        should_checkpoint: improved,
        should_stop: next.epochs_since_improve >= next.patience,
    }
}

/// Outcome of feeding a whole loss sequence through the state machine.
#[derive(Debug, Clone, PartialEq)]
pub struct StopTrace {
    pub last_epoch: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// 1-based epochs at which a checkpoint would be written.
    pub checkpoints: Vec<usize>,
}

pub fn simulate(val_losses: &[f64], patience: usize, max_epochs: usize) -> StopTrace {
    let mut state = EarlyStopState::new(patience);
    let mut trace = StopTrace {
        last_epoch: 0,
        best_epoch: 0,
        stopped_early: false,
        checkpoints: Vec::new(),
    };
    for (i, &loss) in val_losses.iter().take(max_epochs).enumerate() {
        let epoch = i + 1;
        let d = update_early_stop(state, loss);
        state = d.state;
        trace.last_epoch = epoch;
        if d.should_checkpoint {
            trace.best_epoch = epoch;
            trace.checkpoints.push(epoch);
        }
        if d.should_stop {
            trace.stopped_early = true;
            break;
        }
    }
    trace
}
