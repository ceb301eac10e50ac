//! Epoch layout of staged sparsification: `factor - 1` pruning stages of equal
//! length followed by one optimisation stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub total_epochs: usize,
    pub sparsification_stage_epochs: Vec<usize>,
    pub optimization_epochs: usize,
    /// Completed-epoch counts after which a prune event fires (1-based:
    /// `20` means "at the end of the 20th epoch").
    pub prune_events: Vec<usize>,
}

impl StageSchedule {
    /// Number of prune events that have fired once `epochs_done` epochs are complete.
    pub fn stages_completed_after(&self, epochs_done: usize) -> usize {
        self.prune_events.iter().filter(|&&e| e <= epochs_done).count()
    }

    pub fn fires_after(&self, epoch: usize) -> bool {
        self.prune_events.contains(&epoch)
    }
}

/// Stage lengths are `floor(E / (2(factor-1)))`; the optimisation stage takes
/// the remainder so the total is exactly `E`.
pub fn build_schedule(total_epochs: usize, factor: usize) -> Result<StageSchedule> {
    if factor == 0 {
        return Err(Error::Schedule("factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(StageSchedule {
            total_epochs,
            sparsification_stage_epochs: Vec::new(),
            optimization_epochs: total_epochs,
            prune_events: Vec::new(),
        });
    }
    let stages = factor - 1;
    if total_epochs < 2 * stages {
        return Err(Error::Schedule(format!(
            "{total_epochs} epochs cannot hold {stages} sparsification stages (need at least {})",
            2 * stages
        )));
    }
    let per_stage = total_epochs / (2 * stages);
    let prune_events = (1..=stages).map(|s| s * per_stage).collect();
    Ok(StageSchedule {
        total_epochs,
        sparsification_stage_epochs: vec![per_stage; stages],
        optimization_epochs: total_epochs - per_stage * stages,
        prune_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_stages_of_120() {
        let s = build_schedule(120, 4).unwrap();
        assert_eq!(s.sparsification_stage_epochs, vec![20, 20, 20]);
        assert_eq!(s.optimization_epochs, 60);
        assert_eq!(s.prune_events, vec![20, 40, 60]);
    }

    #[test]
    fn cifar_length() {
        let s = build_schedule(300, 4).unwrap();
        assert_eq!(s.sparsification_stage_epochs, vec![50, 50, 50]);
        assert_eq!(s.optimization_epochs, 150);
    }

    #[test]
    fn dense_factor_has_no_stages() {
        let s = build_schedule(10, 1).unwrap();
        assert!(s.sparsification_stage_epochs.is_empty());
        assert_eq!(s.optimization_epochs, 10);
        assert!(s.prune_events.is_empty());
    }

    #[test]
    fn remainder_goes_to_optimisation() {
        let s = build_schedule(8, 4).unwrap();
        assert_eq!(s.sparsification_stage_epochs, vec![1, 1, 1]);
        assert_eq!(s.optimization_epochs, 5);
        assert_eq!(s.prune_events, vec![1, 2, 3]);
        assert_eq!(s.stages_completed_after(2), 2);
    }

    #[test]
    fn too_few_epochs() {
        assert!(build_schedule(5, 4).is_err());
        assert!(build_schedule(6, 4).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn totals_sum_to_epochs(e in 0usize..500, s in 1usize..10) {
            if let Ok(sched) = build_schedule(e, s) {
                let sum: usize = sched.sparsification_stage_epochs.iter().sum();
                proptest::prop_assert_eq!(sum + sched.optimization_epochs, e);
                proptest::prop_assert_eq!(sched.prune_events.len(), s - 1);
                if s > 1 {
                    proptest::prop_assert!(sched.optimization_epochs * 2 >= e);
                }
            } else {
                proptest::prop_assert!(s > 1 && e < 2 * (s - 1));
            }
        }
    }
}
