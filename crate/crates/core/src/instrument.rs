//! Per-thread call counters for the surrogate and agent code paths.

use std::cell::Cell;

thread_local! {
    static SURROGATE: Cell<u64> = const { Cell::new(0) };
    static AGENT: Cell<u64> = const { Cell::new(0) };
    static EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Surrogate constructions, conditionings and predictions.
    pub surrogate: u64,
    /// Agent constructions and policy evaluations.
    pub agent: u64,
    /// Objective evaluations charged to an environment or baseline loop.
    pub evaluations: u64,
}

impl Counters {
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            surrogate: self.surrogate - earlier.surrogate,
            agent: self.agent - earlier.agent,
            evaluations: self.evaluations - earlier.evaluations,
        }
    }
}

pub fn snapshot() -> Counters {
    Counters { surrogate: SURROGATE.get(), agent: AGENT.get(), evaluations: EVALUATIONS.get() }
}

pub(crate) fn surrogate_call() {
    SURROGATE.set(SURROGATE.get() + 1);
}

pub(crate) fn agent_call() {
    AGENT.set(AGENT.get() + 1);
}

pub(crate) fn evaluation() {
    EVALUATIONS.set(EVALUATIONS.get() + 1);
}
