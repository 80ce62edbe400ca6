//! Greatest fixed point of the controllable-predecessor operator.

use crate::lattice::LatticeSet;

/// A finite transition system seen through its predecessor operator.
pub trait GameArena {
    fn num_states(&self) -> usize;

    /// `Pre(Q) = {x ∈ Q : ∃u with every successor of (x, u) in Q}`.
    fn pre(&self, q: &LatticeSet) -> LatticeSet;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub set: LatticeSet,
    /// Number of predecessor applications until `Q_{ℓ+1} = Q_ℓ`.
    pub iterations: usize,
}

/// Iterates `Q_{ℓ+1} = Pre(Q_ℓ)` from `q0` until it stabilizes.
pub fn solve_safety<A: GameArena + ?Sized>(arena: &A, q0: &LatticeSet) -> FixedPoint {
    let mut q = q0.clone();
    let mut iterations = 0;
    loop {
        let next = arena.pre(&q).intersection(&q);
        iterations += 1;
        if next == q {
            return FixedPoint { set: q, iterations };
        }
        log::debug!("safety game iteration {iterations}: {} states", next.count());
        q = next;
    }
}

/// Transition system with explicit successor lists; `None` marks a blocked
/// input.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitSystem {
    n_states: usize,
    n_inputs: usize,
    succ: Vec<Option<Vec<usize>>>,
}

impl ExplicitSystem {
    pub fn new(n_states: usize, n_inputs: usize) -> Self {
        Self { n_states, n_inputs, succ: vec![None; n_states * n_inputs] }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn set(&mut self, x: usize, u: usize, succ: Option<Vec<usize>>) {
        self.succ[x * self.n_inputs + u] = succ;
    }

    pub fn successors(&self, x: usize, u: usize) -> Option<&[usize]> {
        self.succ[x * self.n_inputs + u].as_deref()
    }

    /// Inputs of `x` whose successors all lie in `q`.
    pub fn admissible(&self, x: usize, q: &LatticeSet) -> Vec<usize> {
        (0..self.n_inputs)
            .filter(|&u| self.successors(x, u).is_some_and(|s| s.iter().all(|&y| q.contains(y))))
            .collect()
    }
}

impl GameArena for ExplicitSystem {
    fn num_states(&self) -> usize {
        self.n_states
    }

    fn pre(&self, q: &LatticeSet) -> LatticeSet {
        LatticeSet::from_indices(
            self.n_states,
            q.iter().filter(|&x| {
                (0..self.n_inputs)
                    .any(|u| self.successors(x, u).is_some_and(|s| s.iter().all(|&y| q.contains(y))))
            }),
        )
    }
}
