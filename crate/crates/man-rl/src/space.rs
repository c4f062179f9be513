//! Factored action spaces and the transitions stored with both sub-actions.

use crate::{Error, Result};

/// Sizes of the two sub-action sets plus the bijection onto the joint space.
///
/// The joint index is row-major with the first sub-action as the major axis:
/// `joint = a_first * n_second + a_second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactoredActionSpace {
    n_first: usize,
    n_second: usize,
}

impl FactoredActionSpace {
    pub fn new(n_first: usize, n_second: usize) -> Result<Self> {
        if n_first == 0 || n_second == 0 {
            return Err(Error::Config(format!(
                "sub-action space sizes must be positive, got {n_first}x{n_second}"
            )));
        }
        Ok(Self { n_first, n_second })
    }

    pub fn n_first(&self) -> usize {
        self.n_first
    }

    pub fn n_second(&self) -> usize {
        self.n_second
    }

    pub fn joint_size(&self) -> usize {
        self.n_first * self.n_second
    }

    pub fn join(&self, a_first: usize, a_second: usize) -> Result<usize> {
        if a_first >= self.n_first || a_second >= self.n_second {
            return Err(Error::IndexOutOfBounds(format!(
                "sub-action pair ({a_first},{a_second}) outside {}x{}",
                self.n_first, self.n_second
            )));
        }
        Ok(a_first * self.n_second + a_second)
    }

    pub fn split(&self, joint: usize) -> Result<(usize, usize)> {
        if joint >= self.joint_size() {
            return Err(Error::IndexOutOfBounds(format!(
                "joint action {joint} outside space of {}",
                self.joint_size()
            )));
        }
        Ok((joint / self.n_second, joint % self.n_second))
    }
}

/// One environment interaction, stored with both sub-actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub a_first: usize,
    pub a_second: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

impl Transition {
    /// Check the transition against its owning action space.
    pub fn validate(&self, space: &FactoredActionSpace) -> Result<()> {
        if self.a_first >= space.n_first() || self.a_second >= space.n_second() {
            return Err(Error::IndexOutOfBounds(format!(
                "transition actions ({},{}) outside {}x{}",
                self.a_first,
                self.a_second,
                space.n_first(),
                space.n_second()
            )));
        }
        if self.state.len() != self.next_state.len() {
            return Err(Error::ShapeMismatch(format!(
                "state dims differ: {} vs {}",
                self.state.len(),
                self.next_state.len()
            )));
        }
        Ok(())
    }
}
