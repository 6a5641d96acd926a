//! Pass logging shared by every executable kernel.
//!
//! A kernel records one entry each time it streams a whole operand through
//! memory. Operands are named by their position on the executing node, so
//! the executor can translate a log into per-slot sweeps without the kernel
//! knowing anything about the graph.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operand {
    Input(usize),
    Output(usize),
    /// Gradient arriving at output `i` (backward read).
    OutputGrad(usize),
    /// Gradient produced for input `i` (backward write).
    InputGrad(usize),
    Weight,
    WeightGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PassLog {
    entries: Vec<(Operand, Access)>,
}

impl PassLog {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn read(&mut self, op: Operand) {
        self.entries.push((op, Access::Read));
    }

    #[inline]
    pub fn write(&mut self, op: Operand) {
        self.entries.push((op, Access::Write));
    }

    pub fn entries(&self) -> &[(Operand, Access)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn count(&self, op: Operand, access: Access) -> usize {
        self.entries.iter().filter(|e| **e == (op, access)).count()
    }
}
