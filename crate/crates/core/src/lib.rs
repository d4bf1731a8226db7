//! Finite-horizon tabular robust MDPs with total-variation robust sets:
//! exact robust Bellman operators, robust planning, an optimistic online
//! learner and the experiment harness built on top of them.

pub mod bellman;
pub mod checks;
pub mod environments;
pub mod experiment;
pub mod learner;
pub mod model;
pub mod planning;
