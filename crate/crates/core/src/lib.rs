//! Programmable operator scheduling over partitioned operator graphs.
//!
//! A [`graph::Graph`] is cut into subgraphs by [`partition::partition`]. A
//! [`sched::Scheduler`] then decides how each invocation is split into
//! micro-batches and how the subgraph instances are dispatched.
//! [`sched::Session`] executes the result through reference-counted buffers
//! and a compiled-plan cache, then replays it on the discrete-event device
//! model in [`sim`] to get a timeline.
pub mod gen;
pub mod graph;
pub mod partition;
pub mod dataflow;
pub mod sim;
pub mod engine;
mod exec;
pub mod sched;
pub mod strategies;
pub mod trace;
pub mod scenario;
