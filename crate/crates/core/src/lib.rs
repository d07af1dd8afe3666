//! Elastic, deterministic stream processing with live operator migration.
//!
//! Events carry a source id and a logical timestamp. Operators consume
//! their inputs in one total order, so any two replicas of an operator fed
//! the same streams produce byte-identical output. That property is what
//! lets a partition be moved to another node while it keeps running: a
//! candidate replica is restored from a snapshot, fed a duplicate of the
//! input, and takes over once its output matches the original's.
//!
//! Modules, bottom-up:
//!
//! * [`event`]: events, their wire encoding and timestamp vectors
//! * [`ordering`]: the deterministic k-way merge and stall detection
//! * [`runtime`]: operator instances, state stores and snapshots
//! * [`enclave`]: sealing, secure channels and paged enclave memory
//! * [`simnet`]: the seeded logical-step network
//! * [`migration`]: the live migration protocol
//! * [`workloads`]: the smart-grid generator and operator logics
//! * [`harness`]: scenarios, the cluster engine, oracle and reports
//!
//! See `examples/` for one runnable program per capability.

pub mod enclave;
pub mod event;
pub mod harness;
pub mod migration;
pub mod ordering;
pub mod runtime;
pub mod simnet;
pub mod workloads;
