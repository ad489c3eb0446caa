//! Hierarchical flexibility-aware control of district heating networks.
//!
//! The crate models a pipe network as a typed directed graph, solves its
//! steady hydraulics and transient pipe temperatures, tracks building
//! thermal flexibility, partitions the network into hydraulically closed
//! subsystems, optimizes each subsystem over a set of candidate pressure
//! drops and recombines the local results into a network-wide selection.

pub mod network;
pub mod hydraulics;
pub mod thermal;
pub mod buildings;
pub mod partition;
pub mod scenario;
pub mod generator;
pub mod lowlevel;
pub mod coordinator;
pub mod harness;
pub mod io;
