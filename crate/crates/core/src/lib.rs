//! Infrastructure manager for a federated private/public cloud.
//!
//! A session broker assigns end-user sessions to model-serving instances and
//! pushes reassignments over a duplex channel; a health-driven load balancer
//! fills the private cloud first, overflows to the public cloud on saturation,
//! migrates sessions back when the private cloud is underused, and replaces
//! degraded instances. Everything runs against a deterministic simulated cloud
//! driven by declarative scenarios.

pub mod balancer;
pub mod broker;
pub mod gateway;
pub mod ids;
pub mod library;
pub mod manager;
pub mod provider;
pub mod scenario;
pub mod sim;
pub mod sweep;
pub mod textfmt;
