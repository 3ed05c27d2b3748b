//! Joint computation-offloading optimization for a multi-user, single-server
//! MEC system, solved two ways: an exact enumeration oracle that labels
//! training data, and a multi-head ensemble multi-task network (shared frozen
//! backbone, bootstrap-trained prediction heads, cost-argmin selection) that
//! infers strategies online. An analysis layer audits the error-ambiguity
//! decomposition of the ensemble and produces benchmark tables.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod mec;
pub mod model;
pub mod nn;
pub mod oracle;
