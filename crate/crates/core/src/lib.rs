//! Federation-as-a-Service kernel: a hash-chained governance registry,
//! federated identity, attribute-based access control, data transformation
//! services, workload brokerage, runtime monitoring and offline audit, all
//! driven over simulated member clouds.

pub mod clock;
pub mod digest;
pub mod identity;
pub mod registry;
pub mod masking;
pub mod anonymization;
pub mod smc;
pub mod policy;
pub mod monitor;
pub mod audit;
pub mod simcloud;
pub mod iwm;
pub mod orchestrator;
pub mod scenario;
