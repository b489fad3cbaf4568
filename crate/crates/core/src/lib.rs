pub mod agent;
pub mod clock;
pub mod crypto;
pub mod exec;
pub mod guards;
pub mod harness;
pub mod policy;
pub mod records;
pub mod registry;
pub mod service;
pub mod token;
pub mod transport;
