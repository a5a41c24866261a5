//! CPU inference engine for the SBCFormer family of hybrid CNN/attention
//! image classifiers.
//!
//! The crate covers fp32 kernels ([`kernels`]), the network blocks
//! ([`blocks`]), model assembly ([`Model`]), closed-form cost counting
//! ([`audit`]), the SBCW weight container ([`weights`]) and latency
//! profiling ([`profile`]).

pub mod audit;
pub mod blocks;
pub mod calibration;
pub mod config;
pub mod error;
pub mod kernels;
pub mod model;
pub mod params;
pub mod parity;
pub mod profile;
pub mod tensor;
pub mod weights;

pub use audit::{analytic_params, block_costs, count_macs, BlockCost};
pub use blocks::Observer;
pub use config::{AblationFlags, BiasMode, Hyperparams, StemWidths, Variant, VariantSpec};
pub use error::{Error, Result};
pub use model::{count_params, Model};
pub use params::Init;
pub use profile::{ExecConfig, LatencyReport, MacReport, ReportFormat};
pub use tensor::Tensor;
pub use weights::WeightStore;
