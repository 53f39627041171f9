//! Dynamic-routing MIMO detection: IDetNet and OAMPNet branches chosen per
//! sample by RouteNet, trained centrally or with FedAve / FedGS.

pub mod channel;
pub mod config;
pub mod ddnet;
pub mod detectors;
pub mod federated;
pub mod flops;
pub mod idetnet;
pub mod io;
pub mod numerics;
pub mod oampnet;
pub mod pipeline;

pub use channel::{ClientProfile, Dataset, Provenance, Sample, SystemConfig};
pub use config::{ExperimentConfig, TrainingMode};
pub use ddnet::{DdNetModel, NormStats, RouteNetParams, RouteSample};
pub use detectors::{BerPoint, BerReport, ConditionAxis, ConditionPoint, Detection, DetectorHandle};
pub use federated::{FedConfig, OverheadLedger, SparsifiedGradient};
pub use flops::{flop_count, FlopDetector};
pub use idetnet::{IDetNetConfig, IDetNetMode, IDetNetParams};
pub use numerics::{AdamState, ParamSet, Rng, Tensor};
pub use oampnet::{OampNetConfig, OampNetParams};
