//! One-class anomaly detection with dense ReLU networks trained either by
//! forward-forward (each layer minimizes its own loss and updates during the
//! forward pass) or by ordinary backpropagation.
//!
//! ```
//! use ffoc::data::{synthetic_banknote, DataConfig, PreparedData};
//! use ffoc::losses::{LossKind, LossSpec};
//! use ffoc::network::init_network;
//! use ffoc::scoring::evaluate_model;
//! use ffoc::training::{train, TrainConfig, TrainData};
//!
//! let ds = synthetic_banknote(0);
//! let data = PreparedData::new(&ds, &DataConfig::default()).unwrap();
//! let cfg = TrainConfig { epochs_max: 20, ..TrainConfig::default() };
//! let net = init_network(&[4, 10, 10], cfg.seed).unwrap();
//! let spec = LossSpec::new(LossKind::GoodnessAdjusted);
//! let (model, report) = train(net, TrainData::new(&data.train, &data.valid), &spec, &cfg).unwrap();
//! let (metrics, _) = evaluate_model(&model, &data.test, &data.test_labels).unwrap();
//! assert!(report.epochs_run <= 20);
//! assert!((0.0..=1.0).contains(&metrics.auc));
//! ```

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod landscape;
pub mod losses;
pub mod model;
pub mod network;
pub mod rng;
pub mod scoring;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/scoring.md")]
    struct Scoring;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
    #[doc = include_str!("../../../book/src/landscape.md")]
    struct Landscape;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
