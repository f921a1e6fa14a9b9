//! Synthetic corpus, training loop, checkpoints and ablation matrices for
//! `vpnext` models, plus the `vpnx` command line.
//!
//! ```no_run
//! use vpnext_harness::{config::RunConfig, data, train};
//!
//! let cfg = RunConfig::default();
//! let corpus = data::generate(&cfg.data).unwrap();
//! let model_cfg = cfg.model_for("vcr-2+real-3").unwrap();
//! let run = train::train(&model_cfg, &corpus, &cfg.train, |s| eprintln!("{} {}", s.step, s.loss)).unwrap();
//! println!("mIoU {:.3}", run.best_eval.miou);
//! ```

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod optim;
pub mod pnm;
pub mod train;

pub use error::{HarnessError, Result};
