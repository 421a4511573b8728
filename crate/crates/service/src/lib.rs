//! Screening service and command-line front end for the `redreflex` pipeline.
//!
//! [`screen::Screener`] turns image bytes into a [`screen::ScreeningResult`];
//! [`http`] exposes it over HTTP and [`cli`] wires every pipeline stage to a
//! subcommand.

pub mod cli;
pub mod http;
pub mod screen;
pub mod workflow;

pub use screen::{EyeChoice, ScreenError, ScreenVerdict, Screener, ScreeningResult, Timings};
