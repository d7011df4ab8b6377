//! Telemetry ingestion and file formats for the gpecm estimator.
pub mod dataio;
