//! CSV ingestion (placeholder while the core crate stabilises).
