//! Two-stage temporal action localization on 1D feature sequences.
//!
//! The pipeline mirrors a 1D two-stage detector: a segment proposal network
//! with per-scale dilated towers whose receptive fields match their anchor
//! spans, context-extended segment-of-interest pooling with a small
//! classification head, optional two-stream fusion, and AR-AN / mAP
//! evaluation. Everything runs on a minimal reverse-mode autodiff engine,
//! deterministic under a fixed seed.

pub mod formats;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod rf;
pub mod segments;
pub mod spn;
pub mod synth;
pub mod tensor;
