//! De-identification pipeline with end-to-end encryption.
//!
//! Classical anonymisation ([`classical`]), full-domain k-anonymisation
//! ([`kanon`]) and Laplace-mechanism differential privacy ([`dp`]) run over
//! typed tables ([`tabular`]). Data at rest travels in hybrid-encryption
//! envelopes ([`envelope`]), and [`attest`] simulates the attestation and
//! token flow that gates an enclave's access to encrypted inputs.

pub mod classical;
pub mod dp;
pub mod kanon;
pub mod tabular;
pub mod attest;
pub mod envelope;
pub mod pipeline;
pub mod demo;
pub mod service;
