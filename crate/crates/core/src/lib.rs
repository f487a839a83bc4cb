//! Retrieval-augmented chat over document collections.
//!
//! Collections are split into fragments (`ingest`), mined for terms
//! (`terms`), linked to a knowledge graph (`kg`), embedded (`embedding`) and
//! stored in an exact cosine index (`index`). Questions are expanded with
//! concept labels and session history (`retrieval`) and answered with
//! document-level citations (`synthesis`). `service` ties the stages into an
//! [`service::Engine`] with a CLI and an HTTP API.

pub mod embedding;
pub mod fsutil;
pub mod index;
pub mod ingest;
pub mod kg;
pub mod provider;
pub mod retrieval;
pub mod service;
pub mod session;
pub mod synthesis;
pub mod terms;
pub mod text;
