pub mod backend;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod parser;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod store;
pub mod synth;
