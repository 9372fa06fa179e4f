//! Sliding-window sketches for timeseries rule queries.
//!
//! Samples are ingested per series into exponential-histogram windows whose
//! buckets carry mergeable summaries (KLL sketches for quantiles, frequency
//! maps or universal sketches for GSum statistics) or into a uniform sample
//! window for moments. Any recent sub-window can then be answered
//! approximately, with an exact store as fallback.

pub mod cache;
pub mod codec;
pub mod eh;
pub mod ehkll;
pub mod ehuniv;
pub mod error;
pub mod harness;
pub mod hash;
pub mod kll;
pub mod model;
pub mod query;
pub mod sampler;
pub mod univ;

pub use cache::{CacheConfig, RuleKind, RuleSpec, SketchCache};
pub use error::{Error, Result};
pub use kll::KllSketch;
pub use model::{DataSample, SampleValue, SeriesId, SketchConfig, TimeWindow, Timestamp};
pub use univ::{GSumStat, UnivSketch};
pub use query::{parse, Engine, EngineConfig, QueryExpr, QueryResult, Source, Value};
