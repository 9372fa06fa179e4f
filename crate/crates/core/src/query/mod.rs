//! Range-function queries: expression types, parser, exact evaluation and
//! the engine that routes between the sketch cache and raw samples.

mod engine;
mod exact;
mod parser;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{SampleValue, SeriesId};
use crate::sampler::MomentStat;
use crate::univ::GSumStat;

pub use engine::{BoundKind, Engine, EngineConfig, ErrorBound, QueryResult, SeriesResult, Source};
pub use exact::IngestStatus;
pub use exact::{exact_eval, ExactSeries, ExactStore};
pub use parser::parse;

/// Structure family that answers a function from the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Quantile,
    GSum,
    Sample,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Quantile, Family::GSum, Family::Sample];

    pub fn name(self) -> &'static str {
        match self {
            Family::Quantile => "quantile",
            Family::GSum => "gsum",
            Family::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Quantile,
    Min,
    Max,
    Count,
    Sum,
    Avg,
    StdDev,
    StdVar,
    Entropy,
    Distinct,
    L2,
    TopK,
}

impl Func {
    pub const ALL: [Func; 12] = [
        Func::Quantile,
        Func::Min,
        Func::Max,
        Func::Count,
        Func::Sum,
        Func::Avg,
        Func::StdDev,
        Func::StdVar,
        Func::Entropy,
        Func::Distinct,
        Func::L2,
        Func::TopK,
    ];

    /// Name without the `_over_time` suffix.
    pub fn stem(self) -> &'static str {
        match self {
            Func::Quantile => "quantile",
            Func::Min => "min",
            Func::Max => "max",
            Func::Count => "count",
            Func::Sum => "sum",
            Func::Avg => "avg",
            Func::StdDev => "stddev",
            Func::StdVar => "stdvar",
            Func::Entropy => "entropy",
            Func::Distinct => "distinct",
            Func::L2 => "l2",
            Func::TopK => "topk",
        }
    }

    pub fn from_stem(s: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.stem() == s)
    }

    pub fn family(self) -> Family {
        match self {
            Func::Quantile | Func::Min | Func::Max => Family::Quantile,
            Func::Count | Func::Sum | Func::Avg | Func::StdDev | Func::StdVar => Family::Sample,
            Func::Entropy | Func::Distinct | Func::L2 | Func::TopK => Family::GSum,
        }
    }

    pub fn takes_arg(self) -> bool {
        matches!(self, Func::Quantile | Func::TopK)
    }

    pub fn moment(self) -> Option<MomentStat> {
        Some(match self {
            Func::Count => MomentStat::Count,
            Func::Sum => MomentStat::Sum,
            Func::Avg => MomentStat::Avg,
            Func::StdDev => MomentStat::StdDev,
            Func::StdVar => MomentStat::StdVar,
            _ => return None,
        })
    }

    pub fn gsum(self) -> Option<GSumStat> {
        Some(match self {
            Func::Entropy => GSumStat::Entropy,
            Func::Distinct => GSumStat::L0,
            Func::L2 => GSumStat::L2,
            _ => return None,
        })
    }
}

/// Metric name plus exact-match label matchers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Selector {
    pub metric: String,
    pub matchers: Vec<(String, String)>,
}

impl Selector {
    pub fn matches(&self, s: &SeriesId) -> bool {
        s.metric() == self.metric
            && self.matchers.iter().all(|(k, v)| s.label(k) == Some(v.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryExpr {
    pub func: Func,
    /// Quantile level or top-k count.
    pub arg: Option<f64>,
    pub selector: Selector,
    /// Range in ms.
    pub range: i64,
    /// Offset in ms.
    pub offset: i64,
}

impl QueryExpr {
    /// Span of history the expression needs, measured back from its
    /// evaluation time.
    pub fn lookback(&self) -> i64 {
        self.range + self.offset
    }
}

pub(crate) fn fmt_duration(ms: i64) -> String {
    const UNITS: [(i64, &str); 4] = [(86_400_000, "d"), (3_600_000, "h"), (60_000, "m"), (1_000, "s")];
    for (u, name) in UNITS {
        if ms % u == 0 && ms != 0 {
            return format!("{}{name}", ms / u);
        }
    }
    format!("{ms}ms")
}

impl fmt::Display for QueryExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_over_time(", self.func.stem())?;
        if let Some(a) = self.arg {
            write!(f, "{a}, ")?;
        }
        f.write_str(&self.selector.metric)?;
        if !self.selector.matchers.is_empty() {
            f.write_str("{")?;
            for (i, (k, v)) in self.selector.matchers.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{k}=\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""))?;
            }
            f.write_str("}")?;
        }
        write!(f, "[{}]", fmt_duration(self.range))?;
        if self.offset != 0 {
            write!(f, " offset {}", fmt_duration(self.offset))?;
        }
        f.write_str(")")
    }
}

/// Result of a range function for one series.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    Scalar(f64),
    TopK(Vec<TopItem>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopItem {
    pub item: SampleValue,
    pub count: f64,
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            Value::TopK(_) => None,
        }
    }
}
