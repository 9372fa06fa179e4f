//! Periodic rule evaluation.
//!
//! Each rule runs on its own timer. Rules are evaluated at the newest
//! ingested timestamp (data time), so replayed or synthetic streams behave
//! the same as live ones.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::Serialize;
use tokio::task::JoinHandle;
use tokio::time::MissedTickBehavior;
use winsketch::cache::{AlertCondition, RuleKind};
use winsketch::query::{QueryResult, Value};
use winsketch::{Engine, RuleSpec};

#[derive(Debug, Clone, Serialize)]
pub struct AlertEvent {
    pub rule: String,
    pub series: String,
    pub value: f64,
    pub condition: AlertCondition,
    /// Data time the rule was evaluated at.
    pub at: i64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RuleStatus {
    pub evaluations: u64,
    pub last_eval_wall_ms: Option<u64>,
    pub last_error: Option<String>,
    pub last_result: Option<QueryResult>,
    pub firing: Vec<String>,
}

struct Shared {
    engine: Arc<Engine>,
    status: Mutex<BTreeMap<String, RuleStatus>>,
    alerts: Mutex<VecDeque<AlertEvent>>,
    alert_cap: usize,
}

pub struct Scheduler {
    shared: Arc<Shared>,
    jobs: Mutex<BTreeMap<String, JoinHandle<()>>>,
}

pub fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Scheduler {
    pub fn new(engine: Arc<Engine>, alert_cap: usize) -> Self {
        Self {
            shared: Arc::new(Shared {
                engine,
                status: Mutex::new(BTreeMap::new()),
                alerts: Mutex::new(VecDeque::new()),
                alert_cap: alert_cap.max(1),
            }),
            jobs: Mutex::new(BTreeMap::new()),
        }
    }

    /// Start (or restart) the timer for a registered rule. Must be called
    /// inside a Tokio runtime.
    pub fn schedule(&self, spec: RuleSpec) {
        let id = spec.id.clone();
        let shared = self.shared.clone();
        shared.status.lock().entry(id.clone()).or_default();
        let task = tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(spec.eval_interval_ms as u64));
            tick.set_missed_tick_behavior(MissedTickBehavior::Delay);
            tick.tick().await;
            loop {
                tick.tick().await;
                let s = shared.clone();
                let sp = spec.clone();
                if tokio::task::spawn_blocking(move || s.evaluate(&sp)).await.is_err() {
                    break;
                }
            }
        });
        if let Some(old) = self.jobs.lock().insert(id, task) {
            old.abort();
        }
    }

    pub fn cancel(&self, id: &str) {
        if let Some(j) = self.jobs.lock().remove(id) {
            j.abort();
        }
        self.shared.status.lock().remove(id);
    }

    pub fn status(&self) -> BTreeMap<String, RuleStatus> {
        self.shared.status.lock().clone()
    }

    pub fn alerts(&self) -> Vec<AlertEvent> {
        self.shared.alerts.lock().iter().cloned().collect()
    }

    /// Evaluate a rule once, outside its timer.
    pub fn run_once(&self, spec: &RuleSpec) {
        self.shared.evaluate(spec);
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        for (_, j) in std::mem::take(&mut *self.jobs.lock()) {
            j.abort();
        }
    }
}

impl Shared {
    fn evaluate(&self, spec: &RuleSpec) {
        let wall = wall_ms();
        let at = self.engine.newest_ts().unwrap_or(0).max(0);
        let res = self.engine.query(&spec.expr, at);
        let mut firing = Vec::new();
        if let (Ok(r), RuleKind::Alert, Some(cond)) = (&res, spec.kind, &spec.condition) {
            for s in &r.series {
                let Some(Value::Scalar(v)) = s.value else {
                    continue;
                };
                if !cond.op.holds(v, cond.threshold) {
                    continue;
                }
                let series = s.series.to_string();
                tracing::warn!(
                    target: "winsketch::alerts",
                    rule = %spec.id,
                    series = %series,
                    value = v,
                    threshold = cond.threshold,
                    "alert firing"
                );
                firing.push(series.clone());
                let mut log = self.alerts.lock();
                if log.len() == self.alert_cap {
                    log.pop_front();
                }
                log.push_back(AlertEvent {
                    rule: spec.id.clone(),
                    series,
                    value: v,
                    condition: cond.clone(),
                    at,
                    wall_ms: wall,
                });
            }
        }
        let mut st = self.status.lock();
        let Some(e) = st.get_mut(&spec.id) else {
            return;
        };
        e.evaluations += 1;
        e.last_eval_wall_ms = Some(wall);
        e.firing = firing;
        match res {
            Ok(r) => {
                e.last_error = None;
                e.last_result = Some(r);
            }
            Err(err) => e.last_error = Some(err.to_string()),
        }
    }
}
