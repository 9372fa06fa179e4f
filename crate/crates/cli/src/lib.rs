//! Service wiring for winsketch: HTTP API, rule scheduler, config.

pub mod api;
pub mod config;
pub mod scheduler;

use std::sync::Arc;

use anyhow::Context;
use tokio::net::TcpListener;
use winsketch::{Engine, SketchCache};

pub use api::{router, AppState, WireSample};
pub use config::ServiceConfig;
pub use scheduler::Scheduler;

/// Build the engine (restoring a snapshot if one exists), register rules
/// from the rules file and start their timers. Needs a Tokio runtime.
pub fn build_state(config: &ServiceConfig) -> anyhow::Result<Arc<AppState>> {
    config.validate()?;
    let ecfg = config.engine_config();
    let engine = match &config.snapshot_path {
        Some(p) if p.exists() => {
            let f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let cache = SketchCache::read_snapshot(ecfg.cache.clone(), std::io::BufReader::new(f))
                .with_context(|| format!("restoring {}", p.display()))?;
            tracing::info!(path = %p.display(), instances = cache.instance_count(), "restored snapshot");
            Engine::with_cache(ecfg, cache)?
        }
        _ => Engine::new(ecfg)?,
    };
    let engine = Arc::new(engine);
    let scheduler = Scheduler::new(engine.clone(), config.alert_log_capacity);
    for r in engine.cache().rules() {
        scheduler.schedule(r);
    }
    if let Some(path) = &config.rules_file {
        for r in config::load_rules(path)? {
            let id = r.id.clone();
            match engine.register_rule(r.clone()) {
                Ok(_) => scheduler.schedule(r),
                Err(e @ winsketch::Error::UnsupportedFunction(_)) => {
                    tracing::warn!(rule = %id, error = %e, "rule stays on the exact path");
                }
                Err(e) => return Err(e).with_context(|| format!("rule `{id}`")),
            }
        }
    }
    Ok(Arc::new(AppState {
        engine,
        scheduler,
        snapshot_path: config.snapshot_path.clone(),
    }))
}

/// Serve until Ctrl-C or SIGTERM, then write the snapshot if configured.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let addr = config.validate()?;
    let state = build_state(&config)?;
    let listener = TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    if let Some(p) = &state.snapshot_path {
        api::write_snapshot(&state.engine, p).map_err(|_| anyhow::anyhow!("writing snapshot {}", p.display()))?;
        tracing::info!(path = %p.display(), "snapshot written");
    }
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
