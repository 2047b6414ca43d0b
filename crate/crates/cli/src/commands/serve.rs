use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use ldgm_core::data::Corpus;
use ldgm_core::denoiser::load_checkpoint;
use ldgm_core::Error;
use ldgm_service::{AppState, LoadedModel, ServiceConfig};

use crate::args::ServeArgs;
use crate::{read_config, thread_limit, CliError, CliResult};

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ServeFile {
    host: String,
    workers: Option<usize>,
    queue: Option<usize>,
    timeout_s: f64,
}

impl Default for ServeFile {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), workers: None, queue: None, timeout_s: 30.0 }
    }
}

fn load(a: &ServeArgs) -> CliResult<LoadedModel> {
    let vocab = a.corpus.as_deref().map(Corpus::load).transpose()?.map(|c| c.manifest.vocabulary);
    Ok(LoadedModel::new(load_checkpoint(&a.checkpoint)?, vocab)?)
}

/// Bind first so health answers 503 while the checkpoint loads.
pub fn serve(a: &ServeArgs) -> CliResult<Value> {
    let file: ServeFile = read_config(a.config.as_deref())?;
    if !(file.timeout_s > 0.0 && file.timeout_s.is_finite()) {
        return Err(CliError::Usage(format!("timeout_s must be > 0, got {}", file.timeout_s)));
    }
    let threads = thread_limit()?;
    let mut cfg = ServiceConfig { timeout: Duration::from_secs_f64(file.timeout_s), ..ServiceConfig::default() };
    cfg.workers = file.workers.or(threads).unwrap_or(cfg.workers).max(1);
    cfg.queue = file.queue.unwrap_or(4 * cfg.workers);

    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build().map_err(|e| CliError::Core(Error::Invariant(format!("runtime: {e}"))))?;
    let addr = format!("{}:{}", file.host, a.port);
    let io = |e: std::io::Error| CliError::Core(Error::Io { path: addr.clone().into(), source: e });
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(io)?;
        let local = listener.local_addr().map_err(io)?;
        eprintln!("{}", json!({"event": "listening", "addr": local.to_string()}));
        let state = AppState::new(cfg);
        let server = ldgm_service::serve(listener, state.clone());
        tokio::pin!(server);
        let loader = {
            let a = ServeArgs {
                checkpoint: a.checkpoint.clone(),
                corpus: a.corpus.clone(),
                config: None,
                port: a.port,
            };
            tokio::task::spawn_blocking(move || load(&a))
        };
        tokio::select! {
            r = &mut server => r.map_err(io)?,
            loaded = loader => {
                let model = loaded.map_err(|e| CliError::Core(Error::Invariant(format!("loader: {e}"))))??;
                let version = model.version().to_string();
                if state.load(model).is_err() {
                    return Err(CliError::Core(Error::Invariant("model loaded twice".into())));
                }
                eprintln!("{}", json!({"event": "ready", "model_version": version}));
                server.await.map_err(io)?;
            }
        }
        Ok(json!({"event": "stopped"}))
    })
}
