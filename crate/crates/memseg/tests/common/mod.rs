#![allow(dead_code)]

use memseg::api::{self, AppState};
use memseg_core::config::PipelineConfig;
use memseg_core::data::InteractionType;
use memseg_core::engine::{EngineConfig, Models};
use memseg_core::interaction_net::InteractionNet;
use memseg_core::memory_net::MemoryNet;
use memseg_core::training::synthetic::SyntheticVolumeSpec;
use memseg_core::Models32;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

/// Untrained desk-architecture networks: enough to exercise plumbing.
pub fn untrained_models() -> Models32 {
    let cfg = PipelineConfig::preset("desk").unwrap();
    let interaction: BTreeMap<_, _> = InteractionType::ALL
        .iter()
        .map(|&k| (k, InteractionNet::new(cfg.interaction_net(k), 7).unwrap()))
        .collect();
    Models {
        interaction,
        memory: MemoryNet::new(cfg.memory.net.clone(), 7).unwrap(),
    }
}

/// Small synthetic volumes keep API round trips fast.
pub fn small_spec() -> SyntheticVolumeSpec {
    SyntheticVolumeSpec {
        shape: [48, 48, 6],
        radius_range: (5.0, 9.0),
        ..PipelineConfig::preset("desk").unwrap().data.spec
    }
}

/// In-process server on an ephemeral port; returns its base URL. The
/// runtime lives on a detached thread for the rest of the test binary.
pub fn spawn_server(models: Models32, spec: SyntheticVolumeSpec) -> String {
    let app = AppState::new(Arc::new(models), EngineConfig::default(), spec);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let (listener, addr) = api::bind("127.0.0.1:0").await.unwrap();
            tx.send(addr).unwrap();
            api::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// Runs `memseg serve --port 0` and kills it on drop.
pub struct ServeProcess {
    pub child: Child,
    pub url: String,
}

impl ServeProcess {
    pub fn start(weights: &Path, extra: &[&str]) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_memseg"))
            .args(extra)
            .args(["serve", "--port", "0", "--weights"])
            .arg(weights)
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let url = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        Self { child, url }
    }
}

impl Drop for ServeProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
