//! Node child processes.

use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};

use crate::node::NodeConfig;
use crate::wire::frame::StatusReport;
use crate::wire::http::Method;
use crate::wire::{self, Message};

use super::HarnessError;

/// Overrides where the node binary is looked up.
pub const NODE_BIN_ENV: &str = "VSENSE_NODE_BIN";

const NODE_BIN: &str = "vsense-node";
const READY_TIMEOUT: Duration = Duration::from_secs(20);

/// Finds the node binary: an explicit path, then `VSENSE_NODE_BIN`, then
/// next to the running executable (or one directory up, for test
/// binaries in `target/*/deps`).
pub fn node_binary(explicit: Option<&Path>) -> Result<PathBuf, HarnessError> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os(NODE_BIN_ENV) {
        return Ok(PathBuf::from(p));
    }
    let exe = std::env::current_exe().map_err(|e| HarnessError::SpawnFailed(e.to_string()))?;
    let name = format!("{NODE_BIN}{}", std::env::consts::EXE_SUFFIX);
    exe.ancestors()
        .skip(1)
        .take(2)
        .map(|d| d.join(&name))
        .find(|p| p.is_file())
        .ok_or_else(|| HarnessError::SpawnFailed(format!("{name} not found near {}", exe.display())))
}

pub struct NodeProcess {
    pub node_id: String,
    pub address: String,
    child: Child,
}

impl NodeProcess {
    /// Writes `config` into `dir` and starts a node from it, waiting for
    /// the `listening` line. Standard error goes to `<node_id>.log` in
    /// `dir`, appended across restarts.
    pub async fn spawn(bin: &Path, config: &NodeConfig, dir: &Path, listen: Option<&str>) -> Result<Self, HarnessError> {
        let failed = |why: String| HarnessError::SpawnFailed(format!("{}: {why}", config.node_id));
        std::fs::create_dir_all(dir).map_err(|e| failed(e.to_string()))?;
        let cfg_path = dir.join(format!("{}.toml", config.node_id));
        let text = config.encode().map_err(|e| failed(e.to_string()))?;
        std::fs::write(&cfg_path, text).map_err(|e| failed(e.to_string()))?;
        let log_path = dir.join(format!("{}.log", config.node_id));
        let log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| failed(e.to_string()))?;

        let mut cmd = Command::new(bin);
        cmd.arg("run").arg("--config").arg(&cfg_path);
        if let Some(l) = listen {
            cmd.arg("--listen").arg(l);
        }
        let mut child = cmd
            .env_remove(wire::LISTEN_ENV)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(log)
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| failed(format!("{}: {e}", bin.display())))?;

        let stdout = child.stdout.take().expect("stdout is piped");
        let mut lines = BufReader::new(stdout).lines();
        let ready = tokio::time::timeout(READY_TIMEOUT, async {
            while let Ok(Some(line)) = lines.next_line().await {
                if let Some(addr) = line.strip_prefix("listening ") {
                    return Some(addr.trim().to_string());
                }
            }
            None
        })
        .await;
        let Ok(Some(address)) = ready else {
            let _ = child.start_kill();
            let _ = child.wait().await;
            let stderr = std::fs::read_to_string(&log_path).unwrap_or_default();
            let last = stderr.lines().last().unwrap_or("no output").to_string();
            return Err(failed(last));
        };
        // keep draining stdout so the child never blocks on a full pipe
        tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });
        Ok(NodeProcess {
            node_id: config.node_id.clone(),
            address,
            child,
        })
    }

    pub fn is_running(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }

    pub async fn kill(&mut self) {
        let _ = self.child.start_kill();
        let _ = self.child.wait().await;
    }

    pub async fn status(&self) -> Result<StatusReport, HarnessError> {
        fetch_status(&self.address).await
    }
}

pub async fn fetch_status(address: &str) -> Result<StatusReport, HarnessError> {
    let (_, frame) = wire::request_once(address, Method::Get, "/status", None, Duration::from_secs(5)).await?;
    match frame.message {
        Message::Status(s) => Ok(*s),
        other => Err(HarnessError::Unexpected(format!("{other:?}"))),
    }
}
