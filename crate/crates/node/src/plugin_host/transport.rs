use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use mosden_core::protocol::{Handshake, PluginReply, PluginRequest, PROTOCOL};
use mosden_core::sim::{SimAction, SimPlugin};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};

use super::handle::CONNECTION_LOST;
use super::HostError;

/// One live channel to a plugin instance. Requests are strictly
/// sequential; the caller applies timeouts.
#[async_trait]
pub trait PluginConnection: Send {
    async fn call(&mut self, req: &PluginRequest) -> Result<PluginReply, HostError>;
}

/// Creates fresh plugin instances (initially and on restart).
#[async_trait]
pub trait PluginLauncher: Send + Sync {
    async fn launch(&self) -> Result<Box<dyn PluginConnection>, HostError>;
}

/// A plugin implemented inside the node process.
#[async_trait]
pub trait InProcessPlugin: Send {
    async fn handle(&mut self, req: &PluginRequest) -> PluginReply;
}

struct InProcessConnection(Box<dyn InProcessPlugin>);

#[async_trait]
impl PluginConnection for InProcessConnection {
    async fn call(&mut self, req: &PluginRequest) -> Result<PluginReply, HostError> {
        Ok(self.0.handle(req).await)
    }
}

pub type InProcessCtor = Arc<dyn Fn() -> Box<dyn InProcessPlugin> + Send + Sync>;

pub struct InProcessLauncher {
    ctor: InProcessCtor,
}

impl InProcessLauncher {
    pub fn new(ctor: InProcessCtor) -> Self {
        Self { ctor }
    }
}

#[async_trait]
impl PluginLauncher for InProcessLauncher {
    async fn launch(&self) -> Result<Box<dyn PluginConnection>, HostError> {
        Ok(Box::new(InProcessConnection((self.ctor)())))
    }
}

/// The reference simulated plugin, run in-process.
pub struct SimInProcess(pub SimPlugin);

#[async_trait]
impl InProcessPlugin for SimInProcess {
    async fn handle(&mut self, req: &PluginRequest) -> PluginReply {
        match self.0.handle(req) {
            SimAction::Reply(r) => r,
            SimAction::Stall => std::future::pending().await,
        }
    }
}

/// Spawns a plugin executable and speaks line-delimited JSON over its
/// standard streams.
pub struct SubprocessLauncher {
    plugin_id: String,
    command: Vec<String>,
    cwd: Option<PathBuf>,
    handshake_timeout: Duration,
}

impl SubprocessLauncher {
    pub fn new(
        plugin_id: impl Into<String>,
        command: Vec<String>,
        cwd: Option<PathBuf>,
        handshake_timeout: Duration,
    ) -> Self {
        Self {
            plugin_id: plugin_id.into(),
            command,
            cwd,
            handshake_timeout,
        }
    }
}

struct SubprocessConnection {
    // kill_on_drop reaps the process when the connection is dropped
    _child: Child,
    stdin: ChildStdin,
    stdout: Lines<BufReader<ChildStdout>>,
}

#[async_trait]
impl PluginLauncher for SubprocessLauncher {
    async fn launch(&self) -> Result<Box<dyn PluginConnection>, HostError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| HostError::Launch("empty command".into()))?;
        let mut program_path = PathBuf::from(program);
        if let Some(dir) = &self.cwd {
            let local = dir.join(program);
            if program_path.is_relative() && local.exists() {
                program_path = local;
            }
        }
        let mut cmd = Command::new(&program_path);
        cmd.args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .kill_on_drop(true);
        if let Some(dir) = &self.cwd {
            cmd.current_dir(dir);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| HostError::Launch(format!("{}: {e}", program_path.display())))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| HostError::Launch("plugin stdin unavailable".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| HostError::Launch("plugin stdout unavailable".into()))?;
        let mut stdout = BufReader::new(stdout).lines();

        let first = tokio::time::timeout(self.handshake_timeout, stdout.next_line())
            .await
            .map_err(|_| HostError::Launch("no handshake from plugin".into()))?
            .map_err(|e| HostError::Launch(e.to_string()))?
            .ok_or_else(|| HostError::Launch("plugin exited before handshake".into()))?;
        let hs: Handshake = serde_json::from_str(&first)
            .map_err(|e| HostError::PluginProtocolError(format!("bad handshake: {e}")))?;
        if hs.protocol != PROTOCOL {
            return Err(HostError::PluginProtocolError(format!(
                "unsupported protocol {:?}",
                hs.protocol
            )));
        }
        if hs.plugin_id != self.plugin_id {
            return Err(HostError::PluginProtocolError(format!(
                "handshake names plugin {:?}, expected {:?}",
                hs.plugin_id, self.plugin_id
            )));
        }
        tracing::debug!(plugin = %hs.plugin_id, version = %hs.version, "plugin process up");
        Ok(Box::new(SubprocessConnection {
            _child: child,
            stdin,
            stdout,
        }))
    }
}

#[async_trait]
impl PluginConnection for SubprocessConnection {
    async fn call(&mut self, req: &PluginRequest) -> Result<PluginReply, HostError> {
        let lost = |e: std::io::Error| HostError::PluginProtocolError(format!("{CONNECTION_LOST}: {e}"));
        let mut line = serde_json::to_vec(req).expect("requests serialize");
        line.push(b'\n');
        self.stdin.write_all(&line).await.map_err(lost)?;
        self.stdin.flush().await.map_err(lost)?;
        let reply = self.stdout.next_line().await.map_err(lost)?.ok_or_else(|| {
            HostError::PluginProtocolError(format!("{CONNECTION_LOST}: plugin closed its output"))
        })?;
        PluginReply::parse_line(&reply).map_err(|e| HostError::PluginProtocolError(e.to_string()))
    }
}
