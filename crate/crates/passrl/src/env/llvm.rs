//! Backend driving an external LLVM-style toolchain: a frontend compiles
//! sources to textual IR, the optimizer CLI applies decoded invocations,
//! and the linker turns IR into an executable that is timed with fixed
//! per-program arguments from a manifest file.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, EnvError};
use crate::action::Invocation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlvmBackendConfig {
    /// Frontend executable (e.g. `clang`).
    pub frontend: PathBuf,
    /// Optimizer executable (e.g. `opt`).
    pub optimizer: PathBuf,
    /// Linker/driver used to turn IR into an executable (usually the
    /// frontend again).
    pub linker: PathBuf,
    /// Extra frontend flags when emitting base IR.
    #[serde(default = "default_frontend_flags")]
    pub frontend_flags: Vec<String>,
    /// Optimizer flags for the O3 baseline.
    #[serde(default = "default_o3_flags")]
    pub o3_flags: Vec<String>,
    /// Extra linker flags.
    #[serde(default)]
    pub linker_flags: Vec<String>,
    /// Pass pipelines via `-passes=a,b` (new pass manager) instead of
    /// `-a -b` flags.
    #[serde(default = "default_true")]
    pub new_pass_manager: bool,
    /// Manifest of fixed run arguments: `program_id<TAB>argv...` lines.
    #[serde(default)]
    pub run_args_manifest: Option<PathBuf>,
    #[serde(default = "default_optimize_timeout")]
    pub optimize_timeout_secs: u64,
    #[serde(default = "default_run_timeout")]
    pub run_timeout_secs: u64,
}

fn default_frontend_flags() -> Vec<String> {
    ["-S", "-emit-llvm", "-O0", "-Xclang", "-disable-O0-optnone"]
        .map(String::from)
        .to_vec()
}

fn default_o3_flags() -> Vec<String> {
    vec!["-O3".into()]
}

fn default_true() -> bool {
    true
}

fn default_optimize_timeout() -> u64 {
    60
}

fn default_run_timeout() -> u64 {
    300
}

impl Default for LlvmBackendConfig {
    fn default() -> Self {
        Self {
            frontend: "clang".into(),
            optimizer: "opt".into(),
            linker: "clang".into(),
            frontend_flags: default_frontend_flags(),
            o3_flags: default_o3_flags(),
            linker_flags: vec![],
            new_pass_manager: true,
            run_args_manifest: None,
            optimize_timeout_secs: default_optimize_timeout(),
            run_timeout_secs: default_run_timeout(),
        }
    }
}

pub struct LlvmBackend {
    cfg: LlvmBackendConfig,
    run_args: HashMap<String, Vec<String>>,
}

impl LlvmBackend {
    pub fn new(cfg: LlvmBackendConfig) -> Result<Self, EnvError> {
        let run_args = match &cfg.run_args_manifest {
            None => HashMap::new(),
            Some(path) => parse_manifest(path)?,
        };
        Ok(Self { cfg, run_args })
    }

    /// True when both the frontend and the optimizer can be spawned.
    pub fn toolchain_available(cfg: &LlvmBackendConfig) -> bool {
        [&cfg.frontend, &cfg.optimizer].iter().all(|exe| {
            Command::new(exe)
                .arg("--version")
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status()
                .map(|s| s.success())
                .unwrap_or(false)
        })
    }

    fn scratch_dir(&self) -> Result<tempfile::TempDir, EnvError> {
        tempfile::TempDir::with_prefix("passrl-llvm-")
            .map_err(|source| EnvError::Io { what: "scratch dir".into(), source })
    }

    fn optimizer_args(&self, invocation: &Invocation) -> Vec<String> {
        let mut args = vec!["-S".to_string()];
        for (name, value) in &invocation.flags {
            args.push(format!("-{name}={value}"));
        }
        if self.cfg.new_pass_manager {
            args.push(format!("-passes={}", invocation.passes.join(",")));
        } else {
            for pass in &invocation.passes {
                args.push(format!("-{pass}"));
            }
        }
        args
    }
}

/// `program_id<TAB>argv...` per line; blank and `#` lines skipped.
fn parse_manifest(path: &Path) -> Result<HashMap<String, Vec<String>>, EnvError> {
    let text = fs::read_to_string(path)
        .map_err(|source| EnvError::Io { what: format!("manifest {}", path.display()), source })?;
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let id = parts.next().unwrap_or_default().trim().to_string();
        if id.is_empty() {
            continue;
        }
        map.insert(id, parts.map(str::to_string).collect());
    }
    Ok(map)
}

/// Run a command with stdout/stderr captured to files, killing it if it
/// exceeds the timeout. Returns captured stderr on non-zero exit.
fn run_checked(mut cmd: Command, what: &str, timeout: Duration) -> Result<Duration, EnvError> {
    let io_err = |source| EnvError::Io { what: what.to_string(), source };
    let mut stderr_file = tempfile::tempfile().map_err(io_err)?;
    cmd.stdout(Stdio::null());
    cmd.stderr(stderr_file.try_clone().map_err(io_err)?);
    let started = Instant::now();
    let mut child = cmd.spawn().map_err(io_err)?;
    loop {
        match child.try_wait().map_err(io_err)? {
            Some(status) => {
                let elapsed = started.elapsed();
                if status.success() {
                    return Ok(elapsed);
                }
                let mut stderr = String::new();
                use std::io::Seek;
                let _ = stderr_file.rewind();
                let _ = stderr_file.read_to_string(&mut stderr);
                let tail: String = stderr.chars().rev().take(2000).collect::<Vec<_>>()
                    .into_iter().rev().collect();
                return Err(EnvError::BackendFailed {
                    stderr: format!("{what} exited with {status}: {tail}"),
                });
            }
            None => {
                if started.elapsed() >= timeout {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(EnvError::Timeout {
                        what: what.to_string(),
                        seconds: timeout.as_secs(),
                    });
                }
                std::thread::sleep(Duration::from_millis(2));
            }
        }
    }
}

impl Backend for LlvmBackend {
    fn base_ir(&self, source_name: &str, source_text: &str) -> Result<String, EnvError> {
        let dir = self.scratch_dir()?;
        let ext = Path::new(source_name)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("c");
        let src = dir.path().join(format!("input.{ext}"));
        let out = dir.path().join("base.ll");
        fs::write(&src, source_text)
            .map_err(|source| EnvError::Io { what: "write source".into(), source })?;
        let mut cmd = Command::new(&self.cfg.frontend);
        cmd.args(&self.cfg.frontend_flags).arg(&src).arg("-o").arg(&out);
        run_checked(cmd, "frontend", Duration::from_secs(self.cfg.optimize_timeout_secs))?;
        fs::read_to_string(&out)
            .map_err(|source| EnvError::Io { what: "read base ir".into(), source })
    }

    fn o3_ir(&self, base_ir: &str) -> Result<String, EnvError> {
        let dir = self.scratch_dir()?;
        let input = dir.path().join("in.ll");
        let out = dir.path().join("o3.ll");
        fs::write(&input, base_ir)
            .map_err(|source| EnvError::Io { what: "write ir".into(), source })?;
        let mut cmd = Command::new(&self.cfg.optimizer);
        cmd.arg("-S").args(&self.cfg.o3_flags).arg(&input).arg("-o").arg(&out);
        run_checked(cmd, "optimizer -O3", Duration::from_secs(self.cfg.optimize_timeout_secs))?;
        fs::read_to_string(&out)
            .map_err(|source| EnvError::Io { what: "read o3 ir".into(), source })
    }

    fn optimize(&self, ir: &str, invocation: &Invocation) -> Result<String, EnvError> {
        let dir = self.scratch_dir()?;
        let input = dir.path().join("in.ll");
        let out = dir.path().join("out.ll");
        fs::write(&input, ir)
            .map_err(|source| EnvError::Io { what: "write ir".into(), source })?;
        let mut cmd = Command::new(&self.cfg.optimizer);
        cmd.args(self.optimizer_args(invocation)).arg(&input).arg("-o").arg(&out);
        run_checked(cmd, "optimizer", Duration::from_secs(self.cfg.optimize_timeout_secs))?;
        fs::read_to_string(&out)
            .map_err(|source| EnvError::Io { what: "read optimized ir".into(), source })
    }

    fn compile_and_run(&self, program_id: &str, ir: &str) -> Result<f64, EnvError> {
        let dir = self.scratch_dir()?;
        let input = dir.path().join("in.ll");
        let exe = dir.path().join("bench");
        fs::write(&input, ir)
            .map_err(|source| EnvError::Io { what: "write ir".into(), source })?;
        let mut link = Command::new(&self.cfg.linker);
        link.args(&self.cfg.linker_flags).arg(&input).arg("-o").arg(&exe);
        run_checked(link, "linker", Duration::from_secs(self.cfg.optimize_timeout_secs))?;

        let mut run = Command::new(&exe);
        if let Some(args) = self.run_args.get(program_id) {
            run.args(args);
        }
        run.stdin(Stdio::null());
        let elapsed = run_checked(run, "benchmark run", Duration::from_secs(self.cfg.run_timeout_secs))?;
        let seconds = elapsed.as_secs_f64();
        if seconds <= 0.0 {
            // Sub-resolution runs still took nonzero time.
            return Ok(f64::MIN_POSITIVE.max(1e-9));
        }
        Ok(seconds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parses_ids_and_argv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.tsv");
        fs::write(&path, "# comment\nfib\t10\t20\nempty\n").unwrap();
        let map = parse_manifest(&path).unwrap();
        assert_eq!(map["fib"], ["10", "20"]);
        assert_eq!(map["empty"], Vec::<String>::new());
    }

    #[test]
    fn optimizer_args_cover_both_pass_managers() {
        let inv = Invocation {
            passes: vec!["gvn".into(), "licm".into()],
            flags: vec![("enable-pre".into(), "false".into())],
        };
        let mut cfg = LlvmBackendConfig::default();
        cfg.new_pass_manager = true;
        let new_pm = LlvmBackend::new(cfg.clone()).unwrap().optimizer_args(&inv);
        assert_eq!(new_pm, ["-S", "-enable-pre=false", "-passes=gvn,licm"]);
        cfg.new_pass_manager = false;
        let legacy = LlvmBackend::new(cfg).unwrap().optimizer_args(&inv);
        assert_eq!(legacy, ["-S", "-enable-pre=false", "-gvn", "-licm"]);
    }

    #[test]
    fn missing_toolchain_is_detected() {
        let cfg = LlvmBackendConfig {
            frontend: "definitely-not-a-compiler".into(),
            optimizer: "definitely-not-an-optimizer".into(),
            ..Default::default()
        };
        assert!(!LlvmBackend::toolchain_available(&cfg));
    }

    #[test]
    fn failed_commands_surface_stderr() {
        let mut cmd = Command::new("sh");
        cmd.args(["-c", "echo boom >&2; exit 3"]);
        let err = run_checked(cmd, "probe", Duration::from_secs(5)).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("boom"), "{text}");
    }

    #[test]
    fn timeouts_kill_the_child() {
        let mut cmd = Command::new("sleep");
        cmd.arg("5");
        let started = Instant::now();
        let err = run_checked(cmd, "sleep", Duration::from_millis(50)).unwrap_err();
        assert!(matches!(err, EnvError::Timeout { .. }));
        assert!(started.elapsed() < Duration::from_secs(2));
    }
}
