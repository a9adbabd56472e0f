//! Runs an executor as a child process speaking the line protocol.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{parse_line, ExecutorRequest, ExecutorResponse, WireLine};
use super::{ExecutorError, NodeExecutor};
use crate::pool::PoolEntry;

#[derive(Clone, Debug)]
pub struct ProcessExecutor {
    program: String,
    args: Vec<String>,
}

impl ProcessExecutor {
    /// `command[0]` is the program, the rest are its arguments.
    pub fn new(command: &[String]) -> Result<Self, ExecutorError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| ExecutorError::Spawn("empty executor command".into()))?;
        Ok(ProcessExecutor {
            program: program.clone(),
            args: args.to_vec(),
        })
    }

    fn kill(child: &mut Child) {
        let _ = child.kill();
        let _ = child.wait();
    }
}

enum Line {
    Parsed(Result<WireLine, String>),
    Eof,
    Failed(std::io::Error),
}

impl NodeExecutor for ProcessExecutor {
    fn execute(
        &self,
        request: &ExecutorRequest,
        _pool: &[PoolEntry],
        timeout: Option<Duration>,
    ) -> Result<ExecutorResponse, ExecutorError> {
        let started = Instant::now();
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ExecutorError::Spawn(format!("{}: {e}", self.program)))?;

        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            let mut line = serde_json::to_vec(request).expect("request serializes");
            line.push(b'\n');
            // A child that exits without reading its input is reported via
            // its exit status below, not as a write error.
            let _ = stdin.write_all(&line).and_then(|_| stdin.flush());
        }

        let stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr = child.stderr.take().expect("stderr is piped");
        let stderr_reader = thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let msg = match line {
                    Ok(l) if l.trim().is_empty() => continue,
                    Ok(l) => Line::Parsed(parse_line(&l)),
                    Err(e) => Line::Failed(e),
                };
                if tx.send(msg).is_err() {
                    return;
                }
            }
            let _ = tx.send(Line::Eof);
        });

        let deadline = timeout.map(|t| started + t);
        let response = loop {
            let next = match deadline {
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    match rx.recv_timeout(left) {
                        Ok(m) => m,
                        Err(mpsc::RecvTimeoutError::Timeout) => {
                            Self::kill(&mut child);
                            return Err(ExecutorError::Timeout(timeout.unwrap_or_default().as_secs_f64()));
                        }
                        Err(mpsc::RecvTimeoutError::Disconnected) => Line::Eof,
                    }
                }
                None => rx.recv().unwrap_or(Line::Eof),
            };
            match next {
                Line::Parsed(Ok(WireLine::Progress(p))) => {
                    log::debug!("executor {}: progress {p}", request.v);
                }
                Line::Parsed(Ok(WireLine::Terminal(r))) => break r,
                Line::Parsed(Err(msg)) => {
                    Self::kill(&mut child);
                    return Err(ExecutorError::Protocol(msg));
                }
                Line::Failed(e) => {
                    Self::kill(&mut child);
                    return Err(ExecutorError::Protocol(format!("reading stdout: {e}")));
                }
                Line::Eof => {
                    let status = child.wait().map_err(|e| ExecutorError::Protocol(e.to_string()))?;
                    let stderr = stderr_reader.join().unwrap_or_default();
                    if status.success() {
                        return Err(ExecutorError::Protocol("exited without a terminal response".into()));
                    }
                    return Err(ExecutorError::Exit {
                        code: status.code(),
                        stderr: stderr.trim().chars().take(2000).collect(),
                    });
                }
            }
        };

        let status = child.wait().map_err(|e| ExecutorError::Protocol(e.to_string()))?;
        if !status.success() {
            let stderr = stderr_reader.join().unwrap_or_default();
            return Err(ExecutorError::Exit {
                code: status.code(),
                stderr: stderr.trim().chars().take(2000).collect(),
            });
        }
        let mut response = response;
        if response.cost.wall_seconds <= 0.0 {
            response.cost.wall_seconds = started.elapsed().as_secs_f64();
        }
        Ok(response)
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::executor::protocol::{ResponseStatus, WireKind};
    use crate::task::TaskSpec;
    use crate::tree::NodeId;

    fn request() -> ExecutorRequest {
        ExecutorRequest {
            v: NodeId::new(4),
            kind: WireKind::Black,
            task: TaskSpec::new("t"),
            context: vec![],
            pool_manifest: String::new(),
            pool_watermark: 0,
            seed: 1,
        }
    }

    fn sh(script: &str) -> ProcessExecutor {
        ProcessExecutor::new(&["sh".to_string(), "-c".to_string(), script.to_string()]).unwrap()
    }

    #[test]
    fn reads_terminal_response_after_progress() {
        let exec = sh(r#"read req; echo '{"v":"n4","event":"progress"}'; echo '{"v":"n4","status":"ok","payload":{"data_state":{"state_id":"s"},"raw_score":0.8},"cost":{"tool_calls":2,"wall_seconds":1.5}}'"#);
        let r = exec.execute(&request(), &[], Some(Duration::from_secs(10))).unwrap();
        assert_eq!(r.status, ResponseStatus::Ok);
        assert_eq!(r.cost.tool_calls, 2);
        assert_eq!(r.cost.wall_seconds, 1.5);
    }

    #[test]
    fn nonzero_exit_is_an_error() {
        let exec = sh("read req; echo boom >&2; exit 3");
        match exec.execute(&request(), &[], None) {
            Err(ExecutorError::Exit { code, stderr }) => {
                assert_eq!(code, Some(3));
                assert_eq!(stderr, "boom");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn timeout_kills_the_child() {
        let exec = sh("read req; sleep 5");
        let started = Instant::now();
        let r = exec.execute(&request(), &[], Some(Duration::from_millis(200)));
        assert!(matches!(r, Err(ExecutorError::Timeout(_))));
        assert!(started.elapsed() < Duration::from_secs(4));
    }

    #[test]
    fn garbage_output_is_a_protocol_error() {
        let exec = sh("read req; echo 'hello'");
        assert!(matches!(exec.execute(&request(), &[], None), Err(ExecutorError::Protocol(_))));
    }

    #[test]
    fn missing_program_fails_to_spawn() {
        let exec = ProcessExecutor::new(&["/definitely/not/here".to_string()]).unwrap();
        assert!(matches!(exec.execute(&request(), &[], None), Err(ExecutorError::Spawn(_))));
    }
}
