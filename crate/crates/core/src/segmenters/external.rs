//! Batch-file protocol for out-of-process segmenters.
//!
//! For each batch a directory is created under the handle's working
//! directory holding `requests.jsonl` (one `{"index", "image", "box"}` object
//! per line) and an `out/` directory. The command template is run through
//! `sh -c` with `{request}` and `{outdir}` substituted; it must write one
//! rank-2 `PDT1` tensor `mask_{index}.pdt` per request into `{outdir}`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::mask::SoftMask;
use crate::error::{Error, Result};
use crate::io::tensor::read_pdt1;
use crate::prompts::PromptBox;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalHandle {
    pub command: String,
    pub workdir: PathBuf,
    pub resolution: (usize, usize),
    pub timeout: Duration,
    pub keep_files: bool,
}

impl ExternalHandle {
    pub fn new(command: impl Into<String>, workdir: impl Into<PathBuf>, resolution: (usize, usize)) -> Result<Self> {
        let command = command.into();
        if !command.contains("{request}") || !command.contains("{outdir}") {
            return Err(Error::InvalidArgument(format!(
                "external command template must contain {{request}} and {{outdir}}: '{command}'"
            )));
        }
        Ok(Self {
            command,
            workdir: workdir.into(),
            resolution,
            timeout: DEFAULT_TIMEOUT,
            keep_files: false,
        })
    }
}

#[derive(Serialize)]
struct RequestLine<'a> {
    index: usize,
    image: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// Runs an [`ExternalHandle`]; batches are serialized per instance.
#[derive(Debug)]
pub struct ExternalSegmenter {
    handle: ExternalHandle,
    in_flight: Mutex<()>,
    batches: AtomicU64,
}

impl ExternalSegmenter {
    pub fn new(handle: ExternalHandle) -> Self {
        Self {
            handle,
            in_flight: Mutex::new(()),
            batches: AtomicU64::new(0),
        }
    }

    pub fn handle(&self) -> &ExternalHandle {
        &self.handle
    }

    pub fn run(&self, requests: &[(String, PromptBox)]) -> Result<Vec<SoftMask>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let _guard = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        let n = self.batches.fetch_add(1, Ordering::SeqCst);
        let dir = self.handle.workdir.join(format!("batch_{n:06}"));
        let outdir = dir.join("out");
        fs::create_dir_all(&outdir).map_err(|e| Error::io(&outdir, e))?;
        let request_path = dir.join("requests.jsonl");
        let mut body = String::new();
        for (index, (image, b)) in requests.iter().enumerate() {
            body.push_str(&serde_json::to_string(&RequestLine {
                index,
                image,
                bbox: b.to_array(),
            })?);
            body.push('\n');
        }
        fs::write(&request_path, body).map_err(|e| Error::io(&request_path, e))?;

        let cmd = self
            .handle
            .command
            .replace("{request}", &request_path.to_string_lossy())
            .replace("{outdir}", &outdir.to_string_lossy());
        run_with_timeout(&cmd, &self.handle.workdir, self.handle.timeout)?;

        let masks = (0..requests.len())
            .map(|i| self.read_mask(&outdir, i))
            .collect::<Result<Vec<_>>>()?;
        if !self.handle.keep_files {
            let _ = fs::remove_dir_all(&dir);
        }
        Ok(masks)
    }

    fn read_mask(&self, outdir: &Path, index: usize) -> Result<SoftMask> {
        let path = outdir.join(format!("mask_{index}.pdt"));
        if !path.exists() {
            return Err(Error::Segmenter {
                index,
                message: format!("missing output {}", path.display()),
            });
        }
        let t = read_pdt1(&path).map_err(|e| Error::Segmenter {
            index,
            message: e.to_string(),
        })?;
        let (h, w) = self.handle.resolution;
        if t.dims != [h, w] {
            return Err(Error::Segmenter {
                index,
                message: format!("ill-shaped mask {:?}, expected [{h}, {w}]", t.dims),
            });
        }
        let probs: Vec<f64> = t.data.iter().map(|&v| f64::from(v)).collect();
        SoftMask::new(h, w, probs).map_err(|e| Error::Segmenter {
            index,
            message: e.to_string(),
        })
    }
}

fn run_with_timeout(cmd: &str, workdir: &Path, timeout: Duration) -> Result<()> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::External(format!("failed to spawn '{cmd}': {e}")))?;
    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::External(format!("timed out after {:?}: '{cmd}'", timeout)));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(Error::External(format!("wait failed: {e}"))),
        }
    };
    let mut stderr = String::new();
    if let Some(mut s) = child.stderr.take() {
        let _ = s.read_to_string(&mut stderr);
    }
    if !status.success() {
        return Err(Error::External(format!(
            "'{cmd}' exited with {status}; stderr: {}",
            stderr.trim()
        )));
    }
    Ok(())
}
