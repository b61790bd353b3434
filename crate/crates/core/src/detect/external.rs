//! Child-process detectors speaking the line protocol over stdin/stdout.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use super::protocol::{decode_response, encode_request, Request, Response};
use super::{DetectError, Detector, DetectorInput};
use crate::geometry::Detection2D;

#[derive(Debug, Clone)]
pub struct ExternalConfig {
    /// Program and arguments.
    pub command: Vec<String>,
    /// Where pseudo-view PNGs are written for the child to read.
    pub scratch_dir: PathBuf,
    /// Number of child processes; requests to one child are serialized.
    pub pool_size: usize,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    /// Responses that arrived for other request ids.
    stash: HashMap<u64, Response>,
    dead: bool,
}

impl Worker {
    fn spawn(command: &[String]) -> Result<Self, DetectError> {
        let (prog, args) = command
            .split_first()
            .ok_or_else(|| DetectError::Unavailable("empty detector command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| DetectError::Unavailable(format!("cannot start {prog}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
            stash: HashMap::new(),
            dead: false,
        })
    }

    fn round_trip(&mut self, req: &Request) -> Result<Response, DetectError> {
        if self.dead {
            return Err(DetectError::Unavailable("detector process exited".into()));
        }
        if let Some(r) = self.stash.remove(&req.id) {
            return Ok(r);
        }
        let line = encode_request(req)?;
        let sent = self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush());
        if let Err(e) = sent {
            self.dead = true;
            return Err(DetectError::Unavailable(format!("write to detector failed: {e}")));
        }
        loop {
            let mut buf = String::new();
            match self.stdout.read_line(&mut buf) {
                Ok(0) | Err(_) => {
                    self.dead = true;
                    return Err(DetectError::Unavailable("detector closed its output".into()));
                }
                Ok(_) => {}
            }
            if buf.trim().is_empty() {
                continue;
            }
            let resp = decode_response(&buf)?;
            match resp.id {
                None => return Ok(resp),
                Some(id) if id == req.id => return Ok(resp),
                Some(id) => {
                    log::warn!("detector answered id {id} while waiting for {}", req.id);
                    self.stash.insert(id, resp);
                }
            }
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A pool of detector child processes.
pub struct ExternalDetector {
    workers: Vec<Mutex<Worker>>,
    scratch_dir: PathBuf,
    next_id: AtomicU64,
    next_worker: AtomicUsize,
}

impl ExternalDetector {
    pub fn spawn(cfg: &ExternalConfig) -> Result<Self, DetectError> {
        std::fs::create_dir_all(&cfg.scratch_dir)?;
        let workers = (0..cfg.pool_size.max(1))
            .map(|_| Worker::spawn(&cfg.command).map(Mutex::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            workers,
            scratch_dir: std::path::absolute(&cfg.scratch_dir)?,
            next_id: AtomicU64::new(1),
            next_worker: AtomicUsize::new(0),
        })
    }

    fn request(&self, req: &Request) -> Result<Response, DetectError> {
        // prefer an idle worker, otherwise queue on the round-robin pick
        for w in &self.workers {
            if let Ok(mut guard) = w.try_lock() {
                return guard.round_trip(req);
            }
        }
        let k = self.next_worker.fetch_add(1, Ordering::Relaxed) % self.workers.len();
        let mut guard = self.workers[k]
            .lock()
            .map_err(|_| DetectError::Unavailable("detector worker poisoned".into()))?;
        guard.round_trip(req)
    }
}

impl Detector for ExternalDetector {
    fn detect(&self, input: &DetectorInput<'_>, class_filter: Option<&str>) -> Result<Vec<Detection2D>, DetectError> {
        if input.image.width() == 0 || input.image.height() == 0 {
            return Err(DetectError::EmptyRaster);
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let path = self.scratch_dir.join(format!("rcv_{}_{id}.png", std::process::id()));
        input
            .image
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| DetectError::Io(std::io::Error::other(e)))?;
        let req = Request {
            id,
            image: path.to_string_lossy().into_owned(),
            class_filter: class_filter.map(str::to_string),
        };
        let result = self.request(&req);
        let _ = std::fs::remove_file(&path);
        let mut boxes = result?.boxes;
        if let Some(f) = class_filter {
            boxes.retain(|d| d.class_label == f);
        }
        Ok(boxes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn python() -> Option<String> {
        let ok = Command::new("python3").arg("-c").arg("pass").status().map(|s| s.success());
        matches!(ok, Ok(true)).then(|| "python3".to_string())
    }

    const SHIM: &str = r#"
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    with open(req["image"], "rb") as f:
        magic = f.read(8)
    boxes = []
    if magic == b"\x89PNG\r\n\x1a\n":
        boxes = [{"class": "sofa", "score": 0.9, "rect": [1, 2, 3, 4]},
                 {"class": "lamp", "score": 0.5, "rect": [0, 0, 2, 2]}]
    print(json.dumps({"id": req["id"], "boxes": boxes}), flush=True)
"#;

    #[test]
    fn shim_round_trip() {
        let Some(py) = python() else {
            eprintln!("python3 not available, skipping");
            return;
        };
        let dir = tempfile::tempdir().unwrap();
        let det = ExternalDetector::spawn(&ExternalConfig {
            command: vec![py, "-c".into(), SHIM.into()],
            scratch_dir: dir.path().to_path_buf(),
            pool_size: 2,
        })
        .unwrap();
        let img = image::RgbImage::new(8, 8);
        let input = DetectorInput {
            image: &img,
            instances: None,
        };
        let all = det.detect(&input, None).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].rect.as_array(), [1.0, 2.0, 3.0, 4.0]);
        let sofas = det.detect(&input, Some("sofa")).unwrap();
        assert_eq!(sofas.len(), 1);
        // scratch files are cleaned up
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn dead_process_is_unavailable() {
        let Some(py) = python() else {
            return;
        };
        let dir = tempfile::tempdir().unwrap();
        let det = ExternalDetector::spawn(&ExternalConfig {
            command: vec![py, "-c".into(), "import sys; sys.exit(0)".into()],
            scratch_dir: dir.path().to_path_buf(),
            pool_size: 1,
        })
        .unwrap();
        let img = image::RgbImage::new(8, 8);
        let input = DetectorInput {
            image: &img,
            instances: None,
        };
        assert!(matches!(det.detect(&input, None), Err(DetectError::Unavailable(_))));
        assert!(matches!(det.detect(&input, None), Err(DetectError::Unavailable(_))));
    }

    #[test]
    fn missing_program_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let res = ExternalDetector::spawn(&ExternalConfig {
            command: vec!["/nonexistent/detector".into()],
            scratch_dir: dir.path().to_path_buf(),
            pool_size: 1,
        });
        assert!(matches!(res, Err(DetectError::Unavailable(_))));
    }
}
