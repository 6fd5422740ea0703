//! Escape hatch to outside tools (registration, bias correction, ...):
//! the volume goes out as NIfTI, the command runs, the result comes back.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::volio::{read_nifti, write_nifti};
use crate::volume::AffineVolume;

use super::TransformError;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);
const STDERR_TAIL: u64 = 2048;

struct Permits {
    used: Mutex<usize>,
    limit: Mutex<usize>,
    freed: Condvar,
}

static PERMITS: Permits = Permits {
    used: Mutex::new(0),
    limit: Mutex::new(2),
    freed: Condvar::new(),
};

/// Maximum number of external commands running at once (default 2).
pub fn set_max_concurrent(n: usize) {
    *PERMITS.limit.lock().expect("permit lock") = n.max(1);
    PERMITS.freed.notify_all();
}

struct Permit;

impl Permit {
    fn acquire() -> Self {
        let mut used = PERMITS.used.lock().expect("permit lock");
        loop {
            let limit = *PERMITS.limit.lock().expect("permit lock");
            if *used < limit {
                *used += 1;
                return Permit;
            }
            used = PERMITS.freed.wait(used).expect("permit lock");
        }
    }
}

impl Drop for Permit {
    fn drop(&mut self) {
        *PERMITS.used.lock().expect("permit lock") -= 1;
        PERMITS.freed.notify_one();
    }
}

fn tail(file: &mut File) -> String {
    let len = file.seek(SeekFrom::End(0)).unwrap_or(0);
    let _ = file.seek(SeekFrom::Start(len.saturating_sub(STDERR_TAIL)));
    let mut buf = Vec::new();
    let _ = file.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).into_owned()
}

/// Runs `template` through `sh -c` after substituting `{input}` and
/// `{output}` with temporary `.nii.gz` paths. The temporary directory is
/// removed whatever the outcome.
pub fn run_external(
    template: &str,
    v: &AffineVolume,
    timeout: Duration,
) -> Result<AffineVolume, TransformError> {
    if !template.contains("{input}") || !template.contains("{output}") {
        return Err(TransformError::BadParam(
            "command template needs both {input} and {output} placeholders".into(),
        ));
    }
    let dir = tempfile::tempdir()?;
    let input = dir.path().join("input.nii.gz");
    let output = dir.path().join("output.nii.gz");
    write_nifti(v, &input, true)?;
    let cmd = template
        .replace("{input}", &input.to_string_lossy())
        .replace("{output}", &output.to_string_lossy());

    let _permit = Permit::acquire();
    let mut stderr = tempfile::tempfile()?;
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(stderr.try_clone()?)
        .spawn()?;
    let start = Instant::now();
    let status = loop {
        if let Some(st) = child.try_wait()? {
            break st;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(TransformError::Timeout(timeout));
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    if !status.success() {
        return Err(TransformError::CommandFailed {
            code: status.code(),
            stderr: tail(&mut stderr),
        });
    }
    if !output.exists() {
        return Err(TransformError::OutputMissing(cmd));
    }
    let mut out = read_nifti(&output)?;
    out.meta = v.meta.clone();
    Ok(out)
}
