//! Subprocess plumbing shared by the external detector and ASR plugins.

use std::io::Write;
use std::process::{Command, Stdio};

use crate::audio_io::{write_wav_i16, AudioClip};

/// Writes `clip` to a temporary 16-bit WAV, runs `command` with the path as
/// its final argument, and returns stdout. Errors carry a readable reason.
pub(crate) fn run_on_wav(command: &[String], clip: &AudioClip) -> std::result::Result<String, String> {
    let (program, args) = command.split_first().ok_or("empty command")?;
    let dir = tempfile::tempdir().map_err(|e| format!("temp dir: {e}"))?;
    let path = dir.path().join(format!("{}.wav", sanitize(&clip.clip_id)));
    write_wav_i16(&path, &clip.samples, clip.sample_rate).map_err(|e| e.to_string())?;
    let out = Command::new(program)
        .args(args)
        .arg(&path)
        .stdin(Stdio::null())
        .output()
        .map_err(|e| format!("failed to spawn `{program}`: {e}"))?;
    finish(program, out)
}

/// Runs `command` with `input` on stdin and returns stdout.
pub(crate) fn run_with_stdin(command: &[String], input: &str) -> std::result::Result<String, String> {
    let (program, args) = command.split_first().ok_or("empty command")?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("failed to spawn `{program}`: {e}"))?;
    child
        .stdin
        .take()
        .expect("piped stdin")
        .write_all(input.as_bytes())
        .map_err(|e| format!("writing to `{program}`: {e}"))?;
    let out = child.wait_with_output().map_err(|e| format!("waiting for `{program}`: {e}"))?;
    finish(program, out)
}

fn finish(program: &str, out: std::process::Output) -> std::result::Result<String, String> {
    if !out.status.success() {
        return Err(format!(
            "`{program}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| format!("`{program}` wrote non-UTF-8 output: {e}"))
}

fn sanitize(id: &str) -> String {
    let s: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    if s.is_empty() {
        "clip".into()
    } else {
        s
    }
}
