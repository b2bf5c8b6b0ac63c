//! Plain-text inputs and outputs: phoneme lists, codec grids, run locks.

use std::fs;
use std::path::{Path, PathBuf};

use smd::token_grid::CodecGrid;

use crate::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Whitespace-separated phoneme ids.
pub fn parse_phonemes(text: &str, vocab: usize, path: &Path) -> Result<Vec<u16>, CliError> {
    let mut out = Vec::new();
    for (i, tok) in text.split_whitespace().enumerate() {
        let p: u16 = tok.parse().map_err(|_| {
            CliError::Validation(format!("{}: token {} ({tok:?}) is not a phoneme id", path.display(), i + 1))
        })?;
        if p as usize >= vocab {
            return Err(CliError::Validation(format!(
                "{}: phoneme {p} outside vocabulary of {vocab}",
                path.display()
            )));
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(CliError::Validation(format!("{}: no phonemes", path.display())));
    }
    Ok(out)
}

/// One frame per line, `channels` whitespace-separated tokens per frame.
pub fn parse_grid(text: &str, channels: usize, vocab: usize, path: &Path) -> Result<CodecGrid, CliError> {
    let mut tokens = Vec::new();
    let mut frames = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<&str> = line.split_whitespace().collect();
        if row.len() != channels {
            return Err(CliError::Validation(format!(
                "{} line {}: {} tokens, expected {channels}",
                path.display(),
                i + 1,
                row.len()
            )));
        }
        for tok in row {
            let t: u16 = tok.parse().map_err(|_| {
                CliError::Validation(format!("{} line {}: bad token {tok:?}", path.display(), i + 1))
            })?;
            tokens.push(t);
        }
        frames += 1;
    }
    CodecGrid::new(frames, channels, vocab, tokens)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn render_grid(grid: &CodecGrid) -> String {
    let mut out = String::new();
    for t in 0..grid.frames() {
        let row: Vec<String> = grid.row(t).iter().map(|x| x.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub const LOCK_FILE: &str = ".smd.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
