//! Download and extraction of the v2 archive.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{KwsError, Result};

pub const DEFAULT_URL: &str = "http://download.tensorflow.org/data/speech_commands_v0.02.tar.gz";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchOptions {
    pub url: String,
    /// Checked against the downloaded byte count when set.
    pub expected_bytes: Option<u64>,
}

impl Default for FetchOptions {
    fn default() -> Self {
        FetchOptions { url: DEFAULT_URL.into(), expected_bytes: None }
    }
}

/// Downloads the archive into `root` and extracts it there. The archive is
/// written to a `.part` file first and only renamed once its size checks out.
pub fn fetch(root: &Path, opts: &FetchOptions) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| KwsError::io(root, e))?;
    let archive = root.join("speech_commands_v0.02.tar.gz");
    if !archive.exists() {
        download(&opts.url, &archive, opts.expected_bytes)?;
    }
    extract(&archive, root)?;
    Ok(archive)
}

pub fn download(url: &str, dest: &Path, expected: Option<u64>) -> Result<u64> {
    let mut resp = ureq::get(url).call().map_err(|e| KwsError::Download(format!("{url}: {e}")))?;
    let declared = resp
        .headers()
        .get("content-length")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    let part = dest.with_extension("part");
    let mut out = File::create(&part).map_err(|e| KwsError::io(&part, e))?;
    let mut reader = resp.body_mut().as_reader();
    let n = io::copy(&mut reader, &mut out).map_err(|e| KwsError::Download(format!("{url}: {e}")))?;
    out.flush().map_err(|e| KwsError::io(&part, e))?;
    for want in [declared, expected].into_iter().flatten() {
        if n != want {
            let _ = fs::remove_file(&part);
            return Err(KwsError::Download(format!("{url}: received {n} bytes, expected {want}")));
        }
    }
    fs::rename(&part, dest).map_err(|e| KwsError::io(dest, e))?;
    log::info!("downloaded {n} bytes to {}", dest.display());
    Ok(n)
}

/// Unpacks a `.tar.gz` into `root`.
pub fn extract(archive: &Path, root: &Path) -> Result<()> {
    let f = File::open(archive).map_err(|e| KwsError::io(archive, e))?;
    tar::Archive::new(GzDecoder::new(f))
        .unpack(root)
        .map_err(|e| KwsError::Dataset { path: archive.into(), msg: format!("extraction failed: {e}") })
}
