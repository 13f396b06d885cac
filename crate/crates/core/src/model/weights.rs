//! Local cache of published pretrained weights.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::registry::WeightSource;
use crate::error::FetchError;

pub const CACHE_ENV: &str = "MRI_BENCH_CACHE";

/// `$MRI_BENCH_CACHE`, else `configured`, else `$HOME/.cache/mri-bench`.
pub fn cache_dir(configured: Option<&Path>) -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(dir) = configured {
        return dir.to_path_buf();
    }
    std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
        .join(".cache")
        .join("mri-bench")
}

pub fn sha256_file(path: &Path) -> Result<String, FetchError> {
    let io_err = |source| FetchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::open(path).map_err(io_err)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn pin_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".sha256");
    path.with_file_name(name)
}

fn expected_digest(source: &WeightSource, path: &Path) -> Result<Option<String>, FetchError> {
    if let Some(pinned) = source.sha256 {
        return Ok(Some(pinned.to_ascii_lowercase()));
    }
    let pin = pin_path(path);
    match fs::read_to_string(&pin) {
        Ok(text) => Ok(Some(text.trim().to_ascii_lowercase())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(FetchError::Io { path: pin, source }),
    }
}

/// Verify a cached file against the registry digest or the first-use pin.
pub fn verify_cached(source: &WeightSource, path: &Path) -> Result<(), FetchError> {
    let actual = sha256_file(path)?;
    match expected_digest(source, path)? {
        Some(expected) if expected != actual => Err(FetchError::Checksum {
            path: path.to_path_buf(),
            expected,
            actual,
        }),
        Some(_) => Ok(()),
        None => fs::write(pin_path(path), format!("{actual}\n")).map_err(|source| FetchError::Io {
            path: pin_path(path),
            source,
        }),
    }
}

/// Return the verified local path of a weight file, downloading it if needed.
pub fn fetch_weights(source: &WeightSource, cache: &Path) -> Result<PathBuf, FetchError> {
    let path = cache.join(source.file_name);
    if path.is_file() {
        verify_cached(source, &path)?;
        return Ok(path);
    }
    fs::create_dir_all(cache).map_err(|e| FetchError::Io {
        path: cache.to_path_buf(),
        source: e,
    })?;
    let partial = cache.join(format!("{}.partial", source.file_name));
    download(source.url, &partial)?;
    if let Err(e) = verify_cached(source, &partial) {
        let _ = fs::remove_file(&partial);
        return Err(e);
    }
    let partial_pin = pin_path(&partial);
    fs::rename(&partial, &path).map_err(|e| FetchError::Io {
        path: path.clone(),
        source: e,
    })?;
    if partial_pin.exists() {
        fs::rename(&partial_pin, pin_path(&path)).map_err(|e| FetchError::Io {
            path: pin_path(&path),
            source: e,
        })?;
    }
    Ok(path)
}

fn download(url: &str, dest: &Path) -> Result<(), FetchError> {
    let network = |message: String| FetchError::Network {
        url: url.to_owned(),
        message,
    };
    // no overall limit: weight files are hundreds of megabytes
    let agent = ureq::Agent::config_builder()
        .timeout_connect(Some(Duration::from_secs(30)))
        .timeout_recv_response(Some(Duration::from_secs(60)))
        .build()
        .new_agent();
    let mut response = agent.get(url).call().map_err(|e| network(e.to_string()))?;
    let mut reader = response.body_mut().with_config().limit(u64::MAX).reader();
    let io_err = |source| FetchError::Io {
        path: dest.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(dest).map_err(io_err)?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = reader.read(&mut buf).map_err(|e| network(e.to_string()))?;
        if n == 0 {
            break;
        }
        file.write_all(&buf[..n]).map_err(io_err)?;
    }
    file.sync_all().map_err(io_err)
}
