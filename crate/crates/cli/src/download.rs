//! Explicit CIFAR-10 download; nothing touches the network without `--download`.

use std::fs::{self, File};
use std::io;
use std::path::Path;

use relay_jscc::data::{CIFAR10_ARCHIVE, CIFAR10_URL};

use crate::{CliError, CliResult};

/// Fetches the archive into `root` unless it (or its extracted form) is
/// already there. The checksum is verified at ingestion.
pub fn ensure_cifar10(root: &Path) -> CliResult<()> {
    let archive = root.join(CIFAR10_ARCHIVE);
    if archive.exists() || root.join("cifar-10-batches-bin").is_dir() {
        return Ok(());
    }
    fs::create_dir_all(root)?;
    log::info!("downloading {CIFAR10_URL} into {}", root.display());
    let partial = root.join(format!("{CIFAR10_ARCHIVE}.part"));
    let fetch = || -> Result<(), Box<dyn std::error::Error>> {
        let response = ureq::get(CIFAR10_URL).call()?;
        let mut reader = response.into_body().into_reader();
        io::copy(&mut reader, &mut File::create(&partial)?)?;
        Ok(())
    };
    if let Err(e) = fetch() {
        let _ = fs::remove_file(&partial);
        return Err(CliError::Runtime(format!("download of {CIFAR10_URL} failed: {e}")));
    }
    fs::rename(&partial, &archive)?;
    Ok(())
}
