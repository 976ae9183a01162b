//! Dataset download with pinned content digests.
//!
//! Transport is behind the [`Fetcher`] trait so tests can run without a
//! network. Digests are checked on the *decompressed* payload, so a
//! re-download is triggered whenever an on-disk file is corrupt.

use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar100,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar100" => Ok(DatasetName::Cifar100),
            other => Err(Error::Config(format!("unknown dataset {other}"))),
        }
    }
}

/// Downloads the bytes at `url`.
pub trait Fetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>>;
}

/// Plain HTTP(S) transport.
pub struct HttpFetcher;

impl Fetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>> {
        let resp = ureq::get(url)
            .call()
            .map_err(|e| Error::Fetch(format!("GET {url}: {e}")))?;
        let mut bytes = Vec::new();
        resp.into_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Fetch(format!("reading {url}: {e}")))?;
        Ok(bytes)
    }
}

struct FileSpec {
    url: &'static str,
    /// File name inside the destination directory.
    name: &'static str,
    /// Member path inside a tar archive, when the URL is a tarball.
    tar_member: Option<&'static str>,
    /// SHA-256 of the final decompressed file.
    sha256: &'static str,
}

const MNIST_FILES: &[FileSpec] = &[
    FileSpec {
        url: "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
        name: "train-images-idx3-ubyte",
        tar_member: None,
        sha256: "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    },
    FileSpec {
        url: "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
        name: "train-labels-idx1-ubyte",
        tar_member: None,
        sha256: "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    },
    FileSpec {
        url: "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
        name: "t10k-images-idx3-ubyte",
        tar_member: None,
        sha256: "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    },
    FileSpec {
        url: "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
        name: "t10k-labels-idx1-ubyte",
        tar_member: None,
        sha256: "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    },
];

const CIFAR_FILES: &[FileSpec] = &[
    FileSpec {
        url: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        name: "train.bin",
        tar_member: Some("cifar-100-binary/train.bin"),
        sha256: "f31298fc616915fa142368359df1c4ca2ae984d6915ca468b998a5ec6aeebf29",
    },
    FileSpec {
        url: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        name: "test.bin",
        tar_member: Some("cifar-100-binary/test.bin"),
        sha256: "d8b1e6b7b3bee4020055f0699b111f60b1af1e262aeb93a0b659061746f8224a",
    },
];

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_matches(path: &Path, want: &str) -> bool {
    match std::fs::read(path) {
        Ok(bytes) => sha256_hex(&bytes) == want,
        Err(_) => false,
    }
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Integrity(format!("gzip decode failed: {e}")))?;
    Ok(out)
}

fn tar_member(archive: &[u8], member: &str) -> Result<Vec<u8>> {
    let mut tar = tar::Archive::new(archive);
    for entry in tar
        .entries()
        .map_err(|e| Error::Integrity(format!("tar decode failed: {e}")))?
    {
        let mut entry = entry.map_err(|e| Error::Integrity(format!("tar entry: {e}")))?;
        if entry.path().map(|p| p == Path::new(member)).unwrap_or(false) {
            let mut out = Vec::new();
            entry
                .read_to_end(&mut out)
                .map_err(|e| Error::Integrity(format!("tar read: {e}")))?;
            return Ok(out);
        }
    }
    Err(Error::Integrity(format!("member {member} not found in archive")))
}

/// Ensures the dataset's files exist under `dest_dir` with matching
/// digests. Files already valid on disk cause no network activity; a
/// corrupted file triggers a re-download. Holds an advisory lock file for
/// the duration.
pub fn fetch_dataset(name: DatasetName, dest_dir: &Path, fetcher: &dyn Fetcher) -> Result<()> {
    let specs = match name {
        DatasetName::Mnist => MNIST_FILES,
        DatasetName::Cifar100 => CIFAR_FILES,
    };
    std::fs::create_dir_all(dest_dir)?;
    let lock_path = dest_dir.join(".fetch-lock");
    let _lock = match std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock_path)
    {
        Ok(f) => f,
        Err(_) => {
            return Err(Error::Fetch(format!(
                "another fetch appears to be running ({} exists)",
                lock_path.display()
            )))
        }
    };
    let result = fetch_locked(specs, dest_dir, fetcher);
    let _ = std::fs::remove_file(&lock_path);
    result
}

fn fetch_locked(specs: &[FileSpec], dest_dir: &Path, fetcher: &dyn Fetcher) -> Result<()> {
    // One archive may supply several members; fetch each URL at most once.
    let mut cache: Vec<(String, Vec<u8>)> = Vec::new();
    for spec in specs {
        let dest = dest_dir.join(spec.name);
        if file_matches(&dest, spec.sha256) {
            continue;
        }
        let archive = match cache.iter().find(|(u, _)| u == spec.url) {
            Some((_, bytes)) => bytes.clone(),
            None => {
                let bytes = fetcher.fetch(spec.url)?;
                cache.push((spec.url.to_string(), bytes.clone()));
                bytes
            }
        };
        let decompressed = gunzip(&archive)?;
        let payload = match spec.tar_member {
            Some(member) => tar_member(&decompressed, member)?,
            None => decompressed,
        };
        let got = sha256_hex(&payload);
        if got != spec.sha256 {
            return Err(Error::Integrity(format!(
                "{}: digest {got} does not match pinned {}",
                spec.name, spec.sha256
            )));
        }
        std::fs::write(&dest, payload)?;
    }
    Ok(())
}
