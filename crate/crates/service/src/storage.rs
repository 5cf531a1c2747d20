//! Consent-gated upload storage: content-addressed files under `uploads/` and
//! one `consent.log` line per stored upload. Nothing is written without consent.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;

pub const UPLOADS_DIR: &str = "uploads";
pub const CONSENT_LOG: &str = "consent.log";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoredUpload {
    pub upload_id: String,
    /// Milliseconds since the Unix epoch.
    pub received_at: u64,
    pub sha256: String,
    pub consent_record: bool,
}

#[derive(Debug)]
pub struct UploadStore {
    root: PathBuf,
    seq: AtomicU64,
    /// Serializes writers of the ledger.
    writer: Mutex<()>,
}

fn extension(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        "png"
    } else if bytes.starts_with(&[0xFF, 0xD8]) {
        "jpg"
    } else {
        "bin"
    }
}

impl UploadStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            seq: AtomicU64::new(0),
            writer: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Persists `bytes` and appends a ledger line. Callers must only invoke this
    /// for requests that carried `consent_to_store=true`.
    pub async fn store_consented(&self, bytes: &[u8]) -> std::io::Result<StoredUpload> {
        let digest = hex::encode(Sha256::digest(bytes));
        let received_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let upload = StoredUpload {
            upload_id: format!("{received_at}-{}", self.seq.fetch_add(1, Ordering::Relaxed)),
            received_at,
            sha256: digest,
            consent_record: true,
        };
        let _guard = self.writer.lock().await;
        let dir = self.root.join(UPLOADS_DIR);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.{}", upload.sha256, extension(bytes)));
        if !path.exists() {
            let tmp = dir.join(format!(".{}.tmp", upload.upload_id));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join(CONSENT_LOG))?;
        writeln!(
            log,
            "{}\t{}\t{}\tconsent=true",
            upload.upload_id, upload.received_at, upload.sha256
        )?;
        log.sync_data()?;
        Ok(upload)
    }

    /// Every file currently under `uploads/`.
    pub fn stored_files(&self) -> std::io::Result<Vec<PathBuf>> {
        let dir = self.root.join(UPLOADS_DIR);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for e in fs::read_dir(dir)? {
            out.push(e?.path());
        }
        out.sort();
        Ok(out)
    }
}
