//! On-disk cache for the offline modal form, keyed by a content hash of
//! `(M, K, α, G)` so repeated runs skip the O(n³) stage.
//!
//! The cache directory resolves in this order: the `DAMPKIT_CACHE_DIR`
//! environment variable, an explicit directory argument, then
//! `./.dampkit-cache`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::modal::{build_modal_form, ModalForm};
use crate::system::SystemMatrices;

pub const CACHE_DIR_ENV: &str = "DAMPKIT_CACHE_DIR";

/// Content hash of everything the modal form depends on.
pub fn cache_key(sys: &SystemMatrices) -> String {
    let mut h = Sha256::new();
    h.update((sys.n() as u64).to_le_bytes());
    h.update((sys.num_dampers() as u64).to_le_bytes());
    h.update(sys.alpha().to_bits().to_le_bytes());
    for &x in sys.mass().iter() {
        h.update(x.to_bits().to_le_bytes());
    }
    for &x in sys.stiffness().iter() {
        h.update(x.to_bits().to_le_bytes());
    }
    for &x in sys.damping_geometry().iter() {
        h.update(x.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Active cache directory (environment override wins).
pub fn resolve_cache_dir(explicit: Option<&Path>) -> PathBuf {
    if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(".dampkit-cache"))
}

pub fn cache_path(dir: &Path, sys: &SystemMatrices) -> PathBuf {
    dir.join(format!("modal-{}.json", cache_key(sys)))
}

pub fn store_modal_form(dir: &Path, sys: &SystemMatrices, mf: &ModalForm) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = cache_path(dir, sys);
    let tmp = path.with_extension("json.tmp");
    let file = fs::File::create(&tmp)?;
    serde_json::to_writer(std::io::BufWriter::new(file), mf)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn load_modal_form(dir: &Path, sys: &SystemMatrices) -> Result<Option<ModalForm>> {
    let path = cache_path(dir, sys);
    if !path.exists() {
        return Ok(None);
    }
    let file = fs::File::open(&path)?;
    let mf: ModalForm = serde_json::from_reader(std::io::BufReader::new(file))?;
    Ok(Some(mf))
}

/// Loads the modal form from the cache or builds and stores it.
/// Returns the form and whether it came from the cache.
pub fn load_or_build(dir: &Path, sys: &SystemMatrices) -> Result<(ModalForm, bool)> {
    if let Some(mf) = load_modal_form(dir, sys)? {
        return Ok((mf, true));
    }
    let mf = build_modal_form(sys)?;
    store_modal_form(dir, sys, &mf)?;
    Ok((mf, false))
}
