//! Small shared helpers: seed derivation, hashing, atomic file writes.

use std::fs;
use std::io;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step, used to mix seed material.
pub fn split_mix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a list of context tags.
///
/// All randomness in the crate is derived this way, so any draw is a pure
/// function of (master seed, tags). Training can resume mid-run and
/// reproduce the exact stream without serializing generator state.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0xD6E8_FEB8_6659_FD93;
    let mut out = split_mix64(&mut state);
    for &t in tags {
        state ^= t;
        out ^= split_mix64(&mut state).rotate_left(17);
    }
    out
}

/// Seeded generator for a given context.
pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Context tags for the seed streams used by the training pipeline.
pub mod stream {
    pub const INIT: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const SLOTS: u64 = 0x04;
    pub const SCENES: u64 = 0x05;
    pub const GRADCHECK: u64 = 0x06;
}

/// FNV-1a over bytes; used for run-config fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Appends one line to a TSV file, creating it with a header when absent.
pub fn append_tsv_line(path: &Path, header: &str, line: &str) -> io::Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let exists = path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if !exists {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}
