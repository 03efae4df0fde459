//! Data directories: trajectory files, the scene config they came from, and a
//! manifest of SHA-256 hashes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sgnn_core::scenes::{SceneConfig, Trajectory};
use sgnn_core::{Error, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.txt";
pub const SCENE_CONFIG: &str = "scene.cfg";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn trajectory_name(index: usize) -> String {
    format!("traj_{index:05}.sgtj")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub file: String,
    pub seed: u64,
    pub sha256: String,
}

/// `config <sha>` then one `<file> <seed> <sha>` line per trajectory.
pub fn manifest_text(config_sha: &str, entries: &[Entry]) -> String {
    let mut s = format!("config {config_sha}\n");
    for e in entries {
        let _ = writeln!(s, "{} {} {}", e.file, e.seed, e.sha256);
    }
    s
}

fn bad(path: &Path, line: usize, what: &str) -> Error {
    Error::Format(format!("{}:{line}: {what}", path.display()))
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<(String, Vec<Entry>)> {
    let mut lines = text.lines().enumerate();
    let config = match lines
        .next()
        .map(|(_, l)| l.split_whitespace().collect::<Vec<_>>())
    {
        Some(parts) if parts.len() == 2 && parts[0] == "config" => parts[1].to_string(),
        _ => return Err(bad(path, 1, "expected `config <sha256>`")),
    };
    let mut entries = Vec::new();
    for (n, line) in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [file, seed, sha] = parts[..] else {
            return Err(bad(path, n + 1, "expected `<file> <seed> <sha256>`"));
        };
        if file.contains('/') || file.contains('\\') || file.starts_with('.') {
            return Err(bad(
                path,
                n + 1,
                "trajectory names must be plain file names",
            ));
        }
        let seed = seed.parse().map_err(|_| bad(path, n + 1, "bad seed"))?;
        entries.push(Entry {
            file: file.to_string(),
            seed,
            sha256: sha.to_string(),
        });
    }
    if entries.is_empty() {
        return Err(bad(path, 1, "manifest lists no trajectories"));
    }
    Ok((config, entries))
}

/// A generated data directory, checked against its manifest.
pub struct DataDir {
    pub root: PathBuf,
    pub scene: SceneConfig,
    pub entries: Vec<Entry>,
}

impl DataDir {
    /// Reads the scene config and manifest; trajectories are loaded separately.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Config(format!(
                "{} is not a directory",
                root.display()
            )));
        }
        let cfg_path = root.join(SCENE_CONFIG);
        let cfg_text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
        let scene = SceneConfig::parse(&cfg_text)?;
        let manifest_path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
        let (config_sha, entries) = parse_manifest(&manifest_path, &text)?;
        if config_sha != sha256_hex(cfg_text.as_bytes()) {
            return Err(Error::Format(format!(
                "{} does not match the config hash in {}",
                cfg_path.display(),
                manifest_path.display()
            )));
        }
        for e in &entries {
            let p = root.join(&e.file);
            if !p.is_file() {
                return Err(Error::Config(format!("{} is missing", p.display())));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            scene,
            entries,
        })
    }

    pub fn load(&self) -> Result<Vec<Trajectory>> {
        self.entries
            .iter()
            .map(|e| {
                let p = self.root.join(&e.file);
                let bytes = std::fs::read(&p)?;
                if sha256_hex(&bytes) != e.sha256 {
                    return Err(Error::Format(format!(
                        "{} does not match its manifest hash",
                        p.display()
                    )));
                }
                Trajectory::from_bytes(&bytes)
                    .map_err(|err| Error::Format(format!("{}: {err}", p.display())))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            Entry {
                file: trajectory_name(0),
                seed: 7,
                sha256: "ab".into(),
            },
            Entry {
                file: trajectory_name(1),
                seed: 8,
                sha256: "cd".into(),
            },
        ];
        let text = manifest_text("ff", &entries);
        let (c, back) = parse_manifest(Path::new("m"), &text).unwrap();
        assert_eq!(c, "ff");
        assert_eq!(back, entries);
    }

    #[test]
    fn manifest_rejects_junk() {
        for text in [
            "",
            "config",
            "config ff\n",
            "config ff\na b",
            "config ff\n../x 1 ab",
            "config ff\nx y ab",
        ] {
            assert!(parse_manifest(Path::new("m"), text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
