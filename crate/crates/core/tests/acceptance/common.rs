use std::path::{Path, PathBuf};

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn mock_dir() -> PathBuf {
    manifest_dir().join("fixtures/mock")
}

/// Copies the mock fixture directory into `dest` (without any work or cache
/// dirs) and returns the copied config path.
pub fn copy_mock(dest: &Path) -> PathBuf {
    let src = mock_dir();
    for name in ["config.json", "corpus.json", "mock_fixtures.json", "synthetic_hyperred.jsonl"] {
        std::fs::copy(src.join(name), dest.join(name)).unwrap();
    }
    std::fs::create_dir_all(dest.join("prompts")).unwrap();
    for entry in std::fs::read_dir(src.join("prompts")).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dest.join("prompts").join(entry.file_name())).unwrap();
    }
    dest.join("config.json")
}
