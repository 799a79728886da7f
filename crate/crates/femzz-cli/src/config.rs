//! Optional INI-style key=value configuration files. Lines starting with '#'
//! or ';' are comments; section headers are accepted and ignored.

use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> std::io::Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut values = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.values.get(key).cloned()
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.values.get(key)?.parse().ok()
    }

    pub fn get_usize(&self, key: &str) -> Option<usize> {
        self.values.get(key)?.parse().ok()
    }

    pub fn get_i32(&self, key: &str) -> Option<i32> {
        self.values.get(key)?.parse().ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_keys_and_ignores_noise() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "# comment").unwrap();
        writeln!(file, "[section]").unwrap();
        writeln!(file, "tol_eps = 0.25").unwrap();
        writeln!(file, "problem=p3").unwrap();
        writeln!(file, "k_max = 12").unwrap();
        let cfg = FileConfig::load(file.path()).unwrap();
        assert_eq!(cfg.get_f64("tol_eps"), Some(0.25));
        assert_eq!(cfg.get("problem").as_deref(), Some("p3"));
        assert_eq!(cfg.get_usize("k_max"), Some(12));
        assert_eq!(cfg.get("missing"), None);
    }
}
