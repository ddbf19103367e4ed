//! Line-oriented `key = value` files used for the model config sidecar,
//! the defense manifest, and experiment configs. Keys keep file order;
//! `#` starts a comment line.

use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// All values for a repeated key, in file order.
    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn require(&self, key: &str) -> Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing key {key:?}"))
    }

    pub fn parse_req<T: std::str::FromStr>(&self, key: &str) -> Result<T, String> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| format!("key {key:?} has unparsable value {raw:?}"))
    }

    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, String> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| format!("key {key:?} has unparsable value {raw:?}")),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (k, v) = trimmed
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`, got {line:?}", lineno + 1))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_text(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_lookup() {
        let mut kv = KvFile::new();
        kv.push("block_size", 4);
        kv.push("pair", "pair_1.bin");
        kv.push("pair", "pair_2.bin");
        let parsed = KvFile::from_text(&kv.to_text()).unwrap();
        assert_eq!(parsed.parse_req::<usize>("block_size").unwrap(), 4);
        assert_eq!(parsed.get_all("pair"), vec!["pair_1.bin", "pair_2.bin"]);
        assert!(parsed.get("missing").is_none());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let kv = KvFile::from_text("# header\n\na = 1\n").unwrap();
        assert_eq!(kv.parse_req::<u32>("a").unwrap(), 1);
    }

    #[test]
    fn malformed_lines_are_rejected ()  {
        assert!(KvFile::from_text("just words\n").is_err());
    }
}
