//! Layered configuration: checkpoint config, then `--config` file, then
//! `--set` overrides. Every value a command reads is recorded so the
//! snapshot written next to the outputs holds the effective settings,
//! defaults included.

use std::cell::RefCell;
use std::fmt::Display;
use std::path::Path;

use anyhow::{Context, Result};
use iwm_core::config::KvConfig;

pub struct Settings {
    kv: KvConfig,
    used: RefCell<KvConfig>,
}

impl Settings {
    pub fn new(base: KvConfig, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = base;
        if let Some(p) = file {
            let f = KvConfig::load(p).with_context(|| format!("reading config {}", p.display()))?;
            kv.merge(&f);
        }
        for o in overrides {
            kv.apply_override(o)?;
        }
        Ok(Settings {
            kv,
            used: RefCell::new(KvConfig::new()),
        })
    }

    pub fn kv(&self) -> &KvConfig {
        &self.kv
    }

    fn record(&self, key: &str, v: impl Display) {
        self.used.borrow_mut().set(key, v);
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.kv.usize_or(key, default)?;
        self.record(key, v);
        Ok(v)
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64> {
        let v = self.kv.u64_or(key, default)?;
        self.record(key, v);
        Ok(v)
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.kv.f64_or(key, default)?;
        self.record(key, v);
        Ok(v)
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        let v = self.kv.bool_or(key, default)?;
        self.record(key, v);
        Ok(v)
    }

    pub fn str(&self, key: &str, default: &str) -> String {
        let v = self.kv.str_or(key, default).to_string();
        self.record(key, &v);
        v
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.kv.get(key) {
            None => Ok(None),
            Some(_) => self.usize(key, 0).map(Some),
        }
    }

    /// Everything given plus every default that was read.
    pub fn resolved(&self) -> KvConfig {
        let mut out = self.kv.clone();
        out.merge(&self.used.borrow());
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = dir.join("config.resolved");
        std::fs::write(&p, self.resolved().render()).with_context(|| format!("writing {}", p.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_and_records_defaults() {
        let mut base = KvConfig::new();
        base.set("a", 1);
        base.set("b", 2);
        let s = Settings::new(base, None, &["b=3".into()]).unwrap();
        assert_eq!(s.usize("a", 0).unwrap(), 1);
        assert_eq!(s.usize("b", 0).unwrap(), 3);
        assert_eq!(s.f64("c", 0.5).unwrap(), 0.5);
        let r = s.resolved();
        assert_eq!(r.get("c"), Some("0.5"));
        assert_eq!(r.get("b"), Some("3"));
        assert!(Settings::new(KvConfig::new(), None, &["nokey".into()]).is_err());
    }
}
