//! Flat `key = value` configuration text.
//!
//! Blank lines and `#` comments are ignored. Keys may appear at most once.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::tokens::RopeConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config {
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("duplicate key {key}"),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line,
                msg: format!("{key}: {e}"),
            }),
        }
    }

    /// Removes `key`, returning its line number and unparsed value.
    pub fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::Config {
                line,
                msg: format!("unknown key {key}"),
            }),
        }
    }
}

fn parse_axes(text: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 comma-separated axis sizes, got {text:?}"));
    }
    let mut out = [0; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}

impl ModelConfig {
    /// Overrides fields from `model.*` keys.
    pub fn take_from(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take_into("model.image_size", &mut self.image_size)?;
        kv.take_into("model.image_channels", &mut self.image_channels)?;
        kv.take_into("model.patch", &mut self.patch)?;
        kv.take_into("model.d_model", &mut self.d_model)?;
        kv.take_into("model.n_heads", &mut self.n_heads)?;
        kv.take_into("model.n_double", &mut self.n_double)?;
        kv.take_into("model.n_single", &mut self.n_single)?;
        kv.take_into("model.mlp_ratio", &mut self.mlp_ratio)?;
        kv.take_into("model.rope_theta", &mut self.rope.theta)?;
        if let Some((line, text)) = kv.take_raw("model.rope_axes") {
            self.rope.axis_dims = parse_axes(&text).map_err(|msg| Error::Config { line, msg })?;
        }
        kv.take_into("model.memory_budget", &mut self.memory_budget)?;
        kv.take_into("model.rank", &mut self.rank)?;
        kv.take_into("model.degraded_strength", &mut self.degraded_strength)?;
        kv.take_into("model.id_dim", &mut self.id_dim)?;
        kv.take_into("model.temperature", &mut self.temperature)?;
        kv.take_into("model.sigma_embed_dim", &mut self.sigma_embed_dim)?;
        kv.take_into("model.n_text", &mut self.n_text)?;
        kv.take_into("model.stub_seed", &mut self.stub_seed)?;
        kv.take_into("model.init_seed", &mut self.init_seed)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let RopeConfig { theta, axis_dims: a } = &self.rope;
        format!(
            "model.image_size = {}\nmodel.image_channels = {}\nmodel.patch = {}\nmodel.d_model = {}\n\
             model.n_heads = {}\nmodel.n_double = {}\nmodel.n_single = {}\nmodel.mlp_ratio = {}\n\
             model.rope_theta = {:?}\nmodel.rope_axes = {},{},{},{}\nmodel.memory_budget = {}\nmodel.rank = {}\n\
             model.degraded_strength = {:?}\nmodel.id_dim = {}\nmodel.temperature = {:?}\n\
             model.sigma_embed_dim = {}\nmodel.n_text = {}\nmodel.stub_seed = {}\nmodel.init_seed = {}\n",
            self.image_size,
            self.image_channels,
            self.patch,
            self.d_model,
            self.n_heads,
            self.n_double,
            self.n_single,
            self.mlp_ratio,
            theta,
            a[0],
            a[1],
            a[2],
            a[3],
            self.memory_budget,
            self.rank,
            self.degraded_strength,
            self.id_dim,
            self.temperature,
            self.sigma_embed_dim,
            self.n_text,
            self.stub_seed,
            self.init_seed,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = ModelConfig::toy();
        cfg.take_from(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}
