//! The JSON run configuration, flag overrides and the configuration hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use localsdf::geometry::{PerturbConfig, Point3};
use localsdf::metrics::MetricConfig;
use localsdf::nets::{Architecture, DecoderInit, ModelConfig, SplitMode};
use localsdf::trainer::{self, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub surface_samples: usize,
    pub perturbed_samples: usize,
    pub seed: u64,
    pub perturb: PerturbConfig,
    /// Unit of the input mesh coordinates ("mm", "cm", "m" or a free label).
    pub units: String,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            surface_samples: 15_000,
            perturbed_samples: 15_000,
            seed: 0,
            perturb: PerturbConfig::default(),
            units: "units".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: Architecture,
    /// Overrides of the per-architecture defaults.
    pub init_radius: Option<f64>,
    pub local_scale: Option<f64>,
    pub decoder_init: Option<DecoderInit>,
    pub split: Option<SplitMode>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::LgclCheb,
            init_radius: None,
            local_scale: None,
            decoder_init: None,
            split: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::for_architecture(self.architecture);
        if let Some(r) = self.init_radius {
            m.init_radius = r;
        }
        if let Some(s) = self.local_scale {
            m.local_scale = s;
        }
        if let Some(d) = self.decoder_init {
            m.decoder_init = d;
        }
        if let Some(split) = self.split {
            match m.g2l.as_mut() {
                Some(g) => g.split = split,
                None => bail!("model.split only applies to lgcl architectures"),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// Latent optimization epochs; `None` reuses `train.epochs`.
    pub epochs: Option<usize>,
    pub lr_latent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub resolution: usize,
    /// Inflation of the normalized bounding box on every side, as a fraction
    /// of its extent.
    pub margin: f64,
    /// Explicit normalized-frame bounds; replaces the inflated box.
    pub bounds: Option<[Point3; 2]>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            resolution: 128,
            margin: 0.1,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sampling: SamplingSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub infer: InferSection,
    pub grid: GridSection,
    pub metrics: MetricConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Reads `path` (or the defaults), then applies `key=value` overrides in
    /// order. Values parse as JSON and fall back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        let cfg: RunConfig = serde_json::from_value(doc.clone()).context("invalid config")?;
        doc = serde_json::to_value(cfg)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not of the form key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).context("invalid config after overrides")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.build()?;
        self.infer_config().validate()?;
        Ok(())
    }

    /// Hash of every setting except `paths`, which does not affect results.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().unwrap().remove("paths");
        trainer::config_hash(&v)
    }

    pub fn infer_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(e) = self.infer.epochs {
            t.decay_epoch = t.decay_epoch.min(e);
            t.epochs = e;
        }
        if let Some(lr) = self.infer.lr_latent {
            t.lr_latent = lr;
        }
        t
    }

    pub fn cache_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .or_else(|| self.paths.cache_dir.clone())
            .unwrap_or_else(|| PathBuf::from("localsdf-cache"))
    }
}

pub const CACHE_ENV: &str = "LOCALSDF_CACHE_DIR";

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("override {key}: {} is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                bail!("unknown config key {key}");
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).with_context(|| format!("unknown config section in {key}"))?;
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    unreachable!("split yields at least one part")
}

/// Dotted names of every leaf key under `sections` of the default config.
pub fn keys(sections: &[&str]) -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    walk(&format!("{prefix}.{k}"), child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let doc = serde_json::to_value(RunConfig::default()).unwrap();
    let mut out = Vec::new();
    for s in sections {
        walk(s, &doc[*s], &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = RunConfig::load(None, &[]).unwrap();
        c.validate().unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.epochs, 300);
        assert!(RunConfig::load(None, &["train.epoch=3".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::load(
            None,
            &[
                "train.epochs=7".into(),
                "train.decay_epoch=3".into(),
                "model.architecture=sdf4".into(),
                "train.epochs=9".into(),
                "grid.bounds=[[-1,-1,-1],[1,1,1]]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.model.architecture, Architecture::Sdf4);
        assert_eq!(c.grid.bounds, Some([[-1.0; 3], [1.0; 3]]));
        c.validate().unwrap();
        let c = RunConfig::load(None, &["train.epochs=9".into()]).unwrap();
        assert!(c.validate().is_err(), "decay epoch 200 exceeds 9 epochs");
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.cache_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn key_listing_covers_nested_sections() {
        let k = keys(&["sampling", "train"]);
        assert!(k.contains(&"sampling.perturb.knn_k".to_string()));
        assert!(k.contains(&"train.weights.sim".to_string()));
        assert!(k.contains(&"train.batches_per_epoch".to_string()));
    }
}
