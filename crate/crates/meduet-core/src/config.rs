//! One document drives every pipeline stage: seven sections with documented
//! defaults, strict unknown-key rejection that names the offending dotted
//! path, `section.key=value` overrides, and a content hash stamped into
//! every artifact directory so stale outputs refuse to be overwritten
//! silently.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::arrayio::bytes_sha256;
use crate::corpus::CorpusConfig;
use crate::diffusion::{DenoiserDims, DenoiserTrainConfig};
use crate::finetune::{AugConfig, FinetuneConfig, LabelBudget};
use crate::model::ModelDims;
use crate::tokenizer::{TokenizerConfig, TokenizerMode};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_FILE: &str = "config.hash";

/// Backbone architecture. Grid geometry (latent channels and side) comes
/// from the corpus and tokenizer sections; this section holds the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Patch edge length in latent voxels.
    pub patch: usize,
    pub d_h: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub clf_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            patch: d.patch,
            d_h: d.d_h,
            d_c: d.d_c,
            d_s: d.d_s,
            enc_blocks: d.enc_blocks,
            dec_blocks: d.dec_blocks,
            heads: d.heads,
            mlp_ratio: d.mlp_ratio,
            clf_hidden: d.clf_hidden,
        }
    }
}

/// Evaluation-stage settings: probe seeding, the guidance sweep grid, and
/// how many reference/donor volumes feed each sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seed: u64,
    pub w_c: Vec<f64>,
    pub w_s: Vec<f64>,
    /// Content references per sweep; refs x donors samples per grid cell.
    pub sweep_refs: usize,
    /// Style donors per sweep, drawn from non-reference domains.
    pub sweep_donors: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 29,
            w_c: vec![0.0, 1.5, 3.0],
            w_s: vec![0.0, 1.5, 3.0],
            sweep_refs: 4,
            sweep_donors: 8,
        }
    }
}

/// The resolved run document. Section structs live with the stages they
/// drive; this type only assembles them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub diffusion: DenoiserTrainConfig,
    pub analysis: FinetuneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Grid geometry assembled across sections: latent channels from the
    /// tokenizer mode, latent side from corpus side / tokenizer block.
    pub fn model_dims(&self) -> Result<ModelDims> {
        let block = self.tokenizer.block;
        if block == 0 || self.corpus.side % block != 0 {
            return Err(Error::Config(format!(
                "corpus side {} is not a multiple of tokenizer block {}",
                self.corpus.side, block
            )));
        }
        let c_lat = match self.tokenizer.mode {
            TokenizerMode::Deterministic => block * block * block,
            TokenizerMode::Learned => self.tokenizer.c_lat,
        };
        let dims = ModelDims {
            c_lat,
            latent_side: self.corpus.side / block,
            patch: self.backbone.patch,
            d_h: self.backbone.d_h,
            d_c: self.backbone.d_c,
            d_s: self.backbone.d_s,
            enc_blocks: self.backbone.enc_blocks,
            dec_blocks: self.backbone.dec_blocks,
            heads: self.backbone.heads,
            mlp_ratio: self.backbone.mlp_ratio,
            clf_hidden: self.backbone.clf_hidden,
            n_domains: self.corpus.n_domains,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn denoiser_dims(&self) -> Result<DenoiserDims> {
        let dims = self.model_dims()?;
        let den = DenoiserDims {
            l: dims.l(),
            patch_dim: dims.patch_dim(),
            width: self.diffusion.width,
            blocks: self.diffusion.blocks,
            heads: self.diffusion.heads,
            mlp_ratio: self.diffusion.mlp_ratio,
            d_c: dims.d_c,
            d_s: dims.d_s,
            t_steps: self.diffusion.guidance.t_steps,
        };
        den.validate()?;
        Ok(den)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.n_volumes == 0 {
            return Err(Error::Config("corpus.n_volumes must be positive".into()));
        }
        if self.tokenizer.mode == TokenizerMode::Learned {
            if self.tokenizer.c_lat == 0 {
                return Err(Error::Config("tokenizer.c_lat must be positive".into()));
            }
            if self.tokenizer.train_steps == 0 || self.tokenizer.batch == 0 {
                return Err(Error::Config(
                    "tokenizer training needs positive steps and batch".into(),
                ));
            }
            if !(0.0 < self.tokenizer.val_fraction && self.tokenizer.val_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "tokenizer.val_fraction {} outside (0, 1)",
                    self.tokenizer.val_fraction
                )));
            }
        }
        self.model_dims()?;
        self.denoiser_dims()?;
        self.train.validate()?;
        self.diffusion.guidance.validate()?;
        if self.diffusion.steps == 0 || self.diffusion.batch_size == 0 {
            return Err(Error::Config(
                "diffusion training needs positive steps and batch".into(),
            ));
        }
        if !(0.0 < self.diffusion.beta_start && self.diffusion.beta_start < self.diffusion.beta_end
            && self.diffusion.beta_end < 1.0)
        {
            return Err(Error::Config(format!(
                "beta range ({}, {}) must satisfy 0 < start < end < 1",
                self.diffusion.beta_start, self.diffusion.beta_end
            )));
        }
        self.analysis.validate()?;
        if self.analysis.target_domain >= self.corpus.n_domains {
            return Err(Error::Config(format!(
                "analysis.target_domain {} outside the {} corpus domains",
                self.analysis.target_domain, self.corpus.n_domains
            )));
        }
        if self.eval.w_c.is_empty() || self.eval.w_s.is_empty() {
            return Err(Error::Config("eval sweep grid is empty".into()));
        }
        if self.eval.sweep_refs == 0 || self.eval.sweep_donors == 0 {
            return Err(Error::Config(
                "eval sweep needs references and donors".into(),
            ));
        }
        Ok(())
    }

    /// Canonical TOML rendering; section and key order follow the schema,
    /// so equal configs hash equal.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        bytes_sha256(self.to_toml_string().as_bytes())
    }
}

/// A parsed, merged, validated run document plus provenance.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub hash: String,
    /// Dotted paths the file or overrides set explicitly.
    pub touched: BTreeSet<String>,
}

fn schema_table() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("default config is a table")
}

/// Rejects any key absent from the schema, naming its full dotted path.
/// Collects the paths that were present.
fn check_keys(
    user: &toml::Table,
    schema: &toml::Table,
    prefix: &str,
    touched: &mut BTreeSet<String>,
) -> Result<()> {
    for (key, val) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{}.{}", prefix, key)
        };
        match schema.get(key) {
            None => return Err(Error::Config(format!("unknown key `{}`", path))),
            Some(toml::Value::Table(sub)) => match val {
                toml::Value::Table(ut) => check_keys(ut, sub, &path, touched)?,
                _ => {
                    return Err(Error::Config(format!(
                        "key `{}` must be a table of settings",
                        path
                    )))
                }
            },
            Some(_) => {
                if val.is_table() {
                    return Err(Error::Config(format!(
                        "key `{}` holds a single value, not a table",
                        path
                    )));
                }
                touched.insert(path);
            }
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Borrow TOML's own literal grammar; anything it rejects is a bare string.
    if let Ok(t) = format!("v = {}", raw).parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Applies one `section.key=value` override into the raw table. Unknown
/// paths surface later through the schema walk, so the grammar stays total.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{}` is not of the form key=value", spec))
    })?;
    let segs: Vec<&str> = path.trim().split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override `{}` has an empty key", spec)));
    }
    let mut cur = table;
    for seg in &segs[..segs.len() - 1] {
        cur = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!(
                    "`{}` holds a single value and cannot contain `{}`",
                    seg,
                    path.trim()
                ))
            })?;
    }
    cur.insert(
        segs[segs.len() - 1].to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

fn section<T: DeserializeOwned + Default>(table: &toml::Table, name: &str) -> Result<T> {
    match table.get(name) {
        None => Ok(T::default()),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("section `{}`: {}", name, e))),
    }
}

/// Fills `analysis.aug` from the label budget's preset, then overlays any
/// aug keys the user set, so partial aug edits ride on the right preset.
fn apply_aug_preset(table: &mut toml::Table) -> Result<()> {
    let analysis = match table.get_mut("analysis").and_then(|v| v.as_table_mut()) {
        Some(t) => t,
        None => return Ok(()), // pure defaults already agree
    };
    let budget = match analysis.get("labels") {
        Some(toml::Value::String(s)) => s.parse::<LabelBudget>()?,
        Some(toml::Value::Float(f)) => LabelBudget::fraction(*f)?,
        Some(toml::Value::Integer(i)) => LabelBudget::fraction(*i as f64)?,
        Some(other) => {
            return Err(Error::Config(format!(
                "analysis.labels: expected \"1shot\" or a fraction, got {}",
                other
            )))
        }
        None => FinetuneConfig::default().labels,
    };
    let mut preset =
        toml::Table::try_from(AugConfig::for_budget(budget)).expect("aug serializes");
    if let Some(user) = analysis.get("aug").and_then(|v| v.as_table()) {
        for (k, v) in user {
            preset.insert(k.clone(), v.clone());
        }
    }
    analysis.insert("aug".into(), toml::Value::Table(preset));
    Ok(())
}

/// Parses `text` (empty or None = all defaults), applies overrides, rejects
/// unknown keys, couples the aug preset to the label budget, validates, and
/// hashes the result.
pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Resolved> {
    let mut table: toml::Table = match text {
        Some(t) => t
            .parse()
            .map_err(|e| Error::Config(format!("config parse: {}", e)))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut touched = BTreeSet::new();
    check_keys(&table, &schema_table(), "", &mut touched)?;
    apply_aug_preset(&mut table)?;
    let config = RunConfig {
        corpus: section(&table, "corpus")?,
        tokenizer: section(&table, "tokenizer")?,
        backbone: section(&table, "backbone")?,
        train: section(&table, "train")?,
        diffusion: section(&table, "diffusion")?,
        analysis: section(&table, "analysis")?,
        eval: section(&table, "eval")?,
    };
    config.validate()?;
    let hash = config.hash();
    Ok(Resolved { config, hash, touched })
}

pub fn resolve_file(path: Option<&Path>, overrides: &[String]) -> Result<Resolved> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| {
            Error::MissingPrerequisite(format!("config file {}: {}", p.display(), e))
        })?),
        None => None,
    };
    resolve(text.as_deref(), overrides)
}

/// Writes the resolved config and its hash into an artifact directory.
pub fn stamp(dir: &Path, resolved: &Resolved) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), resolved.config.to_toml_string())?;
    fs::write(dir.join(HASH_FILE), &resolved.hash)?;
    Ok(())
}

/// Refuses to reuse an artifact directory stamped by a different config
/// unless forced. Unstamped directories pass (the caller stamps after).
pub fn check_stamp(dir: &Path, resolved: &Resolved, force: bool) -> Result<()> {
    let hash_path = dir.join(HASH_FILE);
    if !hash_path.exists() {
        return Ok(());
    }
    let old = fs::read_to_string(&hash_path)?;
    let old = old.trim();
    if old == resolved.hash || force {
        return Ok(());
    }
    Err(Error::Config(format!(
        "{} holds artifacts from config {}, current config is {}; pass --force to overwrite",
        dir.display(),
        &old[..old.len().min(12)],
        &resolved.hash[..12]
    )))
}
