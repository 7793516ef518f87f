//! Flat `key = value` run configuration covering the model, training and
//! synthetic-data settings, plus derivation of named sub-seeds.
//!
//! Blank lines and text after `#` are ignored. Keys are the field names of
//! [`ModelConfig`], [`TrainConfig`] and [`SynthSpec`] (`num_ids` is shared by
//! the model and the data) and `seed`. Unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::embedding::SoftInput;
use crate::model::ModelConfig;
use crate::trainer::{Ablation, SynthSpec, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_switch(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("{key} must be on or off, got {value:?}")),
    }
}

fn switch(v: bool) -> String {
    if v { "on" } else { "off" }.to_string()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(Some(n + 1), format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(Some(n + 1), format!("duplicate key {key}")));
            }
            cfg.set(key, value).map_err(|m| Error::config(Some(n + 1), m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (m, t, s) = (&mut self.model, &mut self.train, &mut self.synth);
        match key {
            "seed" => self.seed = parse(key, value)?,
            "num_ids" => {
                m.num_ids = parse(key, value)?;
                s.num_ids = m.num_ids;
            }
            "num_blocks" => m.num_blocks = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "stride" => m.stride = parse(key, value)?,
            "image_height" => m.image_height = parse(key, value)?,
            "image_width" => m.image_width = parse(key, value)?,
            "codebook_size" => m.codebook_size = parse(key, value)?,
            "tau" => m.tau = parse(key, value)?,
            "levels" => m.levels = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "soft_input" => {
                m.soft_input = SoftInput::parse(value)
                    .ok_or_else(|| format!("soft_input must be probabilities or logits, got {value:?}"))?
            }
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "ids_per_batch" => t.ids_per_batch = parse(key, value)?,
            "instances_per_id" => t.instances_per_id = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, value)?,
            "lambda_hs" => t.lambda_hs = parse(key, value)?,
            "lambda_id" => t.lambda_id = parse(key, value)?,
            "lambda_tri" => t.lambda_tri = parse(key, value)?,
            "lambda_orth" => t.lambda_orth = parse(key, value)?,
            "triplet_margin" => t.triplet_margin = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "arc_margin" => t.arc_margin = parse(key, value)?,
            "arc_scale" => t.arc_scale = parse(key, value)?,
            "pad" => t.pad = parse(key, value)?,
            "erasing_prob" => t.erasing_prob = parse(key, value)?,
            "embedding_space" => t.ablation.embedding_space = parse_switch(key, value)?,
            "orthogonal_loss" => t.ablation.orthogonal_loss = parse_switch(key, value)?,
            "hs_arcface" => t.ablation.hs_arcface = parse_switch(key, value)?,
            "images_per_id" => s.images_per_id = parse(key, value)?,
            "render_height" => s.render_height = parse(key, value)?,
            "render_width" => s.render_width = parse(key, value)?,
            "query_per_id" => s.query_per_id = parse(key, value)?,
            "gallery_per_id" => s.gallery_per_id = parse(key, value)?,
            "occlusion_prob" => s.occlusion_prob = parse(key, value)?,
            "train_occlusion_prob" => s.train_occlusion_prob = parse(key, value)?,
            "occluder_min_area" => s.occluder_min_area = parse(key, value)?,
            "occluder_max_area" => s.occluder_max_area = parse(key, value)?,
            "background_pool" => s.background_pool = parse(key, value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        vec![
            ("seed", self.seed.to_string()),
            ("num_ids", m.num_ids.to_string()),
            ("num_blocks", m.num_blocks.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("heads", m.heads.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("stride", m.stride.to_string()),
            ("image_height", m.image_height.to_string()),
            ("image_width", m.image_width.to_string()),
            ("codebook_size", m.codebook_size.to_string()),
            ("tau", m.tau.to_string()),
            ("levels", m.levels.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("soft_input", m.soft_input.name().to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("ids_per_batch", t.ids_per_batch.to_string()),
            ("instances_per_id", t.instances_per_id.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("warmup_fraction", t.warmup_fraction.to_string()),
            ("lambda_hs", t.lambda_hs.to_string()),
            ("lambda_id", t.lambda_id.to_string()),
            ("lambda_tri", t.lambda_tri.to_string()),
            ("lambda_orth", t.lambda_orth.to_string()),
            ("triplet_margin", t.triplet_margin.to_string()),
            ("label_smoothing", t.label_smoothing.to_string()),
            ("arc_margin", t.arc_margin.to_string()),
            ("arc_scale", t.arc_scale.to_string()),
            ("pad", t.pad.to_string()),
            ("erasing_prob", t.erasing_prob.to_string()),
            ("embedding_space", switch(t.ablation.embedding_space)),
            ("orthogonal_loss", switch(t.ablation.orthogonal_loss)),
            ("hs_arcface", switch(t.ablation.hs_arcface)),
            ("images_per_id", s.images_per_id.to_string()),
            ("render_height", s.render_height.to_string()),
            ("render_width", s.render_width.to_string()),
            ("query_per_id", s.query_per_id.to_string()),
            ("gallery_per_id", s.gallery_per_id.to_string()),
            ("occlusion_prob", s.occlusion_prob.to_string()),
            ("train_occlusion_prob", s.train_occlusion_prob.to_string()),
            ("occluder_min_area", s.occluder_min_area.to_string()),
            ("occluder_max_area", s.occluder_max_area.to_string()),
            ("background_pool", s.background_pool.to_string()),
        ]
    }

    /// Every key with its value, defaults included; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::config(None, e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.synth.validate().map_err(wrap)?;
        Ok(())
    }

    /// Applies `--ablation` style switches: `name=on|off` joined by commas.
    pub fn apply_ablation(&mut self, spec: &str) -> Result<()> {
        self.train.ablation = self.train.ablation.with(spec)?;
        Ok(())
    }
}

impl Ablation {
    /// Copy with the `name=on|off,...` overrides applied.
    pub fn with(mut self, spec: &str) -> Result<Self> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("ablation entry {part:?} is not name=on|off")))?;
            let on = parse_switch(k, v).map_err(Error::InvalidArgument)?;
            match k {
                "embedding_space" => self.embedding_space = on,
                "orthogonal_loss" => self.orthogonal_loss = on,
                "hs_arcface" => self.hs_arcface = on,
                _ => return Err(Error::InvalidArgument(format!("unknown ablation switch {k}"))),
            }
        }
        Ok(self)
    }
}

/// Seed for the stream called `name` under `master`: FNV-1a over the name,
/// mixed with the master seed and an index by the SplitMix64 finalizer.
pub fn sub_seed(master: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn modified_values_round_trip() {
        let mut cfg = RunConfig::default();
        for (k, v) in
            [("tau", "0.37"), ("num_ids", "9"), ("hs_arcface", "off"), ("soft_input", "logits"), ("seed", "77")]
        {
            cfg.set(k, v).unwrap();
        }
        assert_eq!(cfg.synth.num_ids, 9);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# run\n\nepochs = 3   # short\n lr=0.001\n").unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.lr), (3, 0.001));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("epochs = 3\nbogus = 1\n").unwrap_err();
        assert_eq!(e.to_string(), "config line 2: unknown key bogus");
        let e = RunConfig::parse("\n\ntau = hot\n").unwrap_err();
        assert!(e.to_string().starts_with("config line 3:"), "{e}");
        assert!(RunConfig::parse("epochs = 3\nepochs = 4\n").unwrap_err().to_string().contains("line 2"));
        assert!(RunConfig::parse("just words\n").unwrap_err().to_string().contains("line 1"));
        assert!(RunConfig::parse("heads = 5\n").is_err());
    }

    #[test]
    fn ablation_switches() {
        let a = Ablation::default().with("embedding_space=off, hs_arcface=off").unwrap();
        assert!(!a.embedding_space && a.orthogonal_loss && !a.hs_arcface);
        assert!(Ablation::default().with("speed=on").is_err());
        assert!(Ablation::default().with("hs_arcface=maybe").is_err());
    }

    #[test]
    fn sub_seeds_are_distinct_and_stable() {
        let names = ["data", "init", "gumbel", "erasing", "sampler"];
        let seeds: std::collections::HashSet<u64> = names.iter().map(|n| sub_seed(1, n, 0)).collect();
        assert_eq!(seeds.len(), names.len());
        assert_eq!(sub_seed(1, "data", 0), sub_seed(1, "data", 0));
        assert_ne!(sub_seed(1, "data", 0), sub_seed(2, "data", 0));
        assert_ne!(sub_seed(1, "data", 0), sub_seed(1, "data", 1));
    }
}
