//! Flat `key = value` run configuration covering every tunable of the
//! pipeline, plus artifact paths. The rendered form is re-loadable, so
//! the effective config echoed into an output directory reproduces the
//! run that wrote it.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use xmodal::{NclrConfig, SgdConfig, SynthConfig, TrainConfig};

/// Every tunable of the pipeline plus the artifact paths.
///
/// Keys apply in file order; a `preset = paper|desk` line expands at its
/// position, so keys after it override the preset's values.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Cluster count for visible pseudo-label initialization;
    /// 0 = one cluster per generated identity.
    pub clusters_visible: usize,
    /// Cluster count for infrared pseudo-label initialization; 0 as above.
    pub clusters_infrared: usize,
    pub kmeans_max_iter: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Where `generate` writes and `train`/`evaluate` read the datasets.
    pub data_dir: PathBuf,
    /// Checkpoint `evaluate` reads; the literal `auto` resolves to
    /// `<report_dir>/checkpoint_stage2.txt`.
    pub checkpoint: PathBuf,
    /// Default output directory for `train` and `evaluate`.
    pub report_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                num_identities: 20,
                dim: 16,
                per_id_visible: 40,
                per_id_infrared: 40,
                noise_sigma: 0.3,
                gap_strength: 1.0,
                seed: 0,
            },
            train: TrainConfig::default(),
            clusters_visible: 0,
            clusters_infrared: 0,
            kmeans_max_iter: 100,
            hidden_dim: 64,
            embed_dim: 32,
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("auto"),
            report_dir: PathBuf::from("out"),
        }
    }
}

fn parse_count(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| anyhow!("config key `{key}`: invalid count '{value}'"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| anyhow!("config key `{key}`: invalid integer '{value}'"))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| anyhow!("config key `{key}`: invalid number '{value}'"))
}

impl RunConfig {
    /// Applies one `key = value` entry.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_identities" => self.synth.num_identities = parse_count(key, value)?,
            "dim" => self.synth.dim = parse_count(key, value)?,
            "per_id_visible" => self.synth.per_id_visible = parse_count(key, value)?,
            "per_id_infrared" => self.synth.per_id_infrared = parse_count(key, value)?,
            "noise_sigma" => self.synth.noise_sigma = parse_float(key, value)?,
            "gap_strength" => self.synth.gap_strength = parse_float(key, value)?,
            "seed" => self.set_seed(parse_u64(key, value)?),
            "clusters_visible" => self.clusters_visible = parse_count(key, value)?,
            "clusters_infrared" => self.clusters_infrared = parse_count(key, value)?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse_count(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_count(key, value)?,
            "embed_dim" => self.embed_dim = parse_count(key, value)?,
            "ot_lambda" => self.train.transport.lambda = parse_float(key, value)?,
            "ot_tol" => self.train.transport.tol = parse_float(key, value)?,
            "ot_max_iter" => self.train.transport.max_iter = parse_count(key, value)?,
            "knn_k" => self.train.nclr.k = parse_count(key, value)?,
            "tau" => self.train.nclr.tau = parse_float(key, value)?,
            "gamma" => self.train.nclr.gamma = parse_float(key, value)?,
            "alpha_cncr" => self.train.weights.alpha_cncr = parse_float(key, value)?,
            "triplet_margin" => self.train.weights.triplet_margin = parse_float(key, value)?,
            "lr_stage1" => self.train.sgd.lr_stage1 = parse_float(key, value)?,
            "lr_stage2" => self.train.sgd.lr_stage2 = parse_float(key, value)?,
            "momentum" => self.train.sgd.momentum = parse_float(key, value)?,
            "warmup_epochs" => self.train.sgd.warmup_epochs = parse_count(key, value)?,
            "epochs_stage1" => self.train.epochs_stage1 = parse_count(key, value)?,
            "epochs_stage2" => self.train.epochs_stage2 = parse_count(key, value)?,
            "ids_per_batch" => self.train.ids_per_batch = parse_count(key, value)?,
            "instances_per_id" => self.train.instances_per_id = parse_count(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "report_dir" => self.report_dir = PathBuf::from(value),
            "preset" => self.apply_preset(value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies a named preset. `paper` restores the reference
    /// hyper-parameters; `desk` shrinks the schedule for fast runs.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "paper" => {
                self.train.transport.lambda = 25.0;
                self.train.nclr = NclrConfig { k: 10, tau: 1.0, gamma: 0.25 };
                self.train.weights.alpha_cncr = 0.3;
                self.train.sgd = SgdConfig {
                    lr_stage1: 0.1,
                    lr_stage2: 0.01,
                    momentum: 0.9,
                    warmup_epochs: 5,
                };
                self.train.epochs_stage1 = 40;
                self.train.epochs_stage2 = 20;
                self.train.ids_per_batch = 8;
                self.train.instances_per_id = 4;
            }
            "desk" => {
                self.apply_preset("paper")?;
                self.train.epochs_stage1 = 10;
                self.train.epochs_stage2 = 10;
                self.train.ids_per_batch = 6;
                self.train.instances_per_id = 3;
            }
            other => {
                bail!("config key `preset`: unknown preset '{other}' (expected paper or desk)")
            }
        }
        Ok(())
    }

    /// Applies a whole config file's text onto the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {}: expected `key = value`, got '{raw}'", idx + 1);
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("config line {}: duplicate key `{key}`", idx + 1);
            }
            self.apply(key, value)
                .map_err(|e| anyhow!("config line {}: {e}", idx + 1))?;
        }
        Ok(())
    }

    /// Sets the shared seed used by generation, clustering, and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn clusters_v(&self) -> usize {
        if self.clusters_visible == 0 {
            self.synth.num_identities
        } else {
            self.clusters_visible
        }
    }

    pub fn clusters_r(&self) -> usize {
        if self.clusters_infrared == 0 {
            self.synth.num_identities
        } else {
            self.clusters_infrared
        }
    }

    /// The checkpoint path `evaluate` reads, with `auto` resolved.
    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.as_os_str() == "auto" {
            self.report_dir.join("checkpoint_stage2.txt")
        } else {
            self.checkpoint.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.hidden_dim == 0 {
            bail!("config key `hidden_dim` must be >= 1");
        }
        if self.embed_dim < 2 {
            bail!("config key `embed_dim` must be >= 2");
        }
        if self.kmeans_max_iter == 0 {
            bail!("config key `kmeans_max_iter` must be >= 1");
        }
        Ok(())
    }

    /// Renders the full configuration as re-loadable `key = value` text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let put = |s: &mut String, key: &str, value: String| {
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&value);
            s.push('\n');
        };
        s.push_str("# synthetic data\n");
        put(&mut s, "num_identities", self.synth.num_identities.to_string());
        put(&mut s, "dim", self.synth.dim.to_string());
        put(&mut s, "per_id_visible", self.synth.per_id_visible.to_string());
        put(&mut s, "per_id_infrared", self.synth.per_id_infrared.to_string());
        put(&mut s, "noise_sigma", self.synth.noise_sigma.to_string());
        put(&mut s, "gap_strength", self.synth.gap_strength.to_string());
        put(&mut s, "seed", self.synth.seed.to_string());
        s.push_str("\n# pseudo-label initialization (0 = one cluster per identity)\n");
        put(&mut s, "clusters_visible", self.clusters_visible.to_string());
        put(&mut s, "clusters_infrared", self.clusters_infrared.to_string());
        put(&mut s, "kmeans_max_iter", self.kmeans_max_iter.to_string());
        s.push_str("\n# model\n");
        put(&mut s, "hidden_dim", self.hidden_dim.to_string());
        put(&mut s, "embed_dim", self.embed_dim.to_string());
        s.push_str("\n# optimal transport\n");
        put(&mut s, "ot_lambda", self.train.transport.lambda.to_string());
        put(&mut s, "ot_tol", self.train.transport.tol.to_string());
        put(&mut s, "ot_max_iter", self.train.transport.max_iter.to_string());
        s.push_str("\n# label refinement\n");
        put(&mut s, "knn_k", self.train.nclr.k.to_string());
        put(&mut s, "tau", self.train.nclr.tau.to_string());
        put(&mut s, "gamma", self.train.nclr.gamma.to_string());
        s.push_str("\n# loss weights\n");
        put(&mut s, "alpha_cncr", self.train.weights.alpha_cncr.to_string());
        put(&mut s, "triplet_margin", self.train.weights.triplet_margin.to_string());
        s.push_str("\n# optimizer\n");
        put(&mut s, "lr_stage1", self.train.sgd.lr_stage1.to_string());
        put(&mut s, "lr_stage2", self.train.sgd.lr_stage2.to_string());
        put(&mut s, "momentum", self.train.sgd.momentum.to_string());
        put(&mut s, "warmup_epochs", self.train.sgd.warmup_epochs.to_string());
        s.push_str("\n# schedule\n");
        put(&mut s, "epochs_stage1", self.train.epochs_stage1.to_string());
        put(&mut s, "epochs_stage2", self.train.epochs_stage2.to_string());
        put(&mut s, "ids_per_batch", self.train.ids_per_batch.to_string());
        put(&mut s, "instances_per_id", self.train.instances_per_id.to_string());
        s.push_str("\n# paths\n");
        put(&mut s, "data_dir", self.data_dir.display().to_string());
        put(&mut s, "checkpoint", self.checkpoint.display().to_string());
        put(&mut s, "report_dir", self.report_dir.display().to_string());
        s
    }

    /// Echoes the effective configuration into `dir/config.txt`. The
    /// first line carries the only timestamp any artifact contains.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        let stamp = chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ");
        let text = format!("# written {stamp}\n{}", self.render());
        let path = dir.join("config.txt");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn render_parse_render_is_a_fixpoint() {
        let cfg = RunConfig::default();
        let text = cfg.render();
        let mut reparsed = RunConfig::default();
        reparsed.apply_text(&text).unwrap();
        assert_eq!(reparsed.render(), text);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("bogus_key = 3").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("dim = 4\ndim = 5").unwrap_err();
        assert!(err.to_string().contains("duplicate key `dim`"), "{err}");
    }

    #[test]
    fn bad_value_names_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("dim = many").unwrap_err();
        assert!(err.to_string().contains("`dim`"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a comment\n\n  dim = 9  \n").unwrap();
        assert_eq!(cfg.synth.dim, 9);
    }

    #[test]
    fn desk_preset_shrinks_the_schedule() {
        let mut cfg = RunConfig::default();
        cfg.apply_preset("desk").unwrap();
        assert_eq!(cfg.train.epochs_stage1, 10);
        assert_eq!(cfg.train.epochs_stage2, 10);
        assert_eq!(cfg.train.ids_per_batch * cfg.train.instances_per_id, 18);
        assert!(cfg.apply_preset("giant").is_err());
    }

    #[test]
    fn preset_line_expands_in_place() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("preset = desk\nepochs_stage2 = 7").unwrap();
        assert_eq!(cfg.train.epochs_stage1, 10);
        assert_eq!(cfg.train.epochs_stage2, 7);
    }

    #[test]
    fn seed_key_covers_generation_and_training() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 17").unwrap();
        assert_eq!(cfg.synth.seed, 17);
        assert_eq!(cfg.train.seed, 17);
    }

    #[test]
    fn infinite_tau_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("tau = inf").unwrap();
        assert!(cfg.train.nclr.tau.is_infinite());
        let mut reparsed = RunConfig::default();
        reparsed.apply_text(&cfg.render()).unwrap();
        assert!(reparsed.train.nclr.tau.is_infinite());
    }

    #[test]
    fn checkpoint_auto_resolves_under_report_dir() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("report_dir = runs/a").unwrap();
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("runs/a/checkpoint_stage2.txt"));
        cfg.apply("checkpoint", "explicit.txt").unwrap();
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("explicit.txt"));
    }
}
