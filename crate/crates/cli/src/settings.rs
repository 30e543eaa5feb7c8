use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use advseg::attack::AttackConfig;
use advseg::eval::{DataSource, ExperimentConfig, Row};
use anyhow::{anyhow, bail, Context, Result};
use ini::Ini;

/// Flat `section.key -> value` settings in application order.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    entries: Vec<(String, String)>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let ini = Ini::load_from_file(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut out = Self::default();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_string(),
                };
                out.entries.push((key, v.to_string()));
            }
        }
        Ok(out)
    }

    /// Adds a `section.key=value` override.
    pub fn push_assignment(&mut self, text: &str) -> Result<()> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| anyhow!("override {text:?} is not of the form section.key=value"))?;
        self.push(k.trim(), v.trim());
        Ok(())
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push_opt<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.push(key, v);
        }
    }

    /// Last value per key.
    pub fn resolved(&self) -> BTreeMap<&str, &str> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect()
    }

    /// Builds the configuration on top of the defaults.
    pub fn config(&self) -> Result<Config> {
        let mut cfg = Config::default();
        let resolved = self.resolved();
        for (k, v) in &resolved {
            cfg.apply(k, v).with_context(|| format!("setting {k} = {v:?}"))?;
        }
        if !resolved.contains_key("attack.step_size") {
            let a = &mut cfg.experiment.attack;
            a.step_size = AttackConfig::with_budget(a.base_epsilon, a.steps).step_size;
        }
        if !resolved.contains_key("adapt.quorum") {
            let h = &mut cfg.experiment.adapt.hnpu;
            h.quorum = h.k.div_ceil(2);
        }
        if let (Some(s), Some(t), Some(e)) = (&cfg.source_dir, &cfg.target_dir, &cfg.eval_dir) {
            cfg.experiment.data = DataSource::Directories {
                source: s.clone(),
                target: t.clone(),
                eval: e.clone(),
            };
        }
        cfg.experiment.validate()?;
        Ok(cfg)
    }
}

/// Everything the commands read.
#[derive(Debug, Clone)]
pub struct Config {
    pub experiment: ExperimentConfig,
    /// Pre-train with the blended objective.
    pub pretrain_rlt: bool,
    pub synth_scans: usize,
    pub synth_domain: String,
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            pretrain_rlt: false,
            synth_scans: 6,
            synth_domain: "source".into(),
            source_dir: None,
            target_dir: None,
            eval_dir: None,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{e}"))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => bail!("expected a boolean"),
    }
}

/// Accepts `3`, `0,2,5` or the half-open range `0..10`.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse(a.trim())?, parse(b.trim())?);
        if a >= b {
            bail!("empty seed range");
        }
        return Ok((a..b).collect());
    }
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn parse_rows(v: &str) -> Result<Vec<Row>> {
    if v.trim().eq_ignore_ascii_case("all") {
        return Ok(Row::ALL.to_vec());
    }
    v.split(',').map(|s| Row::parse(s).map_err(Into::into)).collect()
}

fn synthetic(data: &mut DataSource) -> (&mut usize, &mut usize, &mut usize, &mut usize) {
    if !matches!(data, DataSource::Synthetic { .. }) {
        *data = ExperimentConfig::default().data;
    }
    match data {
        DataSource::Synthetic {
            source_scans,
            target_adapt_scans,
            target_eval_scans,
            points_per_scan,
        } => (source_scans, target_adapt_scans, target_eval_scans, points_per_scan),
        DataSource::Directories { .. } => unreachable!(),
    }
}

impl Config {
    pub fn seed(&self) -> u64 {
        self.experiment.seeds[0]
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.experiment;
        match key {
            "experiment.scenario" => e.scenario = v.to_string(),
            "experiment.seeds" | "experiment.seed" => e.seeds = parse_seeds(v)?,
            "experiment.rows" => e.rows = parse_rows(v)?,
            "experiment.output" => e.output_dir = Some(PathBuf::from(v)),
            "experiment.num_classes" => e.num_classes = parse(v)?,
            "experiment.ignore_class" => {
                e.ignore_class = match v.to_ascii_lowercase().as_str() {
                    "" | "none" => None,
                    _ => Some(parse(v)?),
                }
            }
            "experiment.clean_fraction" => e.clean_fraction = parse(v)?,
            "experiment.val_fraction" => e.val_fraction = parse(v)?,
            "experiment.rlt_in_fine_tune" => e.rlt_in_fine_tune = parse_bool(v)?,
            "experiment.restore_sources" => e.restore_sources = parse_bool(v)?,
            "experiment.patch_points" => e.patch_points = parse(v)?,

            "data.source_scans" => *synthetic(&mut e.data).0 = parse(v)?,
            "data.target_adapt_scans" => *synthetic(&mut e.data).1 = parse(v)?,
            "data.target_eval_scans" => *synthetic(&mut e.data).2 = parse(v)?,
            "data.points_per_scan" => *synthetic(&mut e.data).3 = parse(v)?,
            "data.source" => self.source_dir = Some(PathBuf::from(v)),
            "data.target" => self.target_dir = Some(PathBuf::from(v)),
            "data.eval" => self.eval_dir = Some(PathBuf::from(v)),

            "synth.scans" => self.synth_scans = parse(v)?,
            "synth.domain" => match v {
                "source" | "target" => self.synth_domain = v.to_string(),
                _ => bail!("domain must be source or target"),
            },

            "attack.epsilon" => e.attack.base_epsilon = parse(v)?,
            "attack.steps" => e.attack.steps = parse(v)?,
            "attack.step_size" => e.attack.step_size = parse(v)?,
            "attack.gamma_min" => e.attack.gamma_min = parse(v)?,
            "attack.gamma_max" => e.attack.gamma_max = parse(v)?,
            "attack.d_near" => e.attack.d_near = parse(v)?,
            "attack.d_far" => e.attack.d_far = parse(v)?,
            "attack.selection_perc" => e.attack.selection_perc = parse(v)?,
            "attack.flip_fraction" => e.attack.flip_fraction = parse(v)?,

            "pretrain.epochs" => e.pretrain.epochs = parse(v)?,
            "pretrain.batch_points" => e.pretrain.batch_points = parse(v)?,
            "pretrain.steps_per_scan" => e.pretrain.steps_per_scan = parse(v)?,
            "pretrain.lr" => e.pretrain.adam.lr = parse(v)?,
            "pretrain.rlt" => self.pretrain_rlt = parse_bool(v)?,

            "rlt.lambda" => e.rlt.lambda = parse(v)?,
            "rlt.top_fraction" => e.rlt.top_fraction = parse(v)?,
            "rlt.scale" => e.rlt.scale = parse(v)?,
            "rlt.margin_exponent" => e.rlt.margin_exponent = parse(v)?,
            "rlt.max_margin" => e.rlt.max_margin = parse(v)?,
            "rlt.importance_k" => e.rlt.importance_k = parse(v)?,

            "lambda.budget" => e.lambda_budget = parse(v)?,
            "lambda.epochs" => e.lambda_epochs = parse(v)?,

            "adapt.steps" => e.adapt.steps = parse(v)?,
            "adapt.ema_decay" => e.adapt.ema_decay = parse(v)?,
            "adapt.mix_ratio" => e.adapt.mix_ratio = parse(v)?,
            "adapt.batch_points" => e.adapt.batch_points = parse(v)?,
            "adapt.lr" => e.adapt.adam.lr = parse(v)?,
            "adapt.k" => e.adapt.hnpu.k = parse(v)?,
            "adapt.tau_high" => e.adapt.hnpu.tau_high = parse(v)?,
            "adapt.tau_low" => e.adapt.hnpu.tau_low = parse(v)?,
            "adapt.quorum" => e.adapt.hnpu.quorum = parse(v)?,
            "adapt.use_hnpu" => e.adapt.use_hnpu = parse_bool(v)?,
            "adapt.hnpu_on_source" => e.adapt.hnpu_on_source = parse_bool(v)?,
            "adapt.fusion_radius" => e.adapt.fusion_radius = parse(v)?,
            "adapt.refresh_every" => e.adapt.refresh_every = parse(v)?,

            "decoder.latent_dim" => e.decoder.latent_dim = parse(v)?,
            "decoder.coarse_points" => e.decoder.coarse_points = parse(v)?,
            "decoder.encoder_hidden" => e.decoder.encoder_hidden = parse(v)?,
            "decoder.global_dim" => e.decoder.global_dim = parse(v)?,
            "decoder.decoder_hidden" => e.decoder.decoder_hidden = parse(v)?,
            "decoder.knn" => e.decoder.knn = parse(v)?,
            "decoder.offset_bound" => e.decoder.offset_bound = parse(v)?,
            "decoder.support_radius" => e.decoder.support_radius = parse(v)?,
            "decoder.epochs" => e.decoder_train.epochs = parse(v)?,
            "decoder.kl_weight" => e.decoder_train.lambda_kl = parse(v)?,
            "decoder.noise_sigma" => e.decoder_train.noise_sigma = parse(v)?,
            "decoder.lr" => e.decoder_train.adam.lr = parse(v)?,

            "finetune.max_epochs" => e.fine_tune.max_epochs = parse(v)?,
            "finetune.patience" => e.fine_tune.patience = parse(v)?,
            "finetune.trainable_layers" => e.fine_tune.trainable_layers = parse(v)?,
            "finetune.batch_points" => e.fine_tune.batch_points = parse(v)?,
            "finetune.steps_per_scan" => e.fine_tune.steps_per_scan = parse(v)?,
            "finetune.lr" => e.fine_tune.adam.lr = parse(v)?,
            _ => bail!("unknown setting"),
        }
        Ok(())
    }
}
