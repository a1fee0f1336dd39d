use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{default_erd_channels, SyntheticSpec, WindowConfig};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::training::TrainConfig;

/// Everything a command needs, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub window: WindowConfig,
    pub synthetic: SyntheticSpec,
    pub variant: Variant,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            window: WindowConfig::default(),
            synthetic: SyntheticSpec::default(),
            variant: Variant::A,
            data: None,
            out: None,
        }
    }
}

/// Recognized keys, in the order they are echoed.
pub const KEYS: [&str; 25] = [
    "seed",
    "lr_ae",
    "batch_ae",
    "lr_st",
    "batch_st",
    "lambda",
    "gamma",
    "max_epochs",
    "patience",
    "dropout",
    "stgnn_input",
    "variant",
    "omega",
    "step",
    "n_classes",
    "n_channels",
    "n_samples",
    "fs",
    "trials_per_class",
    "erd_channels",
    "erd_depth",
    "noise_std",
    "data",
    "out",
    "format_version",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse `{v}` as a value for `{key}`")))
}

fn parse_variant(v: &str) -> Result<Variant> {
    Variant::ALL
        .into_iter()
        .find(|x| x.to_string().eq_ignore_ascii_case(v))
        .ok_or_else(|| Error::Config(format!("variant must be one of A, B, C, D, got `{v}`")))
}

/// `;`-separated classes of `,`-separated channel indices, e.g. `0,1;2,3`.
fn parse_erd(v: &str) -> Result<Vec<Vec<usize>>> {
    v.split(';')
        .map(|class| {
            class
                .split(',')
                .map(|c| parse::<usize>("erd_channels", c.trim()))
                .collect()
        })
        .collect()
}

fn format_erd(erd: &[Vec<usize>]) -> String {
    erd.iter()
        .map(|c| c.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Keys not listed in
    /// [`KEYS`] and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: key `{k}` given twice", n + 1)));
            }
        }
        let mut cfg = Self::default();
        let erd_explicit = pairs.contains_key("erd_channels");
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        if !erd_explicit {
            cfg.synthetic.erd_channels = default_erd_channels(cfg.synthetic.n_classes, cfg.synthetic.n_channels);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synthetic;
        match k {
            "seed" => self.set_seed(parse(k, v)?),
            "lr_ae" => t.lr_ae = parse(k, v)?,
            "batch_ae" => t.batch_ae = parse(k, v)?,
            "lr_st" => t.lr_st = parse(k, v)?,
            "batch_st" => t.batch_st = parse(k, v)?,
            "lambda" => t.lambda = parse(k, v)?,
            "gamma" => t.gamma = parse(k, v)?,
            "max_epochs" => t.max_epochs = parse(k, v)?,
            "patience" => t.patience = parse(k, v)?,
            "dropout" => t.dropout = parse(k, v)?,
            "stgnn_input" => t.stgnn_input = v.parse()?,
            "variant" => self.variant = parse_variant(v)?,
            "omega" => self.window.omega = parse(k, v)?,
            "step" => self.window.step = parse(k, v)?,
            "n_classes" => s.n_classes = parse(k, v)?,
            "n_channels" => s.n_channels = parse(k, v)?,
            "n_samples" => s.n_samples = parse(k, v)?,
            "fs" => s.fs = parse(k, v)?,
            "trials_per_class" => s.trials_per_class = parse(k, v)?,
            "erd_channels" => s.erd_channels = parse_erd(v)?,
            "erd_depth" => s.erd_depth = parse(k, v)?,
            "noise_std" => s.noise_std = parse(k, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "format_version" => {
                if v != "1" {
                    return Err(Error::Config(format!("unsupported format_version `{v}`")));
                }
            }
            _ => unreachable!("keys are checked against KEYS"),
        }
        Ok(())
    }

    /// One seed drives the generator, the split and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.window.validate()?;
        self.synthetic.validate()
    }

    /// The resolved configuration in the same format [`RunConfig::parse`]
    /// reads.
    pub fn render(&self) -> String {
        let t = &self.train;
        let s = &self.synthetic;
        let mut out = String::from("# resolved configuration\nformat_version = 1\n");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let rows: Vec<(&str, Option<String>)> = vec![
            ("seed", Some(t.seed.to_string())),
            ("lr_ae", Some(t.lr_ae.to_string())),
            ("batch_ae", Some(t.batch_ae.to_string())),
            ("lr_st", Some(t.lr_st.to_string())),
            ("batch_st", Some(t.batch_st.to_string())),
            ("lambda", Some(t.lambda.to_string())),
            ("gamma", Some(t.gamma.to_string())),
            ("max_epochs", Some(t.max_epochs.to_string())),
            ("patience", Some(t.patience.to_string())),
            ("dropout", Some(t.dropout.to_string())),
            ("stgnn_input", Some(t.stgnn_input.to_string())),
            ("variant", Some(self.variant.to_string())),
            ("omega", Some(self.window.omega.to_string())),
            ("step", Some(self.window.step.to_string())),
            ("n_classes", Some(s.n_classes.to_string())),
            ("n_channels", Some(s.n_channels.to_string())),
            ("n_samples", Some(s.n_samples.to_string())),
            ("fs", Some(s.fs.to_string())),
            ("trials_per_class", Some(s.trials_per_class.to_string())),
            ("erd_channels", Some(format_erd(&s.erd_channels))),
            ("erd_depth", Some(s.erd_depth.to_string())),
            ("noise_std", Some(s.noise_std.to_string())),
            ("data", path(&self.data)),
            ("out", path(&self.out)),
        ];
        for (k, v) in rows {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StgnnInput;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn values_comments_and_seed() {
        let cfg = RunConfig::parse("lr_st = 1e-3  # faster\nseed=7\nstgnn_input = latent\nvariant = d\nomega = 250\n")
            .unwrap();
        assert_eq!(cfg.train.lr_st, 1e-3);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.synthetic.seed, 7);
        assert_eq!(cfg.train.stgnn_input, StgnnInput::Latent);
        assert_eq!(cfg.variant, Variant::D);
        assert_eq!(cfg.window.omega, 250);
    }

    #[test]
    fn unknown_repeated_and_malformed_lines_are_rejected() {
        let e = RunConfig::parse("lr = 0.1").unwrap_err().to_string();
        assert!(e.contains("unknown key `lr`"), "{e}");
        assert!(RunConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string().contains("twice"));
        assert!(RunConfig::parse("seed 1").unwrap_err().to_string().contains("line 1"));
        assert!(RunConfig::parse("batch_st = many").is_err());
        assert!(RunConfig::parse("batch_st = 1").is_err());
        assert!(RunConfig::parse("erd_channels = 0,1;2;99").is_err());
    }

    #[test]
    fn channel_count_picks_matching_erd_defaults() {
        let cfg = RunConfig::parse("n_channels = 8").unwrap();
        assert_eq!(cfg.synthetic.erd_channels, default_erd_channels(4, 8));
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::parse("seed = 3\nerd_channels = 0,1;2;3,4;5\nnoise_std = 1.5\nlambda = 0").unwrap();
        cfg.out = Some(PathBuf::from("runs/x"));
        let again = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(cfg, again);
    }
}
