//! Run configuration: preset, then config file, then `--set`, then flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sfsr_core::training::TrainConfig;
use sfsr_core::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Full,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Guide {
    Rgb,
    Luminance,
}

impl Guide {
    pub fn channels(self) -> usize {
        match self {
            Guide::Rgb => 3,
            Guide::Luminance => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let model = match p {
            Preset::Full => ModelConfig::full(),
            Preset::Tiny => ModelConfig::tiny(),
        };
        RunConfig {
            model,
            train: TrainConfig::default(),
        }
    }

    /// Model keys go to the model config, everything else to training.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if ModelConfig::keys().contains(&key) {
            self.model.set(key, value)?;
        } else if TrainConfig::keys().contains(&key) || key == "t" {
            self.train.set(key, value)?;
        } else {
            bail!("unknown config key {key:?}");
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected key=value, got {raw:?}", i + 1))?;
            self.set(k, v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects key=value, got {s:?}"))?;
            self.set(k, v).with_context(|| format!("--set {s}"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        Ok(())
    }
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size {s:?} is not HxW"))?;
    let h = h.trim().parse().with_context(|| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().with_context(|| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

pub fn parse_prob_list(s: &str) -> Result<Vec<f64>> {
    let list: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad probability {p:?}")))
        .collect::<Result<_>>()?;
    if list.is_empty() {
        bail!("empty p_th list");
    }
    if let Some(p) = list.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        bail!("p_th {p} outside [0, 1]");
    }
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unknown_keys() {
        let mut rc = RunConfig::preset(Preset::Tiny);
        rc.apply_text("# comment\nembed = 12\np_th=0.5\n\nt=7\n", "f").unwrap();
        rc.apply_sets(&["p_th=0.2".into()]).unwrap();
        assert_eq!(rc.model.embed, 12);
        assert_eq!(rc.train.p_th, 0.2);
        assert_eq!((rc.train.t_loss, rc.train.t_lr), (7, 7));
        let err = rc.apply_text("a=1\nbogus=3\n", "f.cfg").unwrap_err();
        assert!(format!("{err:#}").contains("f.cfg:1"), "{err:#}");
        assert!(rc.apply_text("embed\n", "f").is_err());
        assert!(rc.apply_sets(&["embed".into()]).is_err());
    }

    #[test]
    fn sizes_and_lists() {
        assert_eq!(parse_size("128x112").unwrap(), (128, 112));
        assert!(parse_size("128").is_err());
        assert!(parse_size("ax8").is_err());
        assert_eq!(parse_prob_list("0, 0.2,1").unwrap(), vec![0.0, 0.2, 1.0]);
        assert!(parse_prob_list("0,1.5").is_err());
        assert!(parse_prob_list("x").is_err());
    }
}
