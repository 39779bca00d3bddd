//! Training settings assembled from defaults, a `key = value` file and flags.
//!
//! Keys (dashes and underscores are interchangeable):
//!
//! | key | meaning |
//! |-----|---------|
//! | `kind` | `tsp`, `cvrp` or `sdvrp` |
//! | `n` | customers per instance |
//! | `epochs`, `steps_per_epoch` | schedule; validation and checkpoint after each epoch |
//! | `steps` | total steps, split evenly over `epochs` |
//! | `batch_size` (`batch`) | fresh instances per step |
//! | `q_batch_size` (`q_batch`) | replay transitions per critic update |
//! | `lr`, `alpha_lr` | step sizes for networks and log-temperature |
//! | `eta` | target smoothing coefficient |
//! | `entropy_target_coef` | target entropy fraction of `ln |A|` |
//! | `fixed_alpha` | temperature of the fixed modes and starting temperature |
//! | `mode` | `epose`, `offpolicy-fixed` or `onpolicy-fixed` |
//! | `seed`, `val_seed` | random seeds |
//! | `replay_capacity`, `val_size`, `bn_momentum` | |
//! | `embed_dim`, `encoder_layers`, `heads`, `ff_dim`, `clip_c`, `critic_layers`, `critic_hidden` | network shape |
//! | `checkpoint`, `metrics` | output paths |
//!
//! Blank lines and lines starting with `#` are ignored.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use epose_core::trainer::TrainConfig;

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub train: TrainConfig,
    total_steps: Option<usize>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            total_steps: None,
            checkpoint: PathBuf::from("epose.ckpt"),
            metrics: PathBuf::from("metrics.csv"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value `{value}` for `{key}`: {e}"))
}

impl TrainSettings {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = key.trim().to_ascii_lowercase().replace('-', "_");
        let value = value.trim();
        let t = &mut self.train;
        match key.as_str() {
            "kind" => t.kind = parse(&key, value)?,
            "n" => t.n = parse(&key, value)?,
            "epochs" => t.epochs = parse(&key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(&key, value)?,
            "steps" => self.total_steps = Some(parse(&key, value)?),
            "batch" | "batch_size" => t.batch_size = parse(&key, value)?,
            "q_batch" | "q_batch_size" => t.q_batch_size = parse(&key, value)?,
            "lr" => t.lr = parse(&key, value)?,
            "alpha_lr" => t.alpha_lr = parse(&key, value)?,
            "eta" => t.eta = parse(&key, value)?,
            "entropy_target_coef" => t.entropy_target_coef = parse(&key, value)?,
            "fixed_alpha" => t.fixed_alpha = parse(&key, value)?,
            "mode" => t.mode = parse(&key, value)?,
            "seed" => t.seed = parse(&key, value)?,
            "val_seed" => t.val_seed = parse(&key, value)?,
            "replay_capacity" => t.replay_capacity = parse(&key, value)?,
            "val_size" => t.val_size = parse(&key, value)?,
            "bn_momentum" => t.bn_momentum = parse(&key, value)?,
            "embed_dim" => t.net.embed_dim = parse(&key, value)?,
            "encoder_layers" => t.net.encoder_layers = parse(&key, value)?,
            "heads" => t.net.heads = parse(&key, value)?,
            "ff_dim" => t.net.ff_dim = parse(&key, value)?,
            "clip_c" => t.net.clip_c = parse(&key, value)?,
            "critic_layers" => t.net.critic_layers = parse(&key, value)?,
            "critic_hidden" => t.net.critic_hidden = parse(&key, value)?,
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "metrics" => self.metrics = PathBuf::from(value),
            _ => return Err(format!("unknown setting `{key}`")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a settings file.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected `key = value`", origin.display(), i + 1))?;
            self.set(key, value)
                .map_err(|e| format!("{}:{}: {e}", origin.display(), i + 1))?;
        }
        Ok(())
    }

    /// Resolves the total step count into the epoch schedule and validates
    /// the result.
    pub fn finish(mut self) -> Result<Self, String> {
        if let Some(total) = self.total_steps {
            let epochs = self.train.epochs.max(1);
            if total == 0 || total % epochs != 0 {
                return Err(format!("steps ({total}) must be a positive multiple of epochs ({epochs})"));
            }
            self.train.steps_per_epoch = total / epochs;
        }
        if self.checkpoint == self.metrics {
            return Err("checkpoint and metrics paths must differ".into());
        }
        self.train.validate().map_err(|e| e.to_string())?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use epose_core::routing::ProblemKind;
    use epose_core::trainer::Mode;

    #[test]
    fn file_then_flags() {
        let mut s = TrainSettings::default();
        let text = "# desk run\nkind = cvrp\nn=10\n\nbatch-size = 8\nmode = onpolicy-fixed\nepochs = 4\nsteps = 40\n";
        s.apply_text(text, Path::new("run.conf")).unwrap();
        s.set("n", "12").unwrap();
        let s = s.finish().unwrap();
        assert_eq!(s.train.kind, ProblemKind::Cvrp);
        assert_eq!(s.train.n, 12);
        assert_eq!(s.train.batch_size, 8);
        assert_eq!(s.train.mode, Mode::OnpolicyFixedEntropy);
        assert_eq!(s.train.steps_per_epoch, 10);
    }

    #[test]
    fn errors_name_the_line() {
        let mut s = TrainSettings::default();
        let err = s.apply_text("n = 5\nheads = many\n", Path::new("x.conf")).unwrap_err();
        assert!(err.starts_with("x.conf:2:"), "{err}");
        assert!(s.set("bogus", "1").is_err());
        let mut s = TrainSettings::default();
        s.set("epochs", "3").unwrap();
        s.set("steps", "10").unwrap();
        assert!(s.finish().is_err());
        let mut s = TrainSettings::default();
        s.set("metrics", "epose.ckpt").unwrap();
        assert!(s.finish().is_err());
    }
}
