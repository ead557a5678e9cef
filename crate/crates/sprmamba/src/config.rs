//! Plain `key = value` run configuration covering model, training, and
//! synthetic-data settings. Blank lines and `#` comments are ignored;
//! unknown keys are rejected; the single `seed` key feeds every component.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{PhaseSpec, SynthConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            seed: 0,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "input_dim",
    "stage1_dim",
    "refine_dim",
    "layers_per_stage",
    "stages",
    "window_size",
    "longrange_stride",
    "dropout",
    "causal",
    "state_dim",
    "lambda_expand",
    "conv_mode",
    "branch_mode",
];
const TRAIN_KEYS: &[&str] = &[
    "base_lr",
    "weight_decay",
    "warmup_epochs",
    "total_epochs",
    "smoothing_weight",
    "smoothing_clip",
    "min_lr_ratio",
    "grad_clip",
    "target_train_acc",
];
const SYNTH_KEYS: &[&str] = &[
    "feature_dim",
    "seq_len",
    "phase_weights",
    "skip_probs",
    "revisit_probs",
    "duration_sigma",
    "inter_phase_separation",
    "intra_phase_drift",
    "observation_noise",
];

impl RunConfig {
    /// Parses config text. Returns the config and the keys that were set
    /// (so callers can log which fields fell back to defaults).
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set_key(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok((cfg, seen))
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid list entry '{s}' for {key}")))
                })
                .collect()
        }
        match key {
            "seed" => {
                self.seed = num(key, value)?;
                self.model.seed = self.seed;
                self.train.seed = self.seed;
                self.synth.seed = self.seed;
            }
            "num_classes" => {
                let n: usize = num(key, value)?;
                self.model.num_classes = n;
                self.synth.num_classes = n;
                self.synth.phases.resize(
                    n,
                    PhaseSpec {
                        weight: 1.0,
                        skip_prob: 0.05,
                        revisit_prob: 0.05,
                    },
                );
            }
            "phase_weights" => {
                let ws = list(key, value)?;
                resize_phases(&mut self.synth, ws.len());
                for (p, w) in self.synth.phases.iter_mut().zip(ws) {
                    p.weight = w;
                }
            }
            "skip_probs" => {
                let ps = list(key, value)?;
                apply_prob_list(&mut self.synth, &ps, |spec, v| spec.skip_prob = v, key)?;
            }
            "revisit_probs" => {
                let ps = list(key, value)?;
                apply_prob_list(&mut self.synth, &ps, |spec, v| spec.revisit_prob = v, key)?;
            }
            k if MODEL_KEYS.contains(&k) => self.model.set_key(k, value)?,
            "base_lr" => self.train.base_lr = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "warmup_epochs" => self.train.warmup_epochs = num(key, value)?,
            "total_epochs" => self.train.total_epochs = num(key, value)?,
            "smoothing_weight" => self.train.smoothing_weight = num(key, value)?,
            "smoothing_clip" => self.train.smoothing_clip = num(key, value)?,
            "min_lr_ratio" => self.train.min_lr_ratio = num(key, value)?,
            "grad_clip" => self.train.grad_clip = num(key, value)?,
            "target_train_acc" => self.train.target_train_acc = num(key, value)?,
            "feature_dim" => self.synth.feature_dim = num(key, value)?,
            "seq_len" => self.synth.seq_len = num(key, value)?,
            "duration_sigma" => self.synth.duration_sigma = num(key, value)?,
            "inter_phase_separation" => self.synth.inter_phase_separation = num(key, value)?,
            "intra_phase_drift" => self.synth.intra_phase_drift = num(key, value)?,
            "observation_noise" => self.synth.observation_noise = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.model.num_classes != self.synth.num_classes {
            return Err(Error::Config(format!(
                "model num_classes {} != synthetic num_classes {}",
                self.model.num_classes, self.synth.num_classes
            )));
        }
        Ok(())
    }

    /// Serializes every key in a fixed order; `parse(serialize(c)) == c`.
    pub fn to_kv(&self) -> String {
        let join = |f: &dyn Fn(&PhaseSpec) -> f64| {
            self.synth
                .phases
                .iter()
                .map(|p| format!("{}", f(p)))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("num_classes = {}\n", self.model.num_classes));
        out.push_str(&format!("input_dim = {}\n", self.model.input_dim));
        out.push_str(&format!("stage1_dim = {}\n", self.model.stage1_dim));
        out.push_str(&format!("refine_dim = {}\n", self.model.refine_dim));
        out.push_str(&format!("layers_per_stage = {}\n", self.model.layers_per_stage));
        out.push_str(&format!("stages = {}\n", self.model.stages));
        out.push_str(&format!("window_size = {}\n", self.model.window_size));
        out.push_str(&format!("longrange_stride = {}\n", self.model.longrange_stride));
        out.push_str(&format!("dropout = {}\n", self.model.dropout));
        out.push_str(&format!("causal = {}\n", self.model.causal));
        out.push_str(&format!("state_dim = {}\n", self.model.state_dim));
        out.push_str(&format!("lambda_expand = {}\n", self.model.lambda_expand));
        out.push_str(&format!("conv_mode = {}\n", self.model.conv_mode));
        out.push_str(&format!("branch_mode = {}\n", self.model.branch_mode));
        out.push_str(&format!("base_lr = {}\n", self.train.base_lr));
        out.push_str(&format!("weight_decay = {}\n", self.train.weight_decay));
        out.push_str(&format!("warmup_epochs = {}\n", self.train.warmup_epochs));
        out.push_str(&format!("total_epochs = {}\n", self.train.total_epochs));
        out.push_str(&format!("smoothing_weight = {}\n", self.train.smoothing_weight));
        out.push_str(&format!("smoothing_clip = {}\n", self.train.smoothing_clip));
        out.push_str(&format!("min_lr_ratio = {}\n", self.train.min_lr_ratio));
        out.push_str(&format!("grad_clip = {}\n", self.train.grad_clip));
        out.push_str(&format!("target_train_acc = {}\n", self.train.target_train_acc));
        out.push_str(&format!("feature_dim = {}\n", self.synth.feature_dim));
        out.push_str(&format!("seq_len = {}\n", self.synth.seq_len));
        out.push_str(&format!("phase_weights = {}\n", join(&|p| p.weight)));
        out.push_str(&format!("skip_probs = {}\n", join(&|p| p.skip_prob)));
        out.push_str(&format!("revisit_probs = {}\n", join(&|p| p.revisit_prob)));
        out.push_str(&format!("duration_sigma = {}\n", self.synth.duration_sigma));
        out.push_str(&format!(
            "inter_phase_separation = {}\n",
            self.synth.inter_phase_separation
        ));
        out.push_str(&format!("intra_phase_drift = {}\n", self.synth.intra_phase_drift));
        out.push_str(&format!("observation_noise = {}\n", self.synth.observation_noise));
        out
    }

    /// Applies a seed to every component (CLI `--seed` / `SPRM_SEED`).
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// Every accepted key, for documentation and default logging.
    pub fn known_keys() -> Vec<&'static str> {
        let mut keys = vec!["seed", "num_classes"];
        keys.extend_from_slice(MODEL_KEYS);
        keys.extend_from_slice(TRAIN_KEYS);
        keys.extend_from_slice(SYNTH_KEYS);
        keys
    }
}

fn resize_phases(synth: &mut SynthConfig, n: usize) {
    if synth.phases.len() != n {
        synth.phases.resize(
            n,
            PhaseSpec {
                weight: 1.0,
                skip_prob: 0.05,
                revisit_prob: 0.05,
            },
        );
        synth.num_classes = n;
    }
}

fn apply_prob_list(
    synth: &mut SynthConfig,
    values: &[f64],
    set: impl Fn(&mut PhaseSpec, f64),
    key: &str,
) -> Result<()> {
    if values.len() == 1 {
        for spec in synth.phases.iter_mut() {
            set(spec, values[0]);
        }
        return Ok(());
    }
    if values.len() != synth.phases.len() {
        return Err(Error::Config(format!(
            "{key}: {} entries for {} phases (set num_classes first)",
            values.len(),
            synth.phases.len()
        )));
    }
    for (spec, &v) in synth.phases.iter_mut().zip(values) {
        set(spec, v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_semantically_identical() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(42);
        cfg.model.stages = 2;
        cfg.model.causal = true;
        cfg.train.base_lr = 1e-3;
        cfg.synth.phases[2].skip_prob = 0.5;
        let text = cfg.to_kv();
        let (parsed, seen) = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert!(seen.contains(&"stages".to_string()));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "\n# a comment\nseed = 3   # trailing comment\n\nstages = 2\n";
        let (cfg, _) = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.stages, 2);
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("bogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn num_classes_resizes_phase_lists() {
        let text = "num_classes = 4\nphase_weights = 1,2,3,4\nskip_probs = 0\n";
        let (cfg, _) = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.synth.phases.len(), 4);
        assert_eq!(cfg.synth.phases[3].weight, 4.0);
        assert!(cfg.synth.phases.iter().all(|p| p.skip_prob == 0.0));
        assert_eq!(cfg.model.num_classes, 4);
    }

    #[test]
    fn mismatched_list_length_rejected() {
        let err = RunConfig::parse("num_classes = 4\nskip_probs = 0.1,0.2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn malformed_line_rejected_with_line_number() {
        let err = RunConfig::parse("seed = 1\nnot a kv line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
