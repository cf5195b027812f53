//! Flat dotted-key run configuration.
//!
//! Files are lines of `key = value` with `#` comments. Every key has a
//! typed default; unknown keys and unparsable values are errors (the CLI
//! maps them to its configuration exit code). Environment variables
//! `GOALLOOP_<KEY>` override file values, with `__` standing in for dots:
//! `GOALLOOP_data__n_train=100`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::perturb::PerturbKind;
use crate::runtime::PolicyKind;

#[derive(Clone, Debug)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub frame: usize,
    pub expert_noise: f32,
}

#[derive(Clone, Debug)]
pub struct CodecSection {
    pub f_s: usize,
    pub f_t: usize,
    pub c_s: usize,
    pub c_t: usize,
    pub kl_weight: f32,
    pub sp_steps: usize,
    pub tp_steps: usize,
    pub batch: usize,
    pub lr: f32,
}

#[derive(Clone, Debug)]
pub struct PlannerSection {
    pub n_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub horizon: usize,
    pub n_cond: usize,
    pub n_steps: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub grad_clip: f32,
    pub ema_decay: f32,
    /// Comma-separated sampling weights for the ten mask patterns.
    pub mask_weights: String,
}

impl PlannerSection {
    /// Mask-pattern weights as a fixed array, checked for count, sign, and
    /// unit sum.
    pub fn parsed_mask_weights(&self) -> Result<[f32; 10]> {
        let v: Vec<f32> = parse_list(&self.mask_weights, "f32")?;
        if v.len() != 10 {
            return Err(CoreError::Config(format!(
                "planner.mask_weights needs 10 entries, got {}",
                v.len()
            )));
        }
        let sum: f32 = v.iter().sum();
        if v.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-3 {
            return Err(CoreError::Config(format!(
                "planner.mask_weights must be nonnegative and sum to 1 (sum = {sum})"
            )));
        }
        let mut out = [0.0f32; 10];
        out.copy_from_slice(&v);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct AlignSection {
    pub num_prototypes: usize,
    pub dim: usize,
    pub temperature: f32,
    pub sinkhorn_iters: usize,
    pub sinkhorn_eps: f64,
    pub goal_near: usize,
    pub goal_far: usize,
}

#[derive(Clone, Debug)]
pub struct PolicySection {
    pub k_steps: usize,
    pub lambda: f32,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub grad_clip: f32,
}

#[derive(Clone, Debug)]
pub struct ExecSection {
    pub l_test: usize,
    pub control_steps: usize,
    pub task_budget: usize,
    pub chain_len: usize,
    pub time_limit: usize,
}

#[derive(Clone, Debug)]
pub struct EvalSection {
    pub n_chains: usize,
    pub policy: String,
    pub perturb: String,
    pub palette: usize,
}

#[derive(Clone, Debug)]
pub struct AblateSection {
    pub paradigms: String,
    pub lambdas: String,
    pub sampling_steps: String,
    pub control_steps: String,
    pub eval_seeds: usize,
    pub n_chains: usize,
    pub n_steps: usize,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub codec: CodecSection,
    pub planner: PlannerSection,
    pub align: AlignSection,
    pub policy: PolicySection,
    pub exec: ExecSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataSection {
                n_train: 400,
                n_val: 40,
                n_test: 60,
                frame: 32,
                expert_noise: 0.01,
            },
            codec: CodecSection {
                f_s: 4,
                f_t: 4,
                c_s: 4,
                c_t: 8,
                kl_weight: 1e-4,
                sp_steps: 2000,
                tp_steps: 1200,
                batch: 32,
                lr: 1e-4,
            },
            planner: PlannerSection {
                n_layers: 4,
                width: 128,
                heads: 4,
                horizon: 16,
                n_cond: 4,
                n_steps: 50,
                train_steps: 2500,
                batch: 6,
                lr: 1e-4,
                grad_clip: 1.0,
                ema_decay: 0.99,
                mask_weights: "0.025,0.025,0.025,0.75,0.025,0.05,0,0.025,0.025,0.05".into(),
            },
            align: AlignSection {
                num_prototypes: 64,
                dim: 64,
                temperature: 0.1,
                sinkhorn_iters: 3,
                sinkhorn_eps: 0.05,
                goal_near: 1,
                goal_far: 16,
            },
            policy: PolicySection {
                k_steps: 20,
                lambda: 1.0,
                hidden: 256,
                blocks: 3,
                time_dim: 32,
                train_steps: 1500,
                batch: 64,
                lr: 1e-4,
                grad_clip: 1.0,
            },
            exec: ExecSection {
                l_test: 12,
                control_steps: 1,
                task_budget: 40,
                chain_len: 5,
                time_limit: 200,
            },
            eval: EvalSection {
                n_chains: 25,
                policy: "learned".to_string(),
                perturb: "none".to_string(),
                palette: crate::world::HELDOUT_PALETTE,
            },
            ablate: AblateSection {
                paradigms: "full,no_sa,random_codec".to_string(),
                lambdas: String::new(),
                sampling_steps: "50,40,30,20,10".to_string(),
                control_steps: "1,2,3,4".to_string(),
                eval_seeds: 5,
                n_chains: 4,
                n_steps: 10,
            },
        }
    }
}

fn bad_value(key: &str, value: &str, want: &str) -> CoreError {
    CoreError::Config(format!("key `{key}`: cannot parse `{value}` as {want}"))
}

macro_rules! parse_num {
    ($key:expr, $value:expr, $ty:literal) => {
        $value.parse().map_err(|_| bad_value($key, $value, $ty))?
    };
}

impl Config {
    /// Assign one dotted key. Unknown keys and malformed values are
    /// configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num!(key, v, "u64"),
            "data.n_train" => self.data.n_train = parse_num!(key, v, "usize"),
            "data.n_val" => self.data.n_val = parse_num!(key, v, "usize"),
            "data.n_test" => self.data.n_test = parse_num!(key, v, "usize"),
            "data.frame" => self.data.frame = parse_num!(key, v, "usize"),
            "data.expert_noise" => self.data.expert_noise = parse_num!(key, v, "f32"),
            "codec.f_s" => self.codec.f_s = parse_num!(key, v, "usize"),
            "codec.f_t" => self.codec.f_t = parse_num!(key, v, "usize"),
            "codec.c_s" => self.codec.c_s = parse_num!(key, v, "usize"),
            "codec.c_t" => self.codec.c_t = parse_num!(key, v, "usize"),
            "codec.kl_weight" => self.codec.kl_weight = parse_num!(key, v, "f32"),
            "codec.sp_steps" => self.codec.sp_steps = parse_num!(key, v, "usize"),
            "codec.tp_steps" => self.codec.tp_steps = parse_num!(key, v, "usize"),
            "codec.batch" => self.codec.batch = parse_num!(key, v, "usize"),
            "codec.lr" => self.codec.lr = parse_num!(key, v, "f32"),
            "planner.n_layers" => self.planner.n_layers = parse_num!(key, v, "usize"),
            "planner.width" => self.planner.width = parse_num!(key, v, "usize"),
            "planner.heads" => self.planner.heads = parse_num!(key, v, "usize"),
            "planner.horizon" => self.planner.horizon = parse_num!(key, v, "usize"),
            "planner.n_cond" => self.planner.n_cond = parse_num!(key, v, "usize"),
            "planner.n_steps" => self.planner.n_steps = parse_num!(key, v, "usize"),
            "planner.train_steps" => self.planner.train_steps = parse_num!(key, v, "usize"),
            "planner.batch" => self.planner.batch = parse_num!(key, v, "usize"),
            "planner.lr" => self.planner.lr = parse_num!(key, v, "f32"),
            "planner.grad_clip" => self.planner.grad_clip = parse_num!(key, v, "f32"),
            "planner.ema_decay" => self.planner.ema_decay = parse_num!(key, v, "f32"),
            "planner.mask_weights" => self.planner.mask_weights = v.to_string(),
            "align.num_prototypes" => self.align.num_prototypes = parse_num!(key, v, "usize"),
            "align.dim" => self.align.dim = parse_num!(key, v, "usize"),
            "align.temperature" => self.align.temperature = parse_num!(key, v, "f32"),
            "align.sinkhorn_iters" => self.align.sinkhorn_iters = parse_num!(key, v, "usize"),
            "align.sinkhorn_eps" => self.align.sinkhorn_eps = parse_num!(key, v, "f64"),
            "align.goal_near" => self.align.goal_near = parse_num!(key, v, "usize"),
            "align.goal_far" => self.align.goal_far = parse_num!(key, v, "usize"),
            "policy.k_steps" => self.policy.k_steps = parse_num!(key, v, "usize"),
            "policy.lambda" => self.policy.lambda = parse_num!(key, v, "f32"),
            "policy.hidden" => self.policy.hidden = parse_num!(key, v, "usize"),
            "policy.blocks" => self.policy.blocks = parse_num!(key, v, "usize"),
            "policy.time_dim" => self.policy.time_dim = parse_num!(key, v, "usize"),
            "policy.train_steps" => self.policy.train_steps = parse_num!(key, v, "usize"),
            "policy.batch" => self.policy.batch = parse_num!(key, v, "usize"),
            "policy.lr" => self.policy.lr = parse_num!(key, v, "f32"),
            "policy.grad_clip" => self.policy.grad_clip = parse_num!(key, v, "f32"),
            "exec.l_test" => self.exec.l_test = parse_num!(key, v, "usize"),
            "exec.control_steps" => self.exec.control_steps = parse_num!(key, v, "usize"),
            "exec.task_budget" => self.exec.task_budget = parse_num!(key, v, "usize"),
            "exec.chain_len" => self.exec.chain_len = parse_num!(key, v, "usize"),
            "exec.time_limit" => self.exec.time_limit = parse_num!(key, v, "usize"),
            "eval.n_chains" => self.eval.n_chains = parse_num!(key, v, "usize"),
            "eval.policy" => {
                PolicyKind::parse(v)?;
                self.eval.policy = v.to_string();
            }
            "eval.perturb" => {
                PerturbKind::parse(v)?;
                self.eval.perturb = v.to_string();
            }
            "eval.palette" => self.eval.palette = parse_num!(key, v, "usize"),
            "ablate.paradigms" => self.ablate.paradigms = v.to_string(),
            "ablate.lambdas" => self.ablate.lambdas = v.to_string(),
            "ablate.sampling_steps" => self.ablate.sampling_steps = v.to_string(),
            "ablate.control_steps" => self.ablate.control_steps = v.to_string(),
            "ablate.eval_seeds" => self.ablate.eval_seeds = parse_num!(key, v, "usize"),
            "ablate.n_chains" => self.ablate.n_chains = parse_num!(key, v, "usize"),
            "ablate.n_steps" => self.ablate.n_steps = parse_num!(key, v, "usize"),
            other => {
                return Err(CoreError::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Apply the contents of a config file on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `GOALLOOP_*` environment overrides (double underscore = dot),
    /// in sorted variable order for determinism.
    pub fn apply_env(&mut self) -> Result<()> {
        let mut vars: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with("GOALLOOP_"))
            .collect();
        vars.sort();
        for (k, v) in vars {
            let key = k.trim_start_matches("GOALLOOP_").replace("__", ".");
            self.set(&key, &v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            cfg.apply_file(p)?;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field invariants that individual setters cannot see.
    pub fn validate(&self) -> Result<()> {
        let future = self.planner.horizon.saturating_sub(self.planner.n_cond);
        if self.exec.l_test > future {
            return Err(CoreError::Config(format!(
                "exec.l_test = {} exceeds planned future frames {} (planner.horizon - planner.n_cond)",
                self.exec.l_test, future
            )));
        }
        if self.planner.horizon % self.codec.f_t != 0 || self.planner.n_cond % self.codec.f_t != 0
        {
            return Err(CoreError::Config(format!(
                "planner.horizon {} and planner.n_cond {} must be multiples of codec.f_t {}",
                self.planner.horizon, self.planner.n_cond, self.codec.f_t
            )));
        }
        if self.data.frame % self.codec.f_s != 0 {
            return Err(CoreError::Config(format!(
                "data.frame {} not divisible by codec.f_s {}",
                self.data.frame, self.codec.f_s
            )));
        }
        if self.align.goal_near == 0 || self.align.goal_near > self.align.goal_far {
            return Err(CoreError::Config(format!(
                "align.goal_near {} must be in 1..=align.goal_far ({})",
                self.align.goal_near, self.align.goal_far
            )));
        }
        if self.eval.palette >= crate::world::N_PALETTES {
            return Err(CoreError::Config(format!(
                "eval.palette {} out of range (palettes: 0..{})",
                self.eval.palette,
                crate::world::N_PALETTES
            )));
        }
        if self.exec.control_steps == 0 {
            return Err(CoreError::Config("exec.control_steps must be >= 1".into()));
        }
        self.planner.parsed_mask_weights()?;
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("data.n_train".into(), self.data.n_train.to_string()),
            ("data.n_val".into(), self.data.n_val.to_string()),
            ("data.n_test".into(), self.data.n_test.to_string()),
            ("data.frame".into(), self.data.frame.to_string()),
            ("data.expert_noise".into(), self.data.expert_noise.to_string()),
            ("codec.f_s".into(), self.codec.f_s.to_string()),
            ("codec.f_t".into(), self.codec.f_t.to_string()),
            ("codec.c_s".into(), self.codec.c_s.to_string()),
            ("codec.c_t".into(), self.codec.c_t.to_string()),
            ("codec.kl_weight".into(), self.codec.kl_weight.to_string()),
            ("codec.sp_steps".into(), self.codec.sp_steps.to_string()),
            ("codec.tp_steps".into(), self.codec.tp_steps.to_string()),
            ("codec.batch".into(), self.codec.batch.to_string()),
            ("codec.lr".into(), self.codec.lr.to_string()),
            ("planner.n_layers".into(), self.planner.n_layers.to_string()),
            ("planner.width".into(), self.planner.width.to_string()),
            ("planner.heads".into(), self.planner.heads.to_string()),
            ("planner.horizon".into(), self.planner.horizon.to_string()),
            ("planner.n_cond".into(), self.planner.n_cond.to_string()),
            ("planner.n_steps".into(), self.planner.n_steps.to_string()),
            ("planner.train_steps".into(), self.planner.train_steps.to_string()),
            ("planner.batch".into(), self.planner.batch.to_string()),
            ("planner.lr".into(), self.planner.lr.to_string()),
            ("planner.grad_clip".into(), self.planner.grad_clip.to_string()),
            ("planner.ema_decay".into(), self.planner.ema_decay.to_string()),
            ("planner.mask_weights".into(), self.planner.mask_weights.clone()),
            ("align.num_prototypes".into(), self.align.num_prototypes.to_string()),
            ("align.dim".into(), self.align.dim.to_string()),
            ("align.temperature".into(), self.align.temperature.to_string()),
            ("align.sinkhorn_iters".into(), self.align.sinkhorn_iters.to_string()),
            ("align.sinkhorn_eps".into(), self.align.sinkhorn_eps.to_string()),
            ("align.goal_near".into(), self.align.goal_near.to_string()),
            ("align.goal_far".into(), self.align.goal_far.to_string()),
            ("policy.k_steps".into(), self.policy.k_steps.to_string()),
            ("policy.lambda".into(), self.policy.lambda.to_string()),
            ("policy.hidden".into(), self.policy.hidden.to_string()),
            ("policy.blocks".into(), self.policy.blocks.to_string()),
            ("policy.time_dim".into(), self.policy.time_dim.to_string()),
            ("policy.train_steps".into(), self.policy.train_steps.to_string()),
            ("policy.batch".into(), self.policy.batch.to_string()),
            ("policy.lr".into(), self.policy.lr.to_string()),
            ("policy.grad_clip".into(), self.policy.grad_clip.to_string()),
            ("exec.l_test".into(), self.exec.l_test.to_string()),
            ("exec.control_steps".into(), self.exec.control_steps.to_string()),
            ("exec.task_budget".into(), self.exec.task_budget.to_string()),
            ("exec.chain_len".into(), self.exec.chain_len.to_string()),
            ("exec.time_limit".into(), self.exec.time_limit.to_string()),
            ("eval.n_chains".into(), self.eval.n_chains.to_string()),
            ("eval.policy".into(), self.eval.policy.clone()),
            ("eval.perturb".into(), self.eval.perturb.clone()),
            ("eval.palette".into(), self.eval.palette.to_string()),
            ("ablate.paradigms".into(), self.ablate.paradigms.clone()),
            ("ablate.lambdas".into(), self.ablate.lambdas.clone()),
            ("ablate.sampling_steps".into(), self.ablate.sampling_steps.clone()),
            ("ablate.control_steps".into(), self.ablate.control_steps.clone()),
            ("ablate.eval_seeds".into(), self.ablate.eval_seeds.to_string()),
            ("ablate.n_chains".into(), self.ablate.n_chains.to_string()),
            ("ablate.n_steps".into(), self.ablate.n_steps.to_string()),
        ];
        out.sort();
        out
    }

    /// Sorted `key = value` lines; parsing this text reproduces the config.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Hash of the canonical form, for provenance records.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse a comma-separated list of numbers; empty input gives an empty
/// list.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let p = part.trim();
        if p.is_empty() {
            continue;
        }
        out.push(
            p.parse::<T>()
                .map_err(|_| CoreError::Config(format!("cannot parse `{p}` as {what}")))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_pinned_values() {
        let c = Config::default();
        assert_eq!(c.seed, 0);
        assert_eq!(c.data.n_train, 400);
        assert_eq!(c.codec.f_s, 4);
        assert_eq!(c.codec.c_t, 8);
        assert_eq!(c.planner.width, 128);
        assert_eq!(c.planner.train_steps, 2500);
        assert_eq!(c.planner.batch, 6);
        assert!((c.planner.ema_decay - 0.99).abs() < 1e-9);
        assert_eq!(c.align.num_prototypes, 64);
        assert!((c.align.temperature - 0.1).abs() < 1e-9);
        assert!((c.align.sinkhorn_eps - 0.05).abs() < 1e-12);
        assert_eq!(c.align.sinkhorn_iters, 3);
        assert_eq!(c.policy.k_steps, 20);
        assert_eq!(c.exec.l_test, 12);
        assert_eq!(c.eval.n_chains, 25);
        c.validate().unwrap();
    }

    #[test]
    fn file_overrides_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(
            &p,
            "# comment line\nseed = 7\n\ndata.n_train = 12 # trailing comment\neval.policy = expert\n",
        )
        .unwrap();
        let mut c = Config::default();
        c.apply_file(&p).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.data.n_train, 12);
        assert_eq!(c.eval.policy, "expert");
    }

    #[test]
    fn unknown_key_is_config_error() {
        let mut c = Config::default();
        let err = c.set("data.n_trian", "10").unwrap_err();
        assert!(matches!(err, CoreError::Config(_)), "got {err}");
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn malformed_value_is_config_error() {
        let mut c = Config::default();
        assert!(matches!(
            c.set("planner.lr", "fast").unwrap_err(),
            CoreError::Config(_)
        ));
        assert!(matches!(
            c.set("eval.perturb", "sparkles").unwrap_err(),
            CoreError::Config(_)
        ));
    }

    #[test]
    fn env_overrides_apply_with_double_underscore() {
        std::env::set_var("GOALLOOP_exec__l_test", "6");
        let mut c = Config::default();
        c.apply_env().unwrap();
        std::env::remove_var("GOALLOOP_exec__l_test");
        assert_eq!(c.exec.l_test, 6);
    }

    #[test]
    fn canonical_string_roundtrips_and_hash_is_stable() {
        let mut c = Config::default();
        c.set("planner.width", "96").unwrap();
        let s1 = c.canonical_string();
        let h1 = c.sha256();
        // Reparse the canonical text into a fresh config.
        let mut c2 = Config::default();
        for line in s1.lines() {
            let (k, v) = line.split_once('=').unwrap();
            c2.set(k.trim(), v.trim()).unwrap();
        }
        assert_eq!(c2.canonical_string(), s1);
        assert_eq!(c2.sha256(), h1);
        // A change anywhere moves the hash.
        c2.set("seed", "1").unwrap();
        assert_ne!(c2.sha256(), h1);
    }

    #[test]
    fn cross_field_validation_catches_bad_refresh_interval() {
        let mut c = Config::default();
        c.set("exec.l_test", "13").unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("l_test"));
    }

    #[test]
    fn list_parsing() {
        let v: Vec<usize> = parse_list("50,40, 30", "usize").unwrap();
        assert_eq!(v, vec![50, 40, 30]);
        let empty: Vec<f32> = parse_list("", "f32").unwrap();
        assert!(empty.is_empty());
        assert!(parse_list::<usize>("a,b", "usize").is_err());
    }

    #[test]
    fn mask_weights_parse_and_validate() {
        let c = Config::default();
        let w = c.planner.parsed_mask_weights().unwrap();
        assert_eq!(w.len(), 10);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-4);
        assert!((w[3] - 0.75).abs() < 1e-6);

        let mut bad = Config::default();
        bad.set("planner.mask_weights", "1,0,0").unwrap();
        assert!(matches!(bad.validate().unwrap_err(), CoreError::Config(_)));
        bad.set("planner.mask_weights", "0.2,0.2,0.2,0.2,0.2,0.2,0,0,0,0.2")
            .unwrap();
        assert!(bad.validate().is_err(), "sum 1.4 must be rejected");
    }
}
