//! Stage implementations behind the subcommands.
//!
//! Artifact layout under the `--out` root:
//!
//! ```text
//! data/     train.bin val.bin test.bin + provenance.json
//! ckpt/     codec.bin planner.bin planner_ema.bin joint.bin (+ ablation
//!           variants) each with a .provenance.json sidecar
//! reports/  deterministic CSV/JSON outputs; re-running a stage with the
//!           same config and seed reproduces these byte-for-byte
//! timings/  wall-clock sidecars, the only place timing is recorded
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use goalloop_core::align::{AlignConfig, AlignModel};
use goalloop_core::checkpoint::{bytes_sha256, file_sha256, ParamStore};
use goalloop_core::codec::{self, Codec, CodecConfig};
use goalloop_core::config::{parse_list, Config};
use goalloop_core::dataset::{self, Episode};
use goalloop_core::error::{CoreError, Result};
use goalloop_core::perturb::{PerturbKind, ALL_PERTURBATIONS};
use goalloop_core::planner::{self, Planner, PlannerConfig, PlannerTrainConfig};
use goalloop_core::policy::{self, cosine_schedule, JointTrainConfig, NoiseSchedule, PolicyConfig, PolicyNet};
use goalloop_core::report::{fmt_float, read_csv, render_table, write_csv, Provenance};
use goalloop_core::rng::StreamRng;
use goalloop_core::runtime::{evaluate, Agent, EvalConfig, EvalSummary, ExecConfig, LearnedAgent, PolicyKind};
use goalloop_core::tensor::Tensor;
use goalloop_core::world;

pub struct Ctx {
    pub cfg: Config,
    pub out: PathBuf,
}

impl Ctx {
    fn data_path(&self, split: &str) -> PathBuf {
        self.out.join("data").join(format!("{split}.bin"))
    }

    fn ckpt_path(&self, name: &str) -> PathBuf {
        self.out.join("ckpt").join(format!("{name}.bin"))
    }

    fn report_path(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(name)
    }

    fn timing_path(&self, name: &str) -> PathBuf {
        self.out.join("timings").join(name)
    }

    fn require(&self, path: &Path, run_first: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CoreError::MissingPrerequisite(format!(
                "{} not found; run `goalloop {run_first}` first",
                path.display()
            )))
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::new(self.cfg.sha256(), self.cfg.seed)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Config(format!("json serialize: {e}")))?;
    write_bytes(path, text.as_bytes())
}

fn write_timings(ctx: &Ctx, name: &str, phases: &[(String, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = phases
        .iter()
        .map(|(p, s)| vec![p.clone(), format!("{s:.3}")])
        .collect();
    write_csv(&ctx.timing_path(name), &["phase", "seconds"], &rows)
}

// ── model constructors from config ──────────────────────────────────────

fn codec_config(cfg: &Config) -> CodecConfig {
    CodecConfig {
        frame: cfg.data.frame,
        f_s: cfg.codec.f_s,
        f_t: cfg.codec.f_t,
        c_s: cfg.codec.c_s,
        c_t: cfg.codec.c_t,
        kl_weight: cfg.codec.kl_weight,
    }
}

fn planner_config(cfg: &Config) -> Result<PlannerConfig> {
    Ok(PlannerConfig {
        n_layers: cfg.planner.n_layers,
        width: cfg.planner.width,
        heads: cfg.planner.heads,
        horizon: cfg.planner.horizon,
        n_cond: cfg.planner.n_cond,
        time_dim: 32,
        vocab: world::VOCAB,
        mask_weights: cfg.planner.parsed_mask_weights()?,
    })
}

fn planner_train_config(cfg: &Config) -> PlannerTrainConfig {
    PlannerTrainConfig {
        steps: cfg.planner.train_steps,
        batch: cfg.planner.batch,
        lr: cfg.planner.lr,
        grad_clip: cfg.planner.grad_clip,
        ema_decay: cfg.planner.ema_decay,
        log_every: 50,
    }
}

fn align_config(cfg: &Config) -> AlignConfig {
    AlignConfig {
        num_prototypes: cfg.align.num_prototypes,
        dim: cfg.align.dim,
        temperature: cfg.align.temperature,
        sinkhorn_eps: cfg.align.sinkhorn_eps,
        sinkhorn_iters: cfg.align.sinkhorn_iters,
        goal_near: cfg.align.goal_near,
        goal_far: cfg.align.goal_far,
    }
}

fn policy_config(cfg: &Config) -> PolicyConfig {
    PolicyConfig {
        k_steps: cfg.policy.k_steps,
        hidden: cfg.policy.hidden,
        blocks: cfg.policy.blocks,
        time_dim: cfg.policy.time_dim,
        embed_dim: cfg.align.dim,
    }
}

fn joint_train_config(cfg: &Config, lambda: f32) -> JointTrainConfig {
    JointTrainConfig {
        steps: cfg.policy.train_steps,
        batch: cfg.policy.batch,
        lr: cfg.policy.lr,
        grad_clip: cfg.policy.grad_clip,
        lambda,
        log_every: 25,
    }
}

fn eval_config(cfg: &Config, perturb: PerturbKind) -> EvalConfig {
    EvalConfig {
        n_chains: cfg.eval.n_chains,
        chain_len: cfg.exec.chain_len,
        palette: cfg.eval.palette,
        frame: cfg.data.frame,
        time_limit: cfg.exec.time_limit,
        exec: ExecConfig {
            l_test: cfg.exec.l_test,
            n_plan_steps: cfg.planner.n_steps,
            task_budget: cfg.exec.task_budget,
            control_steps: cfg.exec.control_steps,
            perturb,
        },
    }
}

/// Replace a template store's values from a checkpoint file, enforcing
/// that names and shapes match the configured architecture.
fn load_params_into(template: &mut ParamStore, path: &Path) -> Result<()> {
    let loaded = ParamStore::load(path)?;
    template.load_into(&loaded, &path.display().to_string())
}

fn load_split_required(ctx: &Ctx, split: &str) -> Result<Vec<Episode>> {
    let path = ctx.data_path(split);
    ctx.require(&path, "gen-data")?;
    let (_, eps) = dataset::load_split(&path)?;
    Ok(eps)
}

// ── gen-data ────────────────────────────────────────────────────────────

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let t0 = Instant::now();
    let train_palettes: Vec<usize> =
        (0..world::N_PALETTES).filter(|&p| p != cfg.eval.palette).collect();
    let heldout = vec![cfg.eval.palette];
    let splits: [(&str, usize, &[usize]); 3] = [
        ("train", cfg.data.n_train, &train_palettes),
        ("val", cfg.data.n_val, &train_palettes),
        ("test", cfg.data.n_test, &heldout),
    ];
    let mut prov = ctx.provenance();
    for (label, n, palettes) in splits {
        let eps = dataset::generate_split(
            cfg.seed,
            label,
            n,
            palettes,
            cfg.data.frame,
            cfg.data.expert_noise,
        )?;
        let manifest = dataset::split_manifest(label, eps.len(), cfg.data.frame, cfg.seed);
        let bytes = dataset::serialize_split(&eps, &manifest);
        let path = ctx.data_path(label);
        prov.checkpoints.insert(format!("data/{label}.bin"), bytes_sha256(&bytes));
        if path.exists() {
            let existing = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
            if existing == bytes {
                println!("gen-data: {} up to date ({n} episodes), skipped", path.display());
                continue;
            }
        }
        write_bytes(&path, &bytes)?;
        println!(
            "gen-data: wrote {} ({n} episodes, palettes {:?})",
            path.display(),
            palettes
        );
    }
    prov.save(&ctx.out.join("data").join("provenance.json"))?;
    write_timings(ctx, "gen_data.csv", &[("total".into(), t0.elapsed().as_secs_f64())])?;
    Ok(())
}

// ── train-codec ─────────────────────────────────────────────────────────

pub fn train_codec(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let train_eps = load_split_required(ctx, "train")?;
    let val_eps = load_split_required(ctx, "val")?;
    let test_eps = load_split_required(ctx, "test")?;

    let mut store = ParamStore::new();
    let codec = Codec::init(&mut store, cfg.seed, codec_config(cfg))?;

    let t0 = Instant::now();
    eprintln!("train-codec: spatial stage ({} steps)", cfg.codec.sp_steps);
    let sp_log = codec::train_spatial(
        &codec,
        &mut store,
        &train_eps,
        cfg.codec.sp_steps,
        cfg.codec.batch,
        cfg.codec.lr,
        cfg.seed,
        50,
    )?;
    let sp_secs = t0.elapsed().as_secs_f64();

    eprintln!("train-codec: caching per-episode latents");
    let latents: Vec<Tensor> = train_eps
        .iter()
        .map(|ep| codec::episode_means(&codec, &store, ep))
        .collect::<Result<_>>()?;
    let t1 = Instant::now();
    eprintln!("train-codec: temporal stage ({} steps)", cfg.codec.tp_steps);
    let tp_log = codec::train_temporal(
        &codec,
        &mut store,
        &latents,
        cfg.planner.horizon,
        cfg.codec.tp_steps,
        cfg.codec.batch,
        cfg.codec.lr,
        cfg.seed,
        50,
    )?;
    let tp_secs = t1.elapsed().as_secs_f64();

    let ckpt = ctx.ckpt_path("codec");
    store.save(&ckpt)?;
    let mut prov = ctx.provenance();
    prov.add_checkpoint("data/train.bin", &ctx.data_path("train"))?;
    prov.save(&ctx.out.join("ckpt").join("codec.provenance.json"))?;

    let mut rows = Vec::new();
    for (s, l) in &sp_log.curve {
        rows.push(vec!["spatial".to_string(), s.to_string(), fmt_float(*l)]);
    }
    for (s, l) in &tp_log.curve {
        rows.push(vec!["temporal".to_string(), s.to_string(), fmt_float(*l)]);
    }
    write_csv(&ctx.report_path("codec_train.csv"), &["stage", "step", "loss"], &rows)?;

    let mut eval_rows = Vec::new();
    for (split, eps) in [("val", &val_eps), ("test", &test_eps)] {
        let sp = codec::eval_spatial_psnr(&codec, &store, eps, 64, cfg.seed)?;
        let vid =
            codec::eval_video_psnr(&codec, &store, eps, cfg.planner.horizon, 16, cfg.seed)?;
        println!("train-codec: {split} spatial psnr {sp:.2} dB, video psnr {vid:.2} dB");
        eval_rows.push(vec![split.to_string(), fmt_float(sp), fmt_float(vid)]);
    }
    write_csv(
        &ctx.report_path("codec_eval.csv"),
        &["split", "spatial_psnr", "video_psnr"],
        &eval_rows,
    )?;
    let mut report_prov = ctx.provenance();
    report_prov.add_checkpoint("ckpt/codec.bin", &ckpt)?;
    report_prov.save(&ctx.report_path("codec_eval.provenance.json"))?;
    write_timings(
        ctx,
        "train_codec.csv",
        &[("spatial".into(), sp_secs), ("temporal".into(), tp_secs)],
    )?;
    println!(
        "train-codec: saved {} ({} tensors)",
        ckpt.display(),
        store.len()
    );
    Ok(())
}

// ── train-planner ───────────────────────────────────────────────────────

fn load_codec(ctx: &Ctx, ckpt_name: &str, run_first: &str) -> Result<(Codec, ParamStore)> {
    let path = ctx.ckpt_path(ckpt_name);
    ctx.require(&path, run_first)?;
    let mut store = ParamStore::new();
    let codec = Codec::init(&mut store, ctx.cfg.seed, codec_config(&ctx.cfg))?;
    load_params_into(&mut store, &path)?;
    Ok((codec, store))
}

/// Train a planner over the given codec and save raw + EMA weights under
/// the given checkpoint names. Returns the loss curve.
fn run_planner_training(
    ctx: &Ctx,
    codec: &Codec,
    codec_store: &ParamStore,
    train_eps: &[Episode],
    raw_name: &str,
    ema_name: &str,
    curve_csv: &str,
) -> Result<Vec<(usize, f64)>> {
    let cfg = &ctx.cfg;
    eprintln!(
        "planner training: {} steps, batch {} (this is the long stage)",
        cfg.planner.train_steps, cfg.planner.batch
    );
    let latents: Vec<Tensor> = train_eps
        .iter()
        .map(|ep| codec::episode_means(codec, codec_store, ep))
        .collect::<Result<_>>()?;
    let instr_ids: Vec<usize> = train_eps.iter().map(|ep| ep.instruction).collect();
    let active_hi = planner::active_window_limits(
        train_eps,
        cfg.data.frame,
        cfg.planner.horizon,
        cfg.planner.n_cond,
    );

    let mut store = ParamStore::new();
    let planner = Planner::init(&mut store, cfg.seed, planner_config(cfg)?, &codec.cfg)?;
    let mut ema = store.clone();
    let curve = planner::train_planner(
        &planner,
        codec,
        codec_store,
        &mut store,
        &mut ema,
        &latents,
        &instr_ids,
        &active_hi,
        planner_train_config(cfg),
        cfg.seed,
    )?;
    store.save(&ctx.ckpt_path(raw_name))?;
    ema.save(&ctx.ckpt_path(ema_name))?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|(s, l)| vec![s.to_string(), fmt_float(*l)])
        .collect();
    write_csv(&ctx.report_path(curve_csv), &["step", "loss"], &rows)?;
    Ok(curve)
}

pub fn train_planner(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let train_eps = load_split_required(ctx, "train")?;
    let val_eps = load_split_required(ctx, "val")?;
    let (codec, codec_store) = load_codec(ctx, "codec", "train-codec")?;

    let t0 = Instant::now();
    let curve = run_planner_training(
        ctx,
        &codec,
        &codec_store,
        &train_eps,
        "planner",
        "planner_ema",
        "planner_train.csv",
    )?;
    let train_secs = t0.elapsed().as_secs_f64();
    if let Some((step, loss)) = curve.last() {
        println!("train-planner: final loss {loss:.6} at step {step}");
    }

    let mut prov = ctx.provenance();
    prov.add_checkpoint("ckpt/codec.bin", &ctx.ckpt_path("codec"))?;
    prov.add_checkpoint("data/train.bin", &ctx.data_path("train"))?;
    prov.save(&ctx.out.join("ckpt").join("planner.provenance.json"))?;

    // Generation quality against the copy-last-frame baseline, with EMA
    // weights, on held-out episodes.
    let t1 = Instant::now();
    let mut ema = ParamStore::new();
    let planner = Planner::init(&mut ema, cfg.seed, planner_config(cfg)?, &codec.cfg)?;
    load_params_into(&mut ema, &ctx.ckpt_path("planner_ema"))?;
    let pe = planner::eval_planner(
        &planner,
        &ema,
        &codec,
        &codec_store,
        &val_eps,
        8,
        cfg.planner.n_steps,
        cfg.seed,
    )?;
    println!(
        "train-planner: psnr {:.2} (baseline {:.2}), ssim {:.4} (baseline {:.4})",
        pe.psnr, pe.baseline_psnr, pe.ssim, pe.baseline_ssim
    );
    write_csv(
        &ctx.report_path("planner_eval.csv"),
        &["metric", "generated", "copy_last_baseline"],
        &[
            vec!["psnr".into(), fmt_float(pe.psnr), fmt_float(pe.baseline_psnr)],
            vec!["ssim".into(), fmt_float(pe.ssim), fmt_float(pe.baseline_ssim)],
        ],
    )?;
    let mut report_prov = ctx.provenance();
    report_prov.add_checkpoint("ckpt/planner_ema.bin", &ctx.ckpt_path("planner_ema"))?;
    report_prov.save(&ctx.report_path("planner_eval.provenance.json"))?;
    write_timings(
        ctx,
        "train_planner.csv",
        &[("train".into(), train_secs), ("eval".into(), t1.elapsed().as_secs_f64())],
    )?;
    Ok(())
}

// ── train-align-policy ──────────────────────────────────────────────────

/// Jointly train alignment encoders + diffusion policy with the given
/// loss weight and save under `ckpt_name`.
fn run_joint_training(
    ctx: &Ctx,
    train_eps: &[Episode],
    lambda: f32,
    ckpt_name: &str,
    curve_csv: &str,
) -> Result<()> {
    let cfg = &ctx.cfg;
    eprintln!(
        "joint training: {} steps, batch {}, lambda {lambda}",
        cfg.policy.train_steps, cfg.policy.batch
    );
    let mut store = ParamStore::new();
    let align = AlignModel::init(&mut store, cfg.seed, align_config(cfg), cfg.data.frame);
    let policy_net = PolicyNet::init(&mut store, cfg.seed, policy_config(cfg));
    let curve = policy::train_joint(
        &policy_net,
        &align,
        &mut store,
        train_eps,
        cfg.data.frame,
        joint_train_config(cfg, lambda),
        cfg.seed,
    )?;
    store.save(&ctx.ckpt_path(ckpt_name))?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|(s, t, b, a)| vec![s.to_string(), fmt_float(*t), fmt_float(*b), fmt_float(*a)])
        .collect();
    write_csv(
        &ctx.report_path(curve_csv),
        &["step", "total", "behavior_cloning", "alignment"],
        &rows,
    )?;
    if let Some((step, total, bc, al)) = curve.last() {
        println!(
            "joint training ({ckpt_name}): step {step} total {total:.6} bc {bc:.6} align {al:.6}"
        );
    }
    Ok(())
}

pub fn train_align_policy(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let train_eps = load_split_required(ctx, "train")?;
    let t0 = Instant::now();
    run_joint_training(ctx, &train_eps, cfg.policy.lambda, "joint", "joint_train.csv")?;
    let mut prov = ctx.provenance();
    prov.add_checkpoint("data/train.bin", &ctx.data_path("train"))?;
    prov.save(&ctx.out.join("ckpt").join("joint.provenance.json"))?;
    write_timings(
        ctx,
        "train_align_policy.csv",
        &[("train".into(), t0.elapsed().as_secs_f64())],
    )?;
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

/// Owns every model and parameter store a learned agent borrows.
struct LearnedBundle {
    codec: Codec,
    codec_params: ParamStore,
    planner: Planner,
    planner_params: ParamStore,
    align: AlignModel,
    policy: PolicyNet,
    joint_params: ParamStore,
    schedule: NoiseSchedule,
    hashes: BTreeMap<String, String>,
}

impl LearnedBundle {
    fn load(ctx: &Ctx, codec_name: &str, planner_name: &str, joint_name: &str) -> Result<LearnedBundle> {
        let cfg = &ctx.cfg;
        let hints: [(&str, &str); 3] = [
            (codec_name, "train-codec"),
            (planner_name, "train-planner"),
            (joint_name, "train-align-policy"),
        ];
        let mut hashes = BTreeMap::new();
        for (name, hint) in hints {
            let path = ctx.ckpt_path(name);
            // Ablation variants are produced by `ablate` itself.
            let hint = if name.contains("rand") || name.contains("nosa") || name.contains("lambda") {
                "ablate"
            } else {
                hint
            };
            ctx.require(&path, hint)?;
            hashes.insert(format!("ckpt/{name}.bin"), file_sha256(&path)?);
        }
        let (codec, codec_params) = load_codec(ctx, codec_name, "train-codec")?;
        let mut planner_params = ParamStore::new();
        let planner =
            Planner::init(&mut planner_params, cfg.seed, planner_config(cfg)?, &codec.cfg)?;
        load_params_into(&mut planner_params, &ctx.ckpt_path(planner_name))?;
        let mut joint_params = ParamStore::new();
        let align = AlignModel::init(&mut joint_params, cfg.seed, align_config(cfg), cfg.data.frame);
        let policy = PolicyNet::init(&mut joint_params, cfg.seed, policy_config(cfg));
        load_params_into(&mut joint_params, &ctx.ckpt_path(joint_name))?;
        let schedule = cosine_schedule(cfg.policy.k_steps);
        Ok(LearnedBundle {
            codec,
            codec_params,
            planner,
            planner_params,
            align,
            policy,
            joint_params,
            schedule,
            hashes,
        })
    }

    fn agent(&self) -> Agent<'_> {
        Agent::Learned(LearnedAgent {
            codec: &self.codec,
            codec_params: &self.codec_params,
            planner: &self.planner,
            planner_params: &self.planner_params,
            align: &self.align,
            policy: &self.policy,
            joint_params: &self.joint_params,
            schedule: &self.schedule,
        })
    }
}

fn eval_header(chain_len: usize) -> Vec<String> {
    let mut h = vec![
        "perturbation".to_string(),
        "policy".to_string(),
        "seed".to_string(),
        "n_chains".to_string(),
    ];
    for k in 1..=chain_len {
        h.push(format!("sr_{k}"));
    }
    h.push("avg_length".to_string());
    h.push("mean_steps".to_string());
    h.push("config_hash".to_string());
    h
}

fn eval_row(
    perturb: &str,
    policy: &str,
    seed: u64,
    summary: &EvalSummary,
    config_hash: &str,
) -> Vec<String> {
    let mut row = vec![
        perturb.to_string(),
        policy.to_string(),
        seed.to_string(),
        summary.n_chains.to_string(),
    ];
    for v in &summary.sr {
        row.push(fmt_float(*v));
    }
    row.push(fmt_float(summary.avg_length));
    row.push(fmt_float(summary.mean_steps));
    row.push(config_hash.to_string());
    row
}

pub fn eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let kind = PolicyKind::parse(&cfg.eval.policy)?;
    let perturb = PerturbKind::parse(&cfg.eval.perturb)?;
    let ecfg = eval_config(cfg, perturb);
    eprintln!(
        "eval: {} policy, {} perturbation, {} chains of {} on palette {}",
        kind.name(),
        perturb.name(),
        ecfg.n_chains,
        ecfg.chain_len,
        ecfg.palette
    );
    let (summary, hashes) = match kind {
        PolicyKind::Learned => {
            let bundle = LearnedBundle::load(ctx, "codec", "planner_ema", "joint")?;
            let s = evaluate(&bundle.agent(), &ecfg, cfg.seed)?;
            (s, bundle.hashes)
        }
        PolicyKind::Random => (evaluate(&Agent::Random, &ecfg, cfg.seed)?, BTreeMap::new()),
        PolicyKind::Expert => (evaluate(&Agent::Expert, &ecfg, cfg.seed)?, BTreeMap::new()),
    };

    let tag = format!("{}_{}", kind.name(), perturb.name());
    let config_hash = cfg.sha256();
    let header = eval_header(ecfg.chain_len);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let row = eval_row(perturb.name(), kind.name(), cfg.seed, &summary, &config_hash);
    write_csv(&ctx.report_path(&format!("eval_{tag}.csv")), &header_refs, &[row.clone()])?;

    let json = serde_json::json!({
        "perturbation": perturb.name(),
        "policy": kind.name(),
        "seed": cfg.seed,
        "n_chains": summary.n_chains,
        "sr": summary.sr,
        "avg_length": summary.avg_length,
        "mean_steps": summary.mean_steps,
        "config_hash": config_hash,
        "checkpoints": hashes,
    });
    write_json(&ctx.report_path(&format!("eval_{tag}.json")), &json)?;
    write_timings(
        ctx,
        &format!("eval_{tag}.csv"),
        &[("total".into(), summary.wall_seconds)],
    )?;

    println!("{}", render_table(&header_refs, &[row]));
    println!("eval: wall {:.1}s", summary.wall_seconds);
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────────

/// Checkpoint names (codec, planner, joint) backing each paradigm.
fn paradigm_ckpts(paradigm: &str) -> Result<(&'static str, &'static str, &'static str)> {
    match paradigm {
        "full" => Ok(("codec", "planner_ema", "joint")),
        "no_sa" => Ok(("codec", "planner_ema", "joint_nosa")),
        "random_codec" => Ok(("codec_rand", "planner_rand_ema", "joint")),
        other => Err(CoreError::Config(format!(
            "unknown ablation paradigm `{other}` (expected full|no_sa|random_codec)"
        ))),
    }
}

/// Train whatever variant checkpoints the paradigm needs and are not on
/// disk yet. Training is deterministic in (config, seed), so re-running
/// after deletion reproduces the same bytes.
fn ensure_paradigm(
    ctx: &Ctx,
    paradigm: &str,
    train_cache: &mut Option<Vec<Episode>>,
    phases: &mut Vec<(String, f64)>,
) -> Result<()> {
    let cfg = &ctx.cfg;
    match paradigm {
        "full" => {
            ctx.require(&ctx.ckpt_path("codec"), "train-codec")?;
            ctx.require(&ctx.ckpt_path("planner_ema"), "train-planner")?;
            ctx.require(&ctx.ckpt_path("joint"), "train-align-policy")?;
        }
        "no_sa" => {
            ctx.require(&ctx.ckpt_path("joint"), "train-align-policy")?;
            if !ctx.ckpt_path("joint_nosa").exists() {
                let t0 = Instant::now();
                let eps = cached_train_split(ctx, train_cache)?;
                run_joint_training(ctx, eps, 0.0, "joint_nosa", "ablate_joint_nosa_train.csv")?;
                phases.push(("train_joint_nosa".into(), t0.elapsed().as_secs_f64()));
            }
        }
        "random_codec" => {
            ctx.require(&ctx.ckpt_path("joint"), "train-align-policy")?;
            if !ctx.ckpt_path("codec_rand").exists() {
                // Same initialization the trained codec started from,
                // saved untrained.
                let mut store = ParamStore::new();
                let _ = Codec::init(&mut store, cfg.seed, codec_config(cfg))?;
                store.save(&ctx.ckpt_path("codec_rand"))?;
            }
            if !ctx.ckpt_path("planner_rand_ema").exists() {
                let t0 = Instant::now();
                let eps = cached_train_split(ctx, train_cache)?;
                let (codec, codec_store) = load_codec(ctx, "codec_rand", "ablate")?;
                run_planner_training(
                    ctx,
                    &codec,
                    &codec_store,
                    eps,
                    "planner_rand",
                    "planner_rand_ema",
                    "ablate_planner_rand_train.csv",
                )?;
                phases.push(("train_planner_rand".into(), t0.elapsed().as_secs_f64()));
            }
        }
        other => {
            paradigm_ckpts(other)?;
        }
    }
    Ok(())
}

fn cached_train_split<'a>(
    ctx: &Ctx,
    cache: &'a mut Option<Vec<Episode>>,
) -> Result<&'a [Episode]> {
    if cache.is_none() {
        *cache = Some(load_split_required(ctx, "train")?);
    }
    Ok(cache.as_ref().unwrap())
}

pub fn ablate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let paradigms: Vec<String> = cfg
        .ablate
        .paradigms
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let sampling_steps: Vec<usize> = parse_list(&cfg.ablate.sampling_steps, "usize")?;
    let control_steps: Vec<usize> = parse_list(&cfg.ablate.control_steps, "usize")?;
    let lambdas: Vec<f32> = parse_list(&cfg.ablate.lambdas, "f32")?;
    let config_hash = cfg.sha256();
    let mut phases: Vec<(String, f64)> = Vec::new();
    let mut train_cache: Option<Vec<Episode>> = None;

    for p in &paradigms {
        ensure_paradigm(ctx, p, &mut train_cache, &mut phases)?;
    }
    for l in &lambdas {
        let name = format!("joint_lambda{l}");
        if !ctx.ckpt_path(&name).exists() {
            let t0 = Instant::now();
            let eps = cached_train_split(ctx, &mut train_cache)?;
            run_joint_training(ctx, eps, *l, &name, &format!("ablate_{name}_train.csv"))?;
            phases.push((format!("train_{name}"), t0.elapsed().as_secs_f64()));
        }
    }

    // Paradigm grid: perturbation x seed, a small chain batch per cell.
    let header = {
        let mut h = vec!["paradigm".to_string()];
        h.extend(eval_header(cfg.exec.chain_len));
        h
    };
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut mean_lengths: BTreeMap<String, f64> = BTreeMap::new();
    for p in &paradigms {
        let t0 = Instant::now();
        let (c, pl, j) = paradigm_ckpts(p)?;
        let bundle = LearnedBundle::load(ctx, c, pl, j)?;
        let mut sum_len = 0.0;
        let mut cells = 0usize;
        for pk in ALL_PERTURBATIONS {
            for si in 0..cfg.ablate.eval_seeds {
                let seed_i = StreamRng::derive(cfg.seed, "ablate/eval", si as u64).next_u64();
                let mut ecfg = eval_config(cfg, pk);
                ecfg.n_chains = cfg.ablate.n_chains;
                ecfg.exec.n_plan_steps = cfg.ablate.n_steps;
                let s = evaluate(&bundle.agent(), &ecfg, seed_i)?;
                sum_len += s.avg_length;
                cells += 1;
                let mut row = vec![p.clone()];
                row.extend(eval_row(pk.name(), "learned", seed_i, &s, &config_hash));
                rows.push(row);
            }
        }
        let mean = sum_len / cells.max(1) as f64;
        mean_lengths.insert(p.clone(), mean);
        println!("ablate: paradigm {p} mean avg_length {mean:.4} over {cells} cells");
        phases.push((format!("eval_{p}"), t0.elapsed().as_secs_f64()));
    }
    write_csv(&ctx.report_path("ablate_paradigms.csv"), &header_refs, &rows)?;

    // Aggregate + direction flags mirroring the qualitative claims.
    let mut summary_rows: Vec<Vec<String>> = mean_lengths
        .iter()
        .map(|(p, m)| vec![p.clone(), fmt_float(*m), String::new()])
        .collect();
    let mut comparisons: Vec<(String, f64)> = Vec::new();
    if let (Some(full), Some(nosa)) = (mean_lengths.get("full"), mean_lengths.get("no_sa")) {
        comparisons.push(("full_minus_no_sa".into(), full - nosa));
    }
    if let (Some(full), Some(rand)) = (mean_lengths.get("full"), mean_lengths.get("random_codec"))
    {
        comparisons.push(("full_minus_random_codec".into(), full - rand));
    }
    for (name, delta) in &comparisons {
        let direction = if *delta >= 0.0 { "expected" } else { "inverted" };
        summary_rows.push(vec![name.clone(), fmt_float(*delta), direction.to_string()]);
        println!("ablate: {name} = {delta:+.4} ({direction})");
    }
    write_csv(
        &ctx.report_path("ablate_summary.csv"),
        &["row", "value", "direction"],
        &summary_rows,
    )?;

    // Lambda sweep rows (only when configured).
    if !lambdas.is_empty() {
        let mut lrows = Vec::new();
        for l in &lambdas {
            let name = format!("joint_lambda{l}");
            let bundle = LearnedBundle::load(ctx, "codec", "planner_ema", &name)?;
            for si in 0..cfg.ablate.eval_seeds {
                let seed_i = StreamRng::derive(cfg.seed, "ablate/eval", si as u64).next_u64();
                let mut ecfg = eval_config(cfg, PerturbKind::None);
                ecfg.n_chains = cfg.ablate.n_chains;
                ecfg.exec.n_plan_steps = cfg.ablate.n_steps;
                let s = evaluate(&bundle.agent(), &ecfg, seed_i)?;
                let mut row = vec![l.to_string()];
                row.extend(eval_row("none", "learned", seed_i, &s, &config_hash));
                lrows.push(row);
            }
        }
        let mut h = vec!["lambda".to_string()];
        h.extend(eval_header(cfg.exec.chain_len));
        let hr: Vec<&str> = h.iter().map(|s| s.as_str()).collect();
        write_csv(&ctx.report_path("ablate_lambdas.csv"), &hr, &lrows)?;
    }

    // Plan-quality/compute trade-off: same chains, varying Euler steps.
    if !sampling_steps.is_empty() || !control_steps.is_empty() {
        let bundle = LearnedBundle::load(ctx, "codec", "planner_ema", "joint")?;
        let sweep_seed = StreamRng::derive(cfg.seed, "ablate/sweep", 0).next_u64();
        if !sampling_steps.is_empty() {
            let t0 = Instant::now();
            let mut srows = Vec::new();
            for &n in &sampling_steps {
                let mut ecfg = eval_config(cfg, PerturbKind::None);
                ecfg.n_chains = cfg.ablate.n_chains;
                ecfg.exec.n_plan_steps = n;
                let s = evaluate(&bundle.agent(), &ecfg, sweep_seed)?;
                let mut row = vec![n.to_string()];
                row.extend(eval_row("none", "learned", sweep_seed, &s, &config_hash));
                srows.push(row);
            }
            let mut h = vec!["plan_steps".to_string()];
            h.extend(eval_header(cfg.exec.chain_len));
            let hr: Vec<&str> = h.iter().map(|s| s.as_str()).collect();
            write_csv(&ctx.report_path("ablate_sampling_steps.csv"), &hr, &srows)?;
            phases.push(("sweep_sampling_steps".into(), t0.elapsed().as_secs_f64()));
        }
        if !control_steps.is_empty() {
            let t0 = Instant::now();
            let mut crows = Vec::new();
            for &c in &control_steps {
                let mut ecfg = eval_config(cfg, PerturbKind::None);
                ecfg.n_chains = cfg.ablate.n_chains;
                ecfg.exec.n_plan_steps = cfg.ablate.n_steps;
                ecfg.exec.control_steps = c;
                let s = evaluate(&bundle.agent(), &ecfg, sweep_seed)?;
                let mut row = vec![c.to_string()];
                row.extend(eval_row("none", "learned", sweep_seed, &s, &config_hash));
                crows.push(row);
            }
            let mut h = vec!["control_steps".to_string()];
            h.extend(eval_header(cfg.exec.chain_len));
            let hr: Vec<&str> = h.iter().map(|s| s.as_str()).collect();
            write_csv(&ctx.report_path("ablate_control_steps.csv"), &hr, &crows)?;
            phases.push(("sweep_control_steps".into(), t0.elapsed().as_secs_f64()));
        }
    }

    let mut prov = ctx.provenance();
    for name in ["codec", "planner_ema", "joint"] {
        let path = ctx.ckpt_path(name);
        if path.exists() {
            prov.add_checkpoint(&format!("ckpt/{name}.bin"), &path)?;
        }
    }
    prov.save(&ctx.report_path("ablate.provenance.json"))?;
    write_timings(ctx, "ablate.csv", &phases)?;
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────────

/// Print to stdout, ignoring a closed pipe (e.g. `goalloop report | head`).
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn print_csv_table(path: &Path, title: &str) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let (header, rows) = read_csv(path)?;
    let refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    emit(&format!("## {title}"));
    emit(&render_table(&refs, &rows));
    Ok(true)
}

/// Compact view of a loss curve CSV: first, best, and final loss per
/// stage column (or overall when there is no stage column).
fn print_curve_summary(path: &Path, title: &str, value_col: &str) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let (header, rows) = read_csv(path)?;
    let stage_idx = header.iter().position(|h| h == "stage");
    let step_idx = header.iter().position(|h| h == "step").unwrap_or(0);
    let val_idx = header
        .iter()
        .position(|h| h == value_col)
        .unwrap_or(header.len() - 1);
    let mut groups: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for row in &rows {
        let key = stage_idx.map_or("all".to_string(), |i| row[i].clone());
        let step: usize = row[step_idx].parse().unwrap_or(0);
        let val: f64 = row[val_idx].parse().unwrap_or(f64::NAN);
        groups.entry(key).or_default().push((step, val));
    }
    emit(&format!("## {title}"));
    let mut out_rows = Vec::new();
    for (stage, pts) in &groups {
        let first = pts.first().copied().unwrap_or((0, f64::NAN));
        let last = pts.last().copied().unwrap_or((0, f64::NAN));
        let best = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        out_rows.push(vec![
            stage.clone(),
            first.0.to_string(),
            fmt_float(first.1),
            last.0.to_string(),
            fmt_float(last.1),
            fmt_float(best),
        ]);
    }
    emit(&render_table(
        &["stage", "first_step", "first", "last_step", "final", "best"],
        &out_rows,
    ));
    Ok(true)
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let dir = ctx.out.join("reports");
    if !dir.exists() {
        return Err(CoreError::MissingPrerequisite(format!(
            "no reports under {}; run a training or eval stage first",
            dir.display()
        )));
    }
    let mut printed = false;
    printed |= print_curve_summary(&ctx.report_path("codec_train.csv"), "codec training", "loss")?;
    printed |= print_csv_table(&ctx.report_path("codec_eval.csv"), "codec reconstruction (PSNR, dB)")?;
    printed |= print_curve_summary(&ctx.report_path("planner_train.csv"), "planner training", "loss")?;
    printed |= print_csv_table(
        &ctx.report_path("planner_eval.csv"),
        "video planning vs copy-last baseline (PSNR/SSIM)",
    )?;
    printed |= print_curve_summary(&ctx.report_path("joint_train.csv"), "joint policy training", "total")?;

    // Every closed-loop eval row accumulated so far, one table.
    let mut eval_files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| CoreError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".csv"))
        })
        .collect();
    eval_files.sort();
    let mut merged: Vec<Vec<String>> = Vec::new();
    let mut merged_header: Option<Vec<String>> = None;
    for f in &eval_files {
        let (h, rows) = read_csv(f)?;
        if merged_header.get_or_insert_with(|| h.clone()) == &h {
            merged.extend(rows);
        }
    }
    if let Some(h) = merged_header {
        let refs: Vec<&str> = h.iter().map(|s| s.as_str()).collect();
        emit("## closed-loop evaluation");
        emit(&render_table(&refs, &merged));
        printed = true;
    }

    printed |= print_csv_table(&ctx.report_path("ablate_summary.csv"), "ablation summary")?;
    printed |= print_csv_table(&ctx.report_path("ablate_paradigms.csv"), "ablation grid")?;
    printed |= print_csv_table(&ctx.report_path("ablate_lambdas.csv"), "alignment-weight sweep")?;
    printed |= print_csv_table(
        &ctx.report_path("ablate_sampling_steps.csv"),
        "plan-steps sweep",
    )?;
    printed |= print_csv_table(
        &ctx.report_path("ablate_control_steps.csv"),
        "control-steps sweep",
    )?;
    if !printed {
        emit("(no report files yet; run train/eval stages)");
    }
    Ok(())
}
