//! Closed-loop execution: plan goal images, track them with the diffusion
//! policy, and score chained tasks.
//!
//! The executor keeps a short history of (possibly perturbed) observations,
//! refreshes the goal plan every `l_test` environment steps, and feeds the
//! policy the embedding of the current observation plus the embedding of
//! the goal frame for the current step offset. Observation perturbations
//! draw from their own derived streams, so policies that ignore pixels
//! (the scripted oracle, the random baseline) produce bit-identical
//! results under every perturbation kind.

use std::collections::VecDeque;
use std::time::Instant;

use crate::align::{embed_source, embed_target, AlignModel};
use crate::checkpoint::ParamStore;
use crate::codec::Codec;
use crate::error::Result;
use crate::perturb::{apply, PerturbKind};
use crate::planner::{sample_plan, Planner};
use crate::policy::{sample_action, NoiseSchedule, PolicyNet};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::world::{
    render, sample_initial, scripted_expert, step, success, Action, Instruction, WorldState,
    DELTA_MAX, VOCAB,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Learned,
    Random,
    Expert,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Result<PolicyKind> {
        match s {
            "learned" => Ok(PolicyKind::Learned),
            "random" => Ok(PolicyKind::Random),
            "expert" => Ok(PolicyKind::Expert),
            other => Err(crate::error::CoreError::Config(format!(
                "unknown policy kind `{other}` (expected learned|random|expert)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Learned => "learned",
            PolicyKind::Random => "random",
            PolicyKind::Expert => "expert",
        }
    }
}

/// Everything a learned agent needs at test time. The planner parameters
/// are expected to be the EMA weights.
pub struct LearnedAgent<'a> {
    pub codec: &'a Codec,
    pub codec_params: &'a ParamStore,
    pub planner: &'a Planner,
    pub planner_params: &'a ParamStore,
    pub align: &'a AlignModel,
    pub policy: &'a PolicyNet,
    pub joint_params: &'a ParamStore,
    pub schedule: &'a NoiseSchedule,
}

pub enum Agent<'a> {
    Learned(LearnedAgent<'a>),
    Random,
    Expert,
}

impl Agent<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Agent::Learned(_) => PolicyKind::Learned,
            Agent::Random => PolicyKind::Random,
            Agent::Expert => PolicyKind::Expert,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExecConfig {
    /// Steps between goal refreshes; must not exceed the number of goal
    /// frames the planner produces.
    pub l_test: usize,
    /// Euler steps for each plan.
    pub n_plan_steps: usize,
    /// Environment-step budget per task.
    pub task_budget: usize,
    /// Consecutive steps each sampled action is applied for.
    pub control_steps: usize,
    pub perturb: PerturbKind,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            l_test: 12,
            n_plan_steps: 50,
            task_budget: 40,
            control_steps: 1,
            perturb: PerturbKind::None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskResult {
    pub success: bool,
    pub steps_used: usize,
    /// Environment steps at which a fresh plan was drawn (for cadence
    /// checks).
    pub replan_steps: Vec<usize>,
}

/// Run one task to success or budget exhaustion. `seed` scopes every
/// stream this task consumes (perturbations, planning noise, action
/// noise); the world itself is deterministic.
pub fn execute_task(
    agent: &Agent,
    cfg: &ExecConfig,
    state0: &WorldState,
    instr: Instruction,
    frame: usize,
    seed: u64,
) -> Result<(TaskResult, WorldState)> {
    let mut state = state0.clone();
    if success(&state, instr) {
        return Ok((
            TaskResult {
                success: true,
                steps_used: 0,
                replan_steps: Vec::new(),
            },
            state,
        ));
    }

    let learned = match agent {
        Agent::Learned(l) => {
            assert!(
                cfg.l_test <= l.planner.cfg.horizon - l.planner.cfg.n_cond,
                "goal refresh interval exceeds planned future frames"
            );
            Some(l)
        }
        _ => None,
    };
    let frame_len = 3 * frame * frame;
    let n_cond = learned.map(|l| l.planner.cfg.n_cond).unwrap_or(1);

    // History starts filled with the initial observation.
    let obs0 = observe(&state, frame, cfg.perturb, seed, 0);
    let mut history: VecDeque<Vec<f32>> = (0..n_cond).map(|_| obs0.clone()).collect();

    let mut goal_embeds: Option<Tensor> = None; // [M, d]
    let mut replan_steps = Vec::new();
    let mut env_step = 0usize; // completed environment steps
    let mut since_plan = 0usize;

    while env_step < cfg.task_budget {
        // Refresh the plan on the cadence (always at the first step).
        if let Some(l) = learned {
            if goal_embeds.is_none() || since_plan >= cfg.l_test {
                let mut hist_flat = Vec::with_capacity(n_cond * frame_len);
                for h in &history {
                    hist_flat.extend_from_slice(h);
                }
                let plan = sample_plan(
                    l.planner,
                    l.planner_params,
                    l.codec,
                    l.codec_params,
                    &hist_flat,
                    instr.0,
                    cfg.n_plan_steps,
                    StreamRng::derive(seed, "exec/plan", env_step as u64).next_u64(),
                )?;
                let m = l.planner.cfg.horizon - n_cond;
                let goals = Tensor::new(
                    vec![m, 3, frame, frame],
                    plan.data()[n_cond * frame_len..].to_vec(),
                )?;
                goal_embeds = Some(embed_source(l.align, l.joint_params, goals)?);
                since_plan = 0;
                replan_steps.push(env_step);
            }
        }

        // Choose an action.
        let action = match agent {
            Agent::Expert => scripted_expert(&state, instr)?,
            Agent::Random => {
                let mut rng = StreamRng::derive(seed, "exec/random", env_step as u64);
                Action {
                    dx: rng.uniform_in(-DELTA_MAX, DELTA_MAX),
                    dy: rng.uniform_in(-DELTA_MAX, DELTA_MAX),
                    grip: if rng.uniform() < 0.5 { 1.0 } else { -1.0 },
                }
            }
            Agent::Learned(l) => {
                let obs = history.back().expect("history nonempty").clone();
                let z_obs = embed_target(
                    l.align,
                    l.joint_params,
                    Tensor::new(vec![1, 3, frame, frame], obs)?,
                )?;
                let embeds = goal_embeds.as_ref().expect("plan exists");
                let m = embeds.shape()[0];
                let d = embeds.shape()[1];
                // 1-indexed offset into the goal sequence, saturating.
                let l_off = (since_plan + 1).min(m);
                let z_goal = Tensor::new(
                    vec![1, d],
                    embeds.data()[(l_off - 1) * d..l_off * d].to_vec(),
                )?;
                let mut rng = StreamRng::derive(seed, "exec/action", env_step as u64);
                sample_action(l.policy, l.joint_params, l.schedule, &z_obs, &z_goal, &mut rng)?
            }
        };

        // Apply it for `control_steps` environment steps.
        for _ in 0..cfg.control_steps {
            state = step(&state, &action);
            env_step += 1;
            since_plan += 1;
            if success(&state, instr) {
                return Ok((
                    TaskResult {
                        success: true,
                        steps_used: env_step,
                        replan_steps,
                    },
                    state,
                ));
            }
            if env_step >= cfg.task_budget {
                break;
            }
        }

        // Observe for the next decision.
        let obs = observe(&state, frame, cfg.perturb, seed, env_step as u64);
        history.pop_front();
        history.push_back(obs);
    }

    Ok((
        TaskResult {
            success: false,
            steps_used: env_step,
            replan_steps,
        },
        state,
    ))
}

/// Render then perturb with a stream derived for this observation alone.
fn observe(state: &WorldState, frame: usize, kind: PerturbKind, seed: u64, idx: u64) -> Vec<f32> {
    let px = render(state, frame);
    let mut rng = StreamRng::derive(seed, "exec/perturb", idx);
    apply(&px, frame, kind, &mut rng)
}

// ── chains ──────────────────────────────────────────────────────────────

/// Draw `len` distinct instruction ids.
pub fn sample_chain(rng: &mut StreamRng, len: usize) -> Vec<Instruction> {
    assert!(len <= VOCAB);
    let mut ids: Vec<usize> = Vec::with_capacity(len);
    while ids.len() < len {
        let id = rng.below(VOCAB);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    ids.into_iter().map(Instruction).collect()
}

#[derive(Clone, Debug)]
pub struct ChainResult {
    /// Success flags per position; false after the first failure.
    pub per_task: Vec<bool>,
    pub steps_per_task: Vec<usize>,
    pub total_steps: usize,
}

/// Execute a chain of tasks on one evolving world; abort at the first
/// failure so successes form a prefix.
pub fn execute_chain(
    agent: &Agent,
    cfg: &ExecConfig,
    chain: &[Instruction],
    palette: usize,
    frame: usize,
    time_limit: usize,
    seed: u64,
) -> Result<ChainResult> {
    let mut init_rng = StreamRng::derive(seed, "chain/init", 0);
    let mut state = sample_initial(&mut init_rng, chain[0], palette);
    let mut per_task = Vec::with_capacity(chain.len());
    let mut steps_per_task = Vec::with_capacity(chain.len());
    let mut total = 0usize;
    for (i, &instr) in chain.iter().enumerate() {
        let budget = cfg.task_budget.min(time_limit.saturating_sub(total));
        if budget == 0 {
            per_task.push(false);
            steps_per_task.push(0);
            continue;
        }
        let task_cfg = ExecConfig {
            task_budget: budget,
            ..*cfg
        };
        let task_seed = StreamRng::derive(seed, "chain/task", i as u64).next_u64();
        let (result, next_state) =
            execute_task(agent, &task_cfg, &state, instr, frame, task_seed)?;
        state = next_state;
        total += result.steps_used;
        steps_per_task.push(result.steps_used);
        if result.success {
            per_task.push(true);
        } else {
            per_task.push(false);
            // Remaining tasks are unreachable once one fails.
            for _ in i + 1..chain.len() {
                per_task.push(false);
                steps_per_task.push(0);
            }
            break;
        }
    }
    Ok(ChainResult {
        per_task,
        steps_per_task,
        total_steps: total,
    })
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub n_chains: usize,
    pub chain_len: usize,
    pub palette: usize,
    pub frame: usize,
    pub time_limit: usize,
    pub exec: ExecConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_chains: 25,
            chain_len: 5,
            palette: crate::world::HELDOUT_PALETTE,
            frame: 32,
            time_limit: 200,
            exec: ExecConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    /// `sr[k]` is the fraction of chains whose first k+1 tasks all
    /// succeeded.
    pub sr: Vec<f64>,
    /// Sum of the success rates: expected completed prefix length.
    pub avg_length: f64,
    pub n_chains: usize,
    pub mean_steps: f64,
    pub wall_seconds: f64,
}

/// Evaluate an agent over freshly sampled chains.
pub fn evaluate(agent: &Agent, cfg: &EvalConfig, seed: u64) -> Result<EvalSummary> {
    let start = Instant::now();
    let mut succ_counts = vec![0usize; cfg.chain_len];
    let mut steps_sum = 0usize;
    for c in 0..cfg.n_chains {
        let mut rng = StreamRng::derive(seed, "eval/chain", c as u64);
        let chain = sample_chain(&mut rng, cfg.chain_len);
        let chain_seed = rng.next_u64();
        let result = execute_chain(
            agent,
            &cfg.exec,
            &chain,
            cfg.palette,
            cfg.frame,
            cfg.time_limit,
            chain_seed,
        )?;
        let mut prefix = true;
        for k in 0..cfg.chain_len {
            prefix = prefix && result.per_task.get(k).copied().unwrap_or(false);
            if prefix {
                succ_counts[k] += 1;
            }
        }
        steps_sum += result.total_steps;
    }
    let sr: Vec<f64> = succ_counts
        .iter()
        .map(|&c| c as f64 / cfg.n_chains as f64)
        .collect();
    let avg_length = sr.iter().sum();
    Ok(EvalSummary {
        sr,
        avg_length,
        n_chains: cfg.n_chains,
        mean_steps: steps_sum as f64 / cfg.n_chains as f64,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::ALL_PERTURBATIONS;

    fn fresh_state(seed: u64, instr: Instruction) -> WorldState {
        let mut rng = StreamRng::derive(seed, "t/init", 0);
        sample_initial(&mut rng, instr, 0)
    }

    #[test]
    fn expert_agent_completes_tasks() {
        let cfg = ExecConfig::default();
        for seed in 0..5 {
            let instr = Instruction((seed % VOCAB as u64) as usize);
            let s0 = fresh_state(seed, instr);
            let (r, _) = execute_task(&Agent::Expert, &cfg, &s0, instr, 32, seed).unwrap();
            assert!(r.success, "expert failed task with seed {seed}");
            assert!(r.steps_used <= cfg.task_budget);
        }
    }

    #[test]
    fn state_oracle_results_are_perturbation_invariant() {
        // Perturbations touch only observation pixels; a policy that reads
        // the true state must see identical outcomes under every kind.
        let instr = Instruction(3);
        let s0 = fresh_state(9, instr);
        let base = {
            let cfg = ExecConfig::default();
            execute_task(&Agent::Expert, &cfg, &s0, instr, 32, 77).unwrap().0
        };
        for &kind in &ALL_PERTURBATIONS {
            let cfg = ExecConfig {
                perturb: kind,
                ..ExecConfig::default()
            };
            let (r, _) = execute_task(&Agent::Expert, &cfg, &s0, instr, 32, 77).unwrap();
            assert_eq!(r.success, base.success, "{kind:?} changed outcome");
            assert_eq!(r.steps_used, base.steps_used, "{kind:?} changed step count");
        }
    }

    #[test]
    fn random_agent_rarely_succeeds_from_fresh_starts() {
        let cfg = ExecConfig::default();
        let mut successes = 0;
        for seed in 0..40 {
            let instr = Instruction((seed % VOCAB as u64) as usize);
            let s0 = fresh_state(1000 + seed, instr);
            let (r, _) = execute_task(&Agent::Random, &cfg, &s0, instr, 32, seed).unwrap();
            successes += r.success as usize;
        }
        assert!(successes <= 4, "random policy succeeded {successes}/40 times");
    }

    #[test]
    fn chain_successes_form_a_prefix() {
        let cfg = ExecConfig::default();
        for seed in 0..6 {
            let mut rng = StreamRng::derive(seed, "c", 0);
            let chain = sample_chain(&mut rng, 5);
            let r = execute_chain(&Agent::Random, &cfg, &chain, 0, 32, 200, seed).unwrap();
            assert_eq!(r.per_task.len(), 5);
            let mut seen_false = false;
            for &ok in &r.per_task {
                if seen_false {
                    assert!(!ok, "success after failure breaks the prefix rule");
                }
                seen_false |= !ok;
            }
        }
    }

    #[test]
    fn expert_chains_score_high_and_sr_is_monotone() {
        let cfg = EvalConfig {
            n_chains: 6,
            ..EvalConfig::default()
        };
        let summary = evaluate(&Agent::Expert, &cfg, 5).unwrap();
        for k in 1..summary.sr.len() {
            assert!(summary.sr[k] <= summary.sr[k - 1] + 1e-12, "sr not monotone");
        }
        assert!(summary.sr[0] > 0.8, "expert sr1 {}", summary.sr[0]);
        assert!(summary.avg_length >= summary.sr[0]);
        assert!((summary.avg_length - summary.sr.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn distinct_instructions_in_sampled_chains() {
        for seed in 0..20 {
            let mut rng = StreamRng::derive(seed, "c", 0);
            let chain = sample_chain(&mut rng, 5);
            for i in 0..chain.len() {
                for j in i + 1..chain.len() {
                    assert_ne!(chain[i].0, chain[j].0, "duplicate instruction in chain");
                }
            }
        }
    }

    #[test]
    fn goal_refresh_cadence_is_exact() {
        // Replans must land at env steps 0, l_test, 2*l_test, ... even when
        // the budget is not a multiple of the interval.
        use crate::align::{AlignConfig, AlignModel};
        use crate::codec::{Codec, CodecConfig};
        use crate::planner::{Planner, PlannerConfig};
        use crate::policy::{cosine_schedule, PolicyConfig, PolicyNet};

        let mut cstore = ParamStore::new();
        let ccfg = CodecConfig::default();
        let codec = Codec::init(&mut cstore, 1, ccfg).unwrap();
        let mut pstore = ParamStore::new();
        let planner = Planner::init(
            &mut pstore,
            2,
            PlannerConfig {
                n_layers: 1,
                width: 32,
                heads: 2,
                ..PlannerConfig::default()
            },
            &ccfg,
        )
        .unwrap();
        let mut jstore = ParamStore::new();
        let align = AlignModel::init(&mut jstore, 3, AlignConfig::default(), 32);
        let policy = PolicyNet::init(&mut jstore, 4, PolicyConfig::default());
        let schedule = cosine_schedule(policy.cfg.k_steps);
        let agent = Agent::Learned(LearnedAgent {
            codec: &codec,
            codec_params: &cstore,
            planner: &planner,
            planner_params: &pstore,
            align: &align,
            policy: &policy,
            joint_params: &jstore,
            schedule: &schedule,
        });
        let cfg = ExecConfig {
            l_test: 12,
            n_plan_steps: 2,
            task_budget: 26,
            ..ExecConfig::default()
        };
        let instr = Instruction(5);
        let s0 = fresh_state(21, instr);
        let (r, _) = execute_task(&agent, &cfg, &s0, instr, 32, 13).unwrap();
        assert!(!r.success, "untrained agent should not finish");
        assert_eq!(r.replan_steps, vec![0, 12, 24], "replan cadence drifted");
    }

    #[test]
    fn already_satisfied_task_returns_instant_success() {
        let instr = Instruction(0); // push block 0 left
        let mut rng = StreamRng::derive(3, "t", 0);
        let mut s = sample_initial(&mut rng, instr, 0);
        s.blocks[0].0 = 0.05; // already at the left edge
        let (r, _) =
            execute_task(&Agent::Expert, &ExecConfig::default(), &s, instr, 32, 0).unwrap();
        assert!(r.success);
        assert_eq!(r.steps_used, 0);
    }
}
