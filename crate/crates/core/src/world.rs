//! Deterministic 2D tabletop simulator.
//!
//! Four colored blocks and a white gripper live on the unit square and are
//! rendered to small RGB frames. A scripted grab-and-drag expert solves a
//! 16-instruction vocabulary (4 templates x 4 block colors). Success
//! predicates are decided from [`WorldState`] alone, never from pixels.

use crate::error::CoreError;
use crate::rng::StreamRng;

pub const N_BLOCKS: usize = 4;
pub const N_TEMPLATES: usize = 4;
pub const VOCAB: usize = N_TEMPLATES * N_BLOCKS;
pub const ACTION_DIM: usize = 3;
/// Per-axis displacement cap, world units per step.
pub const DELTA_MAX: f32 = 0.08;
/// Grasp succeeds when the gripper is within this distance of a block center.
pub const GRASP_RADIUS: f32 = 0.06;
/// Step budget per instruction.
pub const T_MAX: usize = 40;
/// Number of table/block palettes; the last one is held out of training.
pub const N_PALETTES: usize = 4;
pub const HELDOUT_PALETTE: usize = N_PALETTES - 1;

/// Per-slot block colors for each palette: same four hue families
/// (red/green/blue/yellow slots) in palette-specific shades.
const PALETTES: [[[f32; 3]; N_BLOCKS]; N_PALETTES] = [
    [
        [0.90, 0.20, 0.20],
        [0.20, 0.85, 0.20],
        [0.20, 0.30, 0.95],
        [0.90, 0.85, 0.20],
    ],
    [
        [0.75, 0.10, 0.15],
        [0.10, 0.70, 0.25],
        [0.10, 0.20, 0.80],
        [0.80, 0.75, 0.10],
    ],
    [
        [0.85, 0.30, 0.10],
        [0.30, 0.90, 0.10],
        [0.25, 0.40, 0.85],
        [0.95, 0.80, 0.30],
    ],
    [
        [1.00, 0.15, 0.25],
        [0.15, 1.00, 0.30],
        [0.30, 0.20, 1.00],
        [1.00, 0.90, 0.15],
    ],
];

const BACKGROUNDS: [[f32; 3]; N_PALETTES] = [
    [0.08, 0.08, 0.10],
    [0.10, 0.09, 0.07],
    [0.07, 0.10, 0.09],
    [0.11, 0.07, 0.11],
];

const COLOR_NAMES: [&str; N_BLOCKS] = ["red", "green", "blue", "yellow"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    PushLeft,
    PushRight,
    Pick,
    PlaceCenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instruction(pub usize);

impl Instruction {
    pub fn new(id: usize) -> Result<Instruction, CoreError> {
        if id >= VOCAB {
            return Err(CoreError::Config(format!(
                "instruction id {id} out of range (vocab {VOCAB})"
            )));
        }
        Ok(Instruction(id))
    }

    pub fn template(self) -> Template {
        match self.0 / N_BLOCKS {
            0 => Template::PushLeft,
            1 => Template::PushRight,
            2 => Template::Pick,
            _ => Template::PlaceCenter,
        }
    }

    pub fn block(self) -> usize {
        self.0 % N_BLOCKS
    }

    pub fn text(self) -> String {
        let color = COLOR_NAMES[self.block()];
        match self.template() {
            Template::PushLeft => format!("push the {color} block to the left edge"),
            Template::PushRight => format!("push the {color} block to the right edge"),
            Template::Pick => format!("pick up the {color} block"),
            Template::PlaceCenter => format!("place the {color} block at the center"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub dx: f32,
    pub dy: f32,
    /// Gripper command; > 0 closes, <= 0 opens.
    pub grip: f32,
}

impl Action {
    pub const ZERO_OPEN: Action = Action {
        dx: 0.0,
        dy: 0.0,
        grip: -1.0,
    };

    pub fn to_vec3(self) -> [f32; 3] {
        [self.dx, self.dy, self.grip]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub gripper: (f32, f32),
    pub closed: bool,
    pub held: Option<usize>,
    pub blocks: Vec<(f32, f32)>,
    pub palette: usize,
}

fn dist(a: (f32, f32), b: (f32, f32)) -> f32 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// One deterministic physics step. Order: release (open gripper drops the
/// held block in place), move, carry, then grasp attempt.
pub fn step(state: &WorldState, action: &Action) -> WorldState {
    let mut next = state.clone();
    let dx = action.dx.clamp(-DELTA_MAX, DELTA_MAX);
    let dy = action.dy.clamp(-DELTA_MAX, DELTA_MAX);
    let close = action.grip > 0.0;

    if !close {
        next.held = None;
    }
    next.closed = close;
    next.gripper = (clamp01(state.gripper.0 + dx), clamp01(state.gripper.1 + dy));
    if let Some(i) = next.held {
        next.blocks[i] = next.gripper;
    } else if close {
        // Grasp the nearest block within reach, if any.
        let mut best: Option<(usize, f32)> = None;
        for (i, &b) in next.blocks.iter().enumerate() {
            let d = dist(next.gripper, b);
            if d <= GRASP_RADIUS && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            next.held = Some(i);
            next.blocks[i] = next.gripper;
        }
    }
    next
}

/// Success predicate, decided from state alone.
pub fn success(state: &WorldState, instr: Instruction) -> bool {
    let b = state.blocks[instr.block()];
    match instr.template() {
        Template::PushLeft => b.0 <= 0.15,
        Template::PushRight => b.0 >= 0.85,
        Template::Pick => state.held == Some(instr.block()),
        Template::PlaceCenter => {
            state.held != Some(instr.block()) && dist(b, (0.5, 0.5)) <= 0.07
        }
    }
}

// ── rendering ───────────────────────────────────────────────────────────

fn fill_rect(frame: &mut [f32], size: usize, cx: i64, cy: i64, half: i64, color: [f32; 3]) {
    let plane = size * size;
    for y in (cy - half).max(0)..=(cy + half).min(size as i64 - 1) {
        for x in (cx - half).max(0)..=(cx + half).min(size as i64 - 1) {
            let idx = y as usize * size + x as usize;
            for (c, &v) in color.iter().enumerate() {
                frame[c * plane + idx] = v;
            }
        }
    }
}

fn ring_rect(frame: &mut [f32], size: usize, cx: i64, cy: i64, half: i64, color: [f32; 3]) {
    let plane = size * size;
    for y in (cy - half).max(0)..=(cy + half).min(size as i64 - 1) {
        for x in (cx - half).max(0)..=(cx + half).min(size as i64 - 1) {
            if (y - cy).abs() != half && (x - cx).abs() != half {
                continue;
            }
            let idx = y as usize * size + x as usize;
            for (c, &v) in color.iter().enumerate() {
                frame[c * plane + idx] = v;
            }
        }
    }
}

fn to_px(v: f32, size: usize) -> i64 {
    (v * (size - 1) as f32).round() as i64
}

/// Render to a `[3, size, size]` row-major RGB frame in `[0, 1]`.
/// Blocks draw in slot order, the gripper last (open = ring, closed =
/// filled) so a held block shows through the open ring while carried.
pub fn render(state: &WorldState, size: usize) -> Vec<f32> {
    let mut frame = vec![0.0f32; 3 * size * size];
    let bg = BACKGROUNDS[state.palette];
    let plane = size * size;
    for c in 0..3 {
        frame[c * plane..(c + 1) * plane].fill(bg[c]);
    }
    for (i, &b) in state.blocks.iter().enumerate() {
        let color = PALETTES[state.palette][i];
        fill_rect(&mut frame, size, to_px(b.0, size), to_px(b.1, size), 2, color);
    }
    let (gx, gy) = (to_px(state.gripper.0, size), to_px(state.gripper.1, size));
    let white = [1.0, 1.0, 1.0];
    if state.closed {
        fill_rect(&mut frame, size, gx, gy, 1, white);
    } else {
        ring_rect(&mut frame, size, gx, gy, 2, white);
    }
    frame
}

// ── initial-state sampling ──────────────────────────────────────────────

/// Sample a start state in which `instr` is not already satisfied and has
/// room to be demonstrated (target block away from its goal region).
pub fn sample_initial(rng: &mut StreamRng, instr: Instruction, palette: usize) -> WorldState {
    assert!(palette < N_PALETTES, "palette out of range");
    let tgt = instr.block();
    loop {
        let mut blocks = Vec::with_capacity(N_BLOCKS);
        let mut ok = true;
        for i in 0..N_BLOCKS {
            let mut placed = false;
            for _ in 0..200 {
                let p = (rng.uniform_in(0.12, 0.88), rng.uniform_in(0.12, 0.88));
                if blocks.iter().any(|&q| dist(p, q) < 0.18) {
                    continue;
                }
                if i == tgt {
                    let far_enough = match instr.template() {
                        Template::PushLeft => p.0 >= 0.35,
                        Template::PushRight => p.0 <= 0.65,
                        Template::Pick => true, // gripper constraint below
                        Template::PlaceCenter => dist(p, (0.5, 0.5)) >= 0.25,
                    };
                    if !far_enough {
                        continue;
                    }
                }
                blocks.push(p);
                placed = true;
                break;
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let mut gripper = (rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9));
        if instr.template() == Template::Pick {
            for _ in 0..200 {
                if dist(gripper, blocks[tgt]) >= 0.4 {
                    break;
                }
                gripper = (rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9));
            }
            if dist(gripper, blocks[tgt]) < 0.4 {
                continue;
            }
        }
        // Keep the gripper from starting on top of any block (avoids
        // accidental instant grasps and trivially satisfied predicates).
        if blocks.iter().any(|&b| dist(gripper, b) < GRASP_RADIUS * 1.5) {
            continue;
        }
        let state = WorldState {
            gripper,
            closed: false,
            held: None,
            blocks,
            palette,
        };
        if !success(&state, instr) {
            return state;
        }
    }
}

// ── scripted expert ─────────────────────────────────────────────────────

fn toward(from: (f32, f32), to: (f32, f32)) -> (f32, f32) {
    (
        (to.0 - from.0).clamp(-DELTA_MAX, DELTA_MAX),
        (to.1 - from.1).clamp(-DELTA_MAX, DELTA_MAX),
    )
}

/// Greedy controller: approach the target block, grasp, drag it to the
/// instruction's goal region, release (except `Pick`, which holds on).
/// Reaches success from any sampled start well inside [`T_MAX`] steps.
pub fn scripted_expert(state: &WorldState, instr: Instruction) -> Result<Action, CoreError> {
    if instr.0 >= VOCAB || instr.block() >= state.blocks.len() {
        return Err(CoreError::Config(format!(
            "instruction {} unsolvable: no block {}",
            instr.0,
            instr.block()
        )));
    }
    let tgt = instr.block();
    if success(state, instr) {
        // Hold: keep the grip that sustains the predicate, do not move.
        let grip = if instr.template() == Template::Pick { 1.0 } else { -1.0 };
        return Ok(Action { dx: 0.0, dy: 0.0, grip });
    }
    if state.held == Some(tgt) {
        let goal = match instr.template() {
            Template::PushLeft => (0.10, state.gripper.1),
            Template::PushRight => (0.90, state.gripper.1),
            Template::Pick => state.gripper, // already successful, unreachable
            Template::PlaceCenter => (0.5, 0.5),
        };
        // An open-gripper step drops the block where it currently sits,
        // before any movement — so release as soon as the carried block is
        // safely inside the goal region (margins absorb action noise).
        let inside = match instr.template() {
            Template::PushLeft => state.gripper.0 <= 0.13,
            Template::PushRight => state.gripper.0 >= 0.87,
            _ => dist(state.gripper, goal) <= 0.03,
        };
        if inside {
            return Ok(Action { dx: 0.0, dy: 0.0, grip: -1.0 });
        }
        let (dx, dy) = toward(state.gripper, goal);
        return Ok(Action { dx, dy, grip: 1.0 });
    }
    if state.held.is_some() {
        // Holding the wrong block: drop it before anything else.
        return Ok(Action { dx: 0.0, dy: 0.0, grip: -1.0 });
    }
    let (dx, dy) = toward(state.gripper, state.blocks[tgt]);
    let after = (state.gripper.0 + dx, state.gripper.1 + dy);
    let will_reach = dist(after, state.blocks[tgt]) <= GRASP_RADIUS * 0.8;
    Ok(Action {
        dx,
        dy,
        grip: if will_reach { 1.0 } else { -1.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_state() -> WorldState {
        WorldState {
            gripper: (0.5, 0.5),
            closed: false,
            held: None,
            blocks: vec![(0.2, 0.2), (0.8, 0.2), (0.2, 0.8), (0.8, 0.8)],
            palette: 0,
        }
    }

    #[test]
    fn zero_action_keeps_state() {
        let s = fixed_state();
        let s2 = step(&s, &Action::ZERO_OPEN);
        assert_eq!(s, s2);
    }

    #[test]
    fn boundary_clamps_position() {
        let mut s = fixed_state();
        s.gripper = (0.99, 0.01);
        let s2 = step(
            &s,
            &Action { dx: 1.0, dy: -1.0, grip: -1.0 },
        );
        assert_eq!(s2.gripper, (1.0, 0.0));
    }

    #[test]
    fn grasp_requires_radius() {
        // Geometry oracle: gripper ends 0.10 from the block — beyond
        // GRASP_RADIUS=0.06, so the grasp must fail; at 0.05 it succeeds.
        let mut s = fixed_state();
        s.gripper = (0.30, 0.20);
        let far = step(&s, &Action { dx: 0.0, dy: 0.0, grip: 1.0 });
        assert_eq!(far.held, None, "0.10 away must not grasp");
        s.gripper = (0.25, 0.20);
        let near = step(&s, &Action { dx: 0.0, dy: 0.0, grip: 1.0 });
        assert_eq!(near.held, Some(0), "0.05 away must grasp");
        assert_eq!(near.blocks[0], near.gripper);
    }

    #[test]
    fn held_block_follows_and_drops_in_place() {
        let mut s = fixed_state();
        s.gripper = (0.2, 0.2);
        let s = step(&s, &Action { dx: 0.0, dy: 0.0, grip: 1.0 });
        assert_eq!(s.held, Some(0));
        let s = step(&s, &Action { dx: 0.08, dy: 0.0, grip: 1.0 });
        assert_eq!(s.blocks[0], s.gripper);
        let dropped_at = s.blocks[0];
        let s = step(&s, &Action { dx: 0.08, dy: 0.0, grip: -1.0 });
        assert_eq!(s.held, None);
        assert_eq!(s.blocks[0], dropped_at, "release drops before the move");
        assert!((s.gripper.0 - (dropped_at.0 + 0.08)).abs() < 1e-6);
    }

    #[test]
    fn render_empty_table_is_uniform_background() {
        // No blocks, gripper parked off-canvas: every pixel is background.
        let s = WorldState {
            gripper: (2.0, 2.0),
            closed: false,
            held: None,
            blocks: vec![],
            palette: 0,
        };
        let size = 32;
        let f = render(&s, size);
        let bg = [0.08, 0.08, 0.10];
        let plane = size * size;
        for c in 0..3 {
            assert!(f[c * plane..(c + 1) * plane].iter().all(|&v| v == bg[c]));
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = fixed_state();
        assert_eq!(render(&s, 32), render(&s, 32));
    }

    #[test]
    fn rasterization_centers_object() {
        // Block at (0.5, 0.5) on a 32px frame: colored pixels centered at
        // pixel (16, 16) within +-1 px.
        let mut s = fixed_state();
        s.blocks[2] = (0.5, 0.5);
        s.gripper = (0.05, 0.05);
        let size = 32;
        let f = render(&s, size);
        let color = PALETTES[0][2];
        let plane = size * size;
        let (mut sx, mut sy, mut n) = (0f64, 0f64, 0f64);
        for y in 0..size {
            for x in 0..size {
                let idx = y * size + x;
                if (0..3).all(|c| f[c * plane + idx] == color[c]) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        assert!(n >= 24.0, "block pixels missing: {n}");
        assert!((sx / n - 16.0).abs() <= 1.0);
        assert!((sy / n - 16.0).abs() <= 1.0);
    }

    #[test]
    fn expert_respects_delta_cap() {
        let mut rng = StreamRng::derive(0, "expert_cap", 0);
        for trial in 0..50 {
            let instr = Instruction(trial % VOCAB);
            let mut s = sample_initial(
                &mut StreamRng::derive(1, "state", trial as u64),
                instr,
                trial % N_PALETTES,
            );
            for _ in 0..T_MAX {
                let a = scripted_expert(&s, instr).unwrap();
                assert!(a.dx.abs() <= DELTA_MAX + 1e-6 && a.dy.abs() <= DELTA_MAX + 1e-6);
                let noisy = Action {
                    dx: a.dx + 0.01 * rng.normal(),
                    dy: a.dy + 0.01 * rng.normal(),
                    grip: a.grip,
                };
                s = step(&s, &noisy);
            }
        }
    }

    #[test]
    fn expert_solves_1000_random_rollouts() {
        let mut ok = 0;
        let n = 1000;
        for trial in 0..n {
            let mut rng = StreamRng::derive(42, "rollout", trial as u64);
            let instr = Instruction(rng.int_in(0, VOCAB - 1));
            let palette = rng.int_in(0, N_PALETTES - 1);
            let mut s = sample_initial(&mut rng, instr, palette);
            let mut done = false;
            for _ in 0..T_MAX {
                let a = scripted_expert(&s, instr).unwrap();
                s = step(&s, &a);
                if success(&s, instr) {
                    done = true;
                    break;
                }
            }
            ok += done as usize;
        }
        assert_eq!(ok, n, "expert solved only {ok}/{n}");
    }

    #[test]
    fn success_stays_true_under_expert_hold() {
        for id in 0..VOCAB {
            let instr = Instruction(id);
            let mut rng = StreamRng::derive(7, "hold", id as u64);
            let mut s = sample_initial(&mut rng, instr, 0);
            let mut reached = false;
            for _ in 0..T_MAX {
                let a = scripted_expert(&s, instr).unwrap();
                s = step(&s, &a);
                if success(&s, instr) {
                    reached = true;
                    break;
                }
            }
            assert!(reached, "instruction {id} unsolved");
            for _ in 0..10 {
                let a = scripted_expert(&s, instr).unwrap();
                s = step(&s, &a);
                assert!(success(&s, instr), "instruction {id} success not held");
            }
        }
    }

    #[test]
    fn unknown_instruction_is_an_error() {
        assert!(Instruction::new(VOCAB).is_err());
        let s = fixed_state();
        assert!(scripted_expert(&s, Instruction(VOCAB)).is_err());
    }

    #[test]
    fn initial_states_never_start_successful() {
        for trial in 0..200 {
            let mut rng = StreamRng::derive(9, "init", trial);
            let instr = Instruction((trial % VOCAB as u64) as usize);
            let s = sample_initial(&mut rng, instr, 0);
            assert!(!success(&s, instr));
        }
    }
}
