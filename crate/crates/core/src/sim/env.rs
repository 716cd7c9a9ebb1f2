use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::sim::arena::{dist, Arena, ArenaConfig};
use crate::sim::render::{render_depth, render_rgb};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Low-dim feature width of the student observation tail
/// (v[3] ++ ω[3] ++ θ[3] ++ Δp_goal[3]).
pub const LOW_DIM_STUDENT: usize = 12;
/// Low-dim feature width of the oracle fusion tail (v[3] ++ ω[3] ++ Δp[6]).
pub const LOW_DIM_ORACLE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub position: (f64, f64),
    /// Heading ψ in radians (unwrapped; consumed through cos/sin only).
    pub heading: f64,
    /// Body-frame planar velocity of the last executed action.
    pub velocity: (f64, f64),
    pub yaw_rate: f64,
    pub steps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalCause {
    Goal,
    Collision,
    Timeout,
    None,
}

impl TerminalCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalCause::Goal => "goal",
            TerminalCause::Collision => "collision",
            TerminalCause::Timeout => "timeout",
            TerminalCause::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminal: bool,
    pub cause: TerminalCause,
    pub d_init: f64,
    pub d_t: f64,
}

/// Full privileged state for the oracle teacher: depth stack plus exact
/// kinematic and relative-position features.
#[derive(Debug, Clone)]
pub struct PrivilegedState {
    /// `[L, img, img]`, values in [0, 1].
    pub depth_stack: Tensor,
    pub v: [f64; 3],
    pub omega: [f64; 3],
    /// Heading as a unit vector (cos ψ, sin ψ, 0).
    pub theta: [f64; 3],
    /// Body-frame vector to the nearest collision surface (2D + 0 padding)
    /// concatenated with the body-frame goal vector (2D + 0 padding).
    pub delta_p: [f64; 6],
}

impl PrivilegedState {
    /// The oracle fusion tail `[v ; ω ; Δp]`.
    pub fn low_dim(&self) -> [f64; LOW_DIM_ORACLE] {
        let mut out = [0.0; LOW_DIM_ORACLE];
        out[..3].copy_from_slice(&self.v);
        out[3..6].copy_from_slice(&self.omega);
        out[6..].copy_from_slice(&self.delta_p);
        out
    }
}

/// Per-step reward:
/// `10·[goal] − 1·[collision] − 1/H_max + 0.1·(d_init − d_t)`.
pub fn reward(goal: bool, collision: bool, d_init: f64, d_t: f64, h_max: u32) -> f64 {
    let mut r = -1.0 / h_max as f64 + 0.1 * (d_init - d_t);
    if goal {
        r += 10.0;
    }
    if collision {
        r -= 1.0;
    }
    r
}

/// One navigation environment instance with its own RNG stream and frame
/// histories.
pub struct NavEnv {
    pub cfg: ArenaConfig,
    pub arena: Arena,
    pub state: AgentState,
    d_init: f64,
    frames_l: usize,
    need_rgb: bool,
    need_depth: bool,
    rgb_frames: VecDeque<Tensor>,
    depth_frames: VecDeque<Tensor>,
    rng: ChaCha8Rng,
    terminal: bool,
}

impl NavEnv {
    /// `instance` separates the RNG streams of parallel environments.
    pub fn new(
        cfg: ArenaConfig,
        frames_l: usize,
        need_rgb: bool,
        need_depth: bool,
        seed: u64,
        instance: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let rng = stream_rng(seed, Stream::Env, instance);
        let mut env = NavEnv {
            cfg,
            arena: Arena {
                width: 0.0,
                height: 0.0,
                obstacles: vec![],
                goal: (0.0, 0.0),
                goal_radius: 0.0,
                agent_radius: 0.0,
            },
            state: AgentState {
                position: (0.0, 0.0),
                heading: 0.0,
                velocity: (0.0, 0.0),
                yaw_rate: 0.0,
                steps: 0,
            },
            d_init: 0.0,
            frames_l,
            need_rgb,
            need_depth,
            rgb_frames: VecDeque::new(),
            depth_frames: VecDeque::new(),
            rng,
            terminal: true,
        };
        env.reset()?;
        Ok(env)
    }

    /// New episode: fresh scene, collision-free spawn, histories warm-filled
    /// by repeating the first frame L times.
    pub fn reset(&mut self) -> Result<()> {
        let (arena, start, heading) = self.cfg.sample(&mut self.rng)?;
        self.arena = arena;
        self.state = AgentState {
            position: start,
            heading,
            velocity: (0.0, 0.0),
            yaw_rate: 0.0,
            steps: 0,
        };
        self.d_init = dist(start, self.arena.goal);
        self.terminal = false;
        self.rgb_frames.clear();
        self.depth_frames.clear();
        self.push_frames(true);
        Ok(())
    }

    fn push_frames(&mut self, warm_fill: bool) {
        let copies = if warm_fill { self.frames_l } else { 1 };
        if self.need_rgb {
            let f = render_rgb(&self.state, &self.arena, self.cfg.img, self.cfg.fov_deg);
            for _ in 0..copies {
                self.rgb_frames.push_back(f.clone());
            }
            while self.rgb_frames.len() > self.frames_l {
                self.rgb_frames.pop_front();
            }
        }
        if self.need_depth {
            let f = render_depth(&self.state, &self.arena, self.cfg.img, self.cfg.fov_deg);
            for _ in 0..copies {
                self.depth_frames.push_back(f.clone());
            }
            while self.depth_frames.len() > self.frames_l {
                self.depth_frames.pop_front();
            }
        }
    }

    /// Advance one step. The action is clamped per axis to ±u_max; heading
    /// integrates first, then the body-frame translation rotates by the new
    /// heading.
    pub fn step(&mut self, action: [f64; 3]) -> Result<StepOutcome> {
        if self.terminal {
            return Err(Error::contract("step called on a terminal episode; reset first"));
        }
        if action.iter().any(|a| a.is_nan()) {
            return Err(Error::contract("NaN action"));
        }
        let u = [
            action[0].clamp(-self.cfg.u_max[0], self.cfg.u_max[0]),
            action[1].clamp(-self.cfg.u_max[1], self.cfg.u_max[1]),
            action[2].clamp(-self.cfg.u_max[2], self.cfg.u_max[2]),
        ];
        let dt = self.cfg.dt;
        self.state.heading += u[2] * dt;
        let (c, s) = (self.state.heading.cos(), self.state.heading.sin());
        self.state.position.0 += (u[0] * c - u[1] * s) * dt;
        self.state.position.1 += (u[0] * s + u[1] * c) * dt;
        self.state.velocity = (u[0], u[1]);
        self.state.yaw_rate = u[2];
        self.state.steps += 1;

        let d_t = dist(self.state.position, self.arena.goal);
        let goal = d_t <= self.arena.goal_radius;
        let collision = !goal && self.arena.collides(self.state.position);
        let timeout = !goal && !collision && self.state.steps >= self.cfg.h_max;
        let cause = if goal {
            TerminalCause::Goal
        } else if collision {
            TerminalCause::Collision
        } else if timeout {
            TerminalCause::Timeout
        } else {
            TerminalCause::None
        };
        self.terminal = cause != TerminalCause::None;

        let r = reward(goal, collision, self.d_init, d_t, self.cfg.h_max);
        self.push_frames(false);
        Ok(StepOutcome { reward: r, terminal: self.terminal, cause, d_init: self.d_init, d_t })
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn d_init(&self) -> f64 {
        self.d_init
    }

    pub fn distance_to_goal(&self) -> f64 {
        dist(self.state.position, self.arena.goal)
    }

    /// L most recent RGB frames channel-concatenated to `[3L, img, img]`,
    /// oldest first.
    pub fn frame_stack(&self) -> Tensor {
        assert!(self.need_rgb, "rgb frames disabled for this env");
        stack_frames(&self.rgb_frames, 3, self.cfg.img)
    }

    /// L most recent depth frames as `[L, img, img]`, oldest first.
    pub fn depth_stack(&self) -> Tensor {
        assert!(self.need_depth, "depth frames disabled for this env");
        stack_frames(&self.depth_frames, 1, self.cfg.img)
    }

    fn body_frame(&self, v: (f64, f64)) -> (f64, f64) {
        let (c, s) = (self.state.heading.cos(), self.state.heading.sin());
        (v.0 * c + v.1 * s, -v.0 * s + v.1 * c)
    }

    /// Body-frame goal vector with zero padding.
    pub fn goal_vector(&self) -> [f64; 3] {
        let g = self.body_frame((
            self.arena.goal.0 - self.state.position.0,
            self.arena.goal.1 - self.state.position.1,
        ));
        [g.0, g.1, 0.0]
    }

    /// Student low-dim tail: `[v ; ω ; θ ; Δp_goal]` (no obstacle terms).
    pub fn student_low_dim(&self) -> [f64; LOW_DIM_STUDENT] {
        let mut out = [0.0; LOW_DIM_STUDENT];
        out[0] = self.state.velocity.0;
        out[1] = self.state.velocity.1;
        out[5] = self.state.yaw_rate;
        out[6] = self.state.heading.cos();
        out[7] = self.state.heading.sin();
        let g = self.goal_vector();
        out[9..].copy_from_slice(&g);
        out
    }

    pub fn privileged_state(&self) -> PrivilegedState {
        let near = self.body_frame(self.arena.nearest_surface_vector(self.state.position));
        let g = self.goal_vector();
        PrivilegedState {
            depth_stack: self.depth_stack(),
            v: [self.state.velocity.0, self.state.velocity.1, 0.0],
            omega: [0.0, 0.0, self.state.yaw_rate],
            theta: [self.state.heading.cos(), self.state.heading.sin(), 0.0],
            delta_p: [near.0, near.1, 0.0, g[0], g[1], 0.0],
        }
    }
}

fn stack_frames(frames: &VecDeque<Tensor>, channels: usize, img: usize) -> Tensor {
    let l = frames.len();
    let per = channels * img * img;
    let mut data = Vec::with_capacity(l * per);
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![l * channels, img, img], data).expect("stack shape")
}

/// Deterministic go-to-goal controller: body-frame velocity straight at the
/// goal with yaw turning the camera toward it. Used for corpus collection
/// and as a scripted evaluation baseline.
pub fn scripted_goto_action(env: &NavEnv) -> [f64; 3] {
    let g = env.goal_vector();
    let d = (g[0] * g[0] + g[1] * g[1]).sqrt();
    if d < 1e-9 {
        return [0.0, 0.0, 0.0];
    }
    let speed = env.cfg.u_max[0].min(d / env.cfg.dt);
    let angle = g[1].atan2(g[0]);
    [
        (g[0] / d * speed).clamp(-env.cfg.u_max[0], env.cfg.u_max[0]),
        (g[1] / d * speed).clamp(-env.cfg.u_max[1], env.cfg.u_max[1]),
        (2.0 * angle).clamp(-env.cfg.u_max[2], env.cfg.u_max[2]),
    ]
}
