use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

const SPAWN_ATTEMPTS: usize = 1000;
/// Clearance added around surfaces when sampling spawn points.
const SPAWN_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub center: (f64, f64),
    pub radius: f64,
    /// Palette index for the RGB renderer.
    pub hue: usize,
}

/// One episode's realized scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Arena {
    pub width: f64,
    pub height: f64,
    pub obstacles: Vec<Obstacle>,
    pub goal: (f64, f64),
    pub goal_radius: f64,
    pub agent_radius: f64,
}

impl Arena {
    /// Signed clearance of a point: distance to the nearest obstacle surface
    /// or wall. Negative means inside an obstacle / outside the walls.
    pub fn clearance(&self, p: (f64, f64)) -> f64 {
        let mut c = p.0.min(self.width - p.0).min(p.1).min(self.height - p.1);
        for o in &self.obstacles {
            let d = dist(p, o.center) - o.radius;
            c = c.min(d);
        }
        c
    }

    /// World-frame vector from `p` to the nearest collision surface
    /// (obstacle circle or wall).
    pub fn nearest_surface_vector(&self, p: (f64, f64)) -> (f64, f64) {
        // Walls as candidate surfaces.
        let wall_candidates = [
            (-p.0, 0.0),
            (self.width - p.0, 0.0),
            (0.0, -p.1),
            (0.0, self.height - p.1),
        ];
        let mut best = wall_candidates[0];
        let mut best_d = norm(best);
        for c in &wall_candidates[1..] {
            let d = norm(*c);
            if d < best_d {
                best = *c;
                best_d = d;
            }
        }
        for o in &self.obstacles {
            let to_center = (o.center.0 - p.0, o.center.1 - p.1);
            let d_center = norm(to_center);
            if d_center <= f64::EPSILON {
                continue;
            }
            let surface_d = d_center - o.radius;
            if surface_d < best_d {
                let scale = surface_d / d_center;
                best = (to_center.0 * scale, to_center.1 * scale);
                best_d = surface_d;
            }
        }
        best
    }

    pub fn collides(&self, p: (f64, f64)) -> bool {
        if p.0 < self.agent_radius
            || p.0 > self.width - self.agent_radius
            || p.1 < self.agent_radius
            || p.1 > self.height - self.agent_radius
        {
            return true;
        }
        self.obstacles
            .iter()
            .any(|o| dist(p, o.center) < o.radius + self.agent_radius)
    }
}

pub(crate) fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    norm((a.0 - b.0, a.1 - b.1))
}

pub(crate) fn norm(v: (f64, f64)) -> f64 {
    (v.0 * v.0 + v.1 * v.1).sqrt()
}

/// Declarative arena description; each reset realizes a concrete [`Arena`]
/// plus a collision-free start pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArenaConfig {
    pub width: f64,
    pub height: f64,
    /// Number of randomly placed obstacles (ignored when `fixed_obstacles`
    /// is set).
    pub n_obstacles: usize,
    pub obstacle_radius_min: f64,
    pub obstacle_radius_max: f64,
    /// Explicit `[x, y, radius]` triples; overrides random placement.
    pub fixed_obstacles: Option<Vec<[f64; 3]>>,
    pub fixed_goal: Option<[f64; 2]>,
    pub fixed_start: Option<[f64; 2]>,
    /// Goal threshold ε.
    pub goal_radius: f64,
    pub agent_radius: f64,
    /// Maximum episode length H_max.
    pub h_max: u32,
    pub dt: f64,
    /// Per-axis action bounds (v_x, v_y, ω_z).
    pub u_max: [f64; 3],
    pub min_start_goal_dist: f64,
    pub fov_deg: f64,
    /// Rendered image extent (square).
    pub img: usize,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        ArenaConfig {
            width: 6.0,
            height: 6.0,
            n_obstacles: 0,
            obstacle_radius_min: 0.4,
            obstacle_radius_max: 0.7,
            fixed_obstacles: None,
            fixed_goal: None,
            fixed_start: None,
            goal_radius: 0.5,
            agent_radius: 0.2,
            h_max: 5000,
            dt: 0.1,
            u_max: [1.0, 1.0, 1.5],
            min_start_goal_dist: 2.0,
            fov_deg: 82.6,
            img: 64,
        }
    }
}

impl ArenaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::config("arena: non-positive extent"));
        }
        if self.goal_radius <= 0.0 || self.agent_radius <= 0.0 {
            return Err(Error::config("arena: non-positive radius"));
        }
        if self.obstacle_radius_min > self.obstacle_radius_max {
            return Err(Error::config("arena: obstacle radius range inverted"));
        }
        if self.dt <= 0.0 {
            return Err(Error::config("arena: non-positive dt"));
        }
        if self.h_max == 0 {
            return Err(Error::config("arena: h_max must be positive"));
        }
        if self.u_max.iter().any(|&u| u <= 0.0) {
            return Err(Error::config("arena: non-positive action bound"));
        }
        if self.img < 7 {
            return Err(Error::config("arena: img must be at least 7"));
        }
        if !(0.0..=180.0).contains(&self.fov_deg) || self.fov_deg == 0.0 {
            return Err(Error::config("arena: fov_deg must lie in (0, 180]"));
        }
        Ok(())
    }

    /// Realize a scene: obstacles, goal, and a collision-free start pose.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<(Arena, (f64, f64), f64)> {
        let obstacles = match &self.fixed_obstacles {
            Some(list) => list
                .iter()
                .enumerate()
                .map(|(i, o)| Obstacle { center: (o[0], o[1]), radius: o[2], hue: i })
                .collect(),
            None => self.sample_obstacles(rng)?,
        };
        let mut arena = Arena {
            width: self.width,
            height: self.height,
            obstacles,
            goal: (0.0, 0.0),
            goal_radius: self.goal_radius,
            agent_radius: self.agent_radius,
        };
        arena.goal = match self.fixed_goal {
            Some(g) => (g[0], g[1]),
            None => self.sample_goal(&arena, rng)?,
        };
        if arena.obstacles.iter().any(|o| dist(arena.goal, o.center) <= o.radius) {
            return Err(Error::config("arena: goal inside an obstacle"));
        }

        let start = match self.fixed_start {
            Some(s) => {
                let s = (s[0], s[1]);
                if arena.collides(s) {
                    return Err(Error::config("arena: fixed start collides"));
                }
                s
            }
            None => self.sample_start(&arena, rng)?,
        };
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        Ok((arena, start, heading))
    }

    fn sample_obstacles(&self, rng: &mut impl Rng) -> Result<Vec<Obstacle>> {
        let mut obstacles: Vec<Obstacle> = Vec::with_capacity(self.n_obstacles);
        for hue in 0..self.n_obstacles {
            let mut placed = false;
            for _ in 0..SPAWN_ATTEMPTS {
                let r = rng.gen_range(self.obstacle_radius_min..=self.obstacle_radius_max);
                let margin = r + self.agent_radius + SPAWN_MARGIN;
                if 2.0 * margin >= self.width.min(self.height) {
                    break;
                }
                let c = (
                    rng.gen_range(margin..self.width - margin),
                    rng.gen_range(margin..self.height - margin),
                );
                let overlaps = obstacles
                    .iter()
                    .any(|o| dist(c, o.center) < o.radius + r + 2.0 * self.agent_radius);
                if !overlaps {
                    obstacles.push(Obstacle { center: c, radius: r, hue });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::config(format!(
                    "arena: could not place obstacle {hue} after {SPAWN_ATTEMPTS} attempts"
                )));
            }
        }
        Ok(obstacles)
    }

    fn sample_goal(&self, arena: &Arena, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let margin = self.goal_radius.max(self.agent_radius) + SPAWN_MARGIN;
        if 2.0 * margin >= self.width || 2.0 * margin >= self.height {
            return Err(Error::config("arena: too small to place a goal"));
        }
        for _ in 0..SPAWN_ATTEMPTS {
            let g = (
                rng.gen_range(margin..self.width - margin),
                rng.gen_range(margin..self.height - margin),
            );
            let clear = arena
                .obstacles
                .iter()
                .all(|o| dist(g, o.center) >= o.radius + self.goal_radius);
            if clear {
                return Ok(g);
            }
        }
        Err(Error::config(format!(
            "arena: no valid goal after {SPAWN_ATTEMPTS} attempts"
        )))
    }

    fn sample_start(&self, arena: &Arena, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let margin = self.agent_radius + SPAWN_MARGIN;
        if 2.0 * margin >= self.width || 2.0 * margin >= self.height {
            return Err(Error::config("arena: too small to place a start pose"));
        }
        for _ in 0..SPAWN_ATTEMPTS {
            let s = (
                rng.gen_range(margin..self.width - margin),
                rng.gen_range(margin..self.height - margin),
            );
            if arena.collides(s) {
                continue;
            }
            let to_goal = dist(s, arena.goal);
            if to_goal <= self.goal_radius {
                continue; // would start already inside the goal region
            }
            if to_goal < self.min_start_goal_dist {
                continue;
            }
            return Ok(s);
        }
        Err(Error::config(format!(
            "arena: no collision-free start after {SPAWN_ATTEMPTS} attempts"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn four_obstacle_cfg() -> ArenaConfig {
        ArenaConfig { n_obstacles: 4, min_start_goal_dist: 2.0, ..ArenaConfig::default() }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let cfg = four_obstacle_cfg();
        let a = cfg.sample(&mut stream_rng(7, Stream::Env, 0)).unwrap();
        let b = cfg.sample(&mut stream_rng(7, Stream::Env, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejection_sampler_never_spawns_in_collision() {
        let cfg = four_obstacle_cfg();
        let mut rng = stream_rng(3, Stream::Env, 1);
        for _ in 0..10_000 {
            let (arena, start, _) = cfg.sample(&mut rng).unwrap();
            assert!(!arena.collides(start));
            assert!(dist(start, arena.goal) >= cfg.min_start_goal_dist);
            for o in &arena.obstacles {
                assert!(dist(arena.goal, o.center) >= o.radius + cfg.goal_radius);
            }
        }
    }

    #[test]
    fn nearest_surface_matches_brute_force_point_to_circle() {
        let cfg = four_obstacle_cfg();
        let mut rng = stream_rng(5, Stream::Env, 2);
        for _ in 0..200 {
            let (arena, p, _) = cfg.sample(&mut rng).unwrap();
            let v = arena.nearest_surface_vector(p);
            let got = norm(v);
            // brute force over obstacles and walls
            let mut best = p.0.min(arena.width - p.0).min(p.1).min(arena.height - p.1);
            for o in &arena.obstacles {
                best = best.min(dist(p, o.center) - o.radius);
            }
            assert!((got - best).abs() <= 1e-12, "{got} vs {best}");
        }
    }

    #[test]
    fn impossible_spawn_is_config_error() {
        let cfg = ArenaConfig {
            width: 1.0,
            height: 1.0,
            n_obstacles: 0,
            min_start_goal_dist: 5.0, // cannot be satisfied in a 1x1 box
            ..ArenaConfig::default()
        };
        let err = cfg.sample(&mut stream_rng(0, Stream::Env, 0));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
