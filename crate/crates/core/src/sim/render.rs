use crate::autodiff::Tensor;
use crate::sim::arena::Arena;
use crate::sim::env::AgentState;

/// Distance at which pseudo-depth saturates to 1.0 (`near / d`, clamped).
pub const DEPTH_NEAR: f64 = 0.5;

/// Vertical extent constant: an object one arena unit away fills the image.
const HEIGHT_SCALE: f64 = 1.0;

const SKY: [f64; 3] = [0.53, 0.81, 0.92];
const FLOOR: [f64; 3] = [0.35, 0.30, 0.25];
/// Reserved goal beacon color; the obstacle palette avoids green.
const GOAL_COLOR: [f64; 3] = [0.0, 1.0, 0.2];
const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.40, 0.90],
    [0.90, 0.70, 0.10],
    [0.80, 0.20, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.20],
    [0.60, 0.30, 0.10],
    [0.85, 0.85, 0.85],
];

/// Nearest positive ray-circle intersection distance, if any.
fn ray_circle(origin: (f64, f64), dir: (f64, f64), center: (f64, f64), radius: f64) -> Option<f64> {
    let oc = (center.0 - origin.0, center.1 - origin.1);
    let tca = oc.0 * dir.0 + oc.1 * dir.1;
    let d2 = oc.0 * oc.0 + oc.1 * oc.1 - tca * tca;
    let r2 = radius * radius;
    if d2 > r2 {
        return None;
    }
    let thc = (r2 - d2).sqrt();
    let t = tca - thc;
    if t > 1e-9 {
        Some(t)
    } else {
        None
    }
}

fn ray_dir(heading: f64, fov_rad: f64, col: usize, width: usize) -> (f64, f64) {
    let angle = heading + fov_rad / 2.0 - (col as f64 + 0.5) * fov_rad / width as f64;
    (angle.cos(), angle.sin())
}

struct ColumnHit {
    dist: f64,
    color: [f64; 3],
}

fn cast_column(state: &AgentState, arena: &Arena, dir: (f64, f64)) -> Option<ColumnHit> {
    let mut hit: Option<ColumnHit> = None;
    for o in &arena.obstacles {
        if let Some(t) = ray_circle(state.position, dir, o.center, o.radius) {
            if hit.as_ref().map_or(true, |h| t < h.dist) {
                hit = Some(ColumnHit { dist: t, color: PALETTE[o.hue % PALETTE.len()] });
            }
        }
    }
    if let Some(t) = ray_circle(state.position, dir, arena.goal, arena.goal_radius) {
        if hit.as_ref().map_or(true, |h| t < h.dist) {
            hit = Some(ColumnHit { dist: t, color: GOAL_COLOR });
        }
    }
    hit
}

/// Egocentric RGB view: `[3, img, img]`, values in [0, 1]. Obstacle and goal
/// columns are drawn with height proportional to inverse distance over a
/// sky/floor split; walls are not rendered.
pub fn render_rgb(state: &AgentState, arena: &Arena, img: usize, fov_deg: f64) -> Tensor {
    let fov = fov_deg.to_radians();
    let mut data = vec![0.0; 3 * img * img];
    let half = img as f64 / 2.0;
    for col in 0..img {
        let dir = ray_dir(state.heading, fov, col, img);
        let hit = cast_column(state, arena, dir);
        let (half_height, color, shade) = match &hit {
            Some(h) => {
                let hh = (half * HEIGHT_SCALE / h.dist).min(half);
                // distance shading keeps nearer surfaces brighter
                let shade = (1.0 / (1.0 + 0.25 * h.dist)).clamp(0.2, 1.0);
                (hh, h.color, shade)
            }
            None => (0.0, [0.0; 3], 1.0),
        };
        let top = (half - half_height).floor().max(0.0) as usize;
        let bottom = (half + half_height).ceil().min(img as f64) as usize;
        for row in 0..img {
            let rgb = if hit.is_some() && row >= top && row < bottom {
                [color[0] * shade, color[1] * shade, color[2] * shade]
            } else if row < img / 2 {
                SKY
            } else {
                FLOOR
            };
            for (c, &v) in rgb.iter().enumerate() {
                data[c * img * img + row * img + col] = v;
            }
        }
    }
    Tensor::new(vec![3, img, img], data).expect("rgb shape")
}

/// Oracle pseudo-depth view: `[1, img, img]` of per-column normalized
/// inverse obstacle distance (`DEPTH_NEAR / d` clamped to [0, 1]), replicated
/// down rows; zero where no obstacle is hit. The goal emits no depth.
pub fn render_depth(state: &AgentState, arena: &Arena, img: usize, fov_deg: f64) -> Tensor {
    let fov = fov_deg.to_radians();
    let mut data = vec![0.0; img * img];
    for col in 0..img {
        let dir = ray_dir(state.heading, fov, col, img);
        let mut nearest: Option<f64> = None;
        for o in &arena.obstacles {
            if let Some(t) = ray_circle(state.position, dir, o.center, o.radius) {
                nearest = Some(nearest.map_or(t, |n: f64| n.min(t)));
            }
        }
        if let Some(d) = nearest {
            let v = (DEPTH_NEAR / d).clamp(0.0, 1.0);
            for row in 0..img {
                data[row * img + col] = v;
            }
        }
    }
    Tensor::new(vec![1, img, img], data).expect("depth shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::arena::Obstacle;

    fn empty_arena() -> Arena {
        Arena {
            width: 6.0,
            height: 6.0,
            obstacles: vec![],
            goal: (5.0, 5.0),
            goal_radius: 0.5,
            agent_radius: 0.2,
        }
    }

    fn agent_at(p: (f64, f64), heading: f64) -> AgentState {
        AgentState { position: p, heading, velocity: (0.0, 0.0), yaw_rate: 0.0, steps: 0 }
    }

    #[test]
    fn empty_view_is_pure_sky_floor() {
        // Goal behind the agent: nothing in the FOV.
        let arena = empty_arena();
        let state = agent_at((3.0, 3.0), std::f64::consts::PI); // looking away from (5,5)
        let img = render_rgb(&state, &arena, 16, 82.6);
        let d = img.data();
        for row in 0..16 {
            for col in 0..16 {
                let px = [d[row * 16 + col], d[256 + row * 16 + col], d[512 + row * 16 + col]];
                let expect = if row < 8 { SKY } else { FLOOR };
                assert_eq!(px, expect);
            }
        }
    }

    #[test]
    fn goal_straight_ahead_centers_beacon() {
        let mut arena = empty_arena();
        arena.goal = (5.0, 3.0);
        let state = agent_at((2.0, 3.0), 0.0);
        let img = render_rgb(&state, &arena, 17, 82.6);
        let d = img.data();
        let mid_col = 8;
        let mid_row = 8;
        let px = [
            d[mid_row * 17 + mid_col],
            d[17 * 17 + mid_row * 17 + mid_col],
            d[2 * 17 * 17 + mid_row * 17 + mid_col],
        ];
        // center pixel must be the (shaded) goal color: green-dominant
        assert!(px[1] > px[0] && px[1] > px[2], "center pixel {px:?} not goal-colored");

        // the ray-geometry oracle: column of the goal center == image center
        let ang_to_goal = (arena.goal.1 - state.position.1).atan2(arena.goal.0 - state.position.0);
        assert!((ang_to_goal - state.heading).abs() < 1e-12);
    }

    #[test]
    fn renderers_are_pure_functions() {
        let mut arena = empty_arena();
        arena.obstacles.push(Obstacle { center: (4.0, 3.2), radius: 0.5, hue: 2 });
        let state = agent_at((2.0, 3.0), 0.1);
        assert_eq!(render_rgb(&state, &arena, 24, 82.6), render_rgb(&state, &arena, 24, 82.6));
        assert_eq!(
            render_depth(&state, &arena, 24, 82.6),
            render_depth(&state, &arena, 24, 82.6)
        );
    }

    #[test]
    fn empty_arena_depth_is_all_zeros() {
        let arena = empty_arena();
        let state = agent_at((3.0, 3.0), 0.3);
        let depth = render_depth(&state, &arena, 16, 82.6);
        assert!(depth.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_depth_value_matches_inverse_distance() {
        let mut arena = empty_arena();
        let r = 2.0;
        arena.obstacles.push(Obstacle { center: (3.0 + r + 0.5, 3.0), radius: 0.5, hue: 0 });
        let state = agent_at((3.0, 3.0), 0.0);
        let depth = render_depth(&state, &arena, 17, 82.6);
        // straight-ahead hit distance is exactly r
        let v = depth.data()[8 * 17 + 8];
        assert!((v - (DEPTH_NEAR / r).clamp(0.0, 1.0)).abs() < 1e-9, "{v}");
    }

    #[test]
    fn depth_and_rgb_agree_on_obstacle_column() {
        let mut arena = empty_arena();
        arena.obstacles.push(Obstacle { center: (4.5, 3.4), radius: 0.4, hue: 1 });
        let state = agent_at((2.0, 3.0), 0.2);
        let img = 33;
        let depth = render_depth(&state, &arena, img, 82.6);
        let rgb = render_rgb(&state, &arena, img, 82.6);
        // strongest depth column
        let row0 = &depth.data()[0..img];
        let (argmax, peak) = row0
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert!(peak > 0.0, "obstacle not visible in depth");
        // that column's mid-row RGB pixel must be obstacle-colored (palette 1 is blue)
        let mid = img / 2;
        let b = rgb.data()[2 * img * img + mid * img + argmax];
        let r = rgb.data()[mid * img + argmax];
        assert!(b > r, "rgb column {argmax} not obstacle-colored");
    }
}
