//! Pseudo sensors: an overhead RGB-D image, a planar range scan taken at the
//! gripper's height and contact pads on the gripper fingers.

use std::f64::consts::PI;

use crate::fusion::{FusionConfig, Observation, RGBD_CHANNELS};
use crate::numerics::Tensor;

use super::world::{SimConfig, Task, WorldState};

const R: usize = 0;
const G: usize = 1;
const B: usize = 2;
const D: usize = 3;

pub fn render(sim: &SimConfig, fusion: &FusionConfig, state: &WorldState) -> Observation {
    Observation::new(rgbd(sim, fusion, state), lidar(sim, fusion, state), touch(fusion, state))
}

fn rgbd(sim: &SimConfig, fusion: &FusionConfig, state: &WorldState) -> Tensor {
    let (h, w, ppc) = (fusion.image_height, fusion.image_width, sim.pixels_per_cell);
    let mut img = vec![0.0; h * w * RGBD_CHANNELS];
    let mut fill = |x: usize, y: usize, ch: usize, v: f64| {
        for r in y * ppc..(y + 1) * ppc {
            for c in x * ppc..(x + 1) * ppc {
                img[(r * w + c) * RGBD_CHANNELS + ch] = v;
            }
        }
    };

    for y in 0..sim.grid {
        for x in 0..sim.grid {
            let stack = state.objects.iter().filter(|o| o.pos[0] == x && o.pos[1] == y).count();
            fill(x, y, D, 1.0 - stack as f64 / sim.levels as f64);
        }
    }
    let a = state.object(0).pos;
    fill(a[0], a[1], R, 1.0);
    if let Some([x, y]) = state.goal_xy() {
        fill(x, y, B, if state.task == Task::Stack { 1.0 } else { 0.5 });
    }
    let [gx, gy, gz] = state.gripper;
    fill(gx, gy, G, (gz + 1) as f64 / sim.levels as f64);

    // heading marker on the edge of the gripper cell
    let mid = ppc / 2;
    let (mr, mc) = match state.yaw {
        0 => (mid, ppc - 1),
        1 => (ppc - 1, mid),
        2 => (mid, 0),
        _ => (0, mid),
    };
    img[((gy * ppc + mr) * w + gx * ppc + mc) * RGBD_CHANNELS + G] = 1.0;

    Tensor::new(vec![h, w, RGBD_CHANNELS], img).expect("image buffer matches its shape")
}

/// Distance in cells from the centre of `start` along `(dx, dy)` to the first
/// wall or occupied cell on level `z`, by grid traversal.
fn cast(sim: &SimConfig, state: &WorldState, start: [usize; 2], z: usize, dx: f64, dy: f64) -> f64 {
    let n = sim.grid as i64;
    let (mut cx, mut cy) = (start[0] as i64, start[1] as i64);
    let step_x = if dx > 0.0 { 1 } else { -1 };
    let step_y = if dy > 0.0 { 1 } else { -1 };
    let delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
    let mut next_x = if dx != 0.0 { 0.5 * delta_x } else { f64::INFINITY };
    let mut next_y = if dy != 0.0 { 0.5 * delta_y } else { f64::INFINITY };
    loop {
        let t;
        if next_x < next_y {
            t = next_x;
            cx += step_x;
            next_x += delta_x;
        } else {
            t = next_y;
            cy += step_y;
            next_y += delta_y;
        }
        if cx < 0 || cy < 0 || cx >= n || cy >= n {
            return t;
        }
        let cell = [cx as usize, cy as usize, z];
        if state.objects.iter().any(|o| state.held != Some(o.id) && o.pos == cell) {
            return t;
        }
    }
}

fn lidar(sim: &SimConfig, fusion: &FusionConfig, state: &WorldState) -> Tensor {
    let [gx, gy, gz] = state.gripper;
    let heading = state.yaw as f64 * PI / 2.0;
    let beams = fusion.lidar_beams;
    let ranges = (0..beams)
        .map(|k| {
            let theta = heading + 2.0 * PI * k as f64 / beams as f64;
            let d = cast(sim, state, [gx, gy], gz, theta.cos(), theta.sin());
            (d * sim.cell_size).min(fusion.lidar_max_range)
        })
        .collect();
    Tensor::vector(ranges)
}

fn touch(fusion: &FusionConfig, state: &WorldState) -> Tensor {
    let v = if state.grasp() { 1.0 } else { 0.0 };
    Tensor::vector(vec![v; fusion.touch_channels])
}
