use nalgebra::Vector3;

use super::{Box3, ToyScene};
use crate::geometry::CameraRig;

/// 8-bit RGB raster, row-major `H x W x 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        let data = color
            .iter()
            .copied()
            .cycle()
            .take(height * width * 3)
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, v: usize, u: usize) -> [u8; 3] {
        let o = (v * self.width + u) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, v: usize, u: usize, c: [u8; 3]) {
        let o = (v * self.width + u) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    /// Channel-major `[3, H, W]` values in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c] as f64 / 255.0;
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`], clamping and rounding to 8 bits.
    pub fn from_chw(height: usize, width: usize, values: &[f64]) -> Self {
        let n = height * width;
        assert_eq!(values.len(), 3 * n, "expected a [3, H, W] buffer");
        let mut data = vec![0u8; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = (values[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Self {
            height,
            width,
            data,
        }
    }
}

/// Red-dominant pixels are vehicles: `r - max(g, b) > 0.25` on a unit scale.
pub fn is_foreground(c: [u8; 3]) -> bool {
    c[0] as i32 - c[1].max(c[2]) as i32 > 63
}

/// Per-camera renders of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedViews {
    pub images: Vec<Image>,
    /// True where some box covers the pixel center.
    pub masks: Vec<Vec<bool>>,
    /// Index of the visible box per pixel, `-1` for background.
    pub instances: Vec<Vec<i32>>,
    /// `painted[k][b]`: box `b` is visible somewhere in camera `k`.
    pub painted: Vec<Vec<bool>>,
}

/// Distance along `dir` at which the ray from `origin` enters the box, and
/// the local axis (0 length, 1 width, 2 height) of the entry face. Rays that
/// start inside the box report no hit.
pub fn ray_box_entry(origin: Vector3<f64>, dir: Vector3<f64>, b: &Box3) -> Option<(f64, usize)> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw.sin_cos();
    let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        let half = b.size[a] / 2.0;
        if d[a] == 0.0 {
            if o[a].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - o[a]) / d[a];
        let t2 = (half - o[a]) / d[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_enter {
            t_enter = lo;
            axis = a;
        }
        t_exit = t_exit.min(hi);
    }
    (t_enter <= t_exit && t_enter > 0.0).then_some((t_enter, axis))
}

fn shade(color: [u8; 3], axis: usize) -> [u8; 3] {
    let f = [0.7, 0.85, 1.0][axis];
    color.map(|v| (v as f64 * f).round() as u8)
}

/// Render every camera of `rig` by casting one ray per pixel center.
///
/// Each pixel shows the nearest box face along its ray, else the ground
/// plane (road, divider, open ground) below the horizon, else sky. Taking
/// the nearest hit is the per-pixel form of painting boxes far to near.
/// Degenerate boxes are skipped with a warning.
pub fn render_views(scene: &ToyScene, rig: &CameraRig) -> RenderedViews {
    let (h, w) = (rig.image_height, rig.image_width);
    let live: Vec<usize> = (0..scene.boxes.len())
        .filter(|&i| {
            let degenerate = scene.boxes[i].is_degenerate();
            if degenerate {
                log::warn!(
                    "skipping degenerate box {i} with size {:?}",
                    scene.boxes[i].size
                );
            }
            !degenerate
        })
        .collect();
    let style = &scene.style;
    let mut out = RenderedViews {
        images: Vec::with_capacity(rig.len()),
        masks: Vec::with_capacity(rig.len()),
        instances: Vec::with_capacity(rig.len()),
        painted: Vec::with_capacity(rig.len()),
    };
    for (k, cam) in rig.cameras.iter().enumerate() {
        let mut img = Image::filled(h, w, style.sky);
        let mut mask = vec![false; h * w];
        let mut inst = vec![-1i32; h * w];
        let mut painted = vec![false; scene.boxes.len()];
        let origin = cam.translation;
        for v in 0..h {
            for u in 0..w {
                let dir =
                    rig.direction_at(k, Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0), true);
                let mut nearest: Option<(f64, usize, usize)> = None;
                for &b in &live {
                    if let Some((t, axis)) = ray_box_entry(origin, dir, &scene.boxes[b]) {
                        if nearest.is_none_or(|(best, _, _)| t < best) {
                            nearest = Some((t, b, axis));
                        }
                    }
                }
                let color = if let Some((_, b, axis)) = nearest {
                    mask[v * w + u] = true;
                    inst[v * w + u] = b as i32;
                    painted[b] = true;
                    shade(scene.boxes[b].color, axis)
                } else if dir.z < 0.0 && origin.z > 0.0 {
                    let s = -origin.z / dir.z;
                    let (x, y) = (origin.x + s * dir.x, origin.y + s * dir.y);
                    if scene
                        .roads
                        .iter()
                        .any(|r| r.divider && r.centerline_distance(x, y) <= 0.2)
                    {
                        style.divider
                    } else if scene.roads.iter().any(|r| r.contains(x, y)) {
                        style.road
                    } else {
                        style.ground
                    }
                } else {
                    style.sky
                };
                img.set(v, u, color);
            }
        }
        out.images.push(img);
        out.masks.push(mask);
        out.instances.push(inst);
        out.painted.push(painted);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_roundtrip_is_exact() {
        let mut img = Image::filled(2, 3, [1, 2, 3]);
        img.set(1, 2, [255, 0, 128]);
        let back = Image::from_chw(2, 3, &img.to_chw());
        assert_eq!(back, img);
    }

    #[test]
    fn shaded_vehicle_colors_stay_foreground() {
        for color in [[190, 60, 60], [190, 90, 30]] {
            for axis in 0..3 {
                assert!(is_foreground(shade(color, axis)));
            }
        }
    }

    #[test]
    fn ray_inside_box_misses() {
        let b = Box3::grounded(
            0.0,
            0.0,
            [4.0, 2.0, 2.0],
            0.3,
            super::super::VehicleClass::Car,
        );
        assert!(ray_box_entry(Vector3::new(0.0, 0.0, 1.0), Vector3::x(), &b).is_none());
        let hit = ray_box_entry(Vector3::new(-10.0, 0.0, 1.0), Vector3::x(), &b);
        assert!(hit.is_some());
    }
}
