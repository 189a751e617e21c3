//! Procedural toy driving scenes, their BEV rasterization and an exact
//! pinhole renderer.
//!
//! Scenes are a few straight or gently bent roads plus box-shaped vehicles.
//! Vehicles are saturated red-family colors so a simple color threshold
//! recovers the foreground from a rendered or generated image.

mod raster;
mod render;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use raster::rasterize_bev;
pub use render::{is_foreground, ray_box_entry, render_views, Image, RenderedViews};

use crate::geometry::{BevGeometry, BevLayout, CameraRig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VehicleClass {
    Car,
    Truck,
}

/// Oriented box resting on the ground plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Box3 {
    /// Geometric center; `center.z` is half the height for grounded boxes.
    pub center: Vector3<f64>,
    /// Length (along heading), width and height in meters.
    pub size: [f64; 3],
    /// Heading about ego z, radians.
    pub yaw: f64,
    pub class: VehicleClass,
    pub color: [u8; 3],
}

impl Box3 {
    pub fn grounded(x: f64, y: f64, size: [f64; 3], yaw: f64, class: VehicleClass) -> Self {
        Self {
            center: Vector3::new(x, y, size[2] / 2.0),
            size,
            yaw,
            class,
            color: [220, 30, 30],
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.size.iter().any(|&s| !(s > 0.0))
    }

    /// Point in the box frame (x along heading).
    pub fn to_local(&self, p: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Whether the ground point `(x, y)` lies in the closed footprint.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let l = self.to_local(Vector3::new(x, y, self.center.z));
        l.x.abs() <= self.size[0] / 2.0 && l.y.abs() <= self.size[1] / 2.0
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (s, c) = self.yaw.sin_cos();
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut out = [Vector3::zeros(); 8];
        for (n, o) in out.iter_mut().enumerate() {
            let lx = if n & 1 == 0 { -half[0] } else { half[0] };
            let ly = if n & 2 == 0 { -half[1] } else { half[1] };
            let lz = if n & 4 == 0 { -half[2] } else { half[2] };
            *o = self.center + Vector3::new(c * lx - s * ly, s * lx + c * ly, lz);
        }
        out
    }
}

/// Road centerline polyline with a paved width.
#[derive(Clone, Debug, PartialEq)]
pub struct Road {
    pub points: Vec<[f64; 2]>,
    pub width: f64,
    pub divider: bool,
}

impl Road {
    /// Distance from `(x, y)` to the centerline polyline.
    pub fn centerline_distance(&self, x: f64, y: f64) -> f64 {
        let mut best = f64::INFINITY;
        for p in &self.points {
            best = best.min((p[0] - x).hypot(p[1] - y));
        }
        for seg in self.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                continue;
            }
            let s = ((x - a[0]) * dx + (y - a[1]) * dy) / len2;
            if !(0.0..=1.0).contains(&s) {
                continue;
            }
            let (px, py) = (a[0] + s * dx - x, a[1] + s * dy - y);
            best = best.min(px.hypot(py));
        }
        best
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.centerline_distance(x, y) <= self.width / 2.0
    }
}

/// Scene-wide colors.
#[derive(Clone, Debug, PartialEq)]
pub struct Style {
    pub name: &'static str,
    pub sky: [u8; 3],
    pub ground: [u8; 3],
    pub road: [u8; 3],
    pub divider: [u8; 3],
}

/// The discrete style palette scenes draw from.
pub const STYLES: [Style; 4] = [
    Style {
        name: "day",
        sky: [120, 180, 235],
        ground: [80, 140, 70],
        road: [95, 95, 100],
        divider: [235, 225, 120],
    },
    Style {
        name: "overcast",
        sky: [185, 190, 195],
        ground: [110, 125, 100],
        road: [75, 78, 80],
        divider: [220, 220, 220],
    },
    Style {
        name: "night",
        sky: [20, 25, 55],
        ground: [30, 45, 35],
        road: [50, 50, 58],
        divider: [160, 150, 90],
    },
    Style {
        name: "desert",
        sky: [160, 205, 235],
        ground: [195, 180, 135],
        road: [120, 110, 100],
        divider: [250, 250, 250],
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub seed: u64,
    pub roads: Vec<Road>,
    pub boxes: Vec<Box3>,
    pub style: Style,
}

/// Knobs for [`sample_scene`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// 0 gives a road-only scene. Otherwise the box count is drawn from
    /// `[min_boxes, min_boxes + ceil(difficulty * (max_boxes - min_boxes))]`.
    pub difficulty: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Half side of the square boxes must stay inside, meters.
    pub half_extent: f64,
    /// Boxes keep at least this distance from the ego origin.
    pub min_range: f64,
    /// Probability of a crossing road.
    pub cross_road: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            difficulty: 1.0,
            min_boxes: 1,
            max_boxes: 6,
            half_extent: 38.0,
            min_range: 7.0,
            cross_road: 0.4,
        }
    }
}

fn vehicle_color(rng: &mut ChaCha8Rng, class: VehicleClass) -> [u8; 3] {
    let r = rng.random_range(190..=250u8);
    let g = rng.random_range(10..=60u8);
    let b = rng.random_range(10..=60u8);
    match class {
        VehicleClass::Car => [r, g, b],
        VehicleClass::Truck => [r, g.saturating_add(30), b / 2],
    }
}

/// Deterministically sample a scene from `seed`.
pub fn sample_scene(seed: u64, config: &SceneConfig) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = STYLES[rng.random_range(0..STYLES.len())].clone();

    let heading: f64 = rng.random_range(-0.25..0.25);
    let offset: f64 = rng.random_range(-6.0..6.0);
    let bend: f64 = rng.random_range(-10.0..10.0);
    let main = Road {
        points: vec![
            [-70.0, offset - 70.0 * heading.tan()],
            [0.0, offset],
            [70.0, offset + 70.0 * heading.tan() + bend],
        ],
        width: rng.random_range(10.0..14.0),
        divider: rng.random_bool(0.8),
    };
    let mut roads = vec![main];
    if rng.random_bool(config.cross_road) {
        let x0 = rng.random_range(-25.0..25.0);
        roads.push(Road {
            points: vec![[x0, -70.0], [x0 + rng.random_range(-8.0..8.0), 70.0]],
            width: rng.random_range(8.0..11.0),
            divider: false,
        });
    }

    let count = if config.difficulty <= 0.0 {
        0
    } else {
        let span = config.max_boxes.saturating_sub(config.min_boxes) as f64;
        let hi = config.min_boxes + (config.difficulty.min(1.0) * span).ceil() as usize;
        rng.random_range(config.min_boxes..=hi)
    };
    let mut boxes: Vec<Box3> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 10_000 {
        attempts += 1;
        let class = if rng.random_bool(0.25) {
            VehicleClass::Truck
        } else {
            VehicleClass::Car
        };
        let size = match class {
            VehicleClass::Car => [
                rng.random_range(4.4..5.2),
                rng.random_range(3.6..4.0),
                rng.random_range(1.6..2.0),
            ],
            VehicleClass::Truck => [
                rng.random_range(7.0..9.5),
                rng.random_range(3.8..4.2),
                rng.random_range(3.0..3.8),
            ],
        };
        let road = &roads[rng.random_range(0..roads.len())];
        let (x, y, yaw) = if rng.random_bool(0.85) {
            // On a lane, aligned with the road.
            let seg = rng.random_range(0..road.points.len() - 1);
            let (a, b) = (road.points[seg], road.points[seg + 1]);
            let s: f64 = rng.random();
            let dir = ((b[1] - a[1]).atan2(b[0] - a[0])).rem_euclid(std::f64::consts::TAU);
            let lane = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = lane * road.width / 4.0;
            let (sn, cs) = dir.sin_cos();
            let x = a[0] + s * (b[0] - a[0]) - sn * lateral;
            let y = a[1] + s * (b[1] - a[1]) + cs * lateral;
            let yaw = if lane > 0.0 {
                dir
            } else {
                dir + std::f64::consts::PI
            };
            (x, y, yaw)
        } else {
            let h = config.half_extent;
            (
                rng.random_range(-h..h),
                rng.random_range(-h..h),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        let mut candidate = Box3::grounded(x, y, size, yaw, class);
        candidate.color = vehicle_color(&mut rng, class);
        let inside = candidate
            .corners()
            .iter()
            .all(|c| c.x.abs() < config.half_extent && c.y.abs() < config.half_extent);
        let radius = |b: &Box3| (b.size[0].hypot(b.size[1])) / 2.0;
        let far_from_ego = (x * x + y * y).sqrt() - radius(&candidate) >= config.min_range;
        let clear = boxes.iter().all(|o| {
            let d = ((o.center.x - x).powi(2) + (o.center.y - y).powi(2)).sqrt();
            d > radius(o) + radius(&candidate) + 0.5
        });
        if inside && far_from_ego && clear {
            boxes.push(candidate);
        }
    }
    ToyScene {
        seed,
        roads,
        boxes,
        style,
    }
}

/// A scene rendered for one rig: BEV grid, images and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub bev: BevLayout,
    pub views: RenderedViews,
}

pub fn render_sample(scene: &ToyScene, rig: &CameraRig, bev: &BevGeometry) -> RenderedSample {
    RenderedSample {
        bev: rasterize_bev(scene, bev),
        views: render_views(scene, rig),
    }
}
