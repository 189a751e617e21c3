use super::{ToyScene, VehicleClass};
use crate::geometry::{BevGeometry, BevLayout};

/// Vehicle heights are stored divided by this many meters.
pub const HEIGHT_SCALE: f64 = 4.0;

/// Rasterize a scene onto the BEV grid by sampling cell centers.
///
/// Road and vehicle channels hold cells whose center lies inside the
/// polygon. Dividers are thin, so they are drawn one cell wide: a cell is
/// set when the divider line passes within half a cell of its center. The
/// height channel holds the normalized height of the tallest vehicle over
/// each cell. Channels the geometry does not declare are skipped.
pub fn rasterize_bev(scene: &ToyScene, geometry: &BevGeometry) -> BevLayout {
    let mut layout = BevLayout::empty(geometry.clone());
    let road = geometry.channel("road");
    let divider = geometry.channel("divider");
    let car = geometry.channel("car");
    let truck = geometry.channel("truck");
    let height = geometry.channel("height");
    let half_cell = geometry.meters_per_cell / 2.0;
    for row in 0..geometry.cells {
        for col in 0..geometry.cells {
            let [x, y] = geometry.cell_center(row, col);
            if let Some(c) = road {
                if scene.roads.iter().any(|r| r.contains(x, y)) {
                    layout.set(c, row, col, 1.0);
                }
            }
            if let Some(c) = divider {
                let hit = scene
                    .roads
                    .iter()
                    .any(|r| r.divider && r.centerline_distance(x, y) <= half_cell);
                if hit {
                    layout.set(c, row, col, 1.0);
                }
            }
            for b in scene.boxes.iter().filter(|b| !b.is_degenerate()) {
                if !b.footprint_contains(x, y) {
                    continue;
                }
                let channel = match b.class {
                    VehicleClass::Car => car,
                    VehicleClass::Truck => truck,
                };
                if let Some(c) = channel {
                    layout.set(c, row, col, 1.0);
                }
                if let Some(c) = height {
                    let h = (b.size[2] / HEIGHT_SCALE).min(1.0);
                    if h > layout.get(c, row, col) {
                        layout.set(c, row, col, h);
                    }
                }
            }
        }
    }
    layout
}
