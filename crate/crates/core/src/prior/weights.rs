use crate::geometry::CameraRig;
use crate::scenegen::{render_views, ToyScene};

/// Per-token loss weights from per-camera foreground masks (`H x W`,
/// row-major): `w_fg` where any pixel of the token's cell is foreground,
/// else 1.
pub fn weights_from_masks(masks: &[Vec<bool>], rig: &CameraRig, w_fg: f64) -> Vec<Vec<f64>> {
    let (h, w) = (rig.latent_height, rig.latent_width);
    let (ph, pw) = (rig.image_height / h, rig.image_width / w);
    masks
        .iter()
        .map(|mask| {
            let mut out = vec![1.0; h * w];
            for (v, row) in mask.chunks(rig.image_width).enumerate() {
                for (u, &m) in row.iter().enumerate() {
                    if m {
                        out[(v / ph).min(h - 1) * w + (u / pw).min(w - 1)] = w_fg;
                    }
                }
            }
            out
        })
        .collect()
}

/// Weights of the tokens covered by the projected boxes of `scene`.
pub fn foreground_weights(scene: &ToyScene, rig: &CameraRig, w_fg: f64) -> Vec<Vec<f64>> {
    weights_from_masks(&render_views(scene, rig).masks, rig, w_fg)
}
