use std::sync::Arc;

use crate::registry::Registry;

/// Camera token `(camera, row, column)`.
pub type CameraToken = (usize, usize, usize);

/// Emission order of camera tokens.
pub trait DecodeOrder: Send + Sync {
    fn name(&self) -> &'static str;

    /// All `n * h * w` camera tokens in emission order. `ring` lists the
    /// camera indices starting with the front camera.
    fn order(&self, h: usize, w: usize, ring: &[usize]) -> Vec<CameraToken>;
}

/// Top row first; within a row, columns fan out from the center
/// (`0, +1, -1, +2, ...` around `w / 2`) and each column is emitted for
/// every camera in ring order before moving outward.
pub struct CenterOut;

impl DecodeOrder for CenterOut {
    fn name(&self) -> &'static str {
        "center_out"
    }

    fn order(&self, h: usize, w: usize, ring: &[usize]) -> Vec<CameraToken> {
        let c0 = (w / 2) as isize;
        let mut cols = Vec::with_capacity(w);
        cols.push(c0);
        for o in 1..=w as isize {
            for col in [c0 + o, c0 - o] {
                if (0..w as isize).contains(&col) {
                    cols.push(col);
                }
            }
        }
        let mut out = Vec::with_capacity(ring.len() * h * w);
        for i in 0..h {
            for &j in &cols {
                for &k in ring {
                    out.push((k, i, j as usize));
                }
            }
        }
        out
    }
}

/// One camera after another in ring order, each in raster order.
pub struct Raster;

impl DecodeOrder for Raster {
    fn name(&self) -> &'static str {
        "raster"
    }

    fn order(&self, h: usize, w: usize, ring: &[usize]) -> Vec<CameraToken> {
        let mut out = Vec::with_capacity(ring.len() * h * w);
        for &k in ring {
            for i in 0..h {
                for j in 0..w {
                    out.push((k, i, j));
                }
            }
        }
        out
    }
}

/// Registry holding `center_out` and `raster`.
pub fn decode_orders() -> Registry<dyn DecodeOrder> {
    let mut reg: Registry<dyn DecodeOrder> = Registry::new("decode order");
    reg.register("center_out", Arc::new(CenterOut));
    reg.register("raster", Arc::new(Raster));
    reg
}

/// The center-out permutation for `n` cameras given in ring order.
pub fn center_out_order(h: usize, w: usize, ring: &[usize]) -> Vec<CameraToken> {
    CenterOut.order(h, w, ring)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cameras_one_row() {
        // Ring (F = 0, B = 1), center column 1.
        let got = center_out_order(1, 3, &[0, 1]);
        let want = vec![
            (0, 0, 1),
            (1, 0, 1),
            (0, 0, 2),
            (1, 0, 2),
            (0, 0, 0),
            (1, 0, 0),
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn single_token() {
        assert_eq!(center_out_order(1, 1, &[0]), vec![(0, 0, 0)]);
    }

    #[test]
    fn even_width_starts_right_of_center() {
        let got = center_out_order(1, 4, &[0]);
        assert_eq!(got, vec![(0, 0, 2), (0, 0, 3), (0, 0, 1), (0, 0, 0)]);
    }

    #[test]
    fn registry_resolves_names() {
        let reg = decode_orders();
        assert_eq!(reg.get("raster").unwrap().name(), "raster");
        assert!(reg.get("spiral").is_err());
    }
}
