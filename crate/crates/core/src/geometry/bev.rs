use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    /// Mask channel holding only 0 or 1.
    Binary,
    /// Real-valued channel trained with a squared-error loss.
    Continuous,
}

/// Metric shape of an ego-centered square BEV grid and its token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGeometry {
    /// Grid side `H_b` in cells.
    pub cells: usize,
    pub meters_per_cell: f64,
    /// Latent grid side `h_b`.
    pub latent: usize,
    pub channels: Vec<(String, ChannelKind)>,
}

impl BevGeometry {
    /// 32x32 cells over 80 m, 8x8 tokens, road/divider/car/truck masks plus
    /// normalized vehicle height.
    pub fn desk() -> Self {
        let b = ChannelKind::Binary;
        Self {
            cells: 32,
            meters_per_cell: 2.5,
            latent: 8,
            channels: vec![
                ("road".into(), b),
                ("divider".into(), b),
                ("car".into(), b),
                ("truck".into(), b),
                ("height".into(), ChannelKind::Continuous),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.cells == 0 || !self.cells.is_multiple_of(self.latent) {
            return Err(Error::Config(format!(
                "bev latent size {} must divide grid size {}",
                self.latent, self.cells
            )));
        }
        if !(self.meters_per_cell > 0.0) {
            return Err(Error::Config("bev meters_per_cell must be positive".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("bev needs at least one channel".into()));
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|(n, _)| n == name)
    }

    /// Side length of the grid in meters.
    pub fn extent(&self) -> f64 {
        self.cells as f64 * self.meters_per_cell
    }

    pub fn tokens(&self) -> usize {
        self.latent * self.latent
    }

    /// Ego-frame `(x, y)` of the center of full-resolution cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let half = self.extent() / 2.0;
        [
            (row as f64 + 0.5) * self.meters_per_cell - half,
            (col as f64 + 0.5) * self.meters_per_cell - half,
        ]
    }

    /// Ego-frame `(x, y)` of the center of latent cell `(x, y)`.
    pub fn bev_cell_coordinate(&self, x: usize, y: usize) -> Result<[f64; 2]> {
        for index in [x, y] {
            if index >= self.latent {
                return Err(Error::Index {
                    what: "bev latent cell",
                    index,
                    size: self.latent,
                });
            }
        }
        let step = self.meters_per_cell * (self.cells / self.latent) as f64;
        let half = self.extent() / 2.0;
        Ok([
            (x as f64 + 0.5) * step - half,
            (y as f64 + 0.5) * step - half,
        ])
    }
}

/// A rasterized layout: channel-major `[C, H_b, H_b]` values.
#[derive(Clone, Debug, PartialEq)]
pub struct BevLayout {
    pub geometry: BevGeometry,
    pub data: Vec<f64>,
}

impl BevLayout {
    pub fn empty(geometry: BevGeometry) -> Self {
        let n = geometry.num_channels() * geometry.cells * geometry.cells;
        Self {
            geometry,
            data: vec![0.0; n],
        }
    }

    pub fn from_data(geometry: BevGeometry, data: Vec<f64>) -> Result<Self> {
        let n = geometry.num_channels() * geometry.cells * geometry.cells;
        if data.len() != n {
            return Err(Error::Config(format!(
                "bev data has {} values, geometry needs {n}",
                data.len()
            )));
        }
        let layout = Self { geometry, data };
        for (c, (name, kind)) in layout.geometry.channels.iter().enumerate() {
            if *kind == ChannelKind::Binary
                && layout.channel_data(c).iter().any(|&v| v != 0.0 && v != 1.0)
            {
                return Err(Error::Config(format!(
                    "binary channel {name} has values outside {{0,1}}"
                )));
            }
        }
        Ok(layout)
    }

    fn offset(&self, c: usize, row: usize, col: usize) -> usize {
        let h = self.geometry.cells;
        (c * h + row) * h + col
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.offset(c, row, col)]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        let o = self.offset(c, row, col);
        self.data[o] = value;
    }

    pub fn channel_data(&self, c: usize) -> &[f64] {
        let n = self.geometry.cells * self.geometry.cells;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn bev_cell_coordinate(&self, x: usize, y: usize) -> Result<[f64; 2]> {
        self.geometry.bev_cell_coordinate(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_grid_center_is_ego() {
        let g = BevGeometry {
            cells: 9,
            meters_per_cell: 1.0,
            latent: 3,
            channels: BevGeometry::desk().channels,
        };
        assert_eq!(g.bev_cell_coordinate(1, 1).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn eighty_meter_grid_corners() {
        let g = BevGeometry {
            cells: 256,
            meters_per_cell: 80.0 / 256.0,
            latent: 16,
            channels: BevGeometry::desk().channels,
        };
        // (index + 0.5) * 5 m - 40 m
        assert_eq!(g.bev_cell_coordinate(0, 0).unwrap(), [-37.5, -37.5]);
        assert_eq!(g.bev_cell_coordinate(15, 15).unwrap(), [37.5, 37.5]);
        assert!(g.bev_cell_coordinate(16, 0).is_err());
    }

    #[test]
    fn binary_channels_are_checked() {
        let g = BevGeometry::desk();
        let mut data = vec![0.0; 5 * 32 * 32];
        data[4 * 1024] = 0.7;
        assert!(BevLayout::from_data(g.clone(), data.clone()).is_ok());
        data[0] = 0.5;
        assert!(BevLayout::from_data(g, data).is_err());
    }
}
