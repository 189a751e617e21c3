use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::yaw_rotation;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub name: String,
    /// Pixel intrinsics `K`.
    pub intrinsics: Matrix3<f64>,
    /// Camera-from-ego rotation `R`.
    pub rotation: Matrix3<f64>,
    /// Camera position in the ego frame, meters.
    pub translation: Vector3<f64>,
    k_inv: Matrix3<f64>,
}

impl Camera {
    pub fn new(
        name: &str,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let k_inv = intrinsics
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or(Error::Singular("camera intrinsics"))?;
        let orth = (rotation * rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if orth > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Rig(format!(
                "camera {name}: rotation is not orthonormal with det +1"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            intrinsics,
            rotation,
            translation,
            k_inv,
        })
    }

    /// Pinhole camera looking horizontally at `yaw` with horizontal field of
    /// view `hfov` (radians) on a `height x width` image.
    pub fn looking(
        name: &str,
        yaw: f64,
        hfov: f64,
        height: usize,
        width: usize,
        translation: Vector3<f64>,
    ) -> Self {
        let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
        let k = Matrix3::new(
            f,
            0.0,
            width as f64 / 2.0,
            0.0,
            f,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(name, k, yaw_rotation(yaw), translation).expect("well-formed pinhole")
    }

    /// `R^-1 K^-1 z`, the ego-frame ray direction through homogeneous pixel `z`.
    pub fn ray(&self, pixel: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (self.k_inv * pixel)
    }

    /// Ego point to camera-frame coordinates.
    pub fn to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.translation)
    }

    /// Camera-frame point to pixel coordinates `(u, v)`. Requires `z > 0`.
    pub fn project_camera(&self, pc: Vector3<f64>) -> (f64, f64) {
        let h = self.intrinsics * pc;
        (h.x / h.z, h.y / h.z)
    }
}

/// The `n` virtual cameras to generate plus image and latent grid sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub image_height: usize,
    pub image_width: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Camera indices in decoding ring order: front first, then alternating
    /// front/back and left/right.
    pub ring: Vec<usize>,
}

impl CameraRig {
    pub fn new(
        cameras: Vec<Camera>,
        image: (usize, usize),
        latent: (usize, usize),
        ring: Vec<usize>,
    ) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Rig("a rig needs at least one camera".into()));
        }
        if latent.0 == 0 || latent.1 == 0 || image.0 < latent.0 || image.1 < latent.1 {
            return Err(Error::Rig(format!(
                "latent grid {latent:?} does not fit image {image:?}"
            )));
        }
        let mut sorted = ring.clone();
        sorted.sort_unstable();
        if sorted != (0..cameras.len()).collect::<Vec<_>>() {
            return Err(Error::Rig(format!(
                "ring order {ring:?} is not a permutation of the {} cameras",
                cameras.len()
            )));
        }
        Ok(Self {
            cameras,
            image_height: image.0,
            image_width: image.1,
            latent_height: latent.0,
            latent_width: latent.1,
            ring,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Camera tokens per camera, `h_c * w_c`.
    pub fn tokens_per_camera(&self) -> usize {
        self.latent_height * self.latent_width
    }

    fn build(specs: &[(&str, f64)], hfov_deg: f64, ring: &[&str]) -> Self {
        let (h, w) = (32, 64);
        let cameras: Vec<Camera> = specs
            .iter()
            .map(|&(name, yaw_deg)| {
                let yaw = yaw_deg.to_radians();
                let t = Vector3::new(1.0 * yaw.cos(), 0.5 * yaw.sin(), 1.5);
                Camera::looking(name, yaw, hfov_deg.to_radians(), h, w, t)
            })
            .collect();
        let ring = ring
            .iter()
            .map(|r| specs.iter().position(|(n, _)| n == r).expect("ring name"))
            .collect();
        Self::new(cameras, (h, w), (4, 8), ring).expect("built-in rig")
    }

    /// Six cameras at 60 degree spacing, ~70 degree horizontal field of
    /// view each: full surround coverage.
    pub fn surround6() -> Self {
        Self::build(
            &[
                ("FRONT", 0.0),
                ("FRONT_LEFT", 60.0),
                ("BACK_LEFT", 120.0),
                ("BACK", 180.0),
                ("BACK_RIGHT", -120.0),
                ("FRONT_RIGHT", -60.0),
            ],
            70.0,
            &[
                "FRONT",
                "BACK",
                "FRONT_LEFT",
                "FRONT_RIGHT",
                "BACK_LEFT",
                "BACK_RIGHT",
            ],
        )
    }

    /// Four cameras at 90 degree spacing with 100 degree field of view.
    pub fn quad4() -> Self {
        Self::build(
            &[
                ("FRONT", 0.0),
                ("LEFT", 90.0),
                ("BACK", 180.0),
                ("RIGHT", -90.0),
            ],
            100.0,
            &["FRONT", "BACK", "LEFT", "RIGHT"],
        )
    }

    /// The three forward-facing cameras of [`CameraRig::surround6`].
    pub fn front3() -> Self {
        Self::build(
            &[("FRONT", 0.0), ("FRONT_LEFT", 60.0), ("FRONT_RIGHT", -60.0)],
            70.0,
            &["FRONT", "FRONT_LEFT", "FRONT_RIGHT"],
        )
    }

    /// Front and back cameras only.
    pub fn pair2() -> Self {
        Self::build(&[("FRONT", 0.0), ("BACK", 180.0)], 70.0, &["FRONT", "BACK"])
    }

    /// Built-in rig by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "surround6" => Ok(Self::surround6()),
            "quad4" => Ok(Self::quad4()),
            "front3" => Ok(Self::front3()),
            "pair2" => Ok(Self::pair2()),
            other => Err(Error::Rig(format!(
                "unknown rig preset {other:?} (surround6, quad4, front3, pair2)"
            ))),
        }
    }

    fn check_token(&self, k: usize, i: usize, j: usize) -> Result<()> {
        let checks = [
            ("camera", k, self.cameras.len()),
            ("latent row", i, self.latent_height),
            ("latent column", j, self.latent_width),
        ];
        for (what, index, size) in checks {
            if index >= size {
                return Err(Error::Index { what, index, size });
            }
        }
        Ok(())
    }

    /// Homogeneous image-plane point at the center of latent cell `(i, j)`.
    pub fn token_pixel_center(&self, k: usize, i: usize, j: usize) -> Result<Vector3<f64>> {
        self.check_token(k, i, j)?;
        let sx = self.image_width as f64 / self.latent_width as f64;
        let sy = self.image_height as f64 / self.latent_height as f64;
        Ok(Vector3::new(
            (j as f64 + 0.5) * sx,
            (i as f64 + 0.5) * sy,
            1.0,
        ))
    }

    /// Direction vector of a homogeneous pixel: `R^-1 K^-1 z + t`, or without
    /// the `+ t` term when `pure_direction` is set.
    pub fn direction_at(
        &self,
        k: usize,
        pixel: Vector3<f64>,
        pure_direction: bool,
    ) -> Vector3<f64> {
        let cam = &self.cameras[k];
        let d = cam.ray(pixel);
        if pure_direction {
            d
        } else {
            d + cam.translation
        }
    }

    /// Direction vector of latent token `(i, j)` in camera `k`.
    pub fn direction_vector(
        &self,
        k: usize,
        i: usize,
        j: usize,
        pure_direction: bool,
    ) -> Result<Vector3<f64>> {
        let z = self.token_pixel_center(k, i, j)?;
        Ok(self.direction_at(k, z, pure_direction))
    }

    /// Serialize in the key-value rig format read by [`CameraRig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::from("# bevgen camera rig\n");
        let _ = writeln!(
            out,
            "image_size = {} {}",
            self.image_height, self.image_width
        );
        let _ = writeln!(
            out,
            "latent_size = {} {}",
            self.latent_height, self.latent_width
        );
        let ring: Vec<&str> = self
            .ring
            .iter()
            .map(|&k| self.cameras[k].name.as_str())
            .collect();
        let _ = writeln!(out, "ring = {}", ring.join(" "));
        let fmt = |vals: &mut dyn Iterator<Item = f64>| {
            vals.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
        };
        for cam in &self.cameras {
            let n = &cam.name;
            let k = fmt(&mut cam.intrinsics.transpose().iter().copied());
            let r = fmt(&mut cam.rotation.transpose().iter().copied());
            let t = fmt(&mut cam.translation.iter().copied());
            let _ = writeln!(
                out,
                "camera.{n}.image_size = {} {}",
                self.image_height, self.image_width
            );
            let _ = writeln!(out, "camera.{n}.K = {k}");
            let _ = writeln!(out, "camera.{n}.R = {r}");
            let _ = writeln!(out, "camera.{n}.t = {t}");
        }
        out
    }

    /// Parse the rig format: `key = values` lines, `#` comments. Keys are
    /// `image_size`, `latent_size`, `ring` and per camera
    /// `camera.<NAME>.{K,R,t,image_size}` with 9, 9, 3 and 2 numbers.
    /// Matrices are row-major. Camera order is order of first mention.
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Default)]
        struct Pending {
            name: String,
            k: Option<Vec<f64>>,
            r: Option<Vec<f64>>,
            t: Option<Vec<f64>>,
        }
        let mut image = None;
        let mut latent = None;
        let mut ring_names: Option<Vec<String>> = None;
        let mut cams: Vec<Pending> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line_err = |msg: String| Error::RigFile {
                line: lineno + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| line_err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let numbers = |expect: usize| -> Result<Vec<f64>> {
                let vals: std::result::Result<Vec<f64>, _> =
                    value.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|e| line_err(format!("{key}: {e}")))?;
                if vals.len() != expect {
                    return Err(line_err(format!(
                        "{key}: expected {expect} numbers, got {}",
                        vals.len()
                    )));
                }
                Ok(vals)
            };
            let size_pair = |v: Vec<f64>| -> Result<(usize, usize)> {
                if v.iter().any(|x| *x < 1.0 || x.fract() != 0.0) {
                    return Err(line_err(format!("{key}: sizes must be positive integers")));
                }
                Ok((v[0] as usize, v[1] as usize))
            };
            match key {
                "image_size" => image = Some(size_pair(numbers(2)?)?),
                "latent_size" => latent = Some(size_pair(numbers(2)?)?),
                "ring" => ring_names = Some(value.split_whitespace().map(String::from).collect()),
                _ => {
                    let rest = key
                        .strip_prefix("camera.")
                        .ok_or_else(|| line_err(format!("unknown key {key}")))?;
                    let (name, field) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| line_err(format!("malformed camera key {key}")))?;
                    let idx = match cams.iter().position(|c| c.name == name) {
                        Some(i) => i,
                        None => {
                            cams.push(Pending {
                                name: name.to_string(),
                                ..Default::default()
                            });
                            cams.len() - 1
                        }
                    };
                    match field {
                        "K" => cams[idx].k = Some(numbers(9)?),
                        "R" => cams[idx].r = Some(numbers(9)?),
                        "t" => cams[idx].t = Some(numbers(3)?),
                        "image_size" => {
                            let size = size_pair(numbers(2)?)?;
                            if image.is_some_and(|i| i != size) {
                                return Err(line_err(format!(
                                    "camera {name} image size {size:?} differs from rig image size"
                                )));
                            }
                            image = Some(size);
                        }
                        other => return Err(line_err(format!("unknown camera field {other}"))),
                    }
                }
            }
        }
        let missing = |what: &str| Error::Rig(format!("missing {what}"));
        let image = image.ok_or_else(|| missing("image_size"))?;
        let latent = latent.ok_or_else(|| missing("latent_size"))?;
        let mut cameras = Vec::with_capacity(cams.len());
        for p in cams {
            let k =
                p.k.ok_or_else(|| missing(&format!("camera.{}.K", p.name)))?;
            let r =
                p.r.ok_or_else(|| missing(&format!("camera.{}.R", p.name)))?;
            let t =
                p.t.ok_or_else(|| missing(&format!("camera.{}.t", p.name)))?;
            cameras.push(Camera::new(
                &p.name,
                Matrix3::from_row_slice(&k),
                Matrix3::from_row_slice(&r),
                Vector3::from_column_slice(&t),
            )?);
        }
        let ring = match ring_names {
            Some(names) => names
                .iter()
                .map(|n| {
                    cameras
                        .iter()
                        .position(|c| &c.name == n)
                        .ok_or_else(|| Error::Rig(format!("ring names unknown camera {n}")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => (0..cameras.len()).collect(),
        };
        Self::new(cameras, image, latent, ring)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_z;

    fn identity_rig(rotation: Matrix3<f64>, t: Vector3<f64>) -> CameraRig {
        let cam = Camera::new("C", Matrix3::identity(), rotation, t).unwrap();
        CameraRig::new(vec![cam], (2, 2), (1, 1), vec![0]).unwrap()
    }

    #[test]
    fn single_token_center() {
        let rig = identity_rig(Matrix3::identity(), Vector3::zeros());
        assert_eq!(
            rig.token_pixel_center(0, 0, 0).unwrap(),
            Vector3::new(1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn large_scale_token_centers() {
        let cam = Camera::looking("F", 0.0, 1.2, 224, 400, Vector3::zeros());
        let rig = CameraRig::new(vec![cam], (224, 400), (14, 25), vec![0]).unwrap();
        assert_eq!(
            rig.token_pixel_center(0, 0, 0).unwrap(),
            Vector3::new(8.0, 8.0, 1.0)
        );
        assert_eq!(
            rig.token_pixel_center(0, 13, 24).unwrap(),
            Vector3::new(392.0, 216.0, 1.0)
        );
        assert!(matches!(
            rig.token_pixel_center(0, 14, 0),
            Err(Error::Index {
                what: "latent row",
                ..
            })
        ));
    }

    #[test]
    fn direction_vector_cases() {
        let z0 = Vector3::new(0.0, 0.0, 1.0);
        let rig = identity_rig(Matrix3::identity(), Vector3::zeros());
        assert_eq!(rig.direction_at(0, z0, false), Vector3::new(0.0, 0.0, 1.0));

        // R = Rz(90 deg): R^-1 (1, 0, 1) = (0, -1, 1), by hand.
        let rig = identity_rig(rot_z(std::f64::consts::FRAC_PI_2), Vector3::zeros());
        let d = rig.direction_at(0, Vector3::new(1.0, 0.0, 1.0), false);
        assert!((d - Vector3::new(0.0, -1.0, 1.0)).norm() < 1e-15);

        let rig = identity_rig(Matrix3::identity(), Vector3::new(5.0, 0.0, 0.0));
        assert_eq!(rig.direction_at(0, z0, false), Vector3::new(5.0, 0.0, 1.0));
        assert_eq!(rig.direction_at(0, z0, true), Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn singular_intrinsics_rejected() {
        let err = Camera::new(
            "bad",
            Matrix3::zeros(),
            Matrix3::identity(),
            Vector3::zeros(),
        );
        assert!(matches!(err, Err(Error::Singular(_))));
    }

    #[test]
    fn improper_rotation_rejected() {
        let flip = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Camera::new("bad", Matrix3::identity(), flip, Vector3::zeros()).is_err());
    }

    #[test]
    fn rig_text_roundtrip() {
        for rig in [
            CameraRig::surround6(),
            CameraRig::quad4(),
            CameraRig::front3(),
        ] {
            let parsed = CameraRig::parse(&rig.to_text()).unwrap();
            assert_eq!(parsed, rig);
        }
    }

    #[test]
    fn rig_file_errors_carry_line_numbers() {
        let text = "image_size = 32 64\nlatent_size = 4\n";
        match CameraRig::parse(text) {
            Err(Error::RigFile { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn forward_camera_center_ray_points_forward() {
        let rig = CameraRig::surround6();
        let center = Vector3::new(32.0, 16.0, 1.0);
        let d = rig.direction_at(0, center, true);
        assert!((d.normalize() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }
}
