//! Forward-looking imaging-sonar geometry.
//!
//! The sensor insonifies a wedge of water and reports, per detection, a
//! fan-image pixel. Geometry chain, with bearing `theta` (azimuth, about +z)
//! and elevation `phi`:
//!
//! ```text
//! Euclidean   P = r * (cos(phi)cos(theta), cos(phi)sin(theta), sin(phi))
//! pixel       u = W/2 + (H*r/r_max) sin(theta),  v = H - (H*r/r_max) cos(theta)
//! planar      P~ = (r cos(theta), r sin(theta), 1)
//! ```
//!
//! The elevation of a return is not measured; the planar form assumes
//! `phi = 0` and carries a homogeneous 1 in place of the unknown z. The
//! range extracted from a pixel is the slant range, so a target at elevation
//! `phi` lands in the plane with a radial error of `r * (1 - cos(phi))`,
//! second order in `phi` and negligible inside the narrow elevation fan of
//! this sensor class.
//!
//! Pixel coordinates are continuous (sub-pixel detections); `u` grows with
//! bearing to starboard and `v = H` is the sensor face.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SonarModelError {
    #[error("invalid sonar intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("pixel maps to range {range:.3} m beyond r_max {r_max:.3} m")]
    RangeExceeded { range: f64, r_max: f64 },
}

/// Fan geometry of one imaging sonar.
///
/// `image_height` doubles as the number of range bins, so
/// `range_resolution = r_max / image_height`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SonarIntrinsics {
    /// Bearing field of view, radians.
    pub theta_min: f64,
    pub theta_max: f64,
    /// Elevation field of view, radians.
    pub phi_min: f64,
    pub phi_max: f64,
    /// Maximum range, metres.
    pub r_max: f64,
    /// Fan-image width, pixels.
    pub image_width: u32,
    /// Fan-image height, pixels; also the range-bin count.
    pub image_height: u32,
}

impl SonarIntrinsics {
    pub fn validate(&self) -> Result<(), SonarModelError> {
        let fail = |msg: String| Err(SonarModelError::InvalidIntrinsics(msg));
        if !(self.r_max > 0.0) {
            return fail(format!("r_max must be positive, got {}", self.r_max));
        }
        if self.theta_min >= self.theta_max {
            return fail(format!(
                "bearing bounds out of order: [{}, {}]",
                self.theta_min, self.theta_max
            ));
        }
        if self.phi_min >= self.phi_max {
            return fail(format!(
                "elevation bounds out of order: [{}, {}]",
                self.phi_min, self.phi_max
            ));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return fail(format!(
                "image must be non-empty, got {}x{}",
                self.image_width, self.image_height
            ));
        }
        Ok(())
    }

    /// Metres of range spanned by one image row.
    pub fn range_resolution(&self) -> f64 {
        self.r_max / self.image_height as f64
    }

    /// Slant range encoded by a fan-image pixel. Errors when the pixel lies
    /// beyond the maximum range arc.
    pub fn pixel_to_range(&self, u: f64, v: f64) -> Result<f64, SonarModelError> {
        let du = u - 0.5 * self.image_width as f64;
        let dv = self.image_height as f64 - v;
        let range = du.hypot(dv) * self.r_max / self.image_height as f64;
        if range > self.r_max * (1.0 + 1e-12) {
            return Err(SonarModelError::RangeExceeded {
                range,
                r_max: self.r_max,
            });
        }
        Ok(range)
    }

    /// Slant range and bearing encoded by a fan-image pixel.
    pub fn pixel_to_polar(&self, u: f64, v: f64) -> Result<(f64, f64), SonarModelError> {
        let range = self.pixel_to_range(u, v)?;
        let du = u - 0.5 * self.image_width as f64;
        let dv = self.image_height as f64 - v;
        let bearing = du.atan2(dv);
        Ok((range, bearing))
    }

    /// Fan-image pixel of a polar return; inverse of [`pixel_to_polar`].
    ///
    /// [`pixel_to_polar`]: SonarIntrinsics::pixel_to_polar
    pub fn polar_to_pixel(&self, range: f64, bearing: f64) -> Vector2<f64> {
        let rho = self.image_height as f64 * range / self.r_max;
        Vector2::new(
            0.5 * self.image_width as f64 + rho * bearing.sin(),
            self.image_height as f64 - rho * bearing.cos(),
        )
    }

    /// Zero-elevation interpretation of a polar return, homogeneous form
    /// `(r cos(theta), r sin(theta), 1)`.
    pub fn planar_project(&self, range: f64, bearing: f64) -> Result<Vector3<f64>, SonarModelError> {
        if range > self.r_max * (1.0 + 1e-12) {
            return Err(SonarModelError::RangeExceeded {
                range,
                r_max: self.r_max,
            });
        }
        Ok(Vector3::new(
            range * bearing.cos(),
            range * bearing.sin(),
            1.0,
        ))
    }

    /// Whether a point in the sonar frame falls inside the insonified wedge.
    /// The sensor origin itself counts as inside.
    pub fn in_fov(&self, p: &Vector3<f64>) -> bool {
        let (r, theta, phi) = euclidean_to_spherical(p);
        if r == 0.0 {
            return true;
        }
        r <= self.r_max
            && theta >= self.theta_min
            && theta <= self.theta_max
            && phi >= self.phi_min
            && phi <= self.phi_max
    }

    /// Projects a sonar-frame point to the detection the sensor would report:
    /// slant range `|p|` and bearing `atan2(y, x)`, elevation collapsed.
    /// Returns `None` outside the field of view.
    pub fn point_from_euclidean(&self, p: &Vector3<f64>) -> Option<SonarPoint> {
        if !self.in_fov(p) {
            return None;
        }
        let range = p.norm();
        let bearing = p.y.atan2(p.x);
        Some(SonarPoint::from_polar(self, range, bearing))
    }
}

/// Spherical (range, bearing, elevation) to sonar-frame Euclidean.
pub fn spherical_to_euclidean(range: f64, bearing: f64, elevation: f64) -> Vector3<f64> {
    Vector3::new(
        range * elevation.cos() * bearing.cos(),
        range * elevation.cos() * bearing.sin(),
        range * elevation.sin(),
    )
}

/// Sonar-frame Euclidean to spherical; the origin maps to all zeros.
pub fn euclidean_to_spherical(p: &Vector3<f64>) -> (f64, f64, f64) {
    let r = p.norm();
    if r == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    (r, p.y.atan2(p.x), (p.z / r).asin())
}

/// One sonar detection, carried in every representation downstream consumers
/// need. The planar form is derived from the polar one on demand, so the two
/// can never disagree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SonarPoint {
    /// Continuous fan-image coordinates.
    pub pixel: Vector2<f64>,
    /// Slant range, metres.
    pub range: f64,
    /// Bearing, radians.
    pub bearing: f64,
}

impl SonarPoint {
    pub fn from_polar(intr: &SonarIntrinsics, range: f64, bearing: f64) -> Self {
        SonarPoint {
            pixel: intr.polar_to_pixel(range, bearing),
            range,
            bearing,
        }
    }

    pub fn from_pixel(intr: &SonarIntrinsics, u: f64, v: f64) -> Result<Self, SonarModelError> {
        let (range, bearing) = intr.pixel_to_polar(u, v)?;
        Ok(SonarPoint {
            pixel: Vector2::new(u, v),
            range,
            bearing,
        })
    }

    /// Homogeneous zero-elevation form `(r cos(theta), r sin(theta), 1)`.
    pub fn planar(&self) -> Vector3<f64> {
        Vector3::new(
            self.range * self.bearing.cos(),
            self.range * self.bearing.sin(),
            1.0,
        )
    }

    /// In-plane coordinates only.
    pub fn planar_xy(&self) -> Vector2<f64> {
        Vector2::new(
            self.range * self.bearing.cos(),
            self.range * self.bearing.sin(),
        )
    }
}
