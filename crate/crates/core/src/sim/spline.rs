//! Cubic Hermite interpolation through waypoint samples, with analytic
//! first and second derivatives.
//!
//! Tangents are Catmull-Rom (centered differences over non-uniform knots),
//! which keeps the curve C1: positions and velocities are continuous,
//! accelerations may jump at knots. The end tangents are zero, so every
//! trajectory starts and ends at rest and joins the constant hold outside
//! the knot span without a velocity step; estimators may therefore assume
//! a stationary start. The IMU synthesizer samples the derivatives
//! directly, so the generated inertial data is exactly consistent with the
//! sampled trajectory rather than with a finite-difference shadow of it.

/// One scalar channel interpolated over time.
#[derive(Clone, Debug)]
pub(crate) struct CubicTrack {
    times: Vec<f64>,
    values: Vec<f64>,
    tangents: Vec<f64>,
}

impl CubicTrack {
    /// `times` must be strictly increasing and at least two entries long
    /// (the scenario validator guarantees both).
    pub fn new(times: &[f64], values: &[f64]) -> Self {
        assert_eq!(times.len(), values.len());
        assert!(times.len() >= 2);
        let n = times.len();
        // End tangents stay zero: rest at both ends.
        let mut tangents = vec![0.0; n];
        for k in 1..n - 1 {
            tangents[k] = (values[k + 1] - values[k - 1]) / (times[k + 1] - times[k - 1]);
        }
        CubicTrack {
            times: times.to_vec(),
            values: values.to_vec(),
            tangents,
        }
    }

    /// Value, first and second time derivative at `t`. Outside the knot
    /// span the track holds its endpoint value with zero derivatives; the
    /// end knots themselves evaluate the adjacent segment (one-sided
    /// limits), so the IMU synthesizer sees the boundary acceleration.
    pub fn sample(&self, t: f64) -> (f64, f64, f64) {
        let n = self.times.len();
        if t < self.times[0] {
            return (self.values[0], 0.0, 0.0);
        }
        if t > self.times[n - 1] {
            return (self.values[n - 1], 0.0, 0.0);
        }
        let seg = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(exact) => exact.min(n - 2),
            Err(insertion) => insertion - 1,
        };

        let t0 = self.times[seg];
        let t1 = self.times[seg + 1];
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (p0, p1) = (self.values[seg], self.values[seg + 1]);
        let (m0, m1) = (self.tangents[seg] * h, self.tangents[seg + 1] * h);

        let s2 = s * s;
        let s3 = s2 * s;
        let value = (2.0 * s3 - 3.0 * s2 + 1.0) * p0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * p1
            + (s3 - s2) * m1;
        let d_ds = (6.0 * s2 - 6.0 * s) * p0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (6.0 * s - 6.0 * s2) * p1
            + (3.0 * s2 - 2.0 * s) * m1;
        let d2_ds2 = (12.0 * s - 6.0) * p0
            + (6.0 * s - 4.0) * m0
            + (6.0 - 12.0 * s) * p1
            + (6.0 * s - 2.0) * m1;
        (value, d_ds / h, d2_ds2 / (h * h))
    }
}
