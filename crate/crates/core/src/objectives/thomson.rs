//! Thomson problem energy in a sin/cos parameterization.
//!
//! Each electron takes four coordinates `(a, b, c, d)`. The polar angle is
//! `atan2(a, b)` and the azimuth `atan2(c, d)`, so any real vector maps to a
//! valid configuration on the unit sphere.

pub const COINCIDENT_DISTANCE: f64 = 1e-12;

fn angle(s: f64, c: f64) -> f64 {
    if s == 0.0 && c == 0.0 {
        0.0
    } else {
        s.atan2(c)
    }
}

/// Unit-sphere positions recovered from a parameter vector of length `4N`.
pub fn electron_positions(x: &[f64]) -> Vec<[f64; 3]> {
    x.chunks_exact(4)
        .map(|e| {
            let theta = angle(e[0], e[1]);
            let phi = angle(e[2], e[3]);
            let (st, ct) = theta.sin_cos();
            let (sp, cp) = phi.sin_cos();
            [st * cp, st * sp, ct]
        })
        .collect()
}

/// Coulomb energy `Σ_{i<j} 1/‖r_i − r_j‖` of explicit positions.
pub fn pair_energy(r: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            let d2 = (r[i][0] - r[j][0]).powi(2) + (r[i][1] - r[j][1]).powi(2) + (r[i][2] - r[j][2]).powi(2);
            e += 1.0 / d2.sqrt().max(COINCIDENT_DISTANCE);
        }
    }
    e
}

/// Energy of the configuration encoded by `x` (trailing coordinates that do
/// not fill a block of four are ignored).
pub fn thomson_energy(x: &[f64]) -> f64 {
    pair_energy(&electron_positions(x))
}

/// Parameter block `(sin θ, cos θ, sin φ, cos φ)` of a unit vector.
pub fn encode_position(r: [f64; 3]) -> [f64; 4] {
    let theta = r[2].clamp(-1.0, 1.0).acos();
    let phi = r[1].atan2(r[0]);
    [theta.sin(), theta.cos(), phi.sin(), phi.cos()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antipodal_pair() {
        let x = [0.0, 1.0, 0.3, 0.2, 0.0, -1.0, -0.7, 0.1];
        assert!((thomson_energy(&x) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coincident_pair_is_clamped() {
        let x = [0.2, 0.5, 0.1, 0.1, 0.2, 0.5, 0.1, 0.1];
        assert_eq!(thomson_energy(&x), 1.0 / COINCIDENT_DISTANCE);
    }

    #[test]
    fn zero_pairs_map_to_north_pole() {
        let r = electron_positions(&[0.0; 4]);
        assert_eq!(r[0], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_round_trip() {
        let r = [0.48, -0.6, 0.64];
        let back = electron_positions(&encode_position(r))[0];
        for k in 0..3 {
            assert!((back[k] - r[k]).abs() < 1e-12);
        }
    }
}
