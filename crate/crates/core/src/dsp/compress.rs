use realfft::num_complex::Complex64;

/// Magnitude exponent of the spectral compression.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Magnitude scale of the spectral compression.
pub const DEFAULT_BETA: f64 = 0.15;

/// `β⁻¹ |x|^α e^{j∠x}`; phase is untouched because both parts are scaled by
/// the same positive factor.
#[inline]
pub fn compress_value(x: Complex64, alpha: f64, beta: f64) -> Complex64 {
    let mag = x.norm();
    if mag == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    x * (mag.powf(alpha - 1.0) / beta)
}

/// `(β |x|)^{1/α} e^{j∠x}`, the exact inverse of [`compress_value`].
#[inline]
pub fn decompress_value(x: Complex64, alpha: f64, beta: f64) -> Complex64 {
    let mag = x.norm();
    if mag == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    x * (beta.powf(1.0 / alpha) * mag.powf(1.0 / alpha - 1.0))
}

pub fn compress(spec: &[Complex64], alpha: f64, beta: f64) -> Vec<Complex64> {
    spec.iter().map(|&z| compress_value(z, alpha, beta)).collect()
}

pub fn decompress(spec: &[Complex64], alpha: f64, beta: f64) -> Vec<Complex64> {
    spec.iter().map(|&z| decompress_value(z, alpha, beta)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{root_rng, standard_normals};

    #[test]
    fn magnitude_and_phase() {
        let theta = 0.7f64;
        let z = Complex64::from_polar(4.0, theta);
        let c = compress_value(z, DEFAULT_ALPHA, DEFAULT_BETA);
        assert!((c.norm() - 2.0 / 0.15).abs() < 1e-12);
        assert!((c.arg() - theta).abs() < 1e-14);
        let zero = Complex64::new(0.0, 0.0);
        assert_eq!(compress_value(zero, 0.5, 0.15), zero);
        assert_eq!(decompress_value(zero, 0.5, 0.15), zero);
    }

    #[test]
    fn round_trip() {
        let mut rng = root_rng(11);
        let re = standard_normals(&mut rng, 4096);
        let im = standard_normals(&mut rng, 4096);
        let spec: Vec<Complex64> = re
            .iter()
            .zip(&im)
            .enumerate()
            .map(|(i, (&a, &b))| Complex64::new(a, b) * 10f64.powi(i as i32 % 9 - 4))
            .collect();
        let back = decompress(&compress(&spec, 0.5, 0.15), 0.5, 0.15);
        for (a, b) in spec.iter().zip(&back) {
            assert!((a - b).norm() <= 1e-9 * a.norm());
        }
        let back = decompress(&compress(&spec, 0.3, 2.0), 0.3, 2.0);
        for (a, b) in spec.iter().zip(&back) {
            assert!((a - b).norm() <= 1e-9 * a.norm());
        }
    }
}
