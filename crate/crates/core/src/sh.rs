//! Real spherical harmonics basis for view directions.

use crate::real::Real;

/// Number of coefficients for a basis with `degree` bands (degree 4 → 16).
pub fn sh_dim(degree: usize) -> usize {
    degree * degree
}

/// Evaluates the first `degree²` real SH basis functions at unit direction `d`.
pub fn sh_encode<R: Real>(d: [R; 3], degree: usize, out: &mut Vec<R>) {
    assert!((1..=4).contains(&degree), "SH degree must be in 1..=4");
    let [x, y, z] = d.map(|v| v.f64());
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    let all = [
        0.282_094_791_773_878_14,
        -0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        -0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * xy,
        -1.092_548_430_592_079_2 * yz,
        0.946_174_695_757_560_1 * zz - 0.315_391_565_252_520_05,
        -1.092_548_430_592_079_2 * xz,
        0.546_274_215_296_039_6 * (xx - yy),
        0.590_043_589_926_643_5 * y * (-3.0 * xx + yy),
        2.890_611_442_640_554 * xy * z,
        0.457_045_799_464_465_8 * y * (1.0 - 5.0 * zz),
        0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0),
        0.457_045_799_464_465_8 * x * (1.0 - 5.0 * zz),
        1.445_305_721_320_277 * z * (xx - yy),
        0.590_043_589_926_643_5 * x * (-xx + 3.0 * yy),
    ];
    out.extend(all[..sh_dim(degree)].iter().map(|&v| R::c(v)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal_on_the_sphere() {
        // Monte-Carlo-free check: Fibonacci-sphere quadrature.
        let n = 20000;
        let mut gram = [[0.0f64; 16]; 16];
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let mut v = Vec::new();
            sh_encode([r * phi.cos(), r * phi.sin(), z], 4, &mut v);
            for a in 0..16 {
                for b in 0..16 {
                    gram[a][b] += v[a] * v[b] * 4.0 * std::f64::consts::PI / n as f64;
                }
            }
        }
        for a in 0..16 {
            for b in 0..16 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((gram[a][b] - want).abs() < 1e-3, "({a},{b}) = {}", gram[a][b]);
            }
        }
    }
}
