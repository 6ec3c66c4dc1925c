//! Real spherical harmonics up to degree 3, with analytic gradients
//! with respect to the (normalized) view direction.

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_DEGREE: u32 = 3;

pub fn basis_len(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// Basis values and their gradients w.r.t. the direction components.
/// `dir` must be unit length. Returns only the first (degree+1)^2 entries.
pub fn sh_basis(degree: u32, dir: [f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
    let [x, y, z] = dir;
    let n = basis_len(degree);
    let mut val = vec![0.0; n];
    let mut grad = vec![[0.0; 3]; n];
    val[0] = SH_C0;
    if degree >= 1 {
        val[1] = -C1 * y;
        grad[1] = [0.0, -C1, 0.0];
        val[2] = C1 * z;
        grad[2] = [0.0, 0.0, C1];
        val[3] = -C1 * x;
        grad[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        val[4] = C2[0] * x * y;
        grad[4] = [C2[0] * y, C2[0] * x, 0.0];
        val[5] = C2[1] * y * z;
        grad[5] = [0.0, C2[1] * z, C2[1] * y];
        val[6] = C2[2] * (2.0 * zz - xx - yy);
        grad[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        val[7] = C2[3] * x * z;
        grad[7] = [C2[3] * z, 0.0, C2[3] * x];
        val[8] = C2[4] * (xx - yy);
        grad[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        val[9] = C3[0] * y * (3.0 * xx - yy);
        grad[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
        val[10] = C3[1] * x * y * z;
        grad[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
        val[11] = C3[2] * y * (4.0 * zz - xx - yy);
        grad[11] = [
            -2.0 * C3[2] * x * y,
            C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * C3[2] * y * z,
        ];
        val[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        grad[12] = [
            -6.0 * C3[3] * x * z,
            -6.0 * C3[3] * y * z,
            C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        val[13] = C3[4] * x * (4.0 * zz - xx - yy);
        grad[13] = [
            C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * C3[4] * x * y,
            8.0 * C3[4] * x * z,
        ];
        val[14] = C3[5] * z * (xx - yy);
        grad[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
        val[15] = C3[6] * x * (xx - 3.0 * yy);
        grad[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
    }
    (val, grad)
}

/// RGB from channel-major coefficients (all R, then G, then B), clamped to [0,1].
/// Also reports which channels the clamp zeroed for gradient purposes.
pub fn sh_eval(degree: u32, sh: &[f64], dir: [f64; 3]) -> ([f64; 3], [bool; 3]) {
    let n = basis_len(degree);
    debug_assert_eq!(sh.len(), 3 * n);
    let (basis, _) = sh_basis(degree, dir);
    let mut rgb = [0.0; 3];
    let mut clamped = [false; 3];
    for ch in 0..3 {
        let mut v = 0.0;
        for i in 0..n {
            v += sh[ch * n + i] * basis[i];
        }
        if !(0.0..=1.0).contains(&v) {
            clamped[ch] = true;
        }
        rgb[ch] = v.clamp(0.0, 1.0);
    }
    (rgb, clamped)
}
