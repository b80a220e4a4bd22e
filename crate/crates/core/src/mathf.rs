//! Float math routed through `libm` so results are identical with and
//! without `std`, on every target.

/// Fast exp: Cody-Waite range reduction plus a degree-5 polynomial on the
/// reduced interval (Cephes coefficients), exact to a couple of ulp. The
/// softmax and GELU inner loops call this hundreds of thousands of times
/// per forward pass; `libm::expf` is several times slower. Branchless and
/// deterministic on every target.
#[inline(always)]
pub fn expf(x: f32) -> f32 {
    const LOG2E: f32 = core::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_375;
    const C2: f32 = -2.121_944_4e-4;
    // Round-to-nearest via the 1.5 * 2^23 magic constant.
    const MAGIC: f32 = 12_582_912.0;
    let x = x.clamp(-87.336_55, 87.0);
    let shifted = x * LOG2E + MAGIC;
    let k = (shifted.to_bits() & 0x007f_ffff) as i32 - 0x0040_0000;
    let z = shifted - MAGIC;
    let r = x - z * C1 - z * C2;
    let mut p = 1.987_569_2e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_6e-1;
    p = p * r + 5.000_000_1e-1;
    let poly = p * r * r + r + 1.0;
    let scale = f32::from_bits(((k + 127) as u32) << 23);
    poly * scale
}

#[inline(always)]
pub fn lnf(x: f32) -> f32 {
    libm::logf(x)
}

#[inline(always)]
pub fn sqrtf(x: f32) -> f32 {
    libm::sqrtf(x)
}

/// tanh via one `expf`: `sign(x) * (1 - t) / (1 + t)` with `t = e^(-2|x|)`.
/// Saturates beyond |x| > 9 where f32 tanh is exactly +/-1. Noticeably
/// faster than `libm::tanhf` and accurate to a few ulp, which the gradient
/// checks cover.
#[inline(always)]
pub fn tanhf(x: f32) -> f32 {
    let ax = absf(x);
    if ax > 9.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let t = expf(-2.0 * ax);
    let y = (1.0 - t) / (1.0 + t);
    if x < 0.0 {
        -y
    } else {
        y
    }
}

#[inline(always)]
pub fn absf(x: f32) -> f32 {
    libm::fabsf(x)
}

#[inline(always)]
pub fn powf(x: f32, y: f32) -> f32 {
    libm::powf(x, y)
}

/// Rotation phases are accumulated in f64: at large position offsets the
/// single-precision trig error would dominate the relative-dot identity.
#[inline(always)]
pub fn cos64(x: f64) -> f64 {
    libm::cos(x)
}

#[inline(always)]
pub fn sin64(x: f64) -> f64 {
    libm::sin(x)
}

#[inline(always)]
pub fn pow64(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline(always)]
pub fn sqrt64(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline(always)]
pub fn ln64(x: f64) -> f64 {
    libm::log(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expf_matches_libm_closely() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x < 86.9 {
            let got = expf(x) as f64;
            let want = libm::expf(x) as f64;
            let rel = ((got - want) / want).abs();
            if rel > worst {
                worst = rel;
            }
            x += 0.0137;
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn expf_handles_extremes() {
        // Saturates instead of returning exact zero / infinity.
        assert!(expf(f32::NEG_INFINITY) < 1e-37);
        assert!(expf(1000.0).is_finite());
        assert_eq!(expf(0.0), 1.0);
    }

    #[test]
    fn tanhf_matches_libm_closely() {
        let mut x = -9.5f32;
        while x < 9.5 {
            let got = tanhf(x);
            let want = libm::tanhf(x);
            assert!((got - want).abs() < 3e-7, "x={x}: {got} vs {want}");
            x += 0.0113;
        }
    }
}
