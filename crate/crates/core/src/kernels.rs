//! Vectorizable f64 kernels for the per-token hot path.
//!
//! Every decode step exponentiates one logit vector per inspected layer and
//! takes one logarithm per vocabulary entry per candidate layer. The libm
//! scalar `exp`/`ln` cost several nanoseconds each, so this module carries
//! branch-free polynomial versions (relative error below 1e-15) that LLVM can
//! vectorize, compiled for AVX2+FMA and a portable fallback. On AVX-512 the
//! two hottest loops are hand-written with intrinsics: `exp` scales with
//! `vscalefpd`, and `ln` is division-free, reducing the mantissa against a
//! 16-entry table held in registers. The ISA is detected once per process.
//!
//! Reductions use a fixed lane order, so every variant is deterministic. The
//! variants agree to within a few ulps, not bitwise.

use std::sync::OnceLock;

/// Independent accumulators per reduction.
const LANES: usize = 8;

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
/// 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits.
const ROUND_SHIFT: f64 = 6_755_399_441_055_744.0;
const EXP_MIN: f64 = -708.0;
const EXP_MAX: f64 = 709.0;
const SQRT_HALF_BITS: u64 = 0x3fe6_a09e_667f_3bcd;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isa {
    Portable,
    Avx2,
    Avx512,
}

impl Isa {
    pub fn detect() -> Isa {
        static ISA: OnceLock<Isa> = OnceLock::new();
        *ISA.get_or_init(|| {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx512f")
                    && std::arch::is_x86_feature_detected!("avx512dq")
                    && std::arch::is_x86_feature_detected!("fma")
                {
                    return Isa::Avx512;
                }
                if std::arch::is_x86_feature_detected!("avx2")
                    && std::arch::is_x86_feature_detected!("fma")
                {
                    return Isa::Avx2;
                }
            }
            Isa::Portable
        })
    }

    /// Every ISA usable on this machine, for cross-checking variants.
    pub fn available() -> Vec<Isa> {
        let mut out = vec![Isa::Portable];
        match Isa::detect() {
            Isa::Avx512 => out.extend([Isa::Avx2, Isa::Avx512]),
            Isa::Avx2 => out.push(Isa::Avx2),
            Isa::Portable => {}
        }
        out
    }
}

/// Logit element types accepted by the softmax kernel.
pub trait Widen: Copy + Send + Sync {
    const IS_F32: bool;
    fn widen(self) -> f64;
}

impl Widen for f32 {
    const IS_F32: bool = true;
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Widen for f64 {
    const IS_F32: bool = false;
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
}

#[inline(always)]
fn fmadd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// `e^x`, flushing to zero below -708.
#[inline(always)]
pub(crate) fn exp<const FMA: bool>(x: f64) -> f64 {
    let xc = x.clamp(EXP_MIN, EXP_MAX);
    let k = fmadd::<FMA>(xc, LOG2_E, ROUND_SHIFT);
    let n = k - ROUND_SHIFT;
    let r = fmadd::<FMA>(-n, LN2_LO, fmadd::<FMA>(-n, LN2_HI, xc));

    // Taylor series to degree 12 on |r| <= ln2/2, Estrin form.
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let p01 = fmadd::<FMA>(r, 1.0, 1.0);
    let p23 = fmadd::<FMA>(r, 1.0 / 6.0, 0.5);
    let p45 = fmadd::<FMA>(r, 1.0 / 120.0, 1.0 / 24.0);
    let p67 = fmadd::<FMA>(r, 1.0 / 5040.0, 1.0 / 720.0);
    let p89 = fmadd::<FMA>(r, 1.0 / 362_880.0, 1.0 / 40_320.0);
    let p1011 = fmadd::<FMA>(r, 1.0 / 39_916_800.0, 1.0 / 3_628_800.0);
    let p0_3 = fmadd::<FMA>(r2, p23, p01);
    let p4_7 = fmadd::<FMA>(r2, p67, p45);
    let p8_11 = fmadd::<FMA>(r2, p1011, p89);
    let p8_12 = fmadd::<FMA>(r4, 1.0 / 479_001_600.0, p8_11);
    let p0_7 = fmadd::<FMA>(r4, p4_7, p0_3);
    let poly = fmadd::<FMA>(r8, p8_12, p0_7);

    // 2^n from the integer sitting in the low bits of k.
    let scale = f64::from_bits((k.to_bits() << 52).wrapping_add(1023u64 << 52));
    let v = poly * scale;
    if x < EXP_MIN {
        0.0
    } else {
        v
    }
}

/// Natural log for positive normal `x`. Subnormals, zero and negatives give
/// garbage; callers mask them.
#[inline(always)]
pub(crate) fn ln<const FMA: bool>(x: f64) -> f64 {
    let bits = x.to_bits();
    // Split x = 2^e * f with f in [sqrt(1/2), sqrt(2)).
    let t = bits.wrapping_sub(SQRT_HALF_BITS);
    let f = f64::from_bits(bits.wrapping_sub(t & 0xfff0_0000_0000_0000));
    let biased = ((t >> 52).wrapping_add(2048)) & 0xfff;
    let e = f64::from_bits(0x4330_0000_0000_0000 | biased) - (4_503_599_627_370_496.0 + 2048.0);

    // ln f = 2 atanh(s), s = (f-1)/(f+1), |s| < 0.1716.
    let s = (f - 1.0) / (f + 1.0);
    let z = s * s;
    let z2 = z * z;
    let z4 = z2 * z2;
    let z8 = z4 * z4;
    let a01 = fmadd::<FMA>(z, 1.0 / 3.0, 1.0);
    let a23 = fmadd::<FMA>(z, 1.0 / 7.0, 1.0 / 5.0);
    let a45 = fmadd::<FMA>(z, 1.0 / 11.0, 1.0 / 9.0);
    let a67 = fmadd::<FMA>(z, 1.0 / 15.0, 1.0 / 13.0);
    let a89 = fmadd::<FMA>(z, 1.0 / 19.0, 1.0 / 17.0);
    let a0_3 = fmadd::<FMA>(z2, a23, a01);
    let a4_7 = fmadd::<FMA>(z2, a67, a45);
    let a0_7 = fmadd::<FMA>(z4, a4_7, a0_3);
    let series = fmadd::<FMA>(z8, a89, a0_7);
    let ln_f = 2.0 * s * series;
    fmadd::<FMA>(e, LN2_HI, fmadd::<FMA>(e, LN2_LO, ln_f))
}

#[inline(always)]
fn lane_sum(acc: [f64; LANES]) -> f64 {
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

#[inline(always)]
fn max_body<T: Widen>(xs: &[T]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            let v = c[l].widen();
            acc[l] = if v > acc[l] { v } else { acc[l] };
        }
    }
    for (l, v) in rest.iter().enumerate() {
        let v = v.widen();
        acc[l] = if v > acc[l] { v } else { acc[l] };
    }
    acc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Unnormalized softmax pass. Writes `e_i = exp((x_i - max) * inv_temp)` to
/// `out` and returns `(Σ e_i, Σ e_i * y_i)` with `y_i` the shifted scaled logit.
#[inline(always)]
fn exp_shifted_body<T: Widen, const FMA: bool>(
    logits: &[T],
    inv_temp: f64,
    out: &mut [f64],
) -> (f64, f64) {
    debug_assert_eq!(logits.len(), out.len());
    let max = max_body(logits);
    let mut sum = [0.0; LANES];
    let mut dot = [0.0; LANES];
    let split = logits.len() - logits.len() % LANES;
    for (c, o) in logits[..split]
        .chunks_exact(LANES)
        .zip(out[..split].chunks_exact_mut(LANES))
    {
        for l in 0..LANES {
            let y = (c[l].widen() - max) * inv_temp;
            let e = exp::<FMA>(y);
            o[l] = e;
            sum[l] += e;
            dot[l] = fmadd::<FMA>(e, y, dot[l]);
        }
    }
    for (l, (x, o)) in logits[split..].iter().zip(&mut out[split..]).enumerate() {
        let y = (x.widen() - max) * inv_temp;
        let e = exp::<FMA>(y);
        *o = e;
        sum[l] += e;
        dot[l] = fmadd::<FMA>(e, y, dot[l]);
    }
    (lane_sum(sum), lane_sum(dot))
}

#[inline(always)]
fn scale_body<const FMA: bool>(xs: &mut [f64], k: f64) {
    for x in xs {
        *x *= k;
    }
}

/// `Σ m_i ln m_i` with `m_i = (p_i + e_i * e_scale) / 2`; entries with
/// `m_i` below the smallest normal contribute zero.
#[inline(always)]
fn midpoint_entropy_body<const FMA: bool>(p: &[f64], e: &[f64], e_scale: f64) -> f64 {
    debug_assert_eq!(p.len(), e.len());
    let mut acc = [0.0; LANES];
    let split = p.len() - p.len() % LANES;
    for (pc, ec) in p[..split]
        .chunks_exact(LANES)
        .zip(e[..split].chunks_exact(LANES))
    {
        for l in 0..LANES {
            let m = 0.5 * (pc[l] + ec[l] * e_scale);
            let lm = ln::<FMA>(m.max(f64::MIN_POSITIVE));
            let term = if m >= f64::MIN_POSITIVE { m * lm } else { 0.0 };
            acc[l] += term;
        }
    }
    for (l, (pv, ev)) in p[split..].iter().zip(&e[split..]).enumerate() {
        let m = 0.5 * (pv + ev * e_scale);
        let lm = ln::<FMA>(m.max(f64::MIN_POSITIVE));
        acc[l] += if m >= f64::MIN_POSITIVE { m * lm } else { 0.0 };
    }
    lane_sum(acc)
}

macro_rules! multiversion {
    (
        $(#[$meta:meta])*
        $vis:vis fn $name:ident $(<$g:ident : $bound:path>)? ($($arg:ident : $ty:ty),*) -> $ret:ty
            => $body:ident $(::<$gb:ident>)?
    ) => {
        $(#[$meta])*
        $vis fn $name $(<$g: $bound>)? (isa: Isa, $($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,avx512dq,avx2,fma")]
                unsafe fn avx512 $(<$g: $bound>)? ($($arg: $ty),*) -> $ret {
                    $body::<$($gb,)? true>($($arg),*)
                }
                #[target_feature(enable = "avx2,fma")]
                unsafe fn avx2 $(<$g: $bound>)? ($($arg: $ty),*) -> $ret {
                    $body::<$($gb,)? true>($($arg),*)
                }
                match isa {
                    // SAFETY: `Isa::detect` only reports features the CPU has.
                    Isa::Avx512 => return unsafe { avx512($($arg),*) },
                    Isa::Avx2 => return unsafe { avx2($($arg),*) },
                    Isa::Portable => {}
                }
            }
            let _ = isa;
            $body::<$($gb,)? false>($($arg),*)
        }
    };
}

multiversion! {
    fn exp_shifted_generic<T: Widen>(logits: &[T], inv_temp: f64, out: &mut [f64]) -> (f64, f64)
        => exp_shifted_body::<T>
}

multiversion! {
    fn midpoint_entropy_generic(p: &[f64], e: &[f64], e_scale: f64) -> f64
        => midpoint_entropy_body
}

/// Unnormalized softmax pass. Writes `e_i = exp((x_i - max) * inv_temp)` to
/// `out` and returns `(Σ e_i, Σ e_i * y_i)` with `y_i` the shifted scaled logit.
pub fn exp_shifted<T: Widen>(isa: Isa, logits: &[T], inv_temp: f64, out: &mut [f64]) -> (f64, f64) {
    assert_eq!(logits.len(), out.len());
    #[cfg(target_arch = "x86_64")]
    if isa == Isa::Avx512 {
        // SAFETY: `Isa::detect` only reports features the CPU has.
        return unsafe { avx512::exp_shifted(logits, inv_temp, out) };
    }
    exp_shifted_generic(isa, logits, inv_temp, out)
}

/// A sum taken at a guessed shift is trusted when nothing overflowed and the
/// largest term is above `e^-460`, far from the subnormal range.
fn hint_usable(sum: f64) -> bool {
    sum.is_finite() && sum >= 1e-200
}

/// Unnormalized softmax pass at temperature 1 with an unspecified shift `c`:
/// writes `e_i = exp(x_i - c)` and returns `(Σ e_i, Σ e_i (x_i - c))`.
/// `c = hint` when that keeps the terms in range, which skips the max pass;
/// otherwise `c` is the largest logit. The negative entropy
/// `dot / sum - ln sum` and the normalized `e_i / sum` do not depend on `c`.
pub fn exp_hinted<T: Widen>(isa: Isa, logits: &[T], hint: f64, out: &mut [f64]) -> (f64, f64) {
    assert_eq!(logits.len(), out.len());
    #[cfg(target_arch = "x86_64")]
    if isa == Isa::Avx512 {
        // SAFETY: as above.
        return unsafe { avx512::exp_hinted(logits, hint, out) };
    }
    let _ = hint;
    exp_shifted_generic(isa, logits, 1.0, out)
}

/// Largest element widened to f64; `-inf` for an empty slice.
pub fn max_value<T: Widen>(isa: Isa, xs: &[T]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if isa == Isa::Avx512 {
        // SAFETY: as above.
        return unsafe { avx512::max(xs) };
    }
    let _ = isa;
    max_body(xs)
}

/// `Σ m_i ln m_i` with `m_i = (p_i + e_i * e_scale) / 2`. Zero entries
/// contribute zero; subnormal ones contribute zero or their exact term.
pub fn midpoint_entropy(isa: Isa, p: &[f64], e: &[f64], e_scale: f64) -> f64 {
    assert_eq!(p.len(), e.len());
    #[cfg(target_arch = "x86_64")]
    if isa == Isa::Avx512 {
        // SAFETY: as above.
        return unsafe { avx512::midpoint_entropy(p, e, e_scale) };
    }
    midpoint_entropy_generic(isa, p, e, e_scale)
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{max_body, Widen, LN2_HI, LN2_LO, LOG2_E};

    /// 1.5 * 2^48: adding it rounds to a multiple of 1/16.
    const ROUND_SHIFT_16TH: f64 = 422_212_465_065_984.0;

    /// `1 / c_j` for `c_j = 1 + (j + 1/2) / 16`, rounded to f64.
    const INV_C: [f64; 16] = [
        0.9696969696969697, 0.9142857142857143, 0.8648648648648649, 0.8205128205128205,
        0.7804878048780488, 0.7441860465116279, 0.7111111111111111, 0.6808510638297872,
        0.6530612244897959, 0.6274509803921569, 0.6037735849056604, 0.5818181818181818,
        0.5614035087719298, 0.5423728813559322, 0.5245901639344263, 0.5079365079365079,
    ];
    /// `-ln(INV_C[j]) - ln 2` of the rounded table entry; the `- ln 2`
    /// turns `ln u` into `ln(u / 2)`.
    const LN_C_HALF: [f64; 16] = [
        -0.6623755218931916, -0.6035350218702581, -0.5479651707154475, -0.4953214372300254,
        -0.4453110166553641, -0.39768296766610944, -0.35222059358935215, -0.30873548164961323,
        -0.26706278524904514, -0.22705745063534608, -0.18859116980754997, -0.15154989812720088,
        -0.11583181552512165, -0.0813456394539524, -0.04800921918636066, -0.015748356968139112,
    ];
    /// `2^(j/16)`, rounded to f64.
    const POW2_J16: [f64; 16] = [
        1.0, 1.0442737824274138, 1.0905077326652577, 1.1387886347566916,
        1.189207115002721, 1.241857812073484, 1.2968395546510096, 1.3542555469368927,
        1.4142135623730951, 1.4768261459394993, 1.5422108254079407, 1.6104903319492543,
        1.681792830507429, 1.7562521603732995, 1.8340080864093424, 1.9152065613971474,
    ];
    /// Below this `e^y` is under half the smallest subnormal.
    const EXP_FLOOR: f64 = -745.2;

    #[inline]
    #[target_feature(enable = "avx512f,avx512dq")]
    fn splat(x: f64) -> __m512d {
        _mm512_set1_pd(x)
    }

    #[inline]
    #[target_feature(enable = "avx512f,avx512dq")]
    unsafe fn load8<T: Widen>(src: *const T) -> __m512d {
        if T::IS_F32 {
            _mm512_cvtps_pd(_mm256_loadu_ps(src as *const f32))
        } else {
            _mm512_loadu_pd(src as *const f64)
        }
    }

    /// `e^y` for `y <= 0`, given the `2^(j/16)` table halves.
    #[inline]
    #[target_feature(enable = "avx512f,avx512dq")]
    fn exp8(y: __m512d, pow_lo: __m512d, pow_hi: __m512d) -> __m512d {
        let y = _mm512_max_pd(y, splat(EXP_FLOOR));
        // kd = round(16 y / ln2) / 16 = n + j/16; k holds 16 n + j in its
        // low mantissa bits.
        let k = _mm512_fmadd_pd(y, splat(LOG2_E), splat(ROUND_SHIFT_16TH));
        let kd = _mm512_sub_pd(k, splat(ROUND_SHIFT_16TH));
        let r = _mm512_fnmadd_pd(kd, splat(LN2_HI), y);
        let r = _mm512_fnmadd_pd(kd, splat(LN2_LO), r);
        // Near-minimax degree 6 on |r| <= ln2/32, relative error 3e-17.
        let mut q = splat(1.388_903_727_235_519_6e-3);
        for c in [8.333_452_040_264_2e-3, 4.166_666_666_489_117e-2, 1.666_666_666_524_626_6e-1, 0.5, 1.0, 1.0] {
            q = _mm512_fmadd_pd(q, r, splat(c));
        }
        let p = q;
        let t = _mm512_permutex2var_pd(pow_lo, _mm512_castpd_si512(k), pow_hi);
        // vscalefpd floors its exponent: floor(kd) = n.
        _mm512_scalef_pd(_mm512_mul_pd(t, p), kd)
    }

    /// `acc + u ln(u / 2)`, leaving lanes with `u = 0` untouched. Subnormal
    /// `u` is exact: getmant and getexp normalize it.
    #[inline]
    #[target_feature(enable = "avx512f,avx512dq")]
    fn u_ln_half_u_acc8(
        acc: __m512d,
        u: __m512d,
        inv_lo: __m512d,
        inv_hi: __m512d,
        ln_lo: __m512d,
        ln_hi: __m512d,
    ) -> __m512d {
        let valid = _mm512_cmp_pd_mask::<_CMP_GT_OQ>(u, _mm512_setzero_pd());
        // u = 2^e * f with f in [1, 2); the top four mantissa bits pick c_j.
        let f = _mm512_getmant_pd::<_MM_MANT_NORM_1_2, _MM_MANT_SIGN_ZERO>(u);
        let e = _mm512_getexp_pd(u);
        let idx = _mm512_srli_epi64::<48>(_mm512_castpd_si512(f));
        let inv_c = _mm512_permutex2var_pd(inv_lo, idx, inv_hi);
        let ln_c = _mm512_permutex2var_pd(ln_lo, idx, ln_hi);
        // ln f = ln c_j + log1p(r), log1p(r) = r (1 + r q(r)), near-minimax
        // on |r| <= 1/33 with absolute error 4e-17.
        let r = _mm512_fmsub_pd(f, inv_c, splat(1.0));
        let mut q = splat(-1.251_611_739_073_789_4e-1);
        for c in [
            1.430_362_218_541_142_4e-1,
            -1.666_665_924_963_885_7e-1,
            1.999_999_175_904_475_5e-1,
            -2.500_000_000_085_314_5e-1,
            3.333_333_333_428_124_5e-1,
            -0.5,
            1.0,
        ] {
            q = _mm512_fmadd_pd(q, r, splat(c));
        }
        // e * ln2 is formed exactly inside the fma.
        let ln_ec = _mm512_fmadd_pd(e, splat(std::f64::consts::LN_2), ln_c);
        let ln_half_u = _mm512_fmadd_pd(r, q, ln_ec);
        _mm512_mask3_fmadd_pd(u, ln_half_u, acc, valid)
    }

    #[target_feature(enable = "avx512f,avx512dq,avx2,fma")]
    pub(super) unsafe fn max<T: Widen>(xs: &[T]) -> f64 {
        let split = xs.len() - xs.len() % 16;
        let src = xs.as_ptr();
        let mut a = splat(f64::NEG_INFINITY);
        let mut b = a;
        let mut i = 0;
        while i < split {
            a = _mm512_max_pd(a, load8(src.add(i)));
            b = _mm512_max_pd(b, load8(src.add(i + 8)));
            i += 16;
        }
        let head = _mm512_reduce_max_pd(_mm512_max_pd(a, b));
        head.max(max_body(&xs[split..]))
    }

    #[target_feature(enable = "avx512f,avx512dq,avx2,fma")]
    pub(super) unsafe fn exp_shifted<T: Widen>(logits: &[T], inv_temp: f64, out: &mut [f64]) -> (f64, f64) {
        let shift = max(logits);
        if inv_temp == 1.0 {
            exp_loop::<T, false>(logits, shift, inv_temp, out)
        } else {
            exp_loop::<T, true>(logits, shift, inv_temp, out)
        }
    }

    #[target_feature(enable = "avx512f,avx512dq,avx2,fma")]
    pub(super) unsafe fn exp_hinted<T: Widen>(logits: &[T], hint: f64, out: &mut [f64]) -> (f64, f64) {
        let (sum, dot) = exp_loop::<T, false>(logits, hint, 1.0, out);
        if super::hint_usable(sum) {
            (sum, dot)
        } else {
            exp_shifted(logits, 1.0, out)
        }
    }

    /// Writes `exp((x_i - shift) * inv_temp)`; returns the two sums.
    #[inline]
    #[target_feature(enable = "avx512f,avx512dq,avx2,fma")]
    unsafe fn exp_loop<T: Widen, const SCALED: bool>(
        logits: &[T],
        shift: f64,
        inv_temp: f64,
        out: &mut [f64],
    ) -> (f64, f64) {
        let shift = splat(shift);
        let it = splat(inv_temp);
        let pow_lo = _mm512_loadu_pd(POW2_J16.as_ptr());
        let pow_hi = _mm512_loadu_pd(POW2_J16.as_ptr().add(8));
        let mut sum = _mm512_setzero_pd();
        let mut dot = _mm512_setzero_pd();
        let n = logits.len();
        let split = n - n % 8;
        let src = logits.as_ptr();
        let dst = out.as_mut_ptr();
        let mut i = 0;
        while i < split {
            let mut y = _mm512_sub_pd(load8(src.add(i)), shift);
            if SCALED {
                y = _mm512_mul_pd(y, it);
            }
            let e = exp8(y, pow_lo, pow_hi);
            _mm512_storeu_pd(dst.add(i), e);
            sum = _mm512_add_pd(sum, e);
            dot = _mm512_fmadd_pd(e, y, dot);
            i += 8;
        }
        if split < n {
            let rem = n - split;
            let mut buf = [0.0f64; 8];
            for (b, x) in buf.iter_mut().zip(&logits[split..]) {
                *b = x.widen();
            }
            let mask: __mmask8 = ((1u16 << rem) - 1) as __mmask8;
            let x = _mm512_loadu_pd(buf.as_ptr());
            // Masked lanes hold y = 0 and are zeroed after the exp.
            let y = _mm512_maskz_mov_pd(mask, _mm512_mul_pd(_mm512_sub_pd(x, shift), it));
            let e = _mm512_maskz_mov_pd(mask, exp8(y, pow_lo, pow_hi));
            _mm512_mask_storeu_pd(dst.add(split), mask, e);
            sum = _mm512_add_pd(sum, e);
            dot = _mm512_fmadd_pd(e, y, dot);
        }
        (_mm512_reduce_add_pd(sum), _mm512_reduce_add_pd(dot))
    }

    #[target_feature(enable = "avx512f,avx512dq,avx2,fma")]
    pub(super) unsafe fn midpoint_entropy(p: &[f64], e: &[f64], e_scale: f64) -> f64 {
        let inv_lo = _mm512_loadu_pd(INV_C.as_ptr());
        let inv_hi = _mm512_loadu_pd(INV_C.as_ptr().add(8));
        let ln_lo = _mm512_loadu_pd(LN_C_HALF.as_ptr());
        let ln_hi = _mm512_loadu_pd(LN_C_HALF.as_ptr().add(8));
        let scale = splat(e_scale);
        // Σ m ln m = ½ Σ u ln(u / 2) with u = 2m.
        let mut acc = _mm512_setzero_pd();
        let n = p.len();
        let split = n - n % 8;
        let (pp, ep) = (p.as_ptr(), e.as_ptr());
        let mut i = 0;
        while i < split {
            let u = _mm512_fmadd_pd(_mm512_loadu_pd(ep.add(i)), scale, _mm512_loadu_pd(pp.add(i)));
            acc = u_ln_half_u_acc8(acc, u, inv_lo, inv_hi, ln_lo, ln_hi);
            i += 8;
        }
        if split < n {
            let mask: __mmask8 = ((1u16 << (n - split)) - 1) as __mmask8;
            let u = _mm512_fmadd_pd(
                _mm512_maskz_loadu_pd(mask, ep.add(split)),
                scale,
                _mm512_maskz_loadu_pd(mask, pp.add(split)),
            );
            acc = u_ln_half_u_acc8(acc, u, inv_lo, inv_hi, ln_lo, ln_hi);
        }
        0.5 * _mm512_reduce_add_pd(acc)
    }
}

multiversion! {
    pub fn scale(xs: &mut [f64], k: f64) -> ()
        => scale_body
}

/// Normalized softmax of `logits / temperature` into `out`; returns the
/// negative entropy `Σ p ln p` of the result.
pub fn softmax_into<T: Widen>(isa: Isa, logits: &[T], inv_temp: f64, out: &mut [f64]) -> f64 {
    let (sum, dot) = exp_shifted(isa, logits, inv_temp, out);
    let inv = 1.0 / sum;
    scale(isa, out, inv);
    dot * inv - sum.ln()
}
