//! Adaptive Gauss–Kronrod (7/15) quadrature for vector-valued integrands.

use nalgebra::DVector;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
// Gauss weights on the odd Kronrod nodes 1, 3, 5 and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 0.0,
            max_intervals: 4000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Quadrature {
    pub value: DVector<f64>,
    pub error: f64,
    pub evaluations: usize,
}

struct Panel {
    a: f64,
    b: f64,
    value: DVector<f64>,
    error: f64,
}

fn panel<F: FnMut(f64) -> DVector<f64>>(f: &mut F, a: f64, b: f64) -> Panel {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = &fc * WGK[7];
    let mut gauss = &fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let sum = f(c - x) + f(c + x);
        kron.axpy(WGK[j], &sum, 1.0);
        if j % 2 == 1 {
            gauss.axpy(WG[j / 2], &sum, 1.0);
        }
    }
    let error = ((&kron - &gauss) * h).amax();
    Panel {
        a,
        b,
        value: kron * h,
        error,
    }
}

/// Integrate `f` over `[a, b]` until the max-norm error bound is below
/// `max(atol, rtol · ‖I‖∞)`.
pub fn integrate<F>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<Quadrature>
where
    F: FnMut(f64) -> DVector<f64>,
{
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidArgument(
            "integration bounds must be finite".into(),
        ));
    }
    let first = panel(&mut f, a, b);
    let dim = first.value.len();
    if a == b {
        return Ok(Quadrature {
            value: DVector::zeros(dim),
            error: 0.0,
            evaluations: 15,
        });
    }
    let mut panels = vec![first];
    loop {
        let mut total = DVector::zeros(dim);
        let mut err = 0.0;
        for p in &panels {
            total += &p.value;
            err += p.error;
        }
        let target = opts.atol.max(opts.rtol * total.amax());
        if !total.iter().all(|v| v.is_finite()) || !err.is_finite() {
            return Err(Error::Quadrature {
                estimate: total.amax(),
                error: err,
            });
        }
        if err <= target {
            return Ok(Quadrature {
                value: total,
                error: err,
                evaluations: 15 * (2 * panels.len() - 1),
            });
        }
        if panels.len() >= opts.max_intervals {
            return Err(Error::Quadrature {
                estimate: total.amax(),
                error: err,
            });
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .expect("at least one panel");
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        panels.push(panel(&mut f, p.a, mid));
        panels.push(panel(&mut f, mid, p.b));
    }
}

/// Scalar convenience wrapper.
pub fn integrate_scalar<F>(mut f: F, a: f64, b: f64, opts: QuadOptions) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    let q = integrate(|s| DVector::from_element(1, f(s)), a, b, opts)?;
    Ok((q.value[0], q.error))
}
