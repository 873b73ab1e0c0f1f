use crate::error::{Error, Result};
use crate::model::Mechanism;

#[derive(Debug, Clone, Copy)]
pub struct CumulantOptions {
    pub rtol: f64,
    pub atol: f64,
    pub min_step: f64,
}

impl Default for CumulantOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
            min_step: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CumulantSolution {
    pub value: Vec<f64>,
    pub steps: usize,
    pub rejected: usize,
    /// Number of times a negative stage was clamped to zero.
    pub clamp_events: usize,
}

// Dormand–Prince 5(4) tableau; the right-hand side is autonomous so the nodes are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// `V_t f` from `∂_t v = −ψ(v)`, `v_0 = f`.
pub fn solve_cumulant(
    mech: &Mechanism,
    f: &[f64],
    t: f64,
    opts: CumulantOptions,
) -> Result<CumulantSolution> {
    let k = mech.types();
    if f.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: f.len(),
        });
    }
    if !f.iter().all(|v| v.is_finite() && *v >= 0.0) {
        return Err(Error::InvalidArgument(
            "cumulant input must be finite and nonnegative".into(),
        ));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }

    let mut clamp_events = 0usize;
    let rhs = |v: &[f64], clamps: &mut usize| -> Vec<f64> {
        let u: Vec<f64> = v
            .iter()
            .map(|&x| {
                if x < 0.0 {
                    *clamps += 1;
                    0.0
                } else {
                    x
                }
            })
            .collect();
        mech.psi(&u).into_iter().map(|p| -p).collect()
    };

    let mut v = f.to_vec();
    let mut time = 0.0;
    let (mut steps, mut rejected) = (0usize, 0usize);
    let mut h = t.min(1e-2);
    while time < t {
        if h < opts.min_step * t.max(1.0) {
            return Err(Error::StepUnderflow { t_reached: time });
        }
        let h_eff = h.min(t - time);
        let mut stages: Vec<Vec<f64>> = Vec::with_capacity(7);
        stages.push(rhs(&v, &mut clamp_events));
        for s in 1..7 {
            let y: Vec<f64> = (0..k)
                .map(|i| v[i] + h_eff * (0..s).map(|j| A[s][j] * stages[j][i]).sum::<f64>())
                .collect();
            stages.push(rhs(&y, &mut clamp_events));
        }
        let y5: Vec<f64> = (0..k)
            .map(|i| v[i] + h_eff * (0..7).map(|j| B5[j] * stages[j][i]).sum::<f64>())
            .collect();
        let err = ((0..k)
            .map(|i| {
                let e = h_eff * (0..7).map(|j| (B5[j] - B4[j]) * stages[j][i]).sum::<f64>();
                let sc = opts.atol + opts.rtol * v[i].abs().max(y5[i].abs());
                (e / sc).powi(2)
            })
            .sum::<f64>()
            / k as f64)
            .sqrt();
        if !err.is_finite() {
            h *= 0.1;
            rejected += 1;
            continue;
        }
        if err <= 1.0 {
            time += h_eff;
            v = y5;
            for x in v.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                    clamp_events += 1;
                }
            }
            steps += 1;
        } else {
            rejected += 1;
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = h_eff * factor;
    }
    Ok(CumulantSolution {
        value: v,
        steps,
        rejected,
        clamp_events,
    })
}
