//! Reference models with hand-checkable spectra.
//!
//! | name | K | B | notes |
//! |------|---|---|-------|
//! | fix1 | 1 | `[1]` | Feller diffusion, b = 0.5 |
//! | fix2 | 2 | `[[1,.5],[.5,1]]` | eigenvalues 1.5, 0.5 (small regime for `(1,−1)`) |
//! | fix3 | 2 | `[[1.5,.5],[.5,1.5]]` | eigenvalues 2, 1 (critical regime for `(1,−1)`) |
//! | fix4 | 2 | `[[1.75,.25],[.25,1.75]]` | eigenvalues 2, 1.5 (large regime for `(1,−1)`) |
//! | fix5 | 3 | `2I + cyclic` | eigenvalues 3, 1.5 ± i√3/2 (oscillatory critical) |
//! | fix6 | 1 | `[1]` | pure jumps, b = 0, one atom of rate 0.5 at y = 1 |

use nalgebra::DMatrix;

use crate::model::{JumpAtom, Mechanism};

fn symmetric_pair(a: f64, eta: f64) -> Mechanism {
    Mechanism::new(
        vec![a, a],
        vec![0.5, 0.5],
        vec![vec![0.0, eta], vec![eta, 0.0]],
        vec![vec![], vec![]],
    )
    .expect("fixture is well formed")
}

pub fn fix1() -> Mechanism {
    Mechanism::new(vec![-1.0], vec![0.5], vec![vec![0.0]], vec![vec![]]).expect("fixture")
}

pub fn fix2() -> Mechanism {
    symmetric_pair(-1.0, 0.5)
}

pub fn fix3() -> Mechanism {
    symmetric_pair(-1.5, 0.5)
}

pub fn fix4() -> Mechanism {
    symmetric_pair(-1.75, 0.25)
}

pub fn fix5() -> Mechanism {
    Mechanism::new(
        vec![-2.0; 3],
        vec![0.5; 3],
        vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ],
        vec![vec![], vec![], vec![]],
    )
    .expect("fixture")
}

pub fn fix6() -> Mechanism {
    Mechanism::new(
        vec![-1.0],
        vec![0.0],
        vec![vec![0.0]],
        vec![vec![JumpAtom {
            rate: 0.5,
            vector: vec![1.0],
        }]],
    )
    .expect("fixture")
}

/// Irreducible Metzler companion matrix with characteristic polynomial
/// `(x − 2)(x + 1)²`; the eigenvalue −1 has a single chain of length 2,
/// `(1, −1, 1)` and `(0, 1, −2)`.
pub fn defective_generator() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.0])
}

/// Mechanism whose mean matrix is [`defective_generator`].
pub fn defective() -> Mechanism {
    Mechanism::new(
        vec![0.0; 3],
        vec![0.5; 3],
        vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![2.0, 3.0, 0.0],
        ],
        vec![vec![], vec![], vec![]],
    )
    .expect("fixture")
}

/// All fixtures with their names, in order.
pub fn all() -> Vec<(&'static str, Mechanism)> {
    vec![
        ("fix1", fix1()),
        ("fix2", fix2()),
        ("fix3", fix3()),
        ("fix4", fix4()),
        ("fix5", fix5()),
        ("fix6", fix6()),
    ]
}

pub fn by_name(name: &str) -> Option<Mechanism> {
    all().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
}
