use nalgebra::{ComplexField, DMatrix, DVector, SVD};
use num_complex::Complex64;

use super::{eigen_triplet, eigenvalues, norm_inf};
use crate::error::{Error, Result};

/// Eigenvalues closer than this (times `max(1, ‖B‖∞)`) are one cluster.
pub const CLUSTER_REL_TOL: f64 = 1e-8;
/// Singular values below this (times `max(1, σ_max)`) count as zero.
pub const RANK_REL_TOL: f64 = 1e-10;

type CVec = DVector<Complex64>;

/// All generalized eigenvectors belonging to one eigenvalue.
///
/// `right` holds the chains back to back, each chain ordered from the
/// eigenvector upwards so that `B φ_n = λ φ_n + φ_{n−1}` inside a chain.
/// `dual` is biorthonormal under `⟨f, g⟩ = Σ f ḡ`.
#[derive(Debug, Clone)]
pub struct SpectralBlock {
    pub eigenvalue: Complex64,
    pub chain_lengths: Vec<usize>,
    pub right: Vec<CVec>,
    pub dual: Vec<CVec>,
}

impl SpectralBlock {
    pub fn size(&self) -> usize {
        self.right.len()
    }

    pub fn is_real(&self) -> bool {
        self.eigenvalue.im == 0.0
    }

    /// Start index and length of the chain holding flat position `n`.
    pub fn chain_of(&self, n: usize) -> (usize, usize) {
        let mut start = 0;
        for &d in &self.chain_lengths {
            if n < start + d {
                return (start, d);
            }
            start += d;
        }
        panic!("position {n} outside block of size {}", self.size());
    }

    /// `n + l` when it stays inside the chain of `n`.
    pub fn shift_in_chain(&self, n: usize, l: usize) -> Option<usize> {
        let (start, d) = self.chain_of(n);
        (n + l < start + d).then_some(n + l)
    }

    /// Coefficients `⟨f, φ̂_n⟩` for every position of the block.
    pub fn project(&self, f: &CVec) -> Vec<Complex64> {
        self.dual.iter().map(|d| pairing(f, d)).collect()
    }

    /// `e^{−λt} T_t` restricted to this block, applied to coefficients `c`:
    /// returns `Σ_n φ_n (D(t) c)_n`.
    fn evolve_coefficients(&self, t: f64, c: &[Complex64]) -> CVec {
        let k = self.right[0].len();
        let mut out = CVec::zeros(k);
        let mut start = 0;
        for &d in &self.chain_lengths {
            for n in start..start + d {
                let mut acc = Complex64::new(0.0, 0.0);
                let mut w = 1.0;
                for (l, cm) in c[n..start + d].iter().enumerate() {
                    if l > 0 {
                        w *= t / l as f64;
                    }
                    acc += cm * w;
                }
                out.axpy(acc, &self.right[n], Complex64::new(1.0, 0.0));
            }
            start += d;
        }
        out
    }
}

/// `⟨f, g⟩ = Σ_x f(x) conj(g(x))`.
pub fn pairing(f: &CVec, g: &CVec) -> Complex64 {
    f.iter().zip(g.iter()).map(|(a, b)| a * b.conj()).sum()
}

#[derive(Debug, Clone)]
pub struct SpectralData {
    pub lambda1: f64,
    pub phi: DVector<f64>,
    pub phitilde: DVector<f64>,
    /// Ordered by decreasing real part, then decreasing imaginary part.
    /// Block 0 is the Perron block `{φ}`.
    pub blocks: Vec<SpectralBlock>,
    /// `conj_pair[k]` is the block whose eigenvalue is `conj(λ_k)`.
    pub conj_pair: Vec<usize>,
    pub cluster_tol: f64,
    generator: DMatrix<f64>,
}

impl SpectralData {
    pub fn types(&self) -> usize {
        self.phi.len()
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    /// Largest real part among the non-Perron blocks (`−∞` for `K = 1`).
    pub fn subdominant_re(&self) -> f64 {
        self.blocks
            .iter()
            .skip(1)
            .map(|b| b.eigenvalue.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_coeff(&self, f: &DVector<f64>) -> f64 {
        f.dot(&self.phitilde)
    }

    /// `T_t f` from the spectral expansion, `O(K²)` per call.
    pub fn propagate(&self, t: f64, f: &CVec) -> CVec {
        let mut out = CVec::zeros(self.types());
        for block in &self.blocks {
            let c = block.project(f);
            let evolved = block.evolve_coefficients(t, &c);
            out.axpy(
                (block.eigenvalue * t).exp(),
                &evolved,
                Complex64::new(1.0, 0.0),
            );
        }
        out
    }

    pub fn propagate_real(&self, t: f64, f: &DVector<f64>) -> DVector<f64> {
        self.propagate(t, &to_complex(f)).map(|z| z.re)
    }

    /// `T_t` restricted to the complement of `φ`: the Perron coefficient is
    /// taken to be exactly zero, so roundoff in `⟨f, φ̃⟩` cannot grow like
    /// `e^{λ₁t}`.
    pub fn propagate_centered(&self, t: f64, f: &DVector<f64>) -> DVector<f64> {
        let fc = to_complex(f);
        let mut out = CVec::zeros(self.types());
        for block in self.blocks.iter().skip(1) {
            let c = block.project(&fc);
            let evolved = block.evolve_coefficients(t, &c);
            out.axpy(
                (block.eigenvalue * t).exp(),
                &evolved,
                Complex64::new(1.0, 0.0),
            );
        }
        out.map(|z| z.re)
    }

    /// Largest deviation of the Gram matrix `⟨φ_j, φ̂_l⟩` from the identity.
    pub fn biorthonormality_defect(&self) -> f64 {
        let right: Vec<&CVec> = self.blocks.iter().flat_map(|b| b.right.iter()).collect();
        let dual: Vec<&CVec> = self.blocks.iter().flat_map(|b| b.dual.iter()).collect();
        let mut worst = 0.0f64;
        for (j, r) in right.iter().enumerate() {
            for (l, d) in dual.iter().enumerate() {
                let target = if j == l { 1.0 } else { 0.0 };
                worst = worst.max((pairing(r, d) - target).norm());
            }
        }
        worst
    }

    /// Largest residual of `B φ_n − λ φ_n − φ_{n−1}` over all chains.
    pub fn chain_residual(&self) -> f64 {
        let b = self.generator.map(|v| Complex64::new(v, 0.0));
        let mut worst = 0.0f64;
        for block in &self.blocks {
            for n in 0..block.size() {
                let (start, _) = block.chain_of(n);
                let mut r = &b * &block.right[n] - &block.right[n] * block.eigenvalue;
                if n > start {
                    r -= &block.right[n - 1];
                }
                worst = worst.max(r.camax());
            }
        }
        worst
    }
}

pub fn to_complex(f: &DVector<f64>) -> CVec {
    f.map(|v| Complex64::new(v, 0.0))
}

/// Full Jordan decomposition of `B` with biorthonormal dual chains.
pub fn spectral_decompose(b: &DMatrix<f64>) -> Result<SpectralData> {
    let triplet = eigen_triplet(b)?;
    let k = b.nrows();
    let scale = norm_inf(b).max(1.0);
    let ctol = CLUSTER_REL_TOL * scale;
    let fail = |detail: String| Error::Spectral {
        cluster_tol: ctol,
        detail,
    };

    let clusters = cluster(&eigenvalues(b), ctol);
    let perron = clusters
        .iter()
        .position(|c| (c.centre - triplet.lambda1).norm() <= ctol)
        .ok_or_else(|| fail("no eigenvalue cluster at the Perron root".into()))?;
    if clusters[perron].size != 1 {
        return Err(fail(format!(
            "Perron root is not simple ({} eigenvalues within tolerance)",
            clusters[perron].size
        )));
    }

    let mut blocks = vec![SpectralBlock {
        eigenvalue: Complex64::new(triplet.lambda1, 0.0),
        chain_lengths: vec![1],
        right: vec![to_complex(&triplet.phi)],
        dual: vec![to_complex(&triplet.phitilde)],
    }];

    let breal = b.clone();
    let bcomplex = b.map(|v| Complex64::new(v, 0.0));
    let mut lower = Vec::new();
    for (idx, c) in clusters.iter().enumerate() {
        if idx == perron {
            continue;
        }
        if c.centre.im.abs() <= ctol {
            let lam = c.centre.re;
            let n = &breal - DMatrix::identity(k, k) * lam;
            let chains = jordan_chains(&n, c.size).map_err(&fail)?;
            blocks.push(block_from_chains(
                Complex64::new(lam, 0.0),
                chains
                    .into_iter()
                    .map(|ch| ch.iter().map(to_complex).collect())
                    .collect(),
            ));
        } else if c.centre.im > 0.0 {
            let n = &bcomplex - DMatrix::identity(k, k) * c.centre;
            let chains = jordan_chains(&n, c.size).map_err(&fail)?;
            blocks.push(block_from_chains(c.centre, chains));
        } else {
            lower.push(c.clone());
        }
    }

    // Each lower-half-plane cluster is the exact conjugate of an upper one.
    let upper_count = blocks.len();
    let mut used = vec![false; upper_count];
    for c in &lower {
        let partner = (1..upper_count)
            .find(|&j| {
                !used[j]
                    && blocks[j].eigenvalue.im > 0.0
                    && blocks[j].size() == c.size
                    && (blocks[j].eigenvalue.conj() - c.centre).norm() <= ctol * c.size as f64
            })
            .ok_or_else(|| fail(format!("no conjugate partner for eigenvalue {}", c.centre)))?;
        used[partner] = true;
        let src = &blocks[partner];
        let conj_block = SpectralBlock {
            eigenvalue: src.eigenvalue.conj(),
            chain_lengths: src.chain_lengths.clone(),
            right: src.right.iter().map(|v| v.map(|z| z.conj())).collect(),
            dual: Vec::new(),
        };
        blocks.push(conj_block);
    }

    let perron_block = blocks.remove(0);
    blocks.sort_by(|x, y| {
        y.eigenvalue
            .re
            .total_cmp(&x.eigenvalue.re)
            .then(y.eigenvalue.im.total_cmp(&x.eigenvalue.im))
    });
    blocks.insert(0, perron_block);
    if blocks.len() > 1 && blocks[1].eigenvalue.re >= triplet.lambda1 - ctol {
        return Err(fail("Perron root is not strictly dominant".into()));
    }

    let conj_pair = pair_blocks(&blocks);

    // Duals: rows of P⁻¹, conjugated for the sesquilinear pairing.
    let columns: Vec<CVec> = blocks
        .iter()
        .flat_map(|bl| bl.right.iter().cloned())
        .collect();
    if columns.len() != k {
        return Err(fail(format!(
            "generalized eigenvectors span {} of {k} dimensions",
            columns.len()
        )));
    }
    let p = DMatrix::from_columns(&columns);
    let pinv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| fail("generalized eigenvector matrix is singular".into()))?;
    let defect = (&pinv * &p - DMatrix::<Complex64>::identity(k, k)).camax();
    if defect > 1e-8 {
        return Err(fail(format!(
            "generalized eigenvector matrix ill-conditioned (defect {defect:e})"
        )));
    }
    let mut col = 0;
    for bl in blocks.iter_mut() {
        let n = bl.size();
        bl.dual = (col..col + n)
            .map(|r| pinv.row(r).transpose().map(|z| z.conj()))
            .collect();
        if bl.is_real() {
            for d in bl.dual.iter_mut() {
                d.apply(|z| z.im = 0.0);
            }
        }
        col += n;
    }
    blocks[0].dual = vec![to_complex(&triplet.phitilde)];
    for k0 in 0..blocks.len() {
        let k1 = conj_pair[k0];
        if blocks[k0].eigenvalue.im > 0.0 {
            let conj_dual: Vec<CVec> = blocks[k0]
                .dual
                .iter()
                .map(|v| v.map(|z| z.conj()))
                .collect();
            blocks[k1].dual = conj_dual;
        }
    }

    Ok(SpectralData {
        lambda1: triplet.lambda1,
        phi: triplet.phi,
        phitilde: triplet.phitilde,
        blocks,
        conj_pair,
        cluster_tol: ctol,
        generator: b.clone(),
    })
}

fn block_from_chains(eigenvalue: Complex64, chains: Vec<Vec<CVec>>) -> SpectralBlock {
    SpectralBlock {
        eigenvalue,
        chain_lengths: chains.iter().map(|c| c.len()).collect(),
        right: chains.into_iter().flatten().collect(),
        dual: Vec::new(),
    }
}

fn pair_blocks(blocks: &[SpectralBlock]) -> Vec<usize> {
    (0..blocks.len())
        .map(|k| {
            if blocks[k].is_real() {
                return k;
            }
            let target = blocks[k].eigenvalue.conj();
            (0..blocks.len())
                .find(|&j| j != k && blocks[j].eigenvalue == target)
                .expect("conjugate blocks are constructed in pairs")
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Cluster {
    centre: Complex64,
    size: usize,
}

/// Single-linkage clustering of eigenvalues at distance `tol`.
fn cluster(eigs: &[Complex64], tol: f64) -> Vec<Cluster> {
    let n = eigs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if (eigs[i] - eigs[j]).norm() <= tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut groups: Vec<(usize, Vec<Complex64>)> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        match groups.iter_mut().find(|(root, _)| *root == r) {
            Some((_, g)) => g.push(eigs[i]),
            None => groups.push((r, vec![eigs[i]])),
        }
    }
    groups
        .into_iter()
        .map(|(_, g)| Cluster {
            centre: g.iter().sum::<Complex64>() / g.len() as f64,
            size: g.len(),
        })
        .collect()
}

/// Jordan chains of `N = B − λI` for an eigenvalue of algebraic multiplicity
/// `mult`. Each chain is returned eigenvector first.
fn jordan_chains<T>(
    n: &DMatrix<T>,
    mult: usize,
) -> std::result::Result<Vec<Vec<DVector<T>>>, String>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let k = n.nrows();
    let mut kernels: Vec<Vec<DVector<T>>> = vec![Vec::new()];
    let mut dims = vec![0usize];
    let mut power = DMatrix::<T>::identity(k, k);
    for level in 1..=mult {
        power = &power * n;
        let svd = SVD::new(power.clone(), false, true);
        let sv = &svd.singular_values;
        let thr = RANK_REL_TOL * sv.max().max(1.0);
        let nullity = sv.iter().filter(|&&s| s <= thr).count();
        if nullity > mult {
            return Err(format!(
                "kernel of (B − λI)^{level} has dimension {nullity} > multiplicity {mult}"
            ));
        }
        if nullity <= dims[level - 1] {
            return Err(format!(
                "generalized eigenspace stalls at dimension {nullity} of {mult} (level {level})"
            ));
        }
        let vt = svd.v_t.expect("v_t requested");
        kernels.push((k - nullity..k).map(|r| vt.row(r).adjoint()).collect());
        dims.push(nullity);
        if nullity == mult {
            break;
        }
    }
    if *dims.last().unwrap() != mult {
        return Err(format!(
            "generalized eigenspace reaches dimension {} of {mult}",
            dims.last().unwrap()
        ));
    }

    let depth = dims.len() - 1;
    let mut chains: Vec<Vec<DVector<T>>> = Vec::new();
    for level in (1..=depth).rev() {
        let existing: Vec<DVector<T>> = chains
            .iter()
            .filter(|c| c.len() >= level)
            .map(|c| c[level - 1].clone())
            .collect();
        let need = (dims[level] - dims[level - 1])
            .checked_sub(existing.len())
            .ok_or_else(|| format!("inconsistent chain count at level {level}"))?;
        if need == 0 {
            continue;
        }
        let mut span = kernels[level - 1].clone();
        span.extend(existing);
        let q = orthonormalize(&span);
        let residuals: Vec<DVector<T>> =
            kernels[level].iter().map(|v| project_out(v, &q)).collect();
        let svd = SVD::new(DMatrix::from_columns(&residuals), true, false);
        let u = svd.u.expect("u requested");
        for c in 0..need {
            let mut top = u.column(c).into_owned();
            fix_phase(&mut top);
            let mut chain = vec![top];
            for _ in 1..level {
                let next = n * chain.last().unwrap();
                chain.push(next);
            }
            chain.reverse();
            chains.push(chain);
        }
    }
    Ok(chains)
}

fn orthonormalize<T>(vs: &[DVector<T>]) -> Vec<DVector<T>>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let mut q: Vec<DVector<T>> = Vec::new();
    for v in vs {
        let mut w = v.clone();
        // two passes of modified Gram–Schmidt
        for _ in 0..2 {
            w = project_out(&w, &q);
        }
        let norm = w.norm();
        if norm > 1e-8 * v.norm().max(f64::MIN_POSITIVE) {
            q.push(w.unscale(norm));
        }
    }
    q
}

fn project_out<T>(v: &DVector<T>, q: &[DVector<T>]) -> DVector<T>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let mut w = v.clone();
    for e in q {
        let c = e.dotc(&w);
        w.axpy(-c, e, T::one());
    }
    w
}

/// Unit norm, largest-modulus entry real and positive.
fn fix_phase<T>(v: &mut DVector<T>)
where
    T: ComplexField<RealField = f64> + Copy,
{
    let norm = v.norm();
    let mut best = 0;
    for i in 0..v.len() {
        if v[i].modulus() > v[best].modulus() * (1.0 + 1e-12) {
            best = i;
        }
    }
    let pivot = v[best];
    let phase = pivot.scale(1.0 / pivot.modulus());
    let rot = phase.conjugate().scale(1.0 / norm);
    for x in v.iter_mut() {
        *x *= rot;
    }
}
