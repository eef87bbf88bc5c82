//! Geometry of the block unitary manifold `U(R_G)^G`.
//!
//! Points are block-diagonal scattering matrices whose blocks are unitary.
//! The metric is the embedded one, `⟨A, B⟩ = Σ_g Re Tr(A_g^H B_g)`; the
//! tangent space at `Θ` is `{Ξ : Θ_g^H Ξ_g skew-Hermitian}`; the retraction is
//! the Q factor of `Θ_g + αΞ_g` with a positive real R diagonal.
//!
//! Also home to the Euclidean projections onto symmetric, unitary and
//! symmetric-unitary matrices used to initialize and finalize the ascent.

use log::warn;

use crate::rng::{complex_gaussian_matrix, stream_rng, Stream};
use crate::{BlockDiagonal, CMatrix, Error, Result, ScatteringMatrix, SystemDims, C64};

/// A column of `Θ + αΞ` whose residual norm drops below this fraction of the
/// matrix norm counts as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Smallest-to-largest singular value ratio below which the symmetric
/// projection is reported as degenerate.
const DEGENERATE_RATIO: f64 = 1e-12;

const UNITARY_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-10;

/// A direction in the tangent space, stored as ambient block representatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentDirection {
    pub blocks: BlockDiagonal,
}

impl TangentDirection {
    pub fn new(blocks: BlockDiagonal) -> Self {
        Self { blocks }
    }

    pub fn zeros_like(theta: &ScatteringMatrix) -> Self {
        Self::new(BlockDiagonal::zeros(theta.groups(), theta.group_size()))
    }

    pub fn norm(&self) -> f64 {
        self.blocks.norm()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.is_zero()
    }
}

/// `Σ_g Re Tr(A_g^H B_g)`.
pub fn riemannian_inner(a: &TangentDirection, b: &TangentDirection) -> Result<f64> {
    if !a.blocks.same_shape(&b.blocks) {
        return Err(Error::invalid(format!(
            "block structures differ: {}x{} vs {}x{}",
            a.blocks.groups(),
            a.blocks.block_size(),
            b.blocks.groups(),
            b.blocks.block_size()
        )));
    }
    Ok(a.blocks.real_inner(&b.blocks))
}

/// `out = A^H B` for column-major `n×n` blocks.
fn mul_adjoint(a: &[C64], b: &[C64], out: &mut [C64], n: usize) {
    for j in 0..n {
        let bj = &b[j * n..(j + 1) * n];
        for i in 0..n {
            let ai = &a[i * n..(i + 1) * n];
            out[i + j * n] = ai.iter().zip(bj).map(|(x, y)| x.conj() * y).sum();
        }
    }
}

/// `out -= A B` for column-major `n×n` blocks.
fn sub_product(out: &mut [C64], a: &[C64], b: &[C64], n: usize) {
    for j in 0..n {
        for l in 0..n {
            let blj = b[l + j * n];
            let al = &a[l * n..(l + 1) * n];
            let oj = &mut out[j * n..(j + 1) * n];
            for (o, &x) in oj.iter_mut().zip(al) {
                *o -= x * blj;
            }
        }
    }
}

/// Tangent projection of `grad` at `theta`, block by block:
/// `∇ − Θ·(Θ^H ∇ + ∇^H Θ)/2`.
pub(crate) fn project_blocks(theta: &BlockDiagonal, grad: &BlockDiagonal) -> BlockDiagonal {
    assert!(theta.same_shape(grad), "gradient and point have different block structure");
    let n = theta.block_size();
    let mut out = grad.clone();
    let mut s = vec![C64::new(0.0, 0.0); n * n];
    let mut h = vec![C64::new(0.0, 0.0); n * n];
    for g in 0..theta.groups() {
        let th = theta.block_slice(g);
        mul_adjoint(th, grad.block_slice(g), &mut s, n);
        for j in 0..n {
            for i in 0..n {
                h[i + j * n] = (s[i + j * n] + s[j + i * n].conj()) * 0.5;
            }
        }
        sub_product(out.block_slice_mut(g), th, &h, n);
    }
    out
}

/// Riemannian gradient (or any ambient direction) projected to the tangent
/// space at `theta`. Assumes unitary blocks.
pub fn tangent_project(theta: &ScatteringMatrix, grad: &BlockDiagonal) -> Result<TangentDirection> {
    if !theta.blocks().same_shape(grad) {
        return Err(Error::invalid("gradient block structure does not match the point"));
    }
    Ok(TangentDirection::new(project_blocks(theta.blocks(), grad)))
}

/// Replaces the columns of `a` (column-major `n×n`) by the Q factor of its QR
/// decomposition with positive real R diagonal. Modified Gram-Schmidt, with a
/// second pass for any column that loses more than half its norm. Returns
/// `false` on rank deficiency.
fn orthonormalize(a: &mut [C64], n: usize) -> bool {
    if n == 1 {
        let r = a[0].norm();
        if !(r > 0.0) || !r.is_finite() {
            return false;
        }
        a[0] /= r;
        return true;
    }
    let scale = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return false;
    }
    for j in 0..n {
        let (done, rest) = a.split_at_mut(j * n);
        let col = &mut rest[..n];
        let mut norm = col_norm(col);
        for _ in 0..2 {
            let before = norm;
            for i in 0..j {
                let qi = &done[i * n..(i + 1) * n];
                let r: C64 = qi.iter().zip(col.iter()).map(|(q, x)| q.conj() * x).sum();
                for (x, q) in col.iter_mut().zip(qi) {
                    *x -= r * q;
                }
            }
            norm = col_norm(col);
            if j == 0 || norm > 0.5 * before {
                break;
            }
        }
        if !(norm > RANK_TOL * scale) {
            return false;
        }
        let inv = 1.0 / norm;
        col.iter_mut().for_each(|x| *x *= inv);
    }
    true
}

fn col_norm(col: &[C64]) -> f64 {
    col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Writes the retraction of `theta` along `xi` with step `alpha` into `out`.
pub(crate) fn retract_into(
    theta: &BlockDiagonal,
    xi: &BlockDiagonal,
    alpha: f64,
    out: &mut BlockDiagonal,
) -> Result<()> {
    out.as_mut_slice().copy_from_slice(theta.as_slice());
    if alpha == 0.0 || xi.is_zero() {
        return Ok(());
    }
    out.axpy(alpha, xi);
    let n = theta.block_size();
    for g in 0..theta.groups() {
        if !orthonormalize(out.block_slice_mut(g), n) {
            return Err(Error::RetractionFailure { block: g });
        }
    }
    Ok(())
}

/// QR retraction `Θ_g ← Q(Θ_g + αΞ_g)` with the R diagonal made positive real.
///
/// A zero step returns `theta` unchanged. A rank-deficient block yields
/// [`Error::RetractionFailure`] so a line search can shrink the step.
pub fn retract(theta: &ScatteringMatrix, xi: &TangentDirection, alpha: f64) -> Result<ScatteringMatrix> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("step must be >= 0, got {alpha}")));
    }
    if !theta.blocks().same_shape(&xi.blocks) {
        return Err(Error::invalid("direction block structure does not match the point"));
    }
    let mut out = theta.clone();
    retract_into(theta.blocks(), &xi.blocks, alpha, out.blocks_mut())?;
    Ok(out)
}

fn check_square(m: &CMatrix) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::invalid(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `(A + A^T)/2`, the nearest complex symmetric matrix in Frobenius norm.
pub fn project_symmetric(m: &CMatrix) -> Result<CMatrix> {
    check_square(m)?;
    Ok((m + m.transpose()) * C64::new(0.5, 0.0))
}

fn polar_factor(m: &CMatrix) -> (CMatrix, f64) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let s = &svd.singular_values;
    let max = s.max();
    let ratio = if max > 0.0 { s.min() / max } else { 0.0 };
    (u * v_t, ratio)
}

/// `U V^H` from the SVD `A = U Σ V^H`: the unitary matrix nearest to `A`.
pub fn project_unitary(m: &CMatrix) -> Result<CMatrix> {
    check_square(m)?;
    if m.nrows() == 1 {
        let z = m[(0, 0)];
        let r = z.norm();
        return Ok(CMatrix::from_element(1, 1, if r > 0.0 { z / r } else { C64::new(1.0, 0.0) }));
    }
    Ok(polar_factor(m).0)
}

/// Outcome of [`project_unitary_symmetric_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnisymProjection {
    pub matrix: CMatrix,
    /// The symmetrized input was numerically singular.
    pub degenerate: bool,
    pub unitarity_residual: f64,
    pub symmetry_residual: f64,
}

fn residuals(m: &CMatrix) -> (f64, f64) {
    let n = m.nrows();
    (
        (m * m.adjoint() - CMatrix::identity(n, n)).norm(),
        (m - m.transpose()).norm(),
    )
}

/// Symmetrize, then take the SVD polar factor, then symmetrize once more and
/// confirm unitarity survived.
///
/// The polar factor of a nonsingular complex symmetric matrix is itself
/// symmetric, so the final symmetrization only removes rounding. When the
/// symmetrized input is singular the polar factor is not unique and may come
/// out asymmetric; the result is then polished by alternating the two
/// projections and flagged `degenerate`.
pub fn project_unitary_symmetric_report(m: &CMatrix) -> Result<UnisymProjection> {
    check_square(m)?;
    let n = m.nrows();
    if n == 1 {
        let z = m[(0, 0)];
        let r = z.norm();
        let degenerate = !(r > 0.0);
        if degenerate {
            warn!("unitary-symmetric projection of a zero scalar; returning 1");
        }
        let out = CMatrix::from_element(1, 1, if degenerate { C64::new(1.0, 0.0) } else { z / r });
        let (u, s) = residuals(&out);
        return Ok(UnisymProjection {
            matrix: out,
            degenerate,
            unitarity_residual: u,
            symmetry_residual: s,
        });
    }

    let b = project_symmetric(m)?;
    let (p, ratio) = polar_factor(&b);
    let degenerate = !(ratio >= DEGENERATE_RATIO);
    if degenerate {
        warn!("symmetrized matrix is numerically singular (σ_min/σ_max = {ratio:e})");
    }
    let mut out = project_symmetric(&p)?;
    let (mut uni, mut sym) = residuals(&out);
    let mut rounds = 0;
    while (uni > UNITARY_TOL || sym > SYMMETRY_TOL) && rounds < 100 {
        out = project_symmetric(&polar_factor(&out).0)?;
        (uni, sym) = residuals(&out);
        rounds += 1;
    }
    if uni > UNITARY_TOL || sym > SYMMETRY_TOL {
        warn!("unitary-symmetric projection left residuals unitary={uni:e} symmetric={sym:e}");
    }
    Ok(UnisymProjection {
        matrix: out,
        degenerate,
        unitarity_residual: uni,
        symmetry_residual: sym,
    })
}

pub fn project_unitary_symmetric(m: &CMatrix) -> Result<CMatrix> {
    Ok(project_unitary_symmetric_report(m)?.matrix)
}

/// Applies [`project_unitary_symmetric`] to every block.
pub fn project_feasible(theta: &BlockDiagonal) -> ScatteringMatrix {
    let n = theta.block_size();
    ScatteringMatrix::new(BlockDiagonal::from_fn(theta.groups(), n, |g| {
        project_unitary_symmetric(&theta.block(g).into_owned())
            .expect("blocks are square and non-empty")
    }))
}

/// Random feasible starting point: per block, a complex Gaussian matrix
/// pushed through the unitary-symmetric projection.
pub fn random_unitary_symmetric(dims: &SystemDims, seed: u64) -> ScatteringMatrix {
    let mut rng = stream_rng(seed, Stream::Init);
    let n = dims.group_size();
    let raw = BlockDiagonal::from_fn(dims.groups, n, |_| complex_gaussian_matrix(&mut rng, n, n, 1.0));
    project_feasible(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::complex_gaussian_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_point(groups: usize, n: usize, seed: u64) -> ScatteringMatrix {
        let dims = SystemDims::new(1, 1, groups * n, groups).unwrap();
        random_unitary_symmetric(&dims, seed)
    }

    /// Unitary but not symmetric: the Q factor of a Gaussian matrix.
    fn random_unitary_point(groups: usize, n: usize, seed: u64) -> ScatteringMatrix {
        let mut r = rng(seed);
        ScatteringMatrix::new(BlockDiagonal::from_fn(groups, n, |_| {
            project_unitary(&complex_gaussian_matrix(&mut r, n, n, 1.0)).unwrap()
        }))
    }

    fn random_ambient(groups: usize, n: usize, seed: u64) -> BlockDiagonal {
        let mut r = rng(seed);
        BlockDiagonal::from_fn(groups, n, |_| complex_gaussian_matrix(&mut r, n, n, 1.0))
    }

    #[test]
    fn inner_product_examples() {
        let a = TangentDirection::new(random_ambient(2, 3, 1));
        let b = TangentDirection::new(random_ambient(2, 3, 2));
        assert!((riemannian_inner(&a, &a).unwrap() - a.norm().powi(2)).abs() < 1e-12);
        let mut ia = a.clone();
        ia.blocks.scale(c(0.0, 1.0));
        assert!(riemannian_inner(&a, &ia).unwrap().abs() < 1e-12);
        let oracle: f64 = a
            .blocks
            .as_slice()
            .iter()
            .zip(b.blocks.as_slice())
            .map(|(x, y)| (x.conj() * y).re)
            .sum();
        assert!((riemannian_inner(&a, &b).unwrap() - oracle).abs() < 1e-12);
        let other = TangentDirection::new(random_ambient(3, 2, 3));
        assert!(riemannian_inner(&a, &other).is_err());
    }

    #[test]
    fn projecting_the_point_gives_zero() {
        let theta = random_unitary_point(2, 4, 4);
        let p = tangent_project(&theta, theta.blocks()).unwrap();
        assert!(p.norm() < 1e-12);
    }

    #[test]
    fn tangent_projection_is_idempotent_and_skew() {
        let theta = random_unitary_point(3, 4, 5);
        let grad = random_ambient(3, 4, 6);
        let once = tangent_project(&theta, &grad).unwrap();
        let twice = tangent_project(&theta, &once.blocks).unwrap();
        assert!(once.blocks.max_abs_diff(&twice.blocks) < 1e-12);
        for g in 0..3 {
            let t = theta.blocks().block(g);
            let x = once.blocks.block(g);
            let s = t.adjoint() * x;
            assert!((&s + s.adjoint()).norm() < 1e-10);
        }
    }

    #[test]
    fn retraction_at_zero_step_is_exact() {
        let theta = random_point(4, 2, 7);
        let xi = TangentDirection::new(random_ambient(4, 2, 8));
        assert_eq!(retract(&theta, &xi, 0.0).unwrap(), theta);
        let zero = TangentDirection::zeros_like(&theta);
        assert_eq!(retract(&theta, &zero, 1.0).unwrap(), theta);
        let id = ScatteringMatrix::identity(&SystemDims::new(1, 1, 4, 1).unwrap());
        assert_eq!(retract(&id, &TangentDirection::zeros_like(&id), 0.5).unwrap(), id);
        assert!(retract(&theta, &xi, -1.0).is_err());
    }

    #[test]
    fn retraction_matches_first_order_step() {
        let theta = random_unitary_point(2, 4, 9);
        let xi = tangent_project(&theta, &random_ambient(2, 4, 10)).unwrap();
        let alpha = 1e-8;
        let moved = retract(&theta, &xi, alpha).unwrap();
        let linear = theta.blocks().add_scaled(&xi.blocks, alpha);
        let diff = moved.blocks().add_scaled(&linear, -1.0).norm();
        assert!(diff <= 1e-12, "diff = {diff}");
    }

    #[test]
    fn retraction_matches_householder_qr() {
        let theta = random_unitary_point(1, 5, 11);
        let xi = tangent_project(&theta, &random_ambient(1, 5, 12)).unwrap();
        let moved = retract(&theta, &xi, 0.7).unwrap();
        let y = theta.blocks().add_scaled(&xi.blocks, 0.7).block(0).into_owned();
        let qr = y.qr();
        let (mut q, r) = (qr.q(), qr.r());
        for j in 0..5 {
            let phase = r[(j, j)] / r[(j, j)].norm();
            let mut col = q.column_mut(j);
            col *= phase;
        }
        assert!((moved.blocks().block(0) - q).norm() < 1e-12);
        assert!(moved.unitarity_residual() < 1e-12);
    }

    #[test]
    fn retraction_reports_rank_deficiency() {
        let theta = ScatteringMatrix::identity(&SystemDims::new(1, 1, 2, 1).unwrap());
        // Θ + 1·Ξ = 0 for Ξ = −I.
        let mut xi = TangentDirection::zeros_like(&theta);
        xi.blocks.block_mut(0).fill_with_identity();
        xi.blocks.scale(c(-1.0, 0.0));
        assert!(matches!(
            retract(&theta, &xi, 1.0),
            Err(Error::RetractionFailure { block: 0 })
        ));
    }

    #[test]
    fn symmetric_projection_examples() {
        let m = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]);
        let expected = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0.5, 0.), c(0.5, 0.), c(0., 0.)]);
        assert_eq!(project_symmetric(&m).unwrap(), expected);
        assert_eq!(project_symmetric(&expected).unwrap(), expected);
        assert!(project_symmetric(&CMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn symmetric_projection_is_least_squares() {
        // Over symmetric S, ‖M − S‖² is separable: each pair (i,j),(j,i) is
        // minimized by their mean. Compare against random symmetric candidates.
        let mut r = rng(13);
        let m = complex_gaussian_matrix(&mut r, 4, 4, 1.0);
        let p = project_symmetric(&m).unwrap();
        let best = (&m - &p).norm();
        for _ in 0..200 {
            let d = complex_gaussian_matrix(&mut r, 4, 4, 0.01);
            let s = &p + (&d + d.transpose());
            assert!((&m - &s).norm() >= best - 1e-15);
        }
    }

    #[test]
    fn unitary_projection_examples() {
        let two_i = CMatrix::identity(3, 3) * c(2.0, 0.0);
        assert!((project_unitary(&two_i).unwrap() - CMatrix::identity(3, 3)).norm() < 1e-14);
        let u = random_unitary_point(1, 4, 14).blocks().block(0).into_owned();
        assert!((project_unitary(&u).unwrap() - &u).norm() < 1e-12);
    }

    #[test]
    fn unitary_projection_is_polar_factor() {
        let mut r = rng(15);
        for n in 2..=4 {
            let m = complex_gaussian_matrix(&mut r, n, n, 1.0);
            // (M^H M)^{-1/2} through the Hermitian eigendecomposition
            let eig = (m.adjoint() * &m).symmetric_eigen();
            let inv_sqrt = eig.eigenvalues.map(|l| C64::new(1.0 / l.sqrt(), 0.0));
            let q = &eig.eigenvectors;
            let root = q * CMatrix::from_diagonal(&inv_sqrt) * q.adjoint();
            let polar = &m * root;
            assert!((project_unitary(&m).unwrap() - polar).norm() < 1e-10, "n={n}");
        }
    }

    #[test]
    fn unitary_projection_maximizes_alignment_in_1x1() {
        let z = c(-0.3, 0.8);
        let q = project_unitary(&CMatrix::from_element(1, 1, z)).unwrap()[(0, 0)];
        let best = (q.conj() * z).re;
        for step in 0..3600 {
            let phi = step as f64 * std::f64::consts::PI / 1800.0;
            let cand = C64::from_polar(1.0, phi);
            assert!((cand.conj() * z).re <= best + 1e-15);
        }
    }

    #[test]
    fn unisym_projection_examples() {
        let i3 = CMatrix::identity(3, 3);
        assert!((project_unitary_symmetric(&i3).unwrap() - &i3).norm() < 1e-14);
        let feasible = random_point(1, 5, 16).blocks().block(0).into_owned();
        assert!((project_unitary_symmetric(&feasible).unwrap() - &feasible).norm() < 1e-10);
        let z = c(3.0, -4.0);
        let out = project_unitary_symmetric(&CMatrix::from_element(1, 1, z)).unwrap();
        assert_eq!(out[(0, 0)], z / z.norm());
    }

    #[test]
    fn unisym_projection_of_random_matrix_is_feasible() {
        let mut r = rng(17);
        for n in 1..=8 {
            let m = complex_gaussian_matrix(&mut r, n, n, 1.0);
            let out = project_unitary_symmetric_report(&m).unwrap();
            assert!(!out.degenerate);
            assert!(out.unitarity_residual <= 1e-10);
            assert!(out.symmetry_residual <= 1e-8);
        }
    }

    #[test]
    fn unisym_projection_flags_singular_input() {
        // Antisymmetric input symmetrizes to zero.
        let m = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(-1., 0.), c(0., 0.)]);
        let out = project_unitary_symmetric_report(&m).unwrap();
        assert!(out.degenerate);
        let out = project_unitary_symmetric_report(&CMatrix::zeros(1, 1)).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.matrix[(0, 0)], c(1.0, 0.0));
    }

    #[test]
    fn random_start_is_feasible_and_seeded() {
        let dims = SystemDims::new(1, 1, 8, 2).unwrap();
        let a = random_unitary_symmetric(&dims, 3);
        assert_eq!(a, random_unitary_symmetric(&dims, 3));
        assert_ne!(a, random_unitary_symmetric(&dims, 4));
        assert!(a.is_feasible());
        let sc = random_unitary_symmetric(&SystemDims::new(1, 1, 8, 8).unwrap(), 5);
        for b in sc.blocks().blocks() {
            assert!((b[(0, 0)].norm() - 1.0).abs() < 1e-15);
        }
    }
}
