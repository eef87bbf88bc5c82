//! Closed-form Euclidean gradients of the penalized sum-rate.
//!
//! Gradients follow the complex-gradient convention `∇f = 2·∂f/∂Θ*` for
//! real `f`, so the directional derivative along `Δ` is `Re Tr(∇f^H Δ)`.
//!
//! For user `k`, group `g` and beamformer column `l` the building block is
//! the rank-one matrix `∂(e_k^(g) v_l)/∂Θ_g = h_k^(g) (W^(g) v_l)^T`. With
//! the quotient rule on `γ_k = χ_k/ψ_k` the sum-rate gradient becomes
//!
//! ```text
//! ∇_g = Σ_k [ψ_k ∇χ_k − χ_k ∇ψ_k] / (ln2·(1+γ_k)·ψ_k²)
//!     = H_g^H · M · A_g^H,     A_g = W^(g) V,
//! M[k,k] = 2·x_kk / (ln2 (1+γ_k) ψ_k),   M[k,i] = −2γ_k·x_ki / (ln2 (1+γ_k) ψ_k),
//! ```
//!
//! where `x_kl = e_k v_l`. The symmetry penalty contributes `−4ν(Θ_g − Θ_g^T)`.
//!
//! Two variants differ only in which cross gains enter the coefficients:
//! [`GradientMode::Groupwise`] uses the group-wise cascade of block `g`
//! alone (every other block zeroed), which is exact for the group-wise
//! surrogate objective; [`GradientMode::ExactCoupled`] uses the full cascade
//! and is the true gradient of the penalized objective. They coincide for
//! `G = 1`.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::model::{equivalent_channel, Problem};
use crate::{
    BlockDiagonal, Beamformer, CMatrix, ChannelSet, Error, Result, ScatteringMatrix, C64,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Per-group formula with the other groups' contributions set to zero.
    #[default]
    Groupwise,
    /// Gradient of the true objective with respect to each block.
    ExactCoupled,
}

impl GradientMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradientMode::Groupwise => "groupwise",
            GradientMode::ExactCoupled => "exact_coupled",
        }
    }
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "groupwise" => Ok(GradientMode::Groupwise),
            "exact_coupled" | "exact" | "coupled" => Ok(GradientMode::ExactCoupled),
            other => Err(Error::invalid(format!("unknown gradient mode '{other}'"))),
        }
    }
}

/// Gradient of `−ν‖Θ_g − Θ_g^T‖_F²`, i.e. `−4ν(Θ_g − Θ_g^T)`.
pub fn penalty_gradient(theta_g: &CMatrix, nu: f64) -> CMatrix {
    (theta_g - theta_g.transpose()) * C64::new(-4.0 * nu, 0.0)
}

/// `∇_A Tr{A* A} = 2A^T`.
pub fn conj_trace_gradient(a: &CMatrix) -> CMatrix {
    a.transpose() * C64::new(2.0, 0.0)
}

/// `∇_B |a^T B c|² = 2·d·conj(a)·c^H` with `d = a^T B c`.
pub fn bilinear_gradient(a: &DVector<C64>, b: &CMatrix, c: &DVector<C64>) -> CMatrix {
    let d = (a.transpose() * b * c)[(0, 0)];
    a.conjugate() * c.adjoint() * (d * 2.0)
}

/// Per-user quotient-rule coefficients `M` for a cross-gain matrix.
fn coefficients(gains: &CMatrix, noise: f64) -> CMatrix {
    let k = gains.nrows();
    let mut m = CMatrix::zeros(k, k);
    for u in 0..k {
        let chi = gains[(u, u)].norm_sqr();
        let mut psi = noise;
        for i in 0..k {
            if i != u {
                psi += gains[(u, i)].norm_sqr();
            }
        }
        let gamma = chi / psi;
        let denom = LN_2 * (1.0 + gamma) * psi;
        for i in 0..k {
            let w = if i == u { 2.0 / denom } else { -2.0 * gamma / denom };
            m[(u, i)] = gains[(u, i)] * w;
        }
    }
    m
}

impl Problem {
    /// Writes `H_g^H M A_g^H − 4ν(Θ_g − Θ_g^T)` into block `g` of `out`.
    fn assemble_block(
        &self,
        theta: &BlockDiagonal,
        g: usize,
        m: &CMatrix,
        nu: f64,
        scratch: &mut [C64],
        out: &mut BlockDiagonal,
    ) {
        let (n, k) = (self.group_size(), self.users());
        let h = self.rx_block(g);
        let a = self.tx_block(g);
        // scratch = M A_g^H, K×R_G column-major
        for j in 0..n {
            for u in 0..k {
                let mut acc = C64::new(0.0, 0.0);
                for l in 0..k {
                    acc += m[(u, l)] * a[(j, l)].conj();
                }
                scratch[u + j * k] = acc;
            }
        }
        let th = theta.block_slice(g);
        let dst = out.block_slice_mut(g);
        for j in 0..n {
            let col = &scratch[j * k..(j + 1) * k];
            for i in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for (u, &s) in col.iter().enumerate() {
                    acc += h[(u, i)].conj() * s;
                }
                if nu != 0.0 {
                    acc -= (th[i + j * n] - th[j + i * n]) * (4.0 * nu);
                }
                dst[i + j * n] = acc;
            }
        }
    }

    /// Euclidean gradient of the penalized objective, one block per group.
    pub fn gradient(&self, theta: &BlockDiagonal, nu: f64, mode: GradientMode) -> BlockDiagonal {
        let mut out = BlockDiagonal::zeros(self.groups(), self.group_size());
        let mut scratch = vec![C64::new(0.0, 0.0); self.users() * self.group_size()];
        match mode {
            GradientMode::ExactCoupled => {
                let m = coefficients(&self.cross_gains(theta), self.noise_power());
                for g in 0..self.groups() {
                    self.assemble_block(theta, g, &m, nu, &mut scratch, &mut out);
                }
            }
            GradientMode::Groupwise => {
                for g in 0..self.groups() {
                    let m = coefficients(&self.group_cross_gains(theta, g), self.noise_power());
                    self.assemble_block(theta, g, &m, nu, &mut scratch, &mut out);
                }
            }
        }
        out
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu >= 0.0) {
        return Err(Error::invalid(format!("penalty weight must be >= 0, got {nu}")));
    }
    Ok(())
}

/// Closed-form Euclidean gradient for a general beamformer.
pub fn euclidean_gradient(
    channels: &ChannelSet,
    theta: &ScatteringMatrix,
    bf: &Beamformer,
    nu: f64,
    mode: GradientMode,
) -> Result<BlockDiagonal> {
    check_nu(nu)?;
    equivalent_channel(channels, theta)?;
    let problem = Problem::new(channels, bf, theta.group_size())?;
    Ok(problem.gradient(theta.blocks(), nu, mode))
}

/// Group-wise gradient for the diagonal power allocation
/// `V = diag(√v_1, …, √v_K)` (requires `K = N`), written with the scalar
/// entries `e_{k,i}^(g)` of the group-wise equivalent channel.
///
/// Each interference term is weighted by its own user's power `v_i`, which
/// is what substituting the diagonal `V` into the general formula produces;
/// with equal powers this is the familiar `v_k`-only form.
pub fn euclidean_gradient_diag_power(
    channels: &ChannelSet,
    theta: &ScatteringMatrix,
    powers: &[f64],
    nu: f64,
) -> Result<BlockDiagonal> {
    check_nu(nu)?;
    let k = channels.users();
    if k != channels.antennas() {
        return Err(Error::invalid(format!(
            "diagonal power allocation needs K = N (K = {k}, N = {})",
            channels.antennas()
        )));
    }
    if powers.len() != k || powers.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("need one nonnegative power per user"));
    }
    equivalent_channel(channels, theta)?;
    let n = theta.group_size();
    let n0 = channels.noise_power();
    let mut out = BlockDiagonal::zeros(theta.groups(), n);
    for g in 0..theta.groups() {
        let block = theta.blocks().block(g);
        let mut grad = penalty_gradient(&block.into_owned(), nu);
        for u in 0..k {
            let view = channels.group_view(u, g, n);
            // e_u^(g) = h_u^(g)T Θ_g W^(g), a 1×N row
            let e = view.h_kg.transpose() * block * &view.w_g;
            let chi = powers[u] * e[(0, u)].norm_sqr();
            let psi: f64 = (0..k)
                .filter(|&i| i != u)
                .map(|i| powers[i] * e[(0, i)].norm_sqr())
                .sum::<f64>()
                + n0;
            let gamma = chi / psi;
            let denom = LN_2 * (1.0 + gamma) * psi * psi;
            let h_conj = view.h_kg.conjugate();
            let w = |i: usize| view.w_g.column(i).conjugate();
            let mut num = &h_conj * w(u).transpose() * (e[(0, u)] * (2.0 * powers[u] * psi));
            for i in (0..k).filter(|&i| i != u) {
                num -= &h_conj * w(i).transpose() * (e[(0, i)] * (2.0 * chi * powers[i]));
            }
            grad += num / C64::new(denom, 0.0);
        }
        out.block_slice_mut(g).copy_from_slice(grad.as_slice());
    }
    Ok(out)
}

/// Central finite-difference gradient in the `2·∂f/∂Θ*` convention:
/// entry `(i, j)` of block `g` is `∂f/∂Re + i·∂f/∂Im`.
pub fn fd_gradient<F>(objective: F, theta: &BlockDiagonal, h: f64) -> BlockDiagonal
where
    F: Fn(&BlockDiagonal) -> f64,
{
    let mut out = BlockDiagonal::zeros(theta.groups(), theta.block_size());
    let mut probe = theta.clone();
    for idx in 0..theta.as_slice().len() {
        let z = theta.as_slice()[idx];
        let mut eval = |delta: C64| {
            probe.as_mut_slice()[idx] = z + delta;
            let v = objective(&probe);
            probe.as_mut_slice()[idx] = z;
            v
        };
        let d_re = (eval(C64::new(h, 0.0)) - eval(C64::new(-h, 0.0))) / (2.0 * h);
        let d_im = (eval(C64::new(0.0, h)) - eval(C64::new(0.0, -h))) / (2.0 * h);
        out.as_mut_slice()[idx] = C64::new(d_re, d_im);
    }
    out
}

/// Finite-difference gradient restricted to block `g`; other blocks are zero.
pub fn fd_gradient_block<F>(objective: F, theta: &BlockDiagonal, g: usize, h: f64) -> CMatrix
where
    F: Fn(&BlockDiagonal) -> f64,
{
    let n = theta.block_size();
    let mut probe = theta.clone();
    let mut out = CMatrix::zeros(n, n);
    for local in 0..n * n {
        let idx = g * n * n + local;
        let z = theta.as_slice()[idx];
        let mut eval = |delta: C64| {
            probe.as_mut_slice()[idx] = z + delta;
            let v = objective(&probe);
            probe.as_mut_slice()[idx] = z;
            v
        };
        let d_re = (eval(C64::new(h, 0.0)) - eval(C64::new(-h, 0.0))) / (2.0 * h);
        let d_im = (eval(C64::new(0.0, h)) - eval(C64::new(0.0, -h))) / (2.0 * h);
        out.as_mut_slice()[local] = C64::new(d_re, d_im);
    }
    out
}

/// `‖a − b‖_F / max(‖b‖_F, 1e-12)`.
pub fn relative_error(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{symmetry_penalty, uniform_power_beamformer};
    use crate::rng::complex_gaussian_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<C64> {
        complex_gaussian_matrix(rng, n, 1, 1.0).column(0).into_owned()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn instance(k: usize, n: usize, r: usize, seed: u64) -> ChannelSet {
        let mut rng = rng(seed);
        let h_tx = complex_gaussian_matrix(&mut rng, r, n, 1.0);
        let h_rx = complex_gaussian_matrix(&mut rng, k, r, 1.0);
        ChannelSet::new(h_tx, h_rx, 0.5).unwrap()
    }

    fn point(groups: usize, size: usize, seed: u64) -> ScatteringMatrix {
        let dims = crate::SystemDims::new(1, 1, groups * size, groups).unwrap();
        crate::manifold::random_unitary_symmetric(&dims, seed)
    }

    fn asymmetric_point(groups: usize, size: usize, seed: u64) -> ScatteringMatrix {
        let mut r = rng(seed);
        ScatteringMatrix::new(BlockDiagonal::from_fn(groups, size, |_| {
            crate::manifold::project_unitary(&complex_gaussian_matrix(&mut r, size, size, 1.0)).unwrap()
        }))
    }

    #[test]
    fn penalty_gradient_examples() {
        let sym = point(1, 3, 1).blocks().block(0).into_owned();
        assert!(penalty_gradient(&sym, 1.0).norm() < 1e-12);
        let m = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]);
        let expected = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(-4., 0.), c(4., 0.), c(0., 0.)]);
        assert_eq!(penalty_gradient(&m, 1.0), expected);
    }

    #[test]
    fn penalty_gradient_matches_fd_and_is_antisymmetric() {
        let theta = asymmetric_point(1, 4, 2);
        let closed = penalty_gradient(&theta.blocks().block(0).into_owned(), 0.7);
        assert!((&closed + closed.transpose()).norm() < 1e-12);
        let fd = fd_gradient(|t| -0.7 * symmetry_penalty(t), theta.blocks(), 1e-6);
        assert!(relative_error(&fd.block(0).into_owned(), &closed) < 1e-7);
    }

    #[test]
    fn identity_examples() {
        assert_eq!(conj_trace_gradient(&CMatrix::identity(2, 2)), CMatrix::identity(2, 2) * c(2.0, 0.0));
        let m = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]);
        let expected = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., 0.), c(2., 0.), c(0., 0.)]);
        assert_eq!(conj_trace_gradient(&m), expected);

        let one = DVector::from_element(1, c(1.0, 0.0));
        let b = CMatrix::from_element(1, 1, c(0.3, -1.2));
        assert_eq!(bilinear_gradient(&one, &b, &one), b.clone() * c(2.0, 0.0));
        let zero = DVector::from_element(1, c(0.0, 0.0));
        assert_eq!(bilinear_gradient(&zero, &b, &one), CMatrix::zeros(1, 1));
    }

    #[test]
    fn identities_match_fd() {
        let mut r = rng(3);
        let a = complex_gaussian_matrix(&mut r, 3, 3, 1.0);
        let wrap = |m: &CMatrix| BlockDiagonal::from_blocks(&[m.clone()]).unwrap();
        let fd = fd_gradient(
            |t| (t.block(0).map(|z| z.conj()) * t.block(0)).trace().re,
            &wrap(&a),
            1e-6,
        );
        assert!(relative_error(&fd.block(0).into_owned(), &conj_trace_gradient(&a)) < 1e-7);

        let av = vector(&mut r, 3);
        let cv = vector(&mut r, 3);
        let b = complex_gaussian_matrix(&mut r, 3, 3, 1.0);
        let fd = fd_gradient(
            |t| (av.transpose() * t.block(0) * &cv)[(0, 0)].norm_sqr(),
            &wrap(&b),
            1e-6,
        );
        assert!(relative_error(&fd.block(0).into_owned(), &bilinear_gradient(&av, &b, &cv)) < 1e-7);
    }

    #[test]
    fn fd_gradient_examples() {
        let theta = asymmetric_point(1, 2, 4);
        let fd = fd_gradient(|t| t.as_slice()[0].re, theta.blocks(), 1e-6);
        let mut e11 = CMatrix::zeros(2, 2);
        e11[(0, 0)] = c(1.0, 0.0);
        assert!((fd.block(0) - e11).norm() < 1e-9);
        let fd = fd_gradient(symmetry_penalty, theta.blocks(), 1e-6);
        let b = theta.blocks().block(0);
        let expected = (b - b.transpose()) * c(4.0, 0.0);
        assert!(relative_error(&fd.block(0).into_owned(), &expected) < 1e-8);
    }

    #[test]
    fn modes_coincide_for_one_group() {
        let ch = instance(3, 3, 4, 5);
        let theta = asymmetric_point(1, 4, 6);
        let bf = uniform_power_beamformer(&ch.dims(1).unwrap(), 1.0).unwrap();
        let a = euclidean_gradient(&ch, &theta, &bf, 1.0, GradientMode::Groupwise).unwrap();
        let b = euclidean_gradient(&ch, &theta, &bf, 1.0, GradientMode::ExactCoupled).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12 * b.norm());
    }

    #[test]
    fn single_user_collapses_to_signal_term() {
        let ch = instance(1, 2, 4, 7);
        let theta = asymmetric_point(1, 4, 8);
        let bf = Beamformer::new(CMatrix::from_element(2, 1, c(0.6, 0.2)), 1.0).unwrap();
        let grad = euclidean_gradient(&ch, &theta, &bf, 0.5, GradientMode::ExactCoupled).unwrap();
        let view = ch.group_view(0, 0, 4);
        let x = (view.h_kg.transpose() * theta.blocks().block(0) * &view.w_g * bf.v())[(0, 0)];
        let n0 = ch.noise_power();
        let gamma = x.norm_sqr() / n0;
        let wv = &view.w_g * bf.v();
        let grad_chi = view.h_kg.conjugate() * wv.adjoint() * (x * 2.0);
        let expected = grad_chi / C64::new(LN_2 * (1.0 + gamma) * n0, 0.0)
            + penalty_gradient(&theta.blocks().block(0).into_owned(), 0.5);
        assert!(relative_error(&grad.block(0).into_owned(), &expected) < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ch = instance(3, 3, 8, 9);
        let theta = asymmetric_point(2, 4, 10);
        let bf = uniform_power_beamformer(&ch.dims(2).unwrap(), 2.0).unwrap();
        let problem = Problem::new(&ch, &bf, 4).unwrap();
        let exact = problem.gradient(theta.blocks(), 1.0, GradientMode::ExactCoupled);
        let fd = fd_gradient(|t| problem.objective(t, 1.0), theta.blocks(), 1e-6);
        assert!((exact.add_scaled(&fd, -1.0)).norm() / fd.norm() < 1e-6);

        let groupwise = problem.gradient(theta.blocks(), 1.0, GradientMode::Groupwise);
        for g in 0..2 {
            let fd = fd_gradient_block(|t| problem.group_objective(t, g, 1.0), theta.blocks(), g, 1e-6);
            assert!(relative_error(&groupwise.block(g).into_owned(), &fd) < 1e-6, "g={g}");
        }
    }

    #[test]
    fn diag_power_matches_general_path() {
        let ch = instance(4, 4, 8, 11);
        let theta = asymmetric_point(2, 4, 12);
        let powers: [f64; 4] = [0.3, 1.1, 0.05, 0.7];
        let v = CMatrix::from_diagonal(&DVector::from_iterator(
            4,
            powers.iter().map(|p| c(p.sqrt(), 0.0)),
        ));
        let bf = Beamformer::new(v, powers.iter().sum()).unwrap();
        let general = euclidean_gradient(&ch, &theta, &bf, 1.0, GradientMode::Groupwise).unwrap();
        let diag = euclidean_gradient_diag_power(&ch, &theta, &powers, 1.0).unwrap();
        assert!(diag.max_abs_diff(&general) <= 1e-12 * general.norm());
    }

    #[test]
    fn diag_power_zero_powers_leave_penalty() {
        let ch = instance(3, 3, 6, 13);
        let theta = asymmetric_point(2, 3, 14);
        let grad = euclidean_gradient_diag_power(&ch, &theta, &[0.0; 3], 2.0).unwrap();
        for g in 0..2 {
            let expected = penalty_gradient(&theta.blocks().block(g).into_owned(), 2.0);
            assert!((grad.block(g) - expected).norm() < 1e-14);
        }
        let bad = instance(3, 2, 6, 13);
        assert!(euclidean_gradient_diag_power(&bad, &theta, &[1.0; 3], 1.0).is_err());
        assert!(euclidean_gradient_diag_power(&ch, &theta, &[1.0; 2], 1.0).is_err());
    }

    #[test]
    fn gradient_rank_is_bounded() {
        let ch = instance(2, 3, 8, 15);
        let theta = asymmetric_point(1, 8, 16);
        let bf = uniform_power_beamformer(&ch.dims(1).unwrap(), 1.0).unwrap();
        let grad = euclidean_gradient(&ch, &theta, &bf, 0.0, GradientMode::ExactCoupled).unwrap();
        let sv = grad.block(0).into_owned().singular_values();
        let tol = 1e-10 * sv.max();
        assert!(sv.iter().filter(|&&s| s > tol).count() <= 2 * 2);
    }

    #[test]
    fn penalty_vanishes_at_symmetric_point() {
        let ch = instance(3, 3, 8, 17);
        let theta = point(2, 4, 18);
        let bf = uniform_power_beamformer(&ch.dims(2).unwrap(), 1.0).unwrap();
        for mode in [GradientMode::Groupwise, GradientMode::ExactCoupled] {
            let with = euclidean_gradient(&ch, &theta, &bf, 3.0, mode).unwrap();
            let without = euclidean_gradient(&ch, &theta, &bf, 0.0, mode).unwrap();
            assert!(with.max_abs_diff(&without) < 1e-10 * without.norm());
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("exact_coupled".parse::<GradientMode>().unwrap(), GradientMode::ExactCoupled);
        assert_eq!("groupwise".parse::<GradientMode>().unwrap(), GradientMode::Groupwise);
        assert!("nope".parse::<GradientMode>().is_err());
    }
}
