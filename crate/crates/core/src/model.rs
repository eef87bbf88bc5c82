//! System model: dimensions, channels, beamformers, scattering matrices and
//! the rate expressions built on them.
//!
//! All quantities are linear (watts, linear channel gains). User and group
//! indices are zero-based.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrixView, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::{BlockDiagonal, CMatrix, Error, Result, C64};

/// Feasibility tolerance used when none is given.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-8;

/// Relative slack on the beamformer power constraint.
const POWER_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemDims {
    /// `K`, single-antenna users.
    pub users: usize,
    /// `N`, transmit antennas at the base station.
    pub antennas: usize,
    /// `R`, reflective elements.
    pub elements: usize,
    /// `G`, groups of interconnected elements.
    pub groups: usize,
}

impl SystemDims {
    pub fn new(users: usize, antennas: usize, elements: usize, groups: usize) -> Result<Self> {
        if users == 0 || antennas == 0 || elements == 0 || groups == 0 {
            return Err(Error::invalid(format!(
                "dimensions must be positive (K={users}, N={antennas}, R={elements}, G={groups})"
            )));
        }
        if elements % groups != 0 {
            return Err(Error::invalid(format!(
                "group count {groups} does not divide element count {elements}"
            )));
        }
        Ok(Self {
            users,
            antennas,
            elements,
            groups,
        })
    }

    /// `R_G = R / G`.
    pub fn group_size(&self) -> usize {
        self.elements / self.groups
    }

    pub fn architecture(&self) -> Architecture {
        if self.groups == 1 {
            Architecture::FullyConnected
        } else if self.groups == self.elements {
            Architecture::SingleConnected
        } else {
            Architecture::GroupConnected {
                group_size: self.group_size(),
            }
        }
    }

    pub fn with_elements(self, elements: usize, arch: Architecture) -> Result<Self> {
        Self::new(self.users, self.antennas, elements, arch.groups(elements)?)
    }
}

/// Interconnection pattern of the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Diagonal scattering matrix, `G = R`.
    SingleConnected,
    /// Blocks of `group_size` interconnected elements.
    GroupConnected { group_size: usize },
    /// One full block, `G = 1`.
    FullyConnected,
}

impl Architecture {
    pub fn groups(&self, elements: usize) -> Result<usize> {
        match *self {
            Architecture::SingleConnected => Ok(elements),
            Architecture::FullyConnected => Ok(1),
            Architecture::GroupConnected { group_size } => {
                if group_size == 0 || elements % group_size != 0 {
                    Err(Error::invalid(format!(
                        "group size {group_size} does not divide element count {elements}"
                    )))
                } else {
                    Ok(elements / group_size)
                }
            }
        }
    }

    /// Plot label: `SC`, `GC(n)` or `FC`.
    pub fn label(&self) -> String {
        match self {
            Architecture::SingleConnected => "SC".into(),
            Architecture::GroupConnected { group_size } => format!("GC({group_size})"),
            Architecture::FullyConnected => "FC".into(),
        }
    }

    /// Command-line spelling: `sc`, `gc:n` or `fc`.
    pub fn flag(&self) -> String {
        match self {
            Architecture::SingleConnected => "sc".into(),
            Architecture::GroupConnected { group_size } => format!("gc:{group_size}"),
            Architecture::FullyConnected => "fc".into(),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts `sc`, `fc`, `gc:<group_size>` and the labels `SC`, `FC`, `GC(n)`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "sc" => return Ok(Architecture::SingleConnected),
            "fc" => return Ok(Architecture::FullyConnected),
            _ => {}
        }
        let size = t
            .strip_prefix("gc:")
            .or_else(|| t.strip_prefix("gc(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| Error::invalid(format!("unknown architecture '{s}'")))?;
        let group_size: usize = size
            .parse()
            .map_err(|_| Error::invalid(format!("bad group size in '{s}'")))?;
        if group_size == 0 {
            return Err(Error::invalid("group size must be positive"));
        }
        Ok(Architecture::GroupConnected { group_size })
    }
}

/// One random problem instance: cascaded channels and noise power.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    h_tx: CMatrix,
    h_rx: CMatrix,
    noise_power: f64,
}

impl ChannelSet {
    /// `h_tx` is `R×N` (BS to surface), `h_rx` is `K×R` with rows `h_k^T`.
    pub fn new(h_tx: CMatrix, h_rx: CMatrix, noise_power: f64) -> Result<Self> {
        if h_tx.nrows() == 0 || h_tx.ncols() == 0 || h_rx.nrows() == 0 {
            return Err(Error::invalid("channel matrices must be non-empty"));
        }
        if h_rx.ncols() != h_tx.nrows() {
            return Err(Error::dims(format!(
                "H_rx is {}x{} but H_tx is {}x{}",
                h_rx.nrows(),
                h_rx.ncols(),
                h_tx.nrows(),
                h_tx.ncols()
            )));
        }
        if !(noise_power > 0.0 && noise_power.is_finite()) {
            return Err(Error::invalid(format!(
                "noise power must be positive, got {noise_power}"
            )));
        }
        Ok(Self {
            h_tx,
            h_rx,
            noise_power,
        })
    }

    pub fn h_tx(&self) -> &CMatrix {
        &self.h_tx
    }

    pub fn h_rx(&self) -> &CMatrix {
        &self.h_rx
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    pub fn users(&self) -> usize {
        self.h_rx.nrows()
    }

    pub fn antennas(&self) -> usize {
        self.h_tx.ncols()
    }

    pub fn elements(&self) -> usize {
        self.h_tx.nrows()
    }

    pub fn dims(&self, groups: usize) -> Result<SystemDims> {
        SystemDims::new(self.users(), self.antennas(), self.elements(), groups)
    }

    /// Channel slices seen by group `g` for user `k`.
    pub fn group_view(&self, k: usize, g: usize, group_size: usize) -> GroupView {
        let start = g * group_size;
        GroupView {
            h_kg: self
                .h_rx
                .view((k, start), (1, group_size))
                .transpose()
                .column(0)
                .into_owned(),
            w_g: self
                .h_tx
                .view((start, 0), (group_size, self.antennas()))
                .into_owned(),
        }
    }
}

/// Rows `R_G·g .. R_G·(g+1)` of the channels, for a single user.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupView {
    /// `h_k^(g)`, length `R_G`.
    pub h_kg: DVector<C64>,
    /// `W^(g)`, `R_G×N`.
    pub w_g: CMatrix,
}

/// Block-diagonal scattering matrix `Θ = blkdiag(Θ_1, …, Θ_G)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringMatrix {
    blocks: BlockDiagonal,
    feasibility_tol: f64,
}

impl ScatteringMatrix {
    pub fn new(blocks: BlockDiagonal) -> Self {
        Self {
            blocks,
            feasibility_tol: DEFAULT_FEASIBILITY_TOL,
        }
    }

    pub fn from_blocks(blocks: &[CMatrix]) -> Result<Self> {
        Ok(Self::new(BlockDiagonal::from_blocks(blocks)?))
    }

    pub fn identity(dims: &SystemDims) -> Self {
        Self::new(BlockDiagonal::identity(dims.groups, dims.group_size()))
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.feasibility_tol = tol;
        self
    }

    pub fn blocks(&self) -> &BlockDiagonal {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut BlockDiagonal {
        &mut self.blocks
    }

    pub fn into_blocks(self) -> BlockDiagonal {
        self.blocks
    }

    pub fn groups(&self) -> usize {
        self.blocks.groups()
    }

    pub fn group_size(&self) -> usize {
        self.blocks.block_size()
    }

    pub fn dim(&self) -> usize {
        self.blocks.dim()
    }

    pub fn feasibility_tol(&self) -> f64 {
        self.feasibility_tol
    }

    pub fn to_dense(&self) -> CMatrix {
        self.blocks.to_dense()
    }

    /// `max_g ‖Θ_g Θ_g^H − I‖_F`.
    pub fn unitarity_residual(&self) -> f64 {
        self.blocks
            .blocks()
            .map(|b| unitarity_residual(&b))
            .fold(0.0, f64::max)
    }

    /// `max_g ‖Θ_g − Θ_g^T‖_F`.
    pub fn symmetry_residual(&self) -> f64 {
        self.blocks
            .blocks()
            .map(|b| symmetry_residual(&b))
            .fold(0.0, f64::max)
    }

    pub fn is_feasible(&self) -> bool {
        self.unitarity_residual() <= self.feasibility_tol
            && self.symmetry_residual() <= self.feasibility_tol
    }
}

pub fn unitarity_residual(m: &DMatrixView<'_, C64>) -> f64 {
    let n = m.nrows();
    (m * m.adjoint() - CMatrix::identity(n, n)).norm()
}

pub fn symmetry_residual(m: &DMatrixView<'_, C64>) -> f64 {
    (m - m.transpose()).norm()
}

/// Transmit precoder `V` (`N×K`, column `k` serves user `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    v: CMatrix,
    p_max: f64,
}

impl Beamformer {
    pub fn new(v: CMatrix, p_max: f64) -> Result<Self> {
        if !(p_max > 0.0 && p_max.is_finite()) {
            return Err(Error::invalid(format!(
                "power budget must be positive, got {p_max}"
            )));
        }
        let power = v.norm_squared();
        if power > p_max * (1.0 + POWER_SLACK) {
            return Err(Error::invalid(format!(
                "beamformer power {power} exceeds budget {p_max}"
            )));
        }
        Ok(Self { v, p_max })
    }

    pub fn v(&self) -> &CMatrix {
        &self.v
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    /// `‖V‖_F²`.
    pub fn power(&self) -> f64 {
        self.v.norm_squared()
    }
}

fn check_theta(channels: &ChannelSet, theta: &ScatteringMatrix) -> Result<()> {
    if theta.dim() != channels.elements() {
        return Err(Error::dims(format!(
            "scattering matrix is {0}x{0} but the surface has {1} elements",
            theta.dim(),
            channels.elements()
        )));
    }
    Ok(())
}

fn check_bf(channels: &ChannelSet, bf: &Beamformer) -> Result<()> {
    if bf.v.nrows() != channels.antennas() || bf.v.ncols() != channels.users() {
        return Err(Error::dims(format!(
            "beamformer is {}x{}, expected {}x{}",
            bf.v.nrows(),
            bf.v.ncols(),
            channels.antennas(),
            channels.users()
        )));
    }
    Ok(())
}

/// `E = H_rx Θ H_tx`, accumulated block by block.
pub fn equivalent_channel(channels: &ChannelSet, theta: &ScatteringMatrix) -> Result<CMatrix> {
    check_theta(channels, theta)?;
    let n = theta.group_size();
    let (k, ant) = (channels.users(), channels.antennas());
    let mut e = CMatrix::zeros(k, ant);
    for (g, block) in theta.blocks().blocks().enumerate() {
        let rows = channels.h_rx.view((0, g * n), (k, n));
        let cols = channels.h_tx.view((g * n, 0), (n, ant));
        e += rows * (block * cols);
    }
    Ok(e)
}

fn sinr_from_row(row: &[C64], k: usize, noise: f64) -> f64 {
    let signal = row[k].norm_sqr();
    let interference: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, x)| x.norm_sqr())
        .sum();
    signal / (interference + noise)
}

fn check_user(channels: &ChannelSet, k: usize) -> Result<()> {
    if k >= channels.users() {
        return Err(Error::invalid(format!(
            "user index {k} out of range (K = {})",
            channels.users()
        )));
    }
    Ok(())
}

/// SINR `γ_k` of user `k`.
pub fn sinr(
    channels: &ChannelSet,
    theta: &ScatteringMatrix,
    bf: &Beamformer,
    k: usize,
) -> Result<f64> {
    check_theta(channels, theta)?;
    check_bf(channels, bf)?;
    check_user(channels, k)?;
    let mut e_k = group_row(channels, theta, k, 0);
    for g in 1..theta.groups() {
        e_k += group_row(channels, theta, k, g);
    }
    let gains: Vec<C64> = (e_k * &bf.v).iter().copied().collect();
    Ok(sinr_from_row(&gains, k, channels.noise_power))
}

/// `e_k^(g) = h_k^(g)T Θ_g W^(g)`, a `1×N` row.
fn group_row(channels: &ChannelSet, theta: &ScatteringMatrix, k: usize, g: usize) -> RowDVector<C64> {
    let view = channels.group_view(k, g, theta.group_size());
    view.h_kg.transpose() * theta.blocks().block(g) * &view.w_g
}

/// Group-wise SINR `γ_k^(g)`: only block `g` contributes to the cascade.
pub fn group_sinr(
    channels: &ChannelSet,
    theta: &ScatteringMatrix,
    bf: &Beamformer,
    k: usize,
    g: usize,
) -> Result<f64> {
    check_theta(channels, theta)?;
    check_bf(channels, bf)?;
    check_user(channels, k)?;
    if g >= theta.groups() {
        return Err(Error::invalid(format!(
            "group index {g} out of range (G = {})",
            theta.groups()
        )));
    }
    let gains: Vec<C64> = (group_row(channels, theta, k, g) * &bf.v).iter().copied().collect();
    Ok(sinr_from_row(&gains, k, channels.noise_power))
}

/// `η = Σ_k log2(1 + γ_k)` in bits/s/Hz.
pub fn sum_rate(channels: &ChannelSet, theta: &ScatteringMatrix, bf: &Beamformer) -> Result<f64> {
    check_bf(channels, bf)?;
    let e = equivalent_channel(channels, theta)?;
    let x = e * &bf.v;
    Ok((0..channels.users())
        .map(|k| {
            let row: Vec<C64> = x.row(k).iter().copied().collect();
            (1.0 + sinr_from_row(&row, k, channels.noise_power)).log2()
        })
        .sum())
}

/// `Σ_g ‖Θ_g − Θ_g^T‖_F²`, equal to the full-matrix penalty since off-block
/// entries vanish.
pub fn symmetry_penalty(theta: &BlockDiagonal) -> f64 {
    let n = theta.block_size();
    let mut total = 0.0;
    for g in 0..theta.groups() {
        let b = theta.block_slice(g);
        for j in 0..n {
            for i in 0..n {
                total += (b[i + j * n] - b[j + i * n]).norm_sqr();
            }
        }
    }
    total
}

/// Sum-rate minus `ν·‖Θ − Θ^T‖_F²`.
pub fn penalized_objective(
    channels: &ChannelSet,
    theta: &ScatteringMatrix,
    bf: &Beamformer,
    nu: f64,
) -> Result<f64> {
    if !(nu >= 0.0) {
        return Err(Error::invalid(format!("penalty weight must be >= 0, got {nu}")));
    }
    Ok(sum_rate(channels, theta, bf)? - nu * symmetry_penalty(theta.blocks()))
}

/// Equal power per user on cycling antenna basis vectors.
///
/// With `K = N` this is `√(p_max/K)·I`. Otherwise user `k` transmits on
/// antenna `k mod N` with power `p_max/K`. Either way `‖V‖_F² = p_max`.
pub fn uniform_power_beamformer(dims: &SystemDims, p_max: f64) -> Result<Beamformer> {
    if !(p_max > 0.0 && p_max.is_finite()) {
        return Err(Error::invalid(format!(
            "power budget must be positive, got {p_max}"
        )));
    }
    let amp = C64::new((p_max / dims.users as f64).sqrt(), 0.0);
    let mut v = CMatrix::zeros(dims.antennas, dims.users);
    for k in 0..dims.users {
        v[(k % dims.antennas, k)] = amp;
    }
    Beamformer::new(v, p_max)
}

/// Regularized channel inversion `V = c·E^H (E E^H + (K·N0/p_max) I)^{-1}`
/// scaled to the full budget. Falls back to uniform power when the
/// equivalent channel vanishes.
pub fn mmse_beamformer(
    channels: &ChannelSet,
    theta: &ScatteringMatrix,
    p_max: f64,
) -> Result<Beamformer> {
    if !(p_max > 0.0 && p_max.is_finite()) {
        return Err(Error::invalid(format!(
            "power budget must be positive, got {p_max}"
        )));
    }
    let e = equivalent_channel(channels, theta)?;
    let k = channels.users();
    let reg = k as f64 * channels.noise_power / p_max;
    let gram = &e * e.adjoint() + CMatrix::identity(k, k) * C64::new(reg, 0.0);
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::invalid("regularized Gram matrix is singular"))?;
    let v = e.adjoint() * inv;
    let norm_sq = v.norm_squared();
    if norm_sq == 0.0 || !norm_sq.is_finite() {
        let dims = channels.dims(theta.groups())?;
        return uniform_power_beamformer(&dims, p_max);
    }
    let v = v * C64::new((p_max / norm_sq).sqrt(), 0.0);
    Beamformer::new(v, p_max)
}

/// A channel/beamformer pair with per-group slices cached for repeated
/// evaluation at many scattering matrices.
///
/// The beamformer is folded into the transmit side: `A_g = W^(g) V`, so the
/// cross gains `X[k, l] = e_k v_l` cost `O(R·R_G·K + R·K²)` per evaluation.
#[derive(Debug, Clone)]
pub struct Problem {
    users: usize,
    group_size: usize,
    groups: usize,
    noise_power: f64,
    /// `H_rx`, column-major `K×R`; group `g` is a contiguous `K×R_G` run.
    h_rx: Vec<C64>,
    /// Per group `A_g = W^(g) V`, column-major `R_G×K`, back to back.
    tx: Vec<C64>,
}

impl Problem {
    pub fn new(channels: &ChannelSet, bf: &Beamformer, group_size: usize) -> Result<Self> {
        check_bf(channels, bf)?;
        let r = channels.elements();
        if group_size == 0 || r % group_size != 0 {
            return Err(Error::invalid(format!(
                "group size {group_size} does not divide element count {r}"
            )));
        }
        let groups = r / group_size;
        let k = channels.users();
        let a = channels.h_tx() * bf.v();
        let mut tx = Vec::with_capacity(r * k);
        for g in 0..groups {
            tx.extend(a.view((g * group_size, 0), (group_size, k)).iter().copied());
        }
        Ok(Self {
            users: k,
            group_size,
            groups,
            noise_power: channels.noise_power(),
            h_rx: channels.h_rx().as_slice().to_vec(),
            tx,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    /// `H_rx` columns of group `g` (`K×R_G`).
    pub fn rx_block(&self, g: usize) -> DMatrixView<'_, C64> {
        let len = self.users * self.group_size;
        DMatrixView::from_slice(&self.h_rx[g * len..(g + 1) * len], self.users, self.group_size)
    }

    /// `A_g = W^(g) V` (`R_G×K`).
    pub fn tx_block(&self, g: usize) -> DMatrixView<'_, C64> {
        let len = self.users * self.group_size;
        DMatrixView::from_slice(&self.tx[g * len..(g + 1) * len], self.group_size, self.users)
    }

    fn check(&self, theta: &BlockDiagonal) {
        assert!(
            theta.groups() == self.groups && theta.block_size() == self.group_size,
            "scattering matrix has {} blocks of {}, problem expects {} of {}",
            theta.groups(),
            theta.block_size(),
            self.groups,
            self.group_size
        );
    }

    /// Accumulates `H_rx^(g) Θ_g A_g` into `x` (column-major `K×K`).
    fn accumulate_group(&self, theta: &BlockDiagonal, g: usize, x: &mut [C64], t: &mut [C64]) {
        let (n, k) = (self.group_size, self.users);
        let th = theta.block_slice(g);
        let len = n * k;
        let a = &self.tx[g * len..(g + 1) * len];
        let h = &self.h_rx[g * len..(g + 1) * len];
        for l in 0..k {
            t.fill(C64::new(0.0, 0.0));
            for j in 0..n {
                let ajl = a[j + l * n];
                let col = &th[j * n..(j + 1) * n];
                for (ti, &tij) in t.iter_mut().zip(col) {
                    *ti += tij * ajl;
                }
            }
            let out = &mut x[l * k..(l + 1) * k];
            for (i, &ti) in t.iter().enumerate() {
                let hcol = &h[i * k..(i + 1) * k];
                for (o, &hki) in out.iter_mut().zip(hcol) {
                    *o += hki * ti;
                }
            }
        }
    }

    /// Cross gains `X[k, l] = e_k v_l` with the full cascade.
    pub fn cross_gains(&self, theta: &BlockDiagonal) -> CMatrix {
        self.check(theta);
        let k = self.users;
        let mut x = vec![C64::new(0.0, 0.0); k * k];
        let mut t = vec![C64::new(0.0, 0.0); self.group_size];
        for g in 0..self.groups {
            self.accumulate_group(theta, g, &mut x, &mut t);
        }
        CMatrix::from_vec(k, k, x)
    }

    /// Cross gains `e_k^(g) v_l` with every block except `g` set to zero.
    pub fn group_cross_gains(&self, theta: &BlockDiagonal, g: usize) -> CMatrix {
        self.check(theta);
        let k = self.users;
        let mut x = vec![C64::new(0.0, 0.0); k * k];
        let mut t = vec![C64::new(0.0, 0.0); self.group_size];
        self.accumulate_group(theta, g, &mut x, &mut t);
        CMatrix::from_vec(k, k, x)
    }

    /// Per-user SINRs from a cross-gain matrix.
    pub fn sinrs(&self, gains: &CMatrix) -> Vec<f64> {
        (0..self.users)
            .map(|k| {
                let signal = gains[(k, k)].norm_sqr();
                let mut interference = 0.0;
                for i in 0..self.users {
                    if i != k {
                        interference += gains[(k, i)].norm_sqr();
                    }
                }
                signal / (interference + self.noise_power)
            })
            .collect()
    }

    fn rate_of(&self, gains: &CMatrix) -> f64 {
        self.sinrs(gains).iter().map(|g| (1.0 + g).log2()).sum()
    }

    pub fn sum_rate(&self, theta: &BlockDiagonal) -> f64 {
        self.rate_of(&self.cross_gains(theta))
    }

    /// Penalized objective `η − ν‖Θ − Θ^T‖_F²`.
    pub fn objective(&self, theta: &BlockDiagonal, nu: f64) -> f64 {
        let rate = self.sum_rate(theta);
        if nu == 0.0 {
            rate
        } else {
            rate - nu * symmetry_penalty(theta)
        }
    }

    /// Objective seen by group `g` alone: the group-wise rates minus the
    /// penalty of block `g`.
    pub fn group_objective(&self, theta: &BlockDiagonal, g: usize, nu: f64) -> f64 {
        let rate = self.rate_of(&self.group_cross_gains(theta, g));
        let n = self.group_size;
        let b = theta.block_slice(g);
        let mut pen = 0.0;
        for j in 0..n {
            for i in 0..n {
                pen += (b[i + j * n] - b[j + i * n]).norm_sqr();
            }
        }
        rate - nu * pen
    }
}
