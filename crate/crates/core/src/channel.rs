//! Synthetic channel generation and persistence.
//!
//! Channels follow i.i.d. Rayleigh fading with distance-dependent large-scale
//! fading `Υ(d) = C0·(d/d0)^(-ρ)`. The BS-surface link carries `Υ(d)`; the
//! surface-user links have unit large-scale gain unless per-user distances are
//! supplied, in which case user `k` gets `Υ(d_k)` with the same `C0`, `d0` and
//! `ρ`.
//!
//! Draw order (ChaCha20, channel stream): `H_tx` row-major, then `H_rx`
//! row-major, real part before imaginary part for every entry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::rng::{complex_gaussian_matrix, stream_rng, Stream};
use crate::{db_to_linear, dbm_to_watts, ChannelSet, Error, Result, ScatteringMatrix, SystemDims};

pub const CHANNEL_KIND: &str = "channel_set";
pub const SCATTERING_KIND: &str = "scattering_matrix";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathlossParams {
    /// Reference gain `C0` in dB.
    pub c0_db: f64,
    /// Reference distance `d0` in meters.
    pub d0_m: f64,
    /// Path-loss exponent `ρ`.
    pub rho: f64,
    /// BS-surface distance in meters.
    pub d_m: f64,
}

impl Default for PathlossParams {
    fn default() -> Self {
        Self {
            c0_db: -30.0,
            d0_m: 1.0,
            rho: 2.2,
            d_m: 50.0,
        }
    }
}

/// Linear large-scale gain `10^(C0/10)·(d/d0)^(-ρ)`.
pub fn pathloss(p: &PathlossParams) -> Result<f64> {
    gain_at(p, p.d_m)
}

fn gain_at(p: &PathlossParams, d_m: f64) -> Result<f64> {
    if !(d_m > 0.0) || !(p.d0_m > 0.0) {
        return Err(Error::invalid(format!(
            "distances must be positive (d = {d_m}, d0 = {})",
            p.d0_m
        )));
    }
    Ok(db_to_linear(p.c0_db) * (d_m / p.d0_m).powf(-p.rho))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecipe {
    pub dims: SystemDims,
    pub pathloss: PathlossParams,
    /// Noise power `N0` in dBm.
    pub n0_dbm: f64,
    pub seed: u64,
    /// Optional surface-user distances, one per user. Empty means unit gain.
    #[serde(default)]
    pub user_distances_m: Vec<f64>,
    /// Carrier frequency in GHz. Metadata only; the gain model does not use it.
    #[serde(default = "default_carrier")]
    pub carrier_ghz: f64,
}

fn default_carrier() -> f64 {
    2.4
}

impl ChannelRecipe {
    pub fn new(dims: SystemDims, seed: u64) -> Self {
        Self {
            dims,
            pathloss: PathlossParams::default(),
            n0_dbm: -80.0,
            seed,
            user_distances_m: Vec::new(),
            carrier_ghz: default_carrier(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn noise_power(&self) -> f64 {
        dbm_to_watts(self.n0_dbm)
    }
}

/// Draws one channel realization. Identical recipes give bit-identical output.
pub fn generate(recipe: &ChannelRecipe) -> Result<ChannelSet> {
    let d = &recipe.dims;
    let tx_gain = pathloss(&recipe.pathloss)?;
    let user_gains: Vec<f64> = if recipe.user_distances_m.is_empty() {
        vec![1.0; d.users]
    } else if recipe.user_distances_m.len() == d.users {
        recipe
            .user_distances_m
            .iter()
            .map(|&dk| gain_at(&recipe.pathloss, dk))
            .collect::<Result<_>>()?
    } else {
        return Err(Error::invalid(format!(
            "{} user distances given for {} users",
            recipe.user_distances_m.len(),
            d.users
        )));
    };

    let mut rng = stream_rng(recipe.seed, Stream::Channel);
    let h_tx = complex_gaussian_matrix(&mut rng, d.elements, d.antennas, tx_gain);
    let mut h_rx = complex_gaussian_matrix(&mut rng, d.users, d.elements, 1.0);
    for (k, gain) in user_gains.iter().enumerate() {
        if *gain != 1.0 {
            let s = gain.sqrt();
            h_rx.row_mut(k).iter_mut().for_each(|z| *z *= s);
        }
    }
    ChannelSet::new(h_tx, h_rx, recipe.noise_power())
}

/// Writes a channel set (and the recipe that produced it, if known).
pub fn save_channels(
    path: impl AsRef<Path>,
    channels: &ChannelSet,
    recipe: Option<&ChannelRecipe>,
) -> Result<()> {
    let meta = serde_json::json!({
        "users": channels.users(),
        "antennas": channels.antennas(),
        "elements": channels.elements(),
        "noise_power": channels.noise_power(),
        "recipe": recipe,
    });
    let mut c = Container::new(CHANNEL_KIND, meta);
    c.push("H_tx", channels.h_tx().clone());
    c.push("H_rx", channels.h_rx().clone());
    c.save(path)
}

pub fn load_channels(path: impl AsRef<Path>) -> Result<(ChannelSet, Option<ChannelRecipe>)> {
    channels_from_container(&Container::load(path)?)
}

pub fn channels_from_container(c: &Container) -> Result<(ChannelSet, Option<ChannelRecipe>)> {
    if c.kind != CHANNEL_KIND {
        return Err(Error::Format(format!("expected {CHANNEL_KIND}, found {}", c.kind)));
    }
    let field = |name: &str| {
        c.meta
            .get(name)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("missing '{name}' in header")))
    };
    let (k, n, r) = (field("users")?, field("antennas")?, field("elements")?);
    let noise = c
        .meta
        .get("noise_power")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Format("missing 'noise_power' in header".into()))?;
    let h_tx = c.matrix("H_tx")?.clone();
    let h_rx = c.matrix("H_rx")?.clone();
    if h_tx.shape() != (r as usize, n as usize) || h_rx.shape() != (k as usize, r as usize) {
        return Err(Error::Format(format!(
            "matrix shapes {:?}/{:?} disagree with header K={k} N={n} R={r}",
            h_tx.shape(),
            h_rx.shape()
        )));
    }
    let recipe = match c.meta.get("recipe") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<ChannelRecipe>(v.clone())
                .map_err(|e| Error::Format(format!("bad recipe: {e}")))?,
        ),
    };
    if let Some(rec) = &recipe {
        let d = rec.dims;
        if (d.users, d.antennas, d.elements) != (k as usize, n as usize, r as usize) {
            return Err(Error::Format("recipe dims disagree with matrices".into()));
        }
    }
    Ok((ChannelSet::new(h_tx, h_rx, noise)?, recipe))
}

/// Writes a scattering matrix as its `G` blocks.
pub fn save_scattering(path: impl AsRef<Path>, theta: &ScatteringMatrix) -> Result<()> {
    let meta = serde_json::json!({
        "groups": theta.groups(),
        "group_size": theta.group_size(),
        "unitarity_residual": theta.unitarity_residual(),
        "symmetry_residual": theta.symmetry_residual(),
    });
    let mut c = Container::new(SCATTERING_KIND, meta);
    for (g, b) in theta.blocks().blocks().enumerate() {
        c.push(format!("block_{g}"), b.into_owned());
    }
    c.save(path)
}

pub fn load_scattering(path: impl AsRef<Path>) -> Result<ScatteringMatrix> {
    let c = Container::load(path)?;
    if c.kind != SCATTERING_KIND {
        return Err(Error::Format(format!("expected {SCATTERING_KIND}, found {}", c.kind)));
    }
    let groups = c
        .meta
        .get("groups")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("missing 'groups' in header".into()))? as usize;
    let blocks = (0..groups)
        .map(|g| c.matrix(&format!("block_{g}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    ScatteringMatrix::from_blocks(&blocks)
}
