//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha20 (a counter-based
//! generator) seeded with [`SeedableRng::seed_from_u64`]. Independent uses of
//! the same seed are separated by ChaCha stream ids rather than by seed
//! arithmetic, so a trial's channel draw and its initial scattering matrix
//! never share keystream.
//!
//! Complex samples draw the real part first, then the imaginary part, each
//! `N(0, variance / 2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::{CMatrix, C64};

/// ChaCha stream ids, one per consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Channel = 0,
    Init = 1,
    Baseline = 2,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Circularly-symmetric complex Gaussian sample with the given total variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let scale = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(scale * re, scale * im)
}

/// Matrix of i.i.d. `CN(0, variance)` entries, filled in row-major order.
pub fn complex_gaussian_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    variance: f64,
) -> CMatrix {
    let mut m = CMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = complex_gaussian(rng, variance);
        }
    }
    m
}
