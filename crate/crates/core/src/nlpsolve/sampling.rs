use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkernel::{backward_subst_transposed, chol_lower, Matrix, Vector};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Interior,
    Boundary,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for restart `index` of stream `stream`, independent of scheduling.
pub fn stream_seed(master: u64, stream: u64, index: u64) -> u64 {
    let a = mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix(a ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
    mix(b ^ index.wrapping_mul(0x8cb9_2ba7_2f3d_8dd7))
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, stream, index))
}

/// Uniform sample from the unit ball (or its sphere) in `dim` dimensions.
pub fn sample_unit_ball<R: Rng + ?Sized>(dim: usize, placement: Placement, rng: &mut R) -> Vector {
    if dim == 0 {
        return Vector::zeros(0);
    }
    let mut z;
    loop {
        z = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        if z.norm() > 1e-300 {
            break;
        }
    }
    z /= z.norm();
    if placement == Placement::Interior {
        let u: f64 = rng.random();
        z *= u.powf(1.0 / dim as f64);
    }
    z
}

/// Sample from `{x : (x − c)ᵀ S (x − c) ≤ ρ}` (or its boundary).
pub fn sample_ellipsoid<R: Rng + ?Sized>(
    s: &Matrix,
    rho: f64,
    center: &Vector,
    placement: Placement,
    rng: &mut R,
) -> Result<Vector> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!("level must be positive, got {rho}")));
    }
    if center.len() != s.nrows() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            actual: center.len(),
        });
    }
    let l = chol_lower(s)?;
    let z = sample_unit_ball(s.nrows(), placement, rng);
    Ok(center + backward_subst_transposed(&l, &z) * rho.sqrt())
}
