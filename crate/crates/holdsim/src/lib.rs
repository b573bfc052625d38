//! Simulation of randomly sampled, sample-and-hold feedback control systems
//! under small Brownian perturbation.
//!
//! The library couples a noisy sampled system to its deterministic and
//! fluctuation limits on one shared Brownian path and measures sup-norm
//! errors by Monte Carlo:
//!
//! * [`renewal`] — renewal sampling grids and their statistics,
//! * [`linalg`] — dense matrix kernel (exponential, hold propagator, flows),
//! * [`lindyn`] — coupled linear trajectories on a shared mesh,
//! * [`nonlindyn`] — nonlinear drift with sampled anchor and multiplicative noise,
//! * [`experiments`] — Monte Carlo sweeps, rate fits, statistical self-checks.

pub mod experiments;
pub mod linalg;
pub mod lindyn;
pub mod nonlindyn;
pub mod renewal;

pub mod streams {
    //! Deterministic RNG stream derivation for reproducible parallel runs.
    //!
    //! Every replication owns a 64-bit seed derived from (master seed,
    //! replication counter); grid sampling and Brownian noise draw from
    //! separate ChaCha streams of that seed. Results are therefore
    //! independent of scheduling order and worker count.

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Stream id used for inter-arrival (grid) draws.
    pub const GRID_CHANNEL: u64 = 0;
    /// Stream id used for Brownian increments.
    pub const NOISE_CHANNEL: u64 = 1;

    /// ChaCha generator for `seed` on stream `channel`.
    pub fn rng(seed: u64, channel: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(channel);
        rng
    }

    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Per-replication seed; distinct `index` values give decorrelated seeds.
    pub fn derive_seed(master: u64, index: u64) -> u64 {
        splitmix64(master.wrapping_add(splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F))))
    }

}
