//! Counter-based splittable random number generation.
//!
//! Every stochastic site in the crate (parameter init, epoch shuffling,
//! dropout masks, injected noise, synthetic data) draws from its own
//! [`Stream`], keyed by `(global seed, site, step)`. Streams never share
//! state, so any part of a run can be reproduced in isolation and the
//! whole run is a pure function of one seed.
//!
//! The generator is SplitMix64 started at a hashed key: output `i` is
//! `mix64(key + (i+1)·φ)`, a pure function of `(key, i)`.

const PHI64: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer. Full-avalanche 64-bit mixer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A stochastic site. Each variant (and each distinct field value) keys an
/// independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    /// Initialization of one parameter tensor.
    Init { param: u32 },
    /// Epoch shuffling of a dataset (the step argument is the epoch).
    Shuffle,
    /// Dropout mask for one layer applied to one example row.
    Dropout { layer: u32, row: u64 },
    /// Gaussian noise injected after a sample capture.
    SamplerNoise,
    /// Langevin noise added every step.
    SgldNoise,
    /// Synthetic dataset generation.
    Synth { channel: u32 },
    /// Fresh targets for the synthetic quadratic stream.
    QuadraticData,
}

impl Site {
    fn code(self) -> u64 {
        match self {
            Site::Init { param } => (1 << 56) | u64::from(param),
            Site::Shuffle => 2 << 56,
            Site::Dropout { layer, row } => {
                debug_assert!(row < (1 << 40));
                (3 << 56) | (u64::from(layer) << 40) | row
            }
            Site::SamplerNoise => 4 << 56,
            Site::SgldNoise => 5 << 56,
            Site::Synth { channel } => (6 << 56) | u64::from(channel),
            Site::QuadraticData => 7 << 56,
        }
    }
}

/// An independent random stream for one `(seed, site, step)` triple.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, site: Site, step: u64) -> Self {
        let key = mix64(mix64(mix64(seed ^ PHI64) ^ site.code()) ^ step);
        Stream {
            key,
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(PHI64)))
    }

    /// Uniform draw in the open interval (0, 1) with 53 significant bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via the multiply-shift reduction.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal draw (Box-Muller; pairs are cached).
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fills `out` with i.i.d. N(0, sigma^2) draws.
    pub fn fill_normal(&mut self, out: &mut [f64], sigma: f64) {
        for v in out.iter_mut() {
            *v = sigma * self.next_normal();
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
