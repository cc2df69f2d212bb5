//! Fully synthetic generator: scalar latent blocks with a uniform 0.1
//! cross-correlation, confounded treatment with neighbor spillover in the
//! logit, and an outcome that is affine in (t, z) with latent-dependent
//! coefficients.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datagen::{
    assign_split, stage_rng, GeneratorRecord, LatentBlocks, NetworkDataset,
    PotentialOutcomeOracle,
};
use crate::error::{Error, Result};
use crate::netgraph::{generate_random_graph, neighbor_exposure, Network};
use crate::tensor::sigmoid;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n: usize,
    pub expected_degree: f64,
    pub seed: u64,
    /// Scale of the per-coordinate Gaussian proxy noise.
    pub noise_x: f64,
    /// Scale of the Gaussian outcome noise; 0 gives noiseless outcomes.
    pub noise_y: f64,
}

impl SyntheticConfig {
    pub fn new(n: usize, expected_degree: f64, seed: u64) -> Self {
        SyntheticConfig {
            n,
            expected_degree,
            seed,
            noise_x: 1.0,
            noise_y: 1.0,
        }
    }
}

/// Number of proxy coordinates produced per unit (3 latents times a 3x6
/// weight matrix).
pub(crate) const SYNTHETIC_D_X: usize = 6;

pub fn gen_synthetic(n: usize, expected_degree: f64, seed: u64) -> Result<NetworkDataset> {
    gen_synthetic_with(&SyntheticConfig::new(n, expected_degree, seed))
}

pub fn gen_synthetic_with(cfg: &SyntheticConfig) -> Result<NetworkDataset> {
    if cfg.n < 10 {
        return Err(Error::Config(format!(
            "synthetic generator needs n >= 10, got {}",
            cfg.n
        )));
    }
    let network = generate_random_graph(cfg.n, cfg.expected_degree, cfg.seed)?;
    let n = cfg.n;

    let mut rng = stage_rng(cfg.seed, 1);
    let latents = sample_stacked_latents(n, &mut rng);

    // Spillover sums over each unit's neighborhood, shared by the treatment
    // logit and the outcome's exposure coefficient.
    let spill_sums = neighbor_spill_sums(&latents, &network);

    // Treatment: logit is the unit's own confounders plus the neighbor sum,
    // centered by its mean so propensities sit strictly inside (0, 1) on
    // both sides, then tempered by 1/4.
    let raw: Vec<f64> = (0..n)
        .map(|i| latents.u_i[(i, 0)] + latents.u_c[(i, 0)] + spill_sums[i])
        .collect();
    let positivity_constant = raw.iter().sum::<f64>() / n as f64;
    let mut rng = stage_rng(cfg.seed, 2);
    let t: Vec<u8> = raw
        .iter()
        .map(|r| {
            let p = sigmoid((r - positivity_constant) / 4.0);
            u8::from(rng.random::<f64>() < p)
        })
        .collect();

    let z = neighbor_exposure(&network, &t)?;
    let oracle = synthetic_oracle(&latents, &network);

    let mut rng = stage_rng(cfg.seed, 3);
    let noise_y: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            cfg.noise_y * e
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| oracle.evaluate(i, t[i], z.values()[i]) + noise_y[i])
        .collect();

    let mut rng = stage_rng(cfg.seed, 4);
    let proxy_weights = Array2::from_shape_fn((3, SYNTHETIC_D_X), |_| {
        let e: f64 = StandardNormal.sample(&mut rng);
        1.0 + e
    });
    let mut rng = stage_rng(cfg.seed, 5);
    let mut x = latents.stacked().dot(&proxy_weights);
    x.mapv_inplace(|v| {
        let e: f64 = StandardNormal.sample(&mut rng);
        v + cfg.noise_x * e
    });

    let mut rng = stage_rng(cfg.seed, 6);
    let split_mask = assign_split(n, &mut rng);

    let generator = GeneratorRecord::Synthetic {
        expected_degree: cfg.expected_degree,
        seed: cfg.seed,
        noise_x: cfg.noise_x,
        noise_y: cfg.noise_y,
        proxy_weights: proxy_weights.rows().into_iter().map(|r| r.to_vec()).collect(),
        positivity_constant,
    };

    Ok(NetworkDataset {
        network,
        x,
        t,
        z,
        y,
        latents: Some(latents),
        oracle: Some(oracle),
        split_mask: Some(split_mask),
        noise_y,
        generator,
    })
}

/// Draws the stacked 3n latent vector with mean 1, unit variances, and a
/// uniform 0.1 covariance between every pair of entries: each entry is
/// `1 + sqrt(0.9) * own_normal + sqrt(0.1) * shared_normal`.
pub(crate) fn sample_stacked_latents(n: usize, rng: &mut ChaCha8Rng) -> LatentBlocks {
    let shared: f64 = StandardNormal.sample(rng);
    let common = 0.1_f64.sqrt() * shared;
    let own_scale = 0.9_f64.sqrt();
    let mut draw_block = |rows: usize| {
        Array2::from_shape_fn((rows, 1), |_| {
            let e: f64 = StandardNormal.sample(rng);
            1.0 + own_scale * e + common
        })
    };
    let u_i = draw_block(n);
    let u_c = draw_block(n);
    let u_n = draw_block(n);
    LatentBlocks::new(u_i, u_c, u_n).expect("equal row counts by construction")
}

/// `sum over j in N(i) of (1.5 u_c[j] - 0.5 u_n[j])` per unit.
fn neighbor_spill_sums(latents: &LatentBlocks, network: &Network) -> Vec<f64> {
    (0..network.n())
        .map(|i| {
            network
                .neighbors(i)
                .iter()
                .map(|&j| 1.5 * latents.u_c[(j as usize, 0)] - 0.5 * latents.u_n[(j as usize, 0)])
                .sum()
        })
        .collect()
}

/// Noiseless outcome coefficients; also used to re-materialize the oracle
/// after reading a stored dataset, so generation and reload agree bitwise.
pub(crate) fn synthetic_oracle(latents: &LatentBlocks, network: &Network) -> PotentialOutcomeOracle {
    let spill_sums = neighbor_spill_sums(latents, network);
    let n = network.n();
    let mut base = Vec::with_capacity(n);
    let mut gain = Vec::with_capacity(n);
    let mut spill = Vec::with_capacity(n);
    for i in 0..n {
        let ui = latents.u_i[(i, 0)];
        let uc = latents.u_c[(i, 0)];
        base.push(ui + uc);
        gain.push(2.0 * ui + 1.6 * uc);
        spill.push(spill_sums[i] + 1.5 * ui + 0.5 * uc);
    }
    PotentialOutcomeOracle::from_coefficients(base, gain, spill)
}
