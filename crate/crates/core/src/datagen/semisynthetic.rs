//! Semisynthetic generator: observed covariates are reinterpreted as the
//! ground-truth latent confounders (split into contiguous column thirds),
//! proxies and treatments are resampled on top of them, and outcomes follow
//! either a homogeneous or a heterogeneous regime.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datagen::{
    assign_split, stage_rng, CovariateRecord, GeneratorRecord, LatentBlocks, NetworkDataset,
    OutcomeKind, PotentialOutcomeOracle,
};
use crate::error::{Error, Result};
use crate::netgraph::{neighbor_exposure, Network};
use crate::tensor::sigmoid;

/// Where the semisynthetic covariates come from.
#[derive(Debug, Clone)]
pub enum CovariateSource {
    /// Caller-provided matrix, one row per unit.
    Supplied(Array2<f64>),
    /// Reproducible stand-in for withheld real covariates.
    StandIn { n: usize, d: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct SemiSyntheticConfig {
    pub outcome_kind: OutcomeKind,
    pub seed: u64,
    pub noise_x: f64,
    pub noise_y: f64,
    /// The heterogeneous outcome's second interaction term is written with a
    /// treatment factor; this switch multiplies it by the exposure instead,
    /// for sensitivity checks. Default: false (the formula as given).
    pub hete_second_term_uses_z: bool,
}

impl SemiSyntheticConfig {
    pub fn new(outcome_kind: OutcomeKind, seed: u64) -> Self {
        SemiSyntheticConfig {
            outcome_kind,
            seed,
            noise_x: 1.0,
            noise_y: 1.0,
            hete_second_term_uses_z: false,
        }
    }
}

pub fn gen_semisynthetic(
    covariates: CovariateSource,
    network: &Network,
    outcome_kind: OutcomeKind,
    seed: u64,
) -> Result<NetworkDataset> {
    gen_semisynthetic_with(covariates, network, &SemiSyntheticConfig::new(outcome_kind, seed))
}

pub fn gen_semisynthetic_with(
    covariates: CovariateSource,
    network: &Network,
    cfg: &SemiSyntheticConfig,
) -> Result<NetworkDataset> {
    let (u_full, covariate_record) = match covariates {
        CovariateSource::Supplied(m) => (m, CovariateRecord::Supplied),
        CovariateSource::StandIn { n, d, seed } => (
            stand_in_covariates(n, d, seed),
            CovariateRecord::StandIn { n, d, seed },
        ),
    };
    let n = network.n();
    if u_full.nrows() != n {
        return Err(Error::Input(format!(
            "covariates have {} rows but the network has {n} units",
            u_full.nrows()
        )));
    }
    let d = u_full.ncols();
    if d < 3 {
        return Err(Error::Config(format!(
            "need at least 3 covariate columns to split into latent blocks, got {d}"
        )));
    }

    // Contiguous thirds; remainder columns extend the neighbor-only block.
    let third = d / 3;
    let latents = LatentBlocks::new(
        u_full.slice(s![.., 0..third]).to_owned(),
        u_full.slice(s![.., third..2 * third]).to_owned(),
        u_full.slice(s![.., 2 * third..]).to_owned(),
    )?;
    let (d_i, d_c, d_n) = latents.dims();

    // Proxies: x = u w1 + noise, w1 entries from Uniform(0.5, 1).
    let mut rng = stage_rng(cfg.seed, 2);
    let w1 = Array2::from_shape_fn((d, d), |_| rng.random_range(0.5..1.0));
    let mut rng = stage_rng(cfg.seed, 3);
    let mut x = u_full.dot(&w1);
    x.mapv_inplace(|v| {
        let e: f64 = StandardNormal.sample(&mut rng);
        v + cfg.noise_x * e
    });

    // Treatment: own propensity from (u_i, u_c), neighbor propensity from
    // the neighbors' (u_c, u_n); treated iff the sum is above its mean.
    let mut rng = stage_rng(cfg.seed, 4);
    let w2 = gaussian_vec(&mut rng, d_i + d_c);
    let w3 = gaussian_vec(&mut rng, d_c + d_n);
    let own: Vec<f64> = (0..n)
        .map(|i| {
            let mut dot = 0.0;
            for k in 0..d_i {
                dot += w2[k] * latents.u_i[(i, k)];
            }
            for k in 0..d_c {
                dot += w2[d_i + k] * latents.u_c[(i, k)];
            }
            sigmoid(dot)
        })
        .collect();
    let neigh: Vec<f64> = neighbor_mean(network, |j| {
        let mut dot = 0.0;
        for k in 0..d_c {
            dot += w3[k] * latents.u_c[(j, k)];
        }
        for k in 0..d_n {
            dot += w3[d_c + k] * latents.u_n[(j, k)];
        }
        sigmoid(dot)
    });
    let tpt: Vec<f64> = own.iter().zip(&neigh).map(|(a, b)| a + b).collect();
    let mean_tpt = tpt.iter().sum::<f64>() / n as f64;
    let t: Vec<u8> = tpt.iter().map(|v| u8::from(*v > mean_tpt)).collect();

    let z = neighbor_exposure(network, &t)?;

    let mut rng = stage_rng(cfg.seed, 5);
    let w4 = gaussian_vec(&mut rng, d_i);
    let w5 = gaussian_vec(&mut rng, d_c);
    let w6 = gaussian_vec(&mut rng, d_c);
    let w7 = gaussian_vec(&mut rng, d_n);
    let oracle = semisynthetic_oracle(
        &latents,
        network,
        &w4,
        &w5,
        &w6,
        &w7,
        cfg.outcome_kind,
        cfg.hete_second_term_uses_z,
    );

    let mut rng = stage_rng(cfg.seed, 6);
    let noise_y: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            cfg.noise_y * e
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| oracle.evaluate(i, t[i], z.values()[i]) + noise_y[i])
        .collect();

    let mut rng = stage_rng(cfg.seed, 7);
    let split_mask = assign_split(n, &mut rng);

    let generator = GeneratorRecord::Semisynthetic {
        outcome_kind: cfg.outcome_kind,
        hete_second_term_uses_z: cfg.hete_second_term_uses_z,
        seed: cfg.seed,
        noise_x: cfg.noise_x,
        noise_y: cfg.noise_y,
        covariates: covariate_record,
        w1: w1.rows().into_iter().map(|r| r.to_vec()).collect(),
        w2,
        w3,
        w4,
        w5,
        w6,
        w7,
    };

    Ok(NetworkDataset {
        network: network.clone(),
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

/// Reproducible stand-in covariates: per unit, a d-dimensional Gaussian with
/// pairwise correlation 0.1 across coordinates, binarized at 0. A stand-in
/// for withheld bag-of-words data, not a copy of it.
pub fn stand_in_covariates(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = stage_rng(seed, 1);
    let own_scale = 0.9_f64.sqrt();
    let shared_scale = 0.1_f64.sqrt();
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        let shared: f64 = StandardNormal.sample(&mut rng);
        for k in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            let g = own_scale * e + shared_scale * shared;
            x[(i, k)] = f64::from(g > 0.0);
        }
    }
    x
}

/// Noiseless outcome coefficients for the semisynthetic regimes; the single
/// code path shared by generation and dataset reload.
#[allow(clippy::too_many_arguments)]
pub(crate) fn semisynthetic_oracle(
    latents: &LatentBlocks,
    network: &Network,
    w4: &[f64],
    w5: &[f64],
    w6: &[f64],
    w7: &[f64],
    outcome_kind: OutcomeKind,
    hete_second_term_uses_z: bool,
) -> PotentialOutcomeOracle {
    let n = network.n();
    let (d_i, d_c, d_n) = latents.dims();
    let po: Vec<f64> = (0..n)
        .map(|i| {
            let mut dot = 0.0;
            for k in 0..d_i {
                dot += w4[k] * latents.u_i[(i, k)];
            }
            for k in 0..d_c {
                dot += w5[k] * latents.u_c[(i, k)];
            }
            sigmoid(dot)
        })
        .collect();
    let pon: Vec<f64> = neighbor_mean(network, |j| {
        let mut dot = 0.0;
        for k in 0..d_c {
            dot += w6[k] * latents.u_c[(j, k)];
        }
        for k in 0..d_n {
            dot += w7[k] * latents.u_n[(j, k)];
        }
        sigmoid(dot)
    });

    let mut base = Vec::with_capacity(n);
    let mut gain = Vec::with_capacity(n);
    let mut spill = Vec::with_capacity(n);
    for i in 0..n {
        base.push(po[i] + 0.5 * pon[i]);
        match outcome_kind {
            OutcomeKind::Homo => {
                gain.push(1.0);
                spill.push(1.0);
            }
            OutcomeKind::Hete => {
                if hete_second_term_uses_z {
                    gain.push(1.0 + (po[i] + 0.5 * pon[i]));
                    spill.push(1.0 + (0.5 * po[i] + pon[i]));
                } else {
                    // Both interaction terms ride on the treatment; the
                    // exposure stays linear.
                    gain.push(1.0 + (po[i] + 0.5 * pon[i]) + (0.5 * po[i] + pon[i]));
                    spill.push(1.0);
                }
            }
        }
    }
    PotentialOutcomeOracle::from_coefficients(base, gain, spill)
}

fn gaussian_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            1.0 + e
        })
        .collect()
}

/// Mean of `f(j)` over each unit's neighbors; 0 for isolated units.
fn neighbor_mean(network: &Network, f: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..network.n())
        .map(|i| {
            let nbrs = network.neighbors(i);
            if nbrs.is_empty() {
                0.0
            } else {
                nbrs.iter().map(|&j| f(j as usize)).sum::<f64>() / nbrs.len() as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::generate_random_graph;

    fn dataset(kind: OutcomeKind, seed: u64) -> NetworkDataset {
        let network = generate_random_graph(300, 5.0, seed).unwrap();
        gen_semisynthetic(
            CovariateSource::StandIn { n: 300, d: 12, seed },
            &network,
            kind,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn homo_main_effect_is_one_for_every_unit() {
        let ds = dataset(OutcomeKind::Homo, 0);
        let oracle = ds.oracle.as_ref().unwrap();
        for i in 0..ds.n() {
            assert_eq!(oracle.unit_effect(i, (1, 0.0), (0, 0.0)), 1.0);
        }
    }

    #[test]
    fn homo_spillover_effect_equals_exposure_difference() {
        let ds = dataset(OutcomeKind::Homo, 1);
        let oracle = ds.oracle.as_ref().unwrap();
        for i in [0usize, 17, 299] {
            for (z, z2) in [(0.7, 0.2), (1.0, 0.0), (0.33, 0.31)] {
                assert_eq!(oracle.unit_effect(i, (0, z), (0, z2)), z - z2);
            }
        }
    }

    #[test]
    fn hete_as_given_keeps_exposure_linear_but_scales_the_main_effect() {
        let ds = dataset(OutcomeKind::Hete, 2);
        let oracle = ds.oracle.as_ref().unwrap();
        let mut saw_heterogeneous_gain = false;
        let gain0 = oracle.unit_effect(0, (1, 0.0), (0, 0.0));
        for i in 0..ds.n() {
            assert_eq!(oracle.unit_effect(i, (0, 0.9), (0, 0.4)), 0.5);
            let gain = oracle.unit_effect(i, (1, 0.0), (0, 0.0));
            assert!(gain > 1.0);
            if (gain - gain0).abs() > 1e-9 {
                saw_heterogeneous_gain = true;
            }
        }
        assert!(saw_heterogeneous_gain);
    }

    #[test]
    fn hete_exposure_switch_moves_the_interaction_to_z() {
        let network = generate_random_graph(200, 4.0, 5).unwrap();
        let mut cfg = SemiSyntheticConfig::new(OutcomeKind::Hete, 5);
        cfg.hete_second_term_uses_z = true;
        let ds = gen_semisynthetic_with(
            CovariateSource::StandIn { n: 200, d: 9, seed: 5 },
            &network,
            &cfg,
        )
        .unwrap();
        let oracle = ds.oracle.as_ref().unwrap();
        let mut saw_nonunit_spill = false;
        for i in 0..ds.n() {
            let spill = oracle.unit_effect(i, (0, 1.0), (0, 0.0));
            if (spill - 1.0).abs() > 1e-9 {
                saw_nonunit_spill = true;
            }
        }
        assert!(saw_nonunit_spill);
    }

    #[test]
    fn stand_in_covariates_are_deterministic_and_binary() {
        let a = stand_in_covariates(50, 9, 3);
        let b = stand_in_covariates(50, 9, 3);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == 0.0 || v == 1.0));
        let ones = a.iter().filter(|&&v| v == 1.0).count();
        assert!(ones > 0 && ones < a.len());
    }

    #[test]
    fn column_split_is_contiguous_thirds_with_remainder_to_neighbor_block() {
        let ds = dataset(OutcomeKind::Homo, 4);
        let latents = ds.latents.as_ref().unwrap();
        assert_eq!(latents.dims(), (4, 4, 4));

        let network = generate_random_graph(40, 3.0, 0).unwrap();
        let ds = gen_semisynthetic(
            CovariateSource::StandIn { n: 40, d: 10, seed: 0 },
            &network,
            OutcomeKind::Homo,
            0,
        )
        .unwrap();
        assert_eq!(ds.latents.as_ref().unwrap().dims(), (3, 3, 4));
    }

    #[test]
    fn fewer_than_three_columns_is_rejected() {
        let network = generate_random_graph(20, 3.0, 0).unwrap();
        let result = gen_semisynthetic(
            CovariateSource::StandIn { n: 20, d: 2, seed: 0 },
            &network,
            OutcomeKind::Homo,
            0,
        );
        assert!(matches!(result, Err(Error::Config(_))));
    }

    #[test]
    fn covariate_row_count_must_match_network() {
        let network = generate_random_graph(20, 3.0, 0).unwrap();
        let result = gen_semisynthetic(
            CovariateSource::Supplied(Array2::zeros((19, 6))),
            &network,
            OutcomeKind::Homo,
            0,
        );
        assert!(matches!(result, Err(Error::Input(_))));
    }

    #[test]
    fn treatment_rate_is_interior() {
        let ds = dataset(OutcomeKind::Homo, 6);
        let rate = ds.t.iter().map(|&t| f64::from(t)).sum::<f64>() / ds.n() as f64;
        assert!((0.2..=0.8).contains(&rate), "rate {rate}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = dataset(OutcomeKind::Hete, 7);
        let b = dataset(OutcomeKind::Hete, 7);
        assert_eq!(a.x, b.x);
        assert_eq!(a.t, b.t);
        assert_eq!(a.y, b.y);
        assert_eq!(a.generator, b.generator);
        a.validate().unwrap();
    }
}
