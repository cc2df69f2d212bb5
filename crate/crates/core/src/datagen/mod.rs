//! Dataset generators with ground-truth latents and potential-outcome
//! oracles, plus lossless directory persistence.

pub mod io;
mod semisynthetic;
mod synthetic;

pub use semisynthetic::{
    gen_semisynthetic, gen_semisynthetic_with, stand_in_covariates, CovariateSource,
    SemiSyntheticConfig,
};
pub use synthetic::{gen_synthetic, gen_synthetic_with, SyntheticConfig};

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{ExposureVector, Network};

/// Ground-truth latent confounders: `u_i` affects only the unit's own
/// treatment and outcome, `u_n` only the neighbors' treatments, and `u_c`
/// both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlocks {
    pub u_i: Array2<f64>,
    pub u_c: Array2<f64>,
    pub u_n: Array2<f64>,
}

impl LatentBlocks {
    pub fn new(u_i: Array2<f64>, u_c: Array2<f64>, u_n: Array2<f64>) -> Result<Self> {
        if u_i.nrows() != u_c.nrows() || u_c.nrows() != u_n.nrows() {
            return Err(Error::Input(format!(
                "latent blocks disagree on unit count: {} / {} / {}",
                u_i.nrows(),
                u_c.nrows(),
                u_n.nrows()
            )));
        }
        Ok(LatentBlocks { u_i, u_c, u_n })
    }

    pub fn n(&self) -> usize {
        self.u_i.nrows()
    }

    /// Per-block widths `(d_i, d_c, d_n)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.u_i.ncols(), self.u_c.ncols(), self.u_n.ncols())
    }

    /// `n x (d_i + d_c + d_n)` concatenation in block order.
    pub fn stacked(&self) -> Array2<f64> {
        concatenate(
            Axis(1),
            &[self.u_i.view(), self.u_c.view(), self.u_n.view()],
        )
        .expect("blocks share row count by construction")
    }
}

/// Noiseless potential outcomes. Every generator in scope is affine in the
/// treatment and the exposure, so the oracle stores per-unit coefficients of
/// `y_i(t, z) = base_i + gain_i * t + spill_i * z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomeOracle {
    base: Vec<f64>,
    gain: Vec<f64>,
    spill: Vec<f64>,
}

impl PotentialOutcomeOracle {
    pub fn from_coefficients(base: Vec<f64>, gain: Vec<f64>, spill: Vec<f64>) -> Self {
        assert_eq!(base.len(), gain.len());
        assert_eq!(base.len(), spill.len());
        PotentialOutcomeOracle { base, gain, spill }
    }

    pub fn n(&self) -> usize {
        self.base.len()
    }

    /// Noiseless potential outcome for unit `i` under treatment `t` and
    /// exposure `z`.
    pub fn evaluate(&self, i: usize, t: u8, z: f64) -> f64 {
        self.base[i] + self.gain[i] * f64::from(t) + self.spill[i] * z
    }

    /// Noiseless unit-level effect between settings `a = (t, z)` and
    /// `b = (t', z')`, computed in coefficient form so the shared base term
    /// cancels exactly rather than through subtraction of two evaluations.
    pub fn unit_effect(&self, i: usize, a: (u8, f64), b: (u8, f64)) -> f64 {
        self.gain[i] * (f64::from(a.0) - f64::from(b.0)) + self.spill[i] * (a.1 - b.1)
    }

    /// Mean of [`Self::unit_effect`] over a unit set, computed by averaging
    /// the gain and spill coefficients first: when every unit shares the same
    /// coefficient the mean is that coefficient bit-for-bit, so constant
    /// effects come out exact rather than accumulating rounding.
    pub fn mean_effect(&self, units: &[usize], a: (u8, f64), b: (u8, f64)) -> f64 {
        assert!(!units.is_empty(), "mean effect over an empty unit set");
        let m = units.len() as f64;
        let mean_gain = units.iter().map(|&i| self.gain[i]).sum::<f64>() / m;
        let mean_spill = units.iter().map(|&i| self.spill[i]).sum::<f64>() / m;
        mean_gain * (f64::from(a.0) - f64::from(b.0)) + mean_spill * (a.1 - b.1)
    }
}

/// Node-level evaluation split: outcomes of test units are masked during
/// training; the graph stays fully visible for aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Outcome regime of the semisynthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Homo,
    Hete,
}

/// Provenance of semisynthetic covariates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CovariateRecord {
    Supplied,
    StandIn { n: usize, d: usize, seed: u64 },
}

/// Everything needed to re-materialize a dataset's oracle from its stored
/// latents and network: generator identity, seeds, and sampled weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorRecord {
    Synthetic {
        expected_degree: f64,
        seed: u64,
        noise_x: f64,
        noise_y: f64,
        proxy_weights: Vec<Vec<f64>>,
        positivity_constant: f64,
    },
    Semisynthetic {
        outcome_kind: OutcomeKind,
        hete_second_term_uses_z: bool,
        seed: u64,
        noise_x: f64,
        noise_y: f64,
        covariates: CovariateRecord,
        w1: Vec<Vec<f64>>,
        w2: Vec<f64>,
        w3: Vec<f64>,
        w4: Vec<f64>,
        w5: Vec<f64>,
        w6: Vec<f64>,
        w7: Vec<f64>,
    },
}

/// One observational dataset on a network: proxies, treatments, exposures,
/// outcomes, and (for generated data) the ground truth behind them.
#[derive(Debug, Clone)]
pub struct NetworkDataset {
    pub network: Network,
    pub x: Array2<f64>,
    pub t: Vec<u8>,
    pub z: ExposureVector,
    pub y: Vec<f64>,
    pub latents: Option<LatentBlocks>,
    pub oracle: Option<PotentialOutcomeOracle>,
    pub split_mask: Option<Vec<Split>>,
    /// Outcome noise realized at generation time;
    /// `y[i] == oracle.evaluate(i, t[i], z[i]) + noise_y[i]` exactly.
    pub noise_y: Vec<f64>,
    pub generator: GeneratorRecord,
}

/// Dataset view stripped of latents and oracle; estimators that must not see
/// ground truth take this instead of the full dataset.
#[derive(Clone, Copy)]
pub struct ObservedView<'a> {
    pub network: &'a Network,
    pub x: &'a Array2<f64>,
    pub t: &'a [u8],
    pub z: &'a [f64],
    pub y: &'a [f64],
    pub split_mask: Option<&'a [Split]>,
}

impl ObservedView<'_> {
    pub fn n(&self) -> usize {
        self.network.n()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    /// Units labeled for training; all units when no split is marked.
    pub fn train_units(&self) -> Vec<usize> {
        match self.split_mask {
            Some(mask) => mask
                .iter()
                .enumerate()
                .filter(|(_, s)| **s == Split::Train)
                .map(|(i, _)| i)
                .collect(),
            None => (0..self.n()).collect(),
        }
    }

    pub fn test_units(&self) -> Vec<usize> {
        match self.split_mask {
            Some(mask) => mask
                .iter()
                .enumerate()
                .filter(|(_, s)| **s == Split::Test)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Row-count consistency across the borrowed fields.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let check = |len: usize, what: &str| {
            if len != n {
                Err(Error::Input(format!("{what} has {len} rows, expected {n}")))
            } else {
                Ok(())
            }
        };
        check(self.x.nrows(), "x")?;
        check(self.t.len(), "t")?;
        check(self.z.len(), "z")?;
        check(self.y.len(), "y")?;
        if let Some(m) = self.split_mask {
            check(m.len(), "split mask")?;
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite outcome".into()));
        }
        Ok(())
    }
}

impl NetworkDataset {
    pub fn n(&self) -> usize {
        self.network.n()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn observed(&self) -> ObservedView<'_> {
        ObservedView {
            network: &self.network,
            x: &self.x,
            t: &self.t,
            z: self.z.values(),
            y: &self.y,
            split_mask: self.split_mask.as_deref(),
        }
    }

    /// Units labeled for training; all units when no split is marked.
    pub fn train_units(&self) -> Vec<usize> {
        self.observed().train_units()
    }

    pub fn test_units(&self) -> Vec<usize> {
        self.observed().test_units()
    }

    /// Basic cross-field consistency; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let check = |len: usize, what: &str| {
            if len != n {
                Err(Error::Input(format!("{what} has {len} rows, expected {n}")))
            } else {
                Ok(())
            }
        };
        check(self.x.nrows(), "x")?;
        check(self.t.len(), "t")?;
        check(self.z.len(), "z")?;
        check(self.y.len(), "y")?;
        check(self.noise_y.len(), "noise")?;
        if let Some(l) = &self.latents {
            check(l.n(), "latents")?;
        }
        if let Some(m) = &self.split_mask {
            check(m.len(), "split mask")?;
        }
        if let Some(o) = &self.oracle {
            check(o.n(), "oracle")?;
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite outcome".into()));
        }
        let recomputed = crate::netgraph::neighbor_exposure(&self.network, &self.t)?;
        if recomputed.values() != self.z.values() {
            return Err(Error::Input(
                "exposure vector does not match neighbor treatments".into(),
            ));
        }
        Ok(())
    }
}

/// Fresh deterministic RNG for one generation stage; distinct stages use
/// distinct streams of the same seed so adding a stage never shifts another.
pub(crate) fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Deterministic 80/20 node-level split.
pub(crate) fn assign_split(n: usize, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let train_count = n * 4 / 5;
    let mut mask = vec![Split::Test; n];
    for &u in &order[..train_count] {
        mask[u] = Split::Train;
    }
    mask
}
