//! Outcome modeling and effect estimation on recovered latents.
//!
//! A second graph convolution aggregates each unit's neighbor latents
//! `(u_c, u_n)` into `h3`; a feature network combines `h3` with the unit's
//! own `(u_i, u_c)` into `h4`; and two outcome heads indexed by treatment arm
//! regress the outcome on `(z, h4)`. Training couples this regression with
//! the representation objectives and a dependence penalty pushing `h4`
//! toward independence of `(t, z)`. Estimation averages head predictions
//! over posterior draws of the latents — recomputing `h4` per draw so
//! neighbor uncertainty propagates — with the queried `(t, z)` substituted
//! for the observed ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{stage_rng, LatentBlocks, NetworkDataset};
use crate::error::{Error, Result};
use crate::ipm::{joint_product_ipm, IpmKind};
use crate::latent_model::{draw_noise, LatentModel, LatentModelConfig};
use crate::netgraph::{GcnOperator, Network};
use crate::tensor::{he_init, Adam, Mlp, ParamId, ParamStore, Tape, Var};

/// RNG streams used here (shared with `baselines`); disjoint from the
/// generator stages in `datagen`.
pub(crate) const STREAM_INIT: u64 = 20;
pub(crate) const STREAM_VAL_SPLIT: u64 = 21;
pub(crate) const STREAM_EPOCH: u64 = 22;
/// Base for per-unit estimation streams: unit `i` draws its posterior noise
/// from stream `BASE + i`, so noise depends only on `(seed, unit, draw)` and
/// never on which other units are evaluated alongside it.
const STREAM_ESTIMATE_BASE: u64 = 1 << 32;

/// Averaged estimates are snapped to this grid (2^26 per unit, ~1.5e-8
/// resolution — far below Monte-Carlo error) so that composed queries
/// satisfy their algebraic identities bit-for-bit: grid values below 2^25 in
/// magnitude subtract and telescope without rounding.
const ESTIMATE_GRID: f64 = 67_108_864.0;

pub(crate) fn snap_to_grid(v: f64) -> f64 {
    (v * ESTIMATE_GRID).round() / ESTIMATE_GRID
}

/// The six estimands: average and individual main, spillover, and total
/// effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Ame,
    Ase,
    Ate,
    Ime,
    Ise,
    Ite,
}

impl EffectKind {
    /// Individual kinds return a per-unit vector; average kinds a scalar.
    pub fn is_individual(self) -> bool {
        matches!(self, EffectKind::Ime | EffectKind::Ise | EffectKind::Ite)
    }
}

/// A contrast between two intervened `(treatment, exposure)` settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectQuery {
    pub kind: EffectKind,
    pub setting_a: (u8, f64),
    pub setting_b: (u8, f64),
}

impl EffectQuery {
    /// Default reporting contrasts; every report logs them alongside the
    /// numbers so the settings are never implicit.
    pub fn ame() -> Self {
        EffectQuery {
            kind: EffectKind::Ame,
            setting_a: (1, 0.0),
            setting_b: (0, 0.0),
        }
    }

    pub fn ase() -> Self {
        EffectQuery {
            kind: EffectKind::Ase,
            setting_a: (0, 0.7),
            setting_b: (0, 0.2),
        }
    }

    pub fn ate() -> Self {
        EffectQuery {
            kind: EffectKind::Ate,
            setting_a: (1, 0.7),
            setting_b: (0, 0.0),
        }
    }

    pub fn ime() -> Self {
        EffectQuery {
            kind: EffectKind::Ime,
            ..EffectQuery::ame()
        }
    }

    pub fn ise() -> Self {
        EffectQuery {
            kind: EffectKind::Ise,
            ..EffectQuery::ase()
        }
    }

    pub fn ite() -> Self {
        EffectQuery {
            kind: EffectKind::Ite,
            ..EffectQuery::ate()
        }
    }

    /// The same contrast with the settings exchanged.
    pub fn swapped(&self) -> Self {
        EffectQuery {
            kind: self.kind,
            setting_a: self.setting_b,
            setting_b: self.setting_a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (t, z) in [self.setting_a, self.setting_b] {
            validate_setting(t, z)?;
        }
        match self.kind {
            EffectKind::Ame | EffectKind::Ime
                if self.setting_a.1 != 0.0 || self.setting_b.1 != 0.0 =>
            {
                Err(Error::Input(
                    "main-effect queries require both exposures fixed at 0".into(),
                ))
            }
            EffectKind::Ase | EffectKind::Ise
                if self.setting_a.0 != 0 || self.setting_b.0 != 0 =>
            {
                Err(Error::Input(
                    "spillover queries require both treatments fixed at 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

pub(crate) fn validate_setting(t: u8, z: f64) -> Result<()> {
    if t > 1 {
        return Err(Error::Input(format!("treatment must be 0 or 1, got {t}")));
    }
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::Input(format!(
            "exposure must lie in [0, 1], got {z}"
        )));
    }
    Ok(())
}

/// Result of an effect query: a scalar for average kinds, one value per
/// evaluated unit for individual kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EffectEstimate {
    Average(f64),
    Individual(Vec<f64>),
}

impl EffectEstimate {
    /// The scalar for average kinds; the unit mean for individual kinds.
    pub fn summary_value(&self) -> f64 {
        match self {
            EffectEstimate::Average(v) => *v,
            EffectEstimate::Individual(v) => v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

/// Everything the trainer needs: widths, loss weights, schedule, and the
/// latent-model configuration it wraps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Units per step for the per-unit loss terms; `None` uses the whole
    /// train split every step. Aggregations always see the full graph.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub alpha_elbo: f64,
    pub alpha_sm: f64,
    pub alpha_y: f64,
    pub alpha_ipm: f64,
    pub ipm_kind: IpmKind,
    pub seed: u64,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Posterior draws per training step.
    pub mc_train: usize,
    /// Posterior draws per estimation query (S).
    pub posterior_draws: usize,
    /// Fraction of train units held out for early stopping.
    pub val_fraction: f64,
    /// Width of the aggregated neighbor-latent features h3.
    pub h3_width: usize,
    /// Width of the outcome features h4.
    pub h4_width: usize,
    /// Hidden width of the feature network.
    pub feat_hidden: usize,
    /// Hidden width of each outcome head.
    pub head_hidden: usize,
    pub latent: LatentModelConfig,
    /// Test hook: the outcome path reads the generator's true latents
    /// instead of posterior draws, both in training and at estimation.
    pub oracle_latents: bool,
}

impl TrainConfig {
    pub fn new(d_x: usize) -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: None,
            learning_rate: 1e-3,
            alpha_elbo: 1.0,
            alpha_sm: 1.0,
            alpha_y: 1.0,
            alpha_ipm: 1.0,
            ipm_kind: IpmKind::EntropicOt,
            seed: 0,
            patience: 30,
            mc_train: 1,
            posterior_draws: 32,
            val_fraction: 0.1,
            h3_width: 64,
            h4_width: 64,
            feat_hidden: 64,
            head_hidden: 64,
            latent: LatentModelConfig::new(d_x),
            oracle_latents: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, a) in [
            ("alpha_elbo", self.alpha_elbo),
            ("alpha_sm", self.alpha_sm),
            ("alpha_y", self.alpha_y),
            ("alpha_ipm", self.alpha_ipm),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {a}"
                )));
            }
        }
        if self.mc_train == 0 || self.posterior_draws == 0 {
            return Err(Error::Config("posterior draw counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.h3_width == 0 || self.h4_width == 0 || self.feat_hidden == 0 || self.head_hidden == 0
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.latent.validate()
    }

    /// Content hash of the canonical JSON serialization; stamped into
    /// checkpoints and reports so artifacts are traceable to their exact
    /// configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Neighbor-latent aggregation weights and the feature network.
pub struct FeatureParams {
    /// GCN weights over the stacked `(u_c | u_n)` neighbor blocks,
    /// `(d_c + d_n) x h3_width`.
    pub w2: ParamId,
    /// Feature network `(h3_width + d_i + d_c) -> h4_width`.
    pub mlp_feat: Mlp,
}

impl FeatureParams {
    /// Registers parameters under `feat.*`.
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let d_cn = cfg.latent.d_c + cfg.latent.d_n;
        let w2 = store.register("feat.w2", he_init(rng, d_cn, cfg.h3_width));
        let in_dim = cfg.h3_width + cfg.latent.d_i + cfg.latent.d_c;
        let mlp_feat = Mlp::new(
            store,
            "feat.mlp",
            &[in_dim, cfg.feat_hidden, cfg.h4_width],
            rng,
        );
        FeatureParams { w2, mlp_feat }
    }
}

/// Two outcome heads, one per treatment arm, each `(1 + feature_width) -> 1`
/// on the input `[z | features]`. Shared with the baselines, whose feature
/// map is a plain proxy representation instead of `h4`.
pub struct OutcomeHeads {
    pub mlp_t1: Mlp,
    pub mlp_t0: Mlp,
}

impl OutcomeHeads {
    /// Registers parameters under `head1.*` / `head0.*`.
    pub fn new(
        store: &mut ParamStore,
        feature_width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dims = [1 + feature_width, hidden, 1];
        OutcomeHeads {
            mlp_t1: Mlp::new(store, "head1.mlp", &dims, rng),
            mlp_t0: Mlp::new(store, "head0.mlp", &dims, rng),
        }
    }

    /// Arm-masked prediction on the tape: `t .* head1([z|f]) + (1-t) .*
    /// head0([z|f])` for an n x 1 arm column `t_mask`, exposure column `z`,
    /// and feature rows `features`.
    pub fn predict_masked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t_mask: Var,
        z: Var,
        features: Var,
    ) -> Var {
        let inp = tape.concat_cols(z, features);
        let y1 = self.mlp_t1.forward(tape, store, inp);
        let y0 = self.mlp_t0.forward(tape, store, inp);
        let on = tape.mul(t_mask, y1);
        let negated = tape.neg(t_mask);
        let off_mask = tape.add_scalar(negated, 1.0);
        let off = tape.mul(off_mask, y0);
        tape.add(on, off)
    }
}

/// Per-term values of one training objective evaluation, before weighting;
/// `total` is the weighted sum. Terms whose weight is zero are skipped
/// entirely and report 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub neg_elbo: f64,
    pub score_matching: f64,
    pub outcome: f64,
    pub ipm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("neg_elbo", self.neg_elbo),
            ("score_matching", self.score_matching),
            ("outcome", self.outcome),
            ("ipm", self.ipm),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// The full estimator: latent recovery plus the outcome model on top of it.
pub struct EffectModel {
    pub cfg: TrainConfig,
    pub latent: LatentModel,
    pub feat: FeatureParams,
    pub heads: OutcomeHeads,
}

impl EffectModel {
    pub fn new(store: &mut ParamStore, cfg: TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let latent = LatentModel::new(store, cfg.latent.clone(), rng)?;
        let feat = FeatureParams::new(store, &cfg, rng);
        let heads = OutcomeHeads::new(store, cfg.h4_width, cfg.head_hidden, rng);
        Ok(EffectModel {
            cfg,
            latent,
            feat,
            heads,
        })
    }

    /// Outcome features on the tape from stacked latents `u` (n x k):
    /// `h3 = relu(agg([u_c | u_n]) W2)` with the degree-normalized neighbor
    /// aggregation (isolated units get h3 = 0), then
    /// `h4 = mlp_feat([h3 | u_i | u_c])`.
    pub fn features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gcn: &Rc<GcnOperator>,
        u: Var,
    ) -> Var {
        let d_i = self.cfg.latent.d_i;
        let d_c = self.cfg.latent.d_c;
        let k = self.cfg.latent.k();
        let u_cn = tape.slice_cols(u, d_i, k);
        let agg = tape.neighbor_agg(u_cn, Rc::clone(gcn));
        let w2 = tape.param(store, self.feat.w2);
        let pre = tape.matmul(agg, w2);
        let h3 = tape.relu(pre);
        let u_ic = tape.slice_cols(u, 0, d_i + d_c);
        let inp = tape.concat_cols(h3, u_ic);
        self.feat.mlp_feat.forward(tape, store, inp)
    }

    /// Arm-masked prediction on the tape: `t .* head1([z|h4]) + (1-t) .*
    /// head0([z|h4])` for an n x 1 arm column `t_mask` and exposure column
    /// `z`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t_mask: Var,
        z: Var,
        h4: Var,
    ) -> Var {
        self.heads.predict_masked(tape, store, t_mask, z, h4)
    }

    /// Standalone feature map from explicit latent blocks.
    pub fn feature_aggregate(
        &self,
        store: &ParamStore,
        network: &Network,
        latents: &LatentBlocks,
    ) -> Result<Array2<f64>> {
        if latents.n() != network.n() {
            return Err(Error::Input(format!(
                "latents have {} rows but the network has {} units",
                latents.n(),
                network.n()
            )));
        }
        let want = (self.cfg.latent.d_i, self.cfg.latent.d_c, self.cfg.latent.d_n);
        if latents.dims() != want {
            return Err(Error::Input(format!(
                "latent block widths {:?} do not match the model's {:?}",
                latents.dims(),
                want
            )));
        }
        let mut tape = Tape::new();
        let u = tape.constant(latents.stacked());
        let gcn = Rc::new(network.gcn_operator());
        let h4 = self.features(&mut tape, store, &gcn, u);
        Ok(tape.value(h4).clone())
    }

    /// Single-unit head evaluation with input validation; purely functional.
    pub fn predict_outcome(
        &self,
        store: &ParamStore,
        t: u8,
        z: f64,
        h4_row: &[f64],
    ) -> Result<f64> {
        validate_setting(t, z)?;
        if h4_row.len() != self.cfg.h4_width {
            return Err(Error::Input(format!(
                "feature vector has width {}, expected {}",
                h4_row.len(),
                self.cfg.h4_width
            )));
        }
        let mut row = Vec::with_capacity(1 + h4_row.len());
        row.push(z);
        row.extend_from_slice(h4_row);
        let mut tape = Tape::new();
        let inp = tape.constant(Array2::from_shape_vec((1, row.len()), row).unwrap());
        let head = if t == 1 {
            &self.heads.mlp_t1
        } else {
            &self.heads.mlp_t0
        };
        let out = head.forward(&mut tape, store, inp);
        Ok(tape.value(out)[(0, 0)])
    }

    /// Weighted training objective over `units`, with its per-term
    /// breakdown. The graph and covariates stay fully visible to the
    /// aggregations; only the per-unit loss terms are restricted to `units`,
    /// and each enters as a per-unit mean so the loss weights compare like
    /// for like. `rng` drives the posterior draws and, when the dependence
    /// term is active, its permutations.
    ///
    /// Gradient flow is asymmetric by design. The evidence bound trains the
    /// encoder and decoder while the prior's weights and its conditioning
    /// input stay frozen: the unnormalized density drops a normalizer that
    /// depends on both, so either path would hand the objective a free
    /// ascent direction. The score-matching term conversely trains only the
    /// prior networks, against detached posterior scores.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ds: &NetworkDataset,
        units: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossBreakdown)> {
        let n = ds.n();
        if units.is_empty() {
            return Err(Error::Input("loss needs a non-empty unit set".into()));
        }
        if let Some(&bad) = units.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!(
                "unit {bad} out of range for {n} units"
            )));
        }
        let cfg = &self.cfg;
        let gcn = Rc::new(ds.network.gcn_operator());
        let x = tape.constant(ds.x.clone());
        let h2 = self.latent.aggregate(tape, store, &gcn, x);
        let (mu, logvar) = self.latent.posterior_params(tape, store, h2);
        let idx = Rc::new(units.to_vec());

        let oracle_u = if cfg.oracle_latents {
            Some(tape.constant(self.oracle_blocks(ds)?.stacked()))
        } else {
            None
        };

        let need_outcome_path = cfg.alpha_y != 0.0 || cfg.alpha_ipm != 0.0;
        let t_obs: Vec<u8> = units.iter().map(|&i| ds.t[i]).collect();
        let z_obs: Vec<f64> = units.iter().map(|&i| ds.z.values()[i]).collect();
        let column = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap();

        let draws = draw_noise(n, cfg.latent.k(), cfg.mc_train, rng);
        let mut elbo_sum: Option<Var> = None;
        let mut sm_sum: Option<Var> = None;
        let mut y_sum: Option<Var> = None;
        let mut ipm_sum: Option<Var> = None;
        let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, v),
                None => v,
            });
        };
        let h2_d = tape.detach(h2);
        let mu_d = tape.detach(mu);
        let logvar_d = tape.detach(logvar);
        for eps in &draws {
            let u = self.latent.sample_posterior(tape, store, mu, logvar, eps);
            if cfg.alpha_elbo != 0.0 {
                let dec = self.latent.decoder_loglik(tape, store, u, x);
                let prior = self.latent.prior_logp_frozen(tape, store, u, h2_d);
                let q = LatentModel::q_loglik(tape, u, mu, logvar, cfg.latent.k());
                let gain = tape.add(dec, prior);
                let terms = tape.sub(gain, q);
                let own = tape.gather_rows(terms, Rc::clone(&idx));
                let mean = tape.mean_all(own);
                accumulate(tape, &mut elbo_sum, mean);
            }
            if cfg.alpha_sm != 0.0 {
                let u_d = tape.detach(u);
                let terms = self
                    .latent
                    .score_matching_terms(tape, store, u_d, h2_d, mu_d, logvar_d);
                let own = tape.gather_rows(terms, Rc::clone(&idx));
                let mean = tape.mean_all(own);
                accumulate(tape, &mut sm_sum, mean);
            }
            if need_outcome_path {
                let u_out = oracle_u.unwrap_or(u);
                let h4 = self.features(tape, store, &gcn, u_out);
                let h4_own = tape.gather_rows(h4, Rc::clone(&idx));
                if cfg.alpha_y != 0.0 {
                    let t_col = tape.constant(column(
                        &t_obs.iter().map(|&t| f64::from(t)).collect::<Vec<_>>(),
                    ));
                    let z_col = tape.constant(column(&z_obs));
                    let y_col = tape.constant(column(
                        &units.iter().map(|&i| ds.y[i]).collect::<Vec<_>>(),
                    ));
                    let y_hat = self.predict(tape, store, t_col, z_col, h4_own);
                    let resid = tape.sub(y_hat, y_col);
                    let sq = tape.square(resid);
                    let mse = tape.mean_all(sq);
                    accumulate(tape, &mut y_sum, mse);
                }
                if cfg.alpha_ipm != 0.0 {
                    let dep =
                        joint_product_ipm(tape, h4_own, &t_obs, &z_obs, cfg.ipm_kind, rng)?;
                    accumulate(tape, &mut ipm_sum, dep);
                }
            }
        }

        let over_draws = 1.0 / draws.len() as f64;
        let finish = |tape: &mut Tape, acc: Option<Var>| -> Option<Var> {
            acc.map(|v| tape.scale(v, over_draws))
        };
        let elbo = finish(tape, elbo_sum);
        let neg_elbo = elbo.map(|v| tape.neg(v));
        let sm = finish(tape, sm_sum);
        let outcome = finish(tape, y_sum);
        let ipm = finish(tape, ipm_sum);

        let mut total: Option<Var> = None;
        for (alpha, term) in [
            (cfg.alpha_elbo, neg_elbo),
            (cfg.alpha_sm, sm),
            (cfg.alpha_y, outcome),
            (cfg.alpha_ipm, ipm),
        ] {
            if let Some(v) = term {
                let scaled = tape.scale(v, alpha);
                total = Some(match total {
                    Some(t) => tape.add(t, scaled),
                    None => scaled,
                });
            }
        }
        let total = total.unwrap_or_else(|| tape.constant(Array2::zeros((1, 1))));

        let value_of = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
        let breakdown = LossBreakdown {
            neg_elbo: value_of(tape, neg_elbo),
            score_matching: value_of(tape, sm),
            outcome: value_of(tape, outcome),
            ipm: value_of(tape, ipm),
            total: tape.scalar_value(total),
        };
        Ok((total, breakdown))
    }

    fn oracle_blocks<'a>(&self, ds: &'a NetworkDataset) -> Result<&'a LatentBlocks> {
        let blocks = ds.latents.as_ref().ok_or_else(|| {
            Error::State("oracle latents requested but the dataset carries none".into())
        })?;
        let want = (self.cfg.latent.d_i, self.cfg.latent.d_c, self.cfg.latent.d_n);
        if blocks.dims() != want {
            return Err(Error::Input(format!(
                "dataset latent widths {:?} do not match the model's {:?}",
                blocks.dims(),
                want
            )));
        }
        Ok(blocks)
    }
}

/// One epoch's record: the pre-step objective and the post-step validation
/// MSE (absent when the train split was too small to carve one out).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_mse: Option<f64>,
}

/// A trained estimator frozen at its best validation epoch.
pub struct TrainedModel {
    pub model: EffectModel,
    pub store: ParamStore,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub config_hash: String,
}

/// Trains the full objective on the dataset's train split with first-order
/// adaptive steps, early-stopping on a validation split carved from it.
/// Deterministic given the config (all randomness flows from `cfg.seed`).
pub fn train(ds: &NetworkDataset, cfg: TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    ds.validate()?;
    if ds.d_x() != cfg.latent.d_x {
        return Err(Error::Config(format!(
            "dataset has {} proxy columns but the latent model expects {}",
            ds.d_x(),
            cfg.latent.d_x
        )));
    }
    let train_units = ds.train_units();
    if train_units.is_empty() {
        return Err(Error::State("dataset has no train units".into()));
    }

    let mut store = ParamStore::new();
    let model = EffectModel::new(
        &mut store,
        cfg.clone(),
        &mut stage_rng(cfg.seed, STREAM_INIT),
    )?;

    // Carve validation units out of the train split; when either side would
    // be empty, train on everything and disable early stopping.
    let mut order = train_units;
    order.shuffle(&mut stage_rng(cfg.seed, STREAM_VAL_SPLIT));
    let n_val = (order.len() as f64 * cfg.val_fraction).round() as usize;
    let (mut val, mut fit) = if n_val >= 1 && order.len() > n_val {
        (order[..n_val].to_vec(), order[n_val..].to_vec())
    } else {
        (Vec::new(), order)
    };
    val.sort_unstable();
    fit.sort_unstable();

    let mut epoch_rng = stage_rng(cfg.seed, STREAM_EPOCH);
    let mut opt = Adam::new(&store, cfg.learning_rate);
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut best: Option<(f64, Vec<Array2<f64>>, usize)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let units: Vec<usize> = match cfg.batch_size {
            None => fit.clone(),
            Some(b) => {
                let mut batch: Vec<usize> = fit
                    .choose_multiple(&mut epoch_rng, b.min(fit.len()))
                    .copied()
                    .collect();
                batch.sort_unstable();
                batch
            }
        };
        let mut tape = Tape::new();
        let (total, loss) = model.total_loss(&mut tape, &store, ds, &units, &mut epoch_rng)?;
        if let Some(term) = loss.first_non_finite() {
            return Err(Error::NonFiniteLoss {
                term: term.into(),
                epoch,
            });
        }
        let grads = tape.backward(total);
        opt.step(&mut store, &grads);

        let val_mse = if val.is_empty() {
            None
        } else {
            Some(outcome_mse(&model, &store, ds, &val)?)
        };
        logs.push(EpochLog {
            epoch,
            loss,
            val_mse,
        });

        if let Some(v) = val_mse {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "validation_mse".into(),
                    epoch,
                });
            }
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, store.snapshot(), epoch));
                stale = 0;
            } else {
                stale += 1;
                if stale > cfg.patience {
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, snapshot, epoch)) => {
            store.restore(&snapshot);
            epoch
        }
        None => logs.len().saturating_sub(1),
    };
    let config_hash = cfg.config_hash();
    Ok(TrainedModel {
        model,
        store,
        logs,
        best_epoch,
        config_hash,
    })
}

/// Outcome MSE on `units` with deterministic latents (posterior mean, or the
/// oracle blocks under the test hook) and the observed `(t, z)`.
fn outcome_mse(
    model: &EffectModel,
    store: &ParamStore,
    ds: &NetworkDataset,
    units: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let gcn = Rc::new(ds.network.gcn_operator());
    let u = if model.cfg.oracle_latents {
        tape.constant(model.oracle_blocks(ds)?.stacked())
    } else {
        let x = tape.constant(ds.x.clone());
        let h2 = model.latent.aggregate(&mut tape, store, &gcn, x);
        let (mu, _) = model.latent.posterior_params(&mut tape, store, h2);
        mu
    };
    let h4 = model.features(&mut tape, store, &gcn, u);
    let idx = Rc::new(units.to_vec());
    let h4_own = tape.gather_rows(h4, Rc::clone(&idx));
    let column = |v: Vec<f64>| Array2::from_shape_vec((v.len(), 1), v).unwrap();
    let t_col = tape.constant(column(
        units.iter().map(|&i| f64::from(ds.t[i])).collect(),
    ));
    let z_col = tape.constant(column(units.iter().map(|&i| ds.z.values()[i]).collect()));
    let y_hat = model.predict(&mut tape, store, t_col, z_col, h4_own);
    let pred = tape.value(y_hat);
    let mse = units
        .iter()
        .enumerate()
        .map(|(r, &i)| (pred[(r, 0)] - ds.y[i]).powi(2))
        .sum::<f64>()
        / units.len() as f64;
    Ok(mse)
}

impl TrainedModel {
    /// Per-unit outcome estimates μ̂ for each setting, sharing one posterior
    /// draw stream across settings (common random numbers), with `h4`
    /// recomputed from each draw. Returned values are grid-snapped.
    fn mu_for_settings(
        &self,
        ds: &NetworkDataset,
        settings: &[(u8, f64)],
    ) -> Result<Vec<Vec<f64>>> {
        for &(t, z) in settings {
            validate_setting(t, z)?;
        }
        let cfg = &self.model.cfg;
        if ds.d_x() != cfg.latent.d_x {
            return Err(Error::Input(format!(
                "dataset has {} proxy columns but the model expects {}",
                ds.d_x(),
                cfg.latent.d_x
            )));
        }
        let n = ds.n();
        let k = cfg.latent.k();
        let gcn = Rc::new(ds.network.gcn_operator());

        // Deterministic latents short-circuit the outer expectation: one
        // pass, no draws.
        if cfg.oracle_latents {
            let mut tape = Tape::new();
            let u = tape.constant(self.model.oracle_blocks(ds)?.stacked());
            let h4 = self.model.features(&mut tape, &self.store, &gcn, u);
            let mut out = Vec::with_capacity(settings.len());
            for &(t, z) in settings {
                let preds = self.predict_all(&mut tape, h4, n, t, z);
                out.push(preds.iter().map(|&v| snap_to_grid(v)).collect());
            }
            return Ok(out);
        }

        // Posterior parameters once, as plain values.
        let (mu_v, sd_v) = {
            let mut tape = Tape::new();
            let x = tape.constant(ds.x.clone());
            let h2 = self.model.latent.aggregate(&mut tape, &self.store, &gcn, x);
            let (mu, logvar) = self.model.latent.posterior_params(&mut tape, &self.store, h2);
            let sd = tape.value(logvar).mapv(|v| (0.5 * v).exp());
            (tape.value(mu).clone(), sd)
        };

        // Per-unit noise streams: unit i's draws depend only on (seed, i).
        let s_draws = cfg.posterior_draws;
        let mut eps = vec![Array2::<f64>::zeros((n, k)); s_draws];
        for i in 0..n {
            let mut unit_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            unit_rng.set_stream(STREAM_ESTIMATE_BASE + i as u64);
            for draw in eps.iter_mut() {
                for c in 0..k {
                    draw[(i, c)] = StandardNormal.sample(&mut unit_rng);
                }
            }
        }

        let mut acc = vec![vec![0.0f64; n]; settings.len()];
        for draw in &eps {
            // Fresh tape per draw: estimation only needs forward values.
            let mut tape = Tape::new();
            let u = tape.constant(&mu_v + &(&sd_v * draw));
            let h4 = self.model.features(&mut tape, &self.store, &gcn, u);
            for (si, &(t, z)) in settings.iter().enumerate() {
                let preds = self.predict_all(&mut tape, h4, n, t, z);
                for (a, p) in acc[si].iter_mut().zip(&preds) {
                    *a += p;
                }
            }
        }
        Ok(acc
            .into_iter()
            .map(|sums| {
                sums.into_iter()
                    .map(|s| snap_to_grid(s / s_draws as f64))
                    .collect()
            })
            .collect())
    }

    fn predict_all(&self, tape: &mut Tape, h4: Var, n: usize, t: u8, z: f64) -> Vec<f64> {
        let t_col = tape.constant(Array2::from_elem((n, 1), f64::from(t)));
        let z_col = tape.constant(Array2::from_elem((n, 1), z));
        let y_hat = self.model.predict(tape, &self.store, t_col, z_col, h4);
        tape.value(y_hat).column(0).to_vec()
    }

    /// Posterior-mean latents split into the three recovered blocks, for
    /// comparisons against a generator's ground truth.
    pub fn recovered_latents(&self, ds: &NetworkDataset) -> Result<LatentBlocks> {
        let cfg = &self.model.cfg;
        if ds.d_x() != cfg.latent.d_x {
            return Err(Error::Input(format!(
                "dataset has {} proxy columns but the model expects {}",
                ds.d_x(),
                cfg.latent.d_x
            )));
        }
        let mut tape = Tape::new();
        let gcn = Rc::new(ds.network.gcn_operator());
        let x = tape.constant(ds.x.clone());
        let h2 = self.model.latent.aggregate(&mut tape, &self.store, &gcn, x);
        let (mu, _) = self.model.latent.posterior_params(&mut tape, &self.store, h2);
        let m = tape.value(mu);
        let (d_i, d_c) = (cfg.latent.d_i, cfg.latent.d_c);
        let k = cfg.latent.k();
        LatentBlocks::new(
            m.slice(ndarray::s![.., 0..d_i]).to_owned(),
            m.slice(ndarray::s![.., d_i..d_i + d_c]).to_owned(),
            m.slice(ndarray::s![.., d_i + d_c..k]).to_owned(),
        )
    }

    /// μ̂(t, z) for one unit: the mean over `posterior_draws` latent draws of
    /// the arm-`t` head at exposure `z`, with `h4` recomputed per draw.
    pub fn estimate_mu(&self, ds: &NetworkDataset, unit: usize, t: u8, z: f64) -> Result<f64> {
        if unit >= ds.n() {
            return Err(Error::Input(format!(
                "unit {unit} out of range for {} units",
                ds.n()
            )));
        }
        let mus = self.mu_for_settings(ds, &[(t, z)])?;
        Ok(mus[0][unit])
    }

    /// ψ̂(t, z): the mean of μ̂ over the evaluation unit set (summed in
    /// sorted unit order, so the caller's ordering is irrelevant).
    pub fn estimate_psi(
        &self,
        ds: &NetworkDataset,
        t: u8,
        z: f64,
        units: &[usize],
    ) -> Result<f64> {
        let mus = self.mu_for_settings(ds, &[(t, z)])?;
        psi_mean(&mus[0], units)
    }

    /// Contrast between the query's two settings: ψ̂(a) − ψ̂(b) for average
    /// kinds, the per-unit vector μ̂(a, ·) − μ̂(b, ·) over `units` for
    /// individual kinds.
    pub fn estimate_effect(
        &self,
        ds: &NetworkDataset,
        query: &EffectQuery,
        units: &[usize],
    ) -> Result<EffectEstimate> {
        query.validate()?;
        check_units(units, ds.n())?;
        let mus = self.mu_for_settings(ds, &[query.setting_a, query.setting_b])?;
        if query.kind.is_individual() {
            Ok(EffectEstimate::Individual(
                units.iter().map(|&i| mus[0][i] - mus[1][i]).collect(),
            ))
        } else {
            let a = psi_mean(&mus[0], units)?;
            let b = psi_mean(&mus[1], units)?;
            Ok(EffectEstimate::Average(a - b))
        }
    }
}

pub(crate) fn check_units(units: &[usize], n: usize) -> Result<()> {
    if units.is_empty() {
        return Err(Error::Input("empty evaluation unit set".into()));
    }
    if let Some(&bad) = units.iter().find(|&&i| i >= n) {
        return Err(Error::Input(format!(
            "unit {bad} out of range for {n} units"
        )));
    }
    Ok(())
}

pub(crate) fn psi_mean(mu: &[f64], units: &[usize]) -> Result<f64> {
    check_units(units, mu.len())?;
    let mut sorted = units.to_vec();
    sorted.sort_unstable();
    let sum: f64 = sorted.iter().map(|&i| mu[i]).sum();
    Ok(snap_to_grid(sum / sorted.len() as f64))
}

/// Noiseless generator evaluation in place of μ̂ (test hook): effects read
/// directly off the dataset's potential-outcome oracle.
pub fn oracle_effect(
    ds: &NetworkDataset,
    query: &EffectQuery,
    units: &[usize],
) -> Result<EffectEstimate> {
    query.validate()?;
    check_units(units, ds.n())?;
    let oracle = ds.oracle.as_ref().ok_or_else(|| {
        Error::State("dataset carries no potential-outcome oracle".into())
    })?;
    if query.kind.is_individual() {
        Ok(EffectEstimate::Individual(
            units
                .iter()
                .map(|&i| oracle.unit_effect(i, query.setting_a, query.setting_b))
                .collect(),
        ))
    } else {
        Ok(EffectEstimate::Average(oracle.mean_effect(
            units,
            query.setting_a,
            query.setting_b,
        )))
    }
}

const CHECKPOINT_FORMAT: &str = "netconfound.checkpoint.v1";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: TrainConfig,
    config_hash: String,
    best_epoch: usize,
    params: BTreeMap<String, ParamRecord>,
}

impl TrainedModel {
    /// Writes every parameter tensor keyed by its registered name, plus the
    /// config and its hash, as one JSON archive. Floats round-trip exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let params: BTreeMap<String, ParamRecord> = self
            .store
            .entries()
            .map(|(name, v)| {
                (
                    name.to_string(),
                    ParamRecord {
                        rows: v.nrows(),
                        cols: v.ncols(),
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            config: self.model.cfg.clone(),
            config_hash: self.config_hash.clone(),
            best_epoch: self.best_epoch,
            params,
        };
        let json = serde_json::to_string(&file).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint. The stored hash must match the stored config
    /// (guards against edited files); when `expected` is given, its hash
    /// must also match unless `force`. Epoch logs are not persisted.
    pub fn load(path: &Path, expected: Option<&TrainConfig>, force: bool) -> Result<TrainedModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| Error::io(path, e))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::State(format!(
                "unrecognized checkpoint format {:?}",
                file.format
            )));
        }
        if file.config.config_hash() != file.config_hash {
            return Err(Error::State(
                "checkpoint config hash does not match its config; the file was edited or corrupted"
                    .into(),
            ));
        }
        if let Some(exp) = expected {
            if exp.config_hash() != file.config_hash && !force {
                return Err(Error::State(format!(
                    "checkpoint was trained under a different configuration \
                     (hash {} vs expected {}); pass force to load anyway",
                    &file.config_hash[..12],
                    &exp.config_hash()[..12],
                )));
            }
        }
        let mut store = ParamStore::new();
        let model = EffectModel::new(
            &mut store,
            file.config.clone(),
            &mut stage_rng(file.config.seed, STREAM_INIT),
        )?;
        if store.len() != file.params.len() {
            return Err(Error::State(format!(
                "checkpoint holds {} tensors but the config implies {}",
                file.params.len(),
                store.len()
            )));
        }
        let names: Vec<(ParamId, String)> = store
            .ids()
            .map(|id| (id, store.name(id).to_string()))
            .collect();
        for (id, name) in names {
            let rec = file.params.get(&name).ok_or_else(|| {
                Error::State(format!("checkpoint is missing tensor {name:?}"))
            })?;
            let want = store.value(id).dim();
            if (rec.rows, rec.cols) != want {
                return Err(Error::State(format!(
                    "tensor {name:?} has shape {}x{}, expected {}x{}",
                    rec.rows, rec.cols, want.0, want.1
                )));
            }
            let arr = Array2::from_shape_vec((rec.rows, rec.cols), rec.data.clone())
                .map_err(|e| Error::State(format!("tensor {name:?}: {e}")))?;
            store.set_value(id, arr);
        }
        Ok(TrainedModel {
            model,
            store,
            logs: Vec::new(),
            best_epoch: file.best_epoch,
            config_hash: file.config_hash,
        })
    }
}
