//! Reference estimators that skip latent-confounder recovery.
//!
//! Both baselines learn a representation `phi(x_i)` from the raw proxies of
//! unit `i` alone — no neighbor covariates, no encoder, no posterior — and
//! feed `[z | phi]` to the same two-headed outcome model the full estimator
//! uses:
//!
//! * `tarnet_z` minimizes the mean squared outcome error;
//! * `cfr_z` adds a distance between the treated and control representation
//!   clouds, weighted by the balancing weight.
//!
//! They take an [`ObservedView`], which carries no latents or oracle, so the
//! ground truth is unreachable by construction. Effect queries follow the
//! exact contract of [`effect_estimator`](crate::effect_estimator): the same
//! [`EffectQuery`] values are accepted and the same invalid ones rejected,
//! with μ̂ computed from `(z, phi(x_i))` and no posterior sampling.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{stage_rng, ObservedView};
use crate::effect_estimator::{
    check_units, psi_mean, snap_to_grid, validate_setting, EffectEstimate, EffectQuery, EpochLog,
    LossBreakdown, OutcomeHeads, STREAM_EPOCH, STREAM_INIT, STREAM_VAL_SPLIT,
};
use crate::error::{Error, Result};
use crate::ipm::{cloud_distance, IpmKind};
use crate::tensor::{Adam, Mlp, ParamId, ParamStore, Tape, Var};

/// Which baseline objective to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Squared outcome error only.
    TarnetZ,
    /// Squared outcome error plus balancing-weighted treated-vs-control
    /// representation distance.
    CfrZ,
}

/// Baseline architecture and training controls. The training fields mirror
/// the full estimator's config; the architecture is just the representation
/// MLP plus the shared outcome heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Proxy column count the representation MLP expects.
    pub d_x: usize,
    /// Output width of `phi`; its single hidden layer uses the same width.
    pub rep_width: usize,
    /// Hidden width of each outcome head.
    pub head_hidden: usize,
    /// Weight on the treated-vs-control distance. Must be 0 for `tarnet_z`;
    /// at 0 the term is skipped entirely and the objective equals
    /// `tarnet_z`'s.
    pub balancing: f64,
    pub ipm_kind: IpmKind,
    pub epochs: usize,
    /// Units per epoch; `None` fits on the whole train split.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Fraction of the train split held out for early stopping.
    pub val_fraction: f64,
}

impl BaselineConfig {
    /// TARNET+z defaults for `d_x` proxy columns.
    pub fn tarnet_z(d_x: usize) -> Self {
        BaselineConfig {
            kind: BaselineKind::TarnetZ,
            d_x,
            rep_width: 64,
            head_hidden: 64,
            balancing: 0.0,
            ipm_kind: IpmKind::default(),
            epochs: 300,
            batch_size: None,
            learning_rate: 1e-3,
            seed: 0,
            patience: 30,
            val_fraction: 0.1,
        }
    }

    /// CFR+z defaults: TARNET+z with a unit balancing weight.
    pub fn cfr_z(d_x: usize) -> Self {
        BaselineConfig {
            kind: BaselineKind::CfrZ,
            balancing: 1.0,
            ..Self::tarnet_z(d_x)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 {
            return Err(Error::Config("d_x must be at least 1".into()));
        }
        if self.rep_width == 0 || self.head_hidden == 0 {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if !self.balancing.is_finite() || self.balancing < 0.0 {
            return Err(Error::Config(format!(
                "balancing weight must be finite and >= 0, got {}",
                self.balancing
            )));
        }
        if self.kind == BaselineKind::TarnetZ && self.balancing != 0.0 {
            return Err(Error::Config(format!(
                "tarnet_z has no balancing term; weight must be 0, got {}",
                self.balancing
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Hash of the canonical JSON serialization; recorded in checkpoints and
    /// reports.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Representation MLP plus the shared outcome heads.
pub struct BaselineModel {
    pub cfg: BaselineConfig,
    pub rep: Mlp,
    pub heads: OutcomeHeads,
}

impl BaselineModel {
    pub fn new(store: &mut ParamStore, cfg: BaselineConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let rep = Mlp::new(
            store,
            "rep.mlp",
            &[cfg.d_x, cfg.rep_width, cfg.rep_width],
            rng,
        );
        let heads = OutcomeHeads::new(store, cfg.rep_width, cfg.head_hidden, rng);
        Ok(BaselineModel { cfg, rep, heads })
    }

    /// `phi` rows for the given covariate rows.
    pub fn representation(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.rep.forward(tape, store, x)
    }

    /// Mean squared outcome error over `units` plus, for a positive
    /// balancing weight, the treated-vs-control representation distance.
    /// Reuses the full estimator's breakdown with the latent terms pinned at
    /// 0. A batch whose units all share one arm contributes no balancing
    /// term (there is no second cloud to compare against).
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        view: &ObservedView<'_>,
        units: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, LossBreakdown)> {
        let n = view.n();
        if units.is_empty() {
            return Err(Error::Input("loss needs a non-empty unit set".into()));
        }
        if let Some(&bad) = units.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!(
                "unit {bad} out of range for {n} units"
            )));
        }
        let cfg = &self.cfg;
        let column = |v: Vec<f64>| Array2::from_shape_vec((v.len(), 1), v).unwrap();

        // phi depends on each unit's own row only, so the forward pass runs
        // on the gathered rows directly.
        let x_own = tape.constant(gather_x(view.x, units));
        let phi = self.representation(tape, store, x_own);

        let t_col = tape.constant(column(
            units.iter().map(|&i| f64::from(view.t[i])).collect(),
        ));
        let z_col = tape.constant(column(units.iter().map(|&i| view.z[i]).collect()));
        let y_col = tape.constant(column(units.iter().map(|&i| view.y[i]).collect()));
        let y_hat = self.heads.predict_masked(tape, store, t_col, z_col, phi);
        let resid = tape.sub(y_hat, y_col);
        let sq = tape.square(resid);
        let outcome = tape.mean_all(sq);

        let ipm = if cfg.balancing != 0.0 {
            let treated: Vec<usize> = (0..units.len()).filter(|&r| view.t[units[r]] == 1).collect();
            let control: Vec<usize> = (0..units.len()).filter(|&r| view.t[units[r]] == 0).collect();
            if treated.is_empty() || control.is_empty() {
                None
            } else {
                let a = tape.gather_rows(phi, Rc::new(treated));
                let b = tape.gather_rows(phi, Rc::new(control));
                Some(cloud_distance(tape, a, b, cfg.ipm_kind, rng))
            }
        } else {
            None
        };

        let total = match ipm {
            Some(dep) => {
                let scaled = tape.scale(dep, cfg.balancing);
                tape.add(outcome, scaled)
            }
            None => outcome,
        };
        let breakdown = LossBreakdown {
            neg_elbo: 0.0,
            score_matching: 0.0,
            outcome: tape.scalar_value(outcome),
            ipm: ipm.map_or(0.0, |v| tape.scalar_value(v)),
            total: tape.scalar_value(total),
        };
        Ok((total, breakdown))
    }
}

/// Covariate rows of `units`, in the given order.
fn gather_x(x: &Array2<f64>, units: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((units.len(), x.ncols()), |(r, c)| x[(units[r], c)])
}

/// A trained baseline frozen at its best validation epoch.
pub struct TrainedBaseline {
    pub model: BaselineModel,
    pub store: ParamStore,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub config_hash: String,
}

/// Trains a baseline on the view's train split, mirroring the full
/// estimator's loop: the same RNG streams, validation carve-out, adaptive
/// steps, patience, and best-snapshot restore. Deterministic given the
/// config.
pub fn train_baseline(view: &ObservedView<'_>, cfg: BaselineConfig) -> Result<TrainedBaseline> {
    cfg.validate()?;
    view.validate()?;
    if view.d_x() != cfg.d_x {
        return Err(Error::Config(format!(
            "dataset has {} proxy columns but the baseline expects {}",
            view.d_x(),
            cfg.d_x
        )));
    }
    let train_units = view.train_units();
    if train_units.is_empty() {
        return Err(Error::State("dataset has no train units".into()));
    }

    let mut store = ParamStore::new();
    let model = BaselineModel::new(
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
        let (total, loss) = model.total_loss(&mut tape, &store, view, &units, &mut epoch_rng)?;
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
            Some(outcome_mse(&model, &store, view, &val))
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
    Ok(TrainedBaseline {
        model,
        store,
        logs,
        best_epoch,
        config_hash,
    })
}

/// Outcome MSE on `units` with the observed `(t, z)`.
fn outcome_mse(
    model: &BaselineModel,
    store: &ParamStore,
    view: &ObservedView<'_>,
    units: &[usize],
) -> f64 {
    let mut tape = Tape::new();
    let x_own = tape.constant(gather_x(view.x, units));
    let phi = model.representation(&mut tape, store, x_own);
    let column = |v: Vec<f64>| Array2::from_shape_vec((v.len(), 1), v).unwrap();
    let t_col = tape.constant(column(
        units.iter().map(|&i| f64::from(view.t[i])).collect(),
    ));
    let z_col = tape.constant(column(units.iter().map(|&i| view.z[i]).collect()));
    let y_hat = model.heads.predict_masked(&mut tape, store, t_col, z_col, phi);
    let pred = tape.value(y_hat);
    units
        .iter()
        .enumerate()
        .map(|(r, &i)| (pred[(r, 0)] - view.y[i]).powi(2))
        .sum::<f64>()
        / units.len() as f64
}

impl TrainedBaseline {
    /// Per-unit outcome estimates μ̂ for each setting. The representation is
    /// deterministic, so this is a single forward pass per setting; values
    /// are grid-snapped like the full estimator's.
    fn mu_for_settings(
        &self,
        view: &ObservedView<'_>,
        settings: &[(u8, f64)],
    ) -> Result<Vec<Vec<f64>>> {
        for &(t, z) in settings {
            validate_setting(t, z)?;
        }
        if view.d_x() != self.model.cfg.d_x {
            return Err(Error::Input(format!(
                "dataset has {} proxy columns but the baseline expects {}",
                view.d_x(),
                self.model.cfg.d_x
            )));
        }
        let n = view.n();
        let mut tape = Tape::new();
        let x = tape.constant(view.x.clone());
        let phi = self.model.representation(&mut tape, &self.store, x);
        let mut out = Vec::with_capacity(settings.len());
        for &(t, z) in settings {
            let t_col = tape.constant(Array2::from_elem((n, 1), f64::from(t)));
            let z_col = tape.constant(Array2::from_elem((n, 1), z));
            let y_hat = self
                .model
                .heads
                .predict_masked(&mut tape, &self.store, t_col, z_col, phi);
            let preds = tape.value(y_hat).column(0).to_vec();
            out.push(preds.iter().map(|&v| snap_to_grid(v)).collect());
        }
        Ok(out)
    }

    /// μ̂(t, z) for one unit: the arm-`t` head at exposure `z` on the unit's
    /// representation.
    pub fn estimate_mu(&self, view: &ObservedView<'_>, unit: usize, t: u8, z: f64) -> Result<f64> {
        if unit >= view.n() {
            return Err(Error::Input(format!(
                "unit {unit} out of range for {} units",
                view.n()
            )));
        }
        let mus = self.mu_for_settings(view, &[(t, z)])?;
        Ok(mus[0][unit])
    }

    /// ψ̂(t, z): the mean of μ̂ over the evaluation unit set (summed in
    /// sorted unit order, so the caller's ordering is irrelevant).
    pub fn estimate_psi(
        &self,
        view: &ObservedView<'_>,
        t: u8,
        z: f64,
        units: &[usize],
    ) -> Result<f64> {
        let mus = self.mu_for_settings(view, &[(t, z)])?;
        psi_mean(&mus[0], units)
    }

    /// Contrast between the query's two settings, under the exact contract
    /// of the full estimator's `estimate_effect`.
    pub fn estimate_effect(
        &self,
        view: &ObservedView<'_>,
        query: &EffectQuery,
        units: &[usize],
    ) -> Result<EffectEstimate> {
        query.validate()?;
        check_units(units, view.n())?;
        let mus = self.mu_for_settings(view, &[query.setting_a, query.setting_b])?;
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

const CHECKPOINT_FORMAT: &str = "netconfound.baseline-checkpoint.v1";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: BaselineConfig,
    config_hash: String,
    best_epoch: usize,
    params: BTreeMap<String, ParamRecord>,
}

impl TrainedBaseline {
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

    /// Loads a checkpoint. The stored hash must match the stored config;
    /// when `expected` is given, its hash must also match unless `force`.
    /// Epoch logs are not persisted.
    pub fn load(
        path: &Path,
        expected: Option<&BaselineConfig>,
        force: bool,
    ) -> Result<TrainedBaseline> {
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
        let model = BaselineModel::new(
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
        Ok(TrainedBaseline {
            model,
            store,
            logs: Vec::new(),
            best_epoch: file.best_epoch,
            config_hash: file.config_hash,
        })
    }
}
