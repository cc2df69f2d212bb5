//! Variational recovery of the latent confounder blocks.
//!
//! A graph-convolution step aggregates each unit's neighborhood covariates
//! into a representation `h2`; a diagonal-Gaussian posterior over the stacked
//! latents `u = (u_i | u_c | u_n)` is read off `h2`; the conditional prior is
//! an unnormalized exponential-family density whose log equals
//! `<MLP_stat(u), MLP_lam(h2)> + <[u, u^2], MLP_quad(h2)>`; and a fixed-variance
//! Gaussian (or Bernoulli) decoder reconstructs the proxies. The evidence
//! bound leaves out the prior's u-free normalizer, whose shape is fitted by
//! the score-matching objective instead.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{GcnOperator, Network};
use crate::tensor::{Mlp, ParamId, ParamStore, Tape, Var};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModelConfig {
    pub d_x: usize,
    pub d_i: usize,
    pub d_c: usize,
    pub d_n: usize,
    /// GCN output width (h).
    pub gcn_width: usize,
    /// Width of the aggregated representation h2.
    pub rep_width: usize,
    /// Hidden width of the aggregation MLP.
    pub agg_hidden: usize,
    /// Sufficient-statistic dimension m of the conditional prior.
    pub prior_stat_dim: usize,
    /// Hidden width of the three prior MLPs.
    pub prior_hidden: usize,
    /// Decoder hidden width; `None` gives a pure affine decoder.
    pub dec_hidden: Option<usize>,
    /// Fixed decoder variance (continuous proxies).
    pub decoder_variance: f64,
    /// Bernoulli decoder for binary proxies.
    pub binary_proxies: bool,
    /// Clamp interval for the posterior log-variance.
    pub logvar_clamp: (f64, f64),
}

impl LatentModelConfig {
    pub fn new(d_x: usize) -> Self {
        LatentModelConfig {
            d_x,
            d_i: 1,
            d_c: 1,
            d_n: 1,
            gcn_width: 64,
            rep_width: 64,
            agg_hidden: 64,
            prior_stat_dim: 32,
            prior_hidden: 32,
            dec_hidden: Some(64),
            decoder_variance: 1.0,
            binary_proxies: false,
            logvar_clamp: (-10.0, 10.0),
        }
    }

    /// Total latent width `k = d_i + d_c + d_n`.
    pub fn k(&self) -> usize {
        self.d_i + self.d_c + self.d_n
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() == 0 {
            return Err(Error::Config("latent width k must be positive".into()));
        }
        if self.d_x == 0 {
            return Err(Error::Config("d_x must be positive".into()));
        }
        if self.decoder_variance <= 0.0 {
            return Err(Error::Config(format!(
                "decoder variance must be positive, got {}",
                self.decoder_variance
            )));
        }
        if self.prior_stat_dim == 0 {
            return Err(Error::Config("prior statistic dimension must be >= 1".into()));
        }
        if self.logvar_clamp.0 >= self.logvar_clamp.1 {
            return Err(Error::Config("empty log-variance clamp interval".into()));
        }
        Ok(())
    }
}

/// Parameter handles for the full representation model.
pub struct LatentModel {
    pub cfg: LatentModelConfig,
    /// GCN weights, `d_x x gcn_width`.
    pub w1: ParamId,
    /// Aggregation MLP `(gcn_width + d_x) -> rep_width`.
    pub mlp_agg: Mlp,
    /// Posterior heads `rep_width -> k`.
    pub enc_mu: Mlp,
    pub enc_logvar: Mlp,
    /// Prior sufficient statistic `k -> m`.
    pub prior_stat: Mlp,
    /// Prior natural parameters `rep_width -> m`.
    pub prior_lam: Mlp,
    /// Prior linear/quadratic coefficients `rep_width -> 2k`.
    pub prior_quad: Mlp,
    /// Decoder `k -> d_x`.
    pub decoder: Mlp,
}

impl LatentModel {
    /// Registers all parameters under the `latent.` prefix.
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: LatentModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.k();
        let w1 = store.register(
            "latent.gcn.w1",
            crate::tensor::he_init(rng, cfg.d_x, cfg.gcn_width),
        );
        let mlp_agg = Mlp::new(
            store,
            "latent.agg",
            &[cfg.gcn_width + cfg.d_x, cfg.agg_hidden, cfg.rep_width],
            rng,
        );
        let enc_mu = Mlp::new(store, "latent.enc_mu", &[cfg.rep_width, k], rng);
        let enc_logvar = Mlp::new(store, "latent.enc_logvar", &[cfg.rep_width, k], rng);
        let prior_stat = Mlp::new(
            store,
            "latent.prior_stat",
            &[k, cfg.prior_hidden, cfg.prior_stat_dim],
            rng,
        );
        let prior_lam = Mlp::new(
            store,
            "latent.prior_lam",
            &[cfg.rep_width, cfg.prior_hidden, cfg.prior_stat_dim],
            rng,
        );
        let prior_quad = Mlp::new(
            store,
            "latent.prior_quad",
            &[cfg.rep_width, cfg.prior_hidden, 2 * k],
            rng,
        );
        let dec_dims: Vec<usize> = match cfg.dec_hidden {
            Some(h) => vec![k, h, cfg.d_x],
            None => vec![k, cfg.d_x],
        };
        let decoder = Mlp::new(store, "latent.dec", &dec_dims, rng);
        Ok(LatentModel {
            cfg,
            w1,
            mlp_agg,
            enc_mu,
            enc_logvar,
            prior_stat,
            prior_lam,
            prior_quad,
            decoder,
        })
    }

    /// Aggregated representation on the tape:
    /// `h1 = relu(S x W1)` with `S` the normalized adjacency, then
    /// `h2 = MLP_agg([h1, x])`. Isolated units contribute `h1 = 0`.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gcn: &Rc<GcnOperator>,
        x: Var,
    ) -> Var {
        let w1 = tape.param(store, self.w1);
        let pooled = tape.neighbor_agg(x, gcn.clone());
        let h1_pre = tape.matmul(pooled, w1);
        let h1 = tape.relu(h1_pre);
        let joined = tape.concat_cols(h1, x);
        self.mlp_agg.forward(tape, store, joined)
    }

    /// Standalone aggregation with input validation; returns plain values.
    pub fn aggregate_covariates(
        &self,
        store: &ParamStore,
        network: &Network,
        x: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if x.nrows() != network.n() {
            return Err(Error::Input(format!(
                "x has {} rows but the network has {} units",
                x.nrows(),
                network.n()
            )));
        }
        if x.ncols() != self.cfg.d_x {
            return Err(Error::Input(format!(
                "x has {} columns but the model expects {}",
                x.ncols(),
                self.cfg.d_x
            )));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gcn = Rc::new(network.gcn_operator());
        let h2 = self.aggregate(&mut tape, store, &gcn, xv);
        Ok(tape.value(h2).clone())
    }

    /// Posterior mean and clamped log-variance from the representation.
    pub fn posterior_params(&self, tape: &mut Tape, store: &ParamStore, h2: Var) -> (Var, Var) {
        let mu = self.enc_mu.forward(tape, store, h2);
        let raw = self.enc_logvar.forward(tape, store, h2);
        let (lo, hi) = self.cfg.logvar_clamp;
        let logvar = tape.clamp(raw, lo, hi);
        (mu, logvar)
    }

    /// Reparameterized draw `u = mu + exp(logvar / 2) * eps` for fixed noise.
    pub fn sample_posterior(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mu: Var,
        logvar: Var,
        eps: &Array2<f64>,
    ) -> Var {
        let _ = store;
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.constant(eps.clone());
        let scaled = tape.mul(std, noise);
        tape.add(mu, scaled)
    }

    /// Unnormalized conditional prior log-density per unit (n x 1):
    /// `<T(u), lam(h2)> + <[u, u^2], quad(h2)>`, valid up to a u-free
    /// normalizer.
    pub fn prior_logp(&self, tape: &mut Tape, store: &ParamStore, u: Var, h2: Var) -> Var {
        self.prior_logp_impl(tape, store, u, h2, false)
    }

    /// [`Self::prior_logp`] with the prior networks' weights entering the
    /// tape as constants. The unnormalized density has no normalizer to
    /// penalize parameter growth, so objectives that maximize it must not
    /// reach the prior's parameters; those are fitted by the score-matching
    /// term instead.
    pub fn prior_logp_frozen(&self, tape: &mut Tape, store: &ParamStore, u: Var, h2: Var) -> Var {
        self.prior_logp_impl(tape, store, u, h2, true)
    }

    fn prior_logp_impl(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        h2: Var,
        frozen: bool,
    ) -> Var {
        let fwd = |tape: &mut Tape, mlp: &Mlp, input: Var| {
            if frozen {
                mlp.forward_frozen(tape, store, input)
            } else {
                mlp.forward(tape, store, input)
            }
        };
        let t_u = fwd(tape, &self.prior_stat, u);
        let lam = fwd(tape, &self.prior_lam, h2);
        let prod = tape.mul(t_u, lam);
        let term1 = tape.sum_cols(prod);

        let quad = fwd(tape, &self.prior_quad, h2);
        let u2 = tape.square(u);
        let feats = tape.concat_cols(u, u2);
        let prod2 = tape.mul(feats, quad);
        let term2 = tape.sum_cols(prod2);
        tape.add(term1, term2)
    }

    /// Gradient of [`Self::prior_logp`] with respect to `u`, built on the
    /// tape (n x k). Exact because the normalizer is u-free; the rectifier
    /// masks inside the statistic network are treated as locally constant.
    pub fn prior_score(&self, tape: &mut Tape, store: &ParamStore, u: Var, h2: Var) -> Var {
        let (_, preacts) = self.prior_stat.forward_with_preacts(tape, store, u);
        let lam = self.prior_lam.forward(tape, store, h2);
        let stat_grad = self.prior_stat.input_vjp(tape, store, &preacts, lam);

        let k = self.cfg.k();
        let quad = self.prior_quad.forward(tape, store, h2);
        let lin_coef = tape.slice_cols(quad, 0, k);
        let quad_coef = tape.slice_cols(quad, k, 2 * k);
        let two_u = tape.scale(u, 2.0);
        let quad_grad = tape.mul(two_u, quad_coef);

        let partial = tape.add(stat_grad, lin_coef);
        tape.add(partial, quad_grad)
    }

    /// Decoder log-likelihood per unit (n x 1). Continuous mode: Gaussian
    /// with fixed variance; binary mode: Bernoulli through a sigmoid head.
    pub fn decoder_loglik(&self, tape: &mut Tape, store: &ParamStore, u: Var, x: Var) -> Var {
        let head = self.decoder.forward(tape, store, u);
        if self.cfg.binary_proxies {
            // Probabilities clamped away from {0, 1} to keep logs finite.
            let p = tape.sigmoid(head);
            let p = tape.clamp(p, 1e-7, 1.0 - 1e-7);
            let ln_p = tape.ln(p);
            let one_minus_p = tape.neg(p);
            let one_minus_p = tape.add_scalar(one_minus_p, 1.0);
            let ln_q = tape.ln(one_minus_p);
            let one_minus_x = tape.neg(x);
            let one_minus_x = tape.add_scalar(one_minus_x, 1.0);
            let on = tape.mul(x, ln_p);
            let off = tape.mul(one_minus_x, ln_q);
            let sum = tape.add(on, off);
            tape.sum_cols(sum)
        } else {
            let v = self.cfg.decoder_variance;
            let diff = tape.sub(x, head);
            let sq = tape.square(diff);
            let sse = tape.sum_cols(sq);
            let quad = tape.scale(sse, -0.5 / v);
            let const_term = -0.5 * self.cfg.d_x as f64 * (LN_2PI + v.ln());
            tape.add_scalar(quad, const_term)
        }
    }

    /// Standalone decoder log-likelihood for one unit, with binary-mode
    /// input validation.
    pub fn decoder_log_likelihood(
        &self,
        store: &ParamStore,
        x_row: &[f64],
        u_row: &[f64],
    ) -> Result<f64> {
        if x_row.len() != self.cfg.d_x || u_row.len() != self.cfg.k() {
            return Err(Error::Input(format!(
                "expected x of width {} and u of width {}, got {} and {}",
                self.cfg.d_x,
                self.cfg.k(),
                x_row.len(),
                u_row.len()
            )));
        }
        if self.cfg.binary_proxies && x_row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(
                "binary decoder mode requires x entries in {0, 1}".into(),
            ));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((1, x_row.len()), x_row.to_vec()).unwrap());
        let u = tape.constant(Array2::from_shape_vec((1, u_row.len()), u_row.to_vec()).unwrap());
        let ll = self.decoder_loglik(&mut tape, store, u, x);
        Ok(tape.value(ll)[(0, 0)])
    }

    /// Exact diagonal-Gaussian log-density of `u` under `(mu, logvar)`,
    /// per unit (n x 1).
    pub fn q_loglik(tape: &mut Tape, u: Var, mu: Var, logvar: Var, k: usize) -> Var {
        let var = tape.exp(logvar);
        let diff = tape.sub(u, mu);
        let sq = tape.square(diff);
        let ratio = tape.div(sq, var);
        let sum_ratio = tape.sum_cols(ratio);
        let sum_logvar = tape.sum_cols(logvar);
        let quad = tape.add(sum_ratio, sum_logvar);
        let quad = tape.scale(quad, -0.5);
        tape.add_scalar(quad, -0.5 * k as f64 * LN_2PI)
    }

    /// Analytic posterior score `-(u - mu) / var`, per unit (n x k).
    pub fn q_score(tape: &mut Tape, u: Var, mu: Var, logvar: Var) -> Var {
        let var = tape.exp(logvar);
        let diff = tape.sub(u, mu);
        let ratio = tape.div(diff, var);
        tape.neg(ratio)
    }

    /// Per-unit ELBO integrand (n x 1) for one already-sampled latent draw:
    /// `log p(x|u) + log p~(u|h2) - log q(u|x, h2)`.
    pub fn elbo_terms(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        x: Var,
        h2: Var,
        mu: Var,
        logvar: Var,
    ) -> Var {
        let dec = self.decoder_loglik(tape, store, u, x);
        let prior = self.prior_logp(tape, store, u, h2);
        let q = Self::q_loglik(tape, u, mu, logvar, self.cfg.k());
        let gain = tape.add(dec, prior);
        tape.sub(gain, q)
    }

    /// Evidence lower bound (scalar) for explicitly supplied noise draws:
    /// mean over draws and units of
    /// `log p(x|u) + log p~(u|h2) - log q(u|x, h2)`.
    pub fn elbo_given_noise(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gcn: &Rc<GcnOperator>,
        x: Var,
        eps_draws: &[Array2<f64>],
    ) -> Var {
        assert!(!eps_draws.is_empty(), "need at least one noise draw");
        let h2 = self.aggregate(tape, store, gcn, x);
        let (mu, logvar) = self.posterior_params(tape, store, h2);
        let mut acc: Option<Var> = None;
        for eps in eps_draws {
            let u = self.sample_posterior(tape, store, mu, logvar, eps);
            let gain = self.elbo_terms(tape, store, u, x, h2, mu, logvar);
            let mean_units = tape.mean_all(gain);
            acc = Some(match acc {
                Some(a) => tape.add(a, mean_units),
                None => mean_units,
            });
        }
        let total = acc.expect("non-empty draws");
        tape.scale(total, 1.0 / eps_draws.len() as f64)
    }

    /// Monte-Carlo ELBO with noise drawn from `rng`.
    pub fn elbo(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gcn: &Rc<GcnOperator>,
        x: Var,
        mc_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let n = tape.value(x).nrows();
        let draws = draw_noise(n, self.cfg.k(), mc_samples, rng);
        self.elbo_given_noise(tape, store, gcn, x, &draws)
    }

    /// Per-unit squared score mismatch (n x 1) for one already-sampled
    /// latent draw: `|| score_q(u) - score_prior(u) ||^2`.
    pub fn score_matching_terms(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        h2: Var,
        mu: Var,
        logvar: Var,
    ) -> Var {
        let sq_score = Self::q_score(tape, u, mu, logvar);
        let sp_score = self.prior_score(tape, store, u, h2);
        let diff = tape.sub(sq_score, sp_score);
        let sq = tape.square(diff);
        tape.sum_cols(sq)
    }

    /// Score-matching loss (scalar) for explicit noise draws: mean over
    /// draws and units of the squared distance between the posterior score
    /// and the prior score at sampled latents.
    pub fn score_matching_given_noise(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gcn: &Rc<GcnOperator>,
        x: Var,
        eps_draws: &[Array2<f64>],
    ) -> Var {
        assert!(!eps_draws.is_empty(), "need at least one noise draw");
        let h2 = self.aggregate(tape, store, gcn, x);
        let (mu, logvar) = self.posterior_params(tape, store, h2);
        let mut acc: Option<Var> = None;
        for eps in eps_draws {
            let u = self.sample_posterior(tape, store, mu, logvar, eps);
            let per_unit = self.score_matching_terms(tape, store, u, h2, mu, logvar);
            let mean_units = tape.mean_all(per_unit);
            acc = Some(match acc {
                Some(a) => tape.add(a, mean_units),
                None => mean_units,
            });
        }
        let total = acc.expect("non-empty draws");
        tape.scale(total, 1.0 / eps_draws.len() as f64)
    }

    /// Monte-Carlo score-matching loss with noise drawn from `rng`.
    pub fn score_matching_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gcn: &Rc<GcnOperator>,
        x: Var,
        mc_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let n = tape.value(x).nrows();
        let draws = draw_noise(n, self.cfg.k(), mc_samples, rng);
        self.score_matching_given_noise(tape, store, gcn, x, &draws)
    }

    /// Unnormalized prior log-density for a single `(u, h2)` pair.
    pub fn prior_log_density_unnorm(
        &self,
        store: &ParamStore,
        u_row: &[f64],
        h2_row: &[f64],
    ) -> Result<f64> {
        let (u, h2) = self.single_rows(u_row, h2_row)?;
        let mut tape = Tape::new();
        let u = tape.constant(u);
        let h2 = tape.constant(h2);
        let lp = self.prior_logp(&mut tape, store, u, h2);
        Ok(tape.value(lp)[(0, 0)])
    }

    /// Prior score for a single `(u, h2)` pair.
    pub fn prior_score_single(
        &self,
        store: &ParamStore,
        u_row: &[f64],
        h2_row: &[f64],
    ) -> Result<Vec<f64>> {
        let (u, h2) = self.single_rows(u_row, h2_row)?;
        let mut tape = Tape::new();
        let u = tape.constant(u);
        let h2 = tape.constant(h2);
        let score = self.prior_score(&mut tape, store, u, h2);
        Ok(tape.value(score).row(0).to_vec())
    }

    fn single_rows(&self, u_row: &[f64], h2_row: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        if u_row.len() != self.cfg.k() || h2_row.len() != self.cfg.rep_width {
            return Err(Error::Input(format!(
                "expected u of width {} and h2 of width {}, got {} and {}",
                self.cfg.k(),
                self.cfg.rep_width,
                u_row.len(),
                h2_row.len()
            )));
        }
        Ok((
            Array2::from_shape_vec((1, u_row.len()), u_row.to_vec()).unwrap(),
            Array2::from_shape_vec((1, h2_row.len()), h2_row.to_vec()).unwrap(),
        ))
    }
}

/// Standard-normal noise matrices for reparameterized draws.
pub fn draw_noise(
    n: usize,
    k: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Array2<f64>> {
    (0..count)
        .map(|_| {
            Array2::from_shape_fn((n, k), |_| {
                let e: f64 = StandardNormal.sample(rng);
                e
            })
        })
        .collect()
}

/// Reconfigures an existing model's prior to the exact standard normal:
/// statistic and lambda networks become constants whose inner product is
/// the Gaussian normalizer `-(k/2) ln(2 pi)`, and the quadratic head outputs
/// `(0, -1/2)` per latent coordinate, so the "unnormalized" log-density is
/// the normalized N(0, I_k) log-density and its score is exactly `-u`.
pub fn set_prior_to_standard_normal(model: &LatentModel, store: &mut ParamStore) {
    let zero_mlp = |store: &mut ParamStore, prefix: &str| {
        for layer in 0..2 {
            let w = store.id_by_name(&format!("{prefix}.w{layer}")).unwrap();
            store.set_value(w, Array2::zeros(store.value(w).dim()));
            let b = store.id_by_name(&format!("{prefix}.b{layer}")).unwrap();
            store.set_value(b, Array2::zeros(store.value(b).dim()));
        }
    };
    // prior_stat: constant output e1.
    zero_mlp(store, "latent.prior_stat");
    let b = store.id_by_name("latent.prior_stat.b1").unwrap();
    let mut bias = Array2::zeros(store.value(b).dim());
    bias[(0, 0)] = 1.0;
    store.set_value(b, bias);
    // prior_lam: constant output (-(k/2) ln(2 pi)) e1.
    zero_mlp(store, "latent.prior_lam");
    let b = store.id_by_name("latent.prior_lam.b1").unwrap();
    let mut bias = Array2::zeros(store.value(b).dim());
    bias[(0, 0)] = -0.5 * model.cfg.k() as f64 * LN_2PI;
    store.set_value(b, bias);
    // prior_quad: constant output (0_k | -1/2 1_k).
    zero_mlp(store, "latent.prior_quad");
    let b = store.id_by_name("latent.prior_quad.b1").unwrap();
    let k = model.cfg.k();
    let mut bias = Array2::zeros(store.value(b).dim());
    for c in 0..k {
        bias[(0, k + c)] = -0.5;
    }
    store.set_value(b, bias);
}
